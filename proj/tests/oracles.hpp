#pragma once

// Test-only reference implementations, coded independently of the library:
// straight nested loops over the defining formulas, all in double. These
// stay deliberately naive so they can arbitrate the optimized paths.

#include <cmath>
#include <vector>

#include "disc/model.hpp"
#include "disc/tensor.hpp"

namespace oracle {

using disc::ModelT;
using disc::TensorT;

// y[c] = (x[c] - mean[c]) / sqrt(var[c] + eps) * gamma[c] + beta[c]
inline TensorT<double> bn_eval(const TensorT<double>& x, const std::vector<double>& gamma,
                               const std::vector<double>& beta, const std::vector<double>& mean,
                               const std::vector<double>& var, double eps) {
    TensorT<double> y(x.shape);
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    y.at(n, c, h, w) =
                        (x.at(n, c, h, w) - mean[c]) / std::sqrt(var[c] + eps) * gamma[c] + beta[c];
    return y;
}

struct BnStats {
    std::vector<double> mean, var;  // biased variance
};

// per-channel mean and biased variance by explicit summation
inline BnStats bn_stats(const TensorT<double>& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    BnStats s;
    s.mean.assign(C, 0.0);
    s.var.assign(C, 0.0);
    const double m = static_cast<double>(N) * H * W;
    for (int c = 0; c < C; ++c) {
        double sum = 0.0;
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) sum += x.at(n, c, h, w);
        s.mean[c] = sum / m;
        double acc = 0.0;
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const double d = x.at(n, c, h, w) - s.mean[c];
                    acc += d * d;
                }
        s.var[c] = acc / m;
    }
    return s;
}

// direct convolution from the definition
inline TensorT<double> conv2d(const TensorT<double>& x, const std::vector<double>& weight,
                              const std::vector<double>& bias, int out_channels, int kernel,
                              int stride, int pad) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = (H + 2 * pad - kernel) / stride + 1;
    const int Wo = (W + 2 * pad - kernel) / stride + 1;
    TensorT<double> y({N, out_channels, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < out_channels; ++o)
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo) {
                    double acc = bias[o];
                    for (int c = 0; c < C; ++c)
                        for (int ki = 0; ki < kernel; ++ki)
                            for (int kj = 0; kj < kernel; ++kj) {
                                const int ih = ho * stride - pad + ki;
                                const int iw = wo * stride - pad + kj;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += weight[((static_cast<std::size_t>(o) * C + c) * kernel + ki) *
                                                  kernel +
                                              kj] *
                                       x.at(n, c, ih, iw);
                            }
                    y.at(n, o, ho, wo) = acc;
                }
    return y;
}

inline TensorT<double> relu(const TensorT<double>& x) {
    TensorT<double> y = x;
    for (double& v : y.data) v = v > 0.0 ? v : 0.0;
    return y;
}

inline TensorT<double> maxpool2x2(const TensorT<double>& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<double> y({N, C, H / 2, W / 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H / 2; ++h)
                for (int w = 0; w < W / 2; ++w) {
                    double m = x.at(n, c, 2 * h, 2 * w);
                    m = std::max(m, x.at(n, c, 2 * h, 2 * w + 1));
                    m = std::max(m, x.at(n, c, 2 * h + 1, 2 * w));
                    m = std::max(m, x.at(n, c, 2 * h + 1, 2 * w + 1));
                    y.at(n, c, h, w) = m;
                }
    return y;
}

// full eval-mode forward of a float model, recomputed layer by layer in
// double with the naive kernels above
template <typename T>
inline TensorT<double> model_forward_eval(const ModelT<T>& m, const TensorT<T>& batch) {
    TensorT<double> cur = batch.template cast<double>();
    for (const auto& block : m.blocks) {
        std::vector<double> w(block.conv.weight.begin(), block.conv.weight.end());
        std::vector<double> b(block.conv.bias.begin(), block.conv.bias.end());
        cur = conv2d(cur, w, b, block.conv.out_channels, block.conv.kernel, block.conv.stride,
                     block.conv.pad);
        std::vector<double> gamma(block.bn.gamma.begin(), block.bn.gamma.end());
        std::vector<double> beta(block.bn.beta.begin(), block.bn.beta.end());
        std::vector<double> mean(block.bn.running_mean.begin(), block.bn.running_mean.end());
        std::vector<double> var(block.bn.running_var.begin(), block.bn.running_var.end());
        cur = bn_eval(cur, gamma, beta, mean, var, static_cast<double>(block.bn.eps));
        cur = relu(cur);
        if (block.pool) cur = maxpool2x2(cur);
    }
    const int N = cur.dim(0), C = cur.dim(1), H = cur.dim(2), W = cur.dim(3);
    TensorT<double> logits({N, m.head.out_features});
    for (int n = 0; n < N; ++n) {
        std::vector<double> feat(static_cast<std::size_t>(C), 0.0);
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) s += cur.at(n, c, h, w);
            feat[static_cast<std::size_t>(c)] = s / (static_cast<double>(H) * W);
        }
        for (int o = 0; o < m.head.out_features; ++o) {
            double acc = static_cast<double>(m.head.bias[o]);
            for (int c = 0; c < C; ++c)
                acc += static_cast<double>(
                           m.head.weight[static_cast<std::size_t>(o) * m.head.in_features + c]) *
                       feat[static_cast<std::size_t>(c)];
            logits.data[static_cast<std::size_t>(n) * m.head.out_features + o] = acc;
        }
    }
    return logits;
}

// closed form of the momentum recurrence: fp + (rho0 - fp) * omega^k
inline double momentum_closed_form(int k, double rho0, double omega, double zeta) {
    const double fp = zeta / (1.0 - omega);
    return fp + (rho0 - fp) * std::pow(omega, k);
}

// running-statistic recurrence under a constant batch-stat stream
struct RecurrenceTrace {
    std::vector<double> values;
    std::vector<double> changes;  // |delta| / (|new| + 1)
};

inline RecurrenceTrace simulate_constant_stream(double start, double target, double rho0,
                                                double omega, double zeta, int steps) {
    RecurrenceTrace tr;
    double v = start, rho = rho0;
    for (int k = 0; k < steps; ++k) {
        const double next = (1.0 - rho) * v + rho * target;
        tr.values.push_back(next);
        tr.changes.push_back(std::abs(next - v) / (std::abs(next) + 1.0));
        v = next;
        rho = rho * omega + zeta;
    }
    return tr;
}

}  // namespace oracle
