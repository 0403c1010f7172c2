#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "disc/errors.hpp"
#include "disc/tensor.hpp"

namespace disc {

// Per-channel batch normalization state: learned affine (gamma, beta) and
// exponentially averaged running statistics (mean, var).
template <typename T>
struct BatchNormStateT {
    int channels = 0;
    std::vector<T> gamma;
    std::vector<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T eps = T(1e-5);
    T momentum = T(0.1);

    static BatchNormStateT identity(int channels) {
        BatchNormStateT s;
        s.channels = channels;
        s.gamma.assign(channels, T(1));
        s.beta.assign(channels, T(0));
        s.running_mean.assign(channels, T(0));
        s.running_var.assign(channels, T(1));
        return s;
    }

    void validate() const {
        auto n = static_cast<std::size_t>(channels);
        if (channels <= 0) throw ConfigError("batchnorm: channels must be positive");
        if (gamma.size() != n || beta.size() != n || running_mean.size() != n ||
            running_var.size() != n)
            throw ShapeError("batchnorm: per-channel arrays must have length = channels");
        if (!(eps > T(0))) throw ConfigError("batchnorm: eps must be > 0");
        if (!(momentum > T(0) && momentum <= T(1)))
            throw ConfigError("batchnorm: momentum must be in (0, 1]");
        for (T v : running_var)
            if (v < T(0)) throw DataError("batchnorm: running variance must be >= 0");
    }
};

using BatchNormState = BatchNormStateT<float>;

template <typename T>
struct BnBatchStats {
    std::vector<T> mean;
    std::vector<T> var;  // biased (divide by n)
};

// y = (x - running_mean) / sqrt(running_var + eps) * gamma + beta. Pure.
template <typename T>
TensorT<T> bn_forward_eval(const TensorT<T>& x, const BatchNormStateT<T>& state) {
    if (x.ndim() != 4) throw ShapeError("bn_forward_eval: expected NCHW tensor, got " + x.shape_str());
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != state.channels)
        throw ShapeError("bn_forward_eval: channel mismatch, input has " + std::to_string(C) +
                         ", state has " + std::to_string(state.channels));
    TensorT<T> y(x.shape);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            // double arithmetic, rounded once on store: keeps the output
            // within half an ulp of the exact per-channel formula
            const double scale = static_cast<double>(state.gamma[c]) /
                                 std::sqrt(static_cast<double>(state.running_var[c]) +
                                           static_cast<double>(state.eps));
            const double mu = static_cast<double>(state.running_mean[c]);
            const double beta = static_cast<double>(state.beta[c]);
            const T* xp = x.data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            T* yp = y.data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i)
                yp[i] = static_cast<T>((static_cast<double>(xp[i]) - mu) * scale + beta);
        }
    }
    return y;
}

// Running-statistics update: new = (1 - rho) * old + rho * batch.
template <typename T>
void bn_update_stats(BatchNormStateT<T>& state, const std::vector<T>& batch_mean,
                     const std::vector<T>& batch_var, T rho) {
    if (!(rho > T(0) && rho <= T(1)))
        throw ConfigError("bn_update_stats: momentum must be in (0, 1]");
    if (batch_mean.size() != static_cast<std::size_t>(state.channels) ||
        batch_var.size() != static_cast<std::size_t>(state.channels))
        throw ShapeError("bn_update_stats: statistics length must equal channels");
    const double r = static_cast<double>(rho);
    for (int c = 0; c < state.channels; ++c) {
        state.running_mean[c] = static_cast<T>((1.0 - r) * static_cast<double>(state.running_mean[c]) +
                                               r * static_cast<double>(batch_mean[c]));
        state.running_var[c] = static_cast<T>((1.0 - r) * static_cast<double>(state.running_var[c]) +
                                              r * static_cast<double>(batch_var[c]));
    }
}

// Per-channel batch statistics over N, H, W. Accumulates in double so the
// result is insensitive to summation order at float precision.
template <typename T>
BnBatchStats<T> bn_batch_stats(const TensorT<T>& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const double m = static_cast<double>(N) * H * W;
    BnBatchStats<T> st;
    st.mean.resize(C);
    st.var.resize(C);
    for (int c = 0; c < C; ++c) {
        double sum = 0.0, sumsq = 0.0;
        for (int n = 0; n < N; ++n) {
            const T* xp = x.data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const double v = static_cast<double>(xp[i]);
                sum += v;
                sumsq += v * v;
            }
        }
        const double mean = sum / m;
        double var = sumsq / m - mean * mean;
        if (var < 0.0) var = 0.0;  // rounding guard
        st.mean[c] = static_cast<T>(mean);
        st.var[c] = static_cast<T>(var);
    }
    return st;
}

// Training-mode forward: normalize by the batch statistics, then update the
// running statistics (unbiased variance, n/(n-1)) with momentum rho.
// rho < 0 means "use state.momentum".
template <typename T>
TensorT<T> bn_forward_train(const TensorT<T>& x, BatchNormStateT<T>& state,
                            BnBatchStats<T>* out_stats = nullptr, T rho = T(-1)) {
    if (x.ndim() != 4) throw ShapeError("bn_forward_train: expected NCHW tensor, got " + x.shape_str());
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != state.channels)
        throw ShapeError("bn_forward_train: channel mismatch, input has " + std::to_string(C) +
                         ", state has " + std::to_string(state.channels));
    const std::int64_t m = static_cast<std::int64_t>(N) * H * W;
    if (m < 2)
        throw DegenerateBatchError("bn_forward_train: needs at least 2 elements per channel, got " +
                                   std::to_string(m));

    BnBatchStats<T> st = bn_batch_stats(x);

    TensorT<T> y(x.shape);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double scale = static_cast<double>(state.gamma[c]) /
                                 std::sqrt(static_cast<double>(st.var[c]) +
                                           static_cast<double>(state.eps));
            const double mu = static_cast<double>(st.mean[c]);
            const double beta = static_cast<double>(state.beta[c]);
            const T* xp = x.data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            T* yp = y.data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i)
                yp[i] = static_cast<T>((static_cast<double>(xp[i]) - mu) * scale + beta);
        }
    }

    const T correction = static_cast<T>(static_cast<double>(m) / static_cast<double>(m - 1));
    std::vector<T> unbiased(st.var.size());
    for (std::size_t c = 0; c < unbiased.size(); ++c) unbiased[c] = st.var[c] * correction;
    bn_update_stats(state, st.mean, unbiased, rho < T(0) ? state.momentum : rho);

    if (out_stats) *out_stats = st;
    return y;
}

}  // namespace disc
