#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "disc/batchnorm.hpp"
#include "disc/errors.hpp"
#include "disc/gemm.hpp"
#include "disc/rng.hpp"
#include "disc/serialize.hpp"
#include "disc/tensor.hpp"

namespace disc {

struct ConvBlockSpec {
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int pad = 1;
    bool pool = true;  // 2x2 max-pool, stride 2
};

struct ModelConfig {
    int in_channels = 3;
    int in_height = 32;
    int in_width = 32;
    std::vector<ConvBlockSpec> blocks = {{16}, {32}, {64}};
    int head_width = 0;  // 0: derived from the last conv block
    int n_classes = 8;
    std::uint64_t seed = 0;

    void validate() const;
    // Channel count feeding the linear head (after global average pooling).
    int resolved_head_width() const {
        return head_width > 0 ? head_width : blocks.back().out_channels;
    }
};

template <typename T>
struct ConvLayerT {
    int in_channels = 0, out_channels = 0, kernel = 0, stride = 1, pad = 0;
    std::vector<T> weight;  // [out, in*k*k]
    std::vector<T> bias;    // [out]
};

template <typename T>
struct LinearLayerT {
    int in_features = 0, out_features = 0;
    std::vector<T> weight;  // [out, in]
    std::vector<T> bias;    // [out]
};

template <typename T>
struct ConvBlockT {
    ConvLayerT<T> conv;
    BatchNormStateT<T> bn;
    bool pool = true;
};

enum class Mode { train, eval };

// Fixed-menu CNN: (conv -> bn -> relu -> optional 2x2 max-pool)*, then
// global average pool and one linear head.
template <typename T>
struct ModelT {
    ModelConfig config;
    std::vector<ConvBlockT<T>> blocks;
    LinearLayerT<T> head;
    Mode mode = Mode::train;

    void set_mode(Mode m) { mode = m; }

    std::string block_key(std::size_t i) const { return "block" + std::to_string(i); }

    // Visits trainable parameters in topological key order.
    template <typename Fn>
    void for_each_param(Fn&& fn) {
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string b = block_key(i);
            fn(b + ".conv.weight", blocks[i].conv.weight);
            fn(b + ".conv.bias", blocks[i].conv.bias);
            fn(b + ".bn.gamma", blocks[i].bn.gamma);
            fn(b + ".bn.beta", blocks[i].bn.beta);
        }
        fn("head.weight", head.weight);
        fn("head.bias", head.bias);
    }
    template <typename Fn>
    void for_each_param(Fn&& fn) const {
        const_cast<ModelT*>(this)->for_each_param(
            [&](const std::string& k, std::vector<T>& v) { fn(k, static_cast<const std::vector<T>&>(v)); });
    }

    // Visits BN running-statistics buffers in topological key order.
    template <typename Fn>
    void for_each_buffer(Fn&& fn) {
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string b = block_key(i);
            fn(b + ".bn.running_mean", blocks[i].bn.running_mean);
            fn(b + ".bn.running_var", blocks[i].bn.running_var);
        }
    }
    template <typename Fn>
    void for_each_buffer(Fn&& fn) const {
        const_cast<ModelT*>(this)->for_each_buffer(
            [&](const std::string& k, std::vector<T>& v) { fn(k, static_cast<const std::vector<T>&>(v)); });
    }

    std::vector<T>* param_by_key(const std::string& key) {
        std::vector<T>* found = nullptr;
        for_each_param([&](const std::string& k, std::vector<T>& v) {
            if (k == key) found = &v;
        });
        return found;
    }

    // Hash of all non-buffer parameters (the plug guard).
    std::uint64_t param_fingerprint() const {
        Fnv1a h;
        for_each_param([&](const std::string& k, const std::vector<T>& v) {
            hash_array(h, k, v);
        });
        return h.value();
    }

    // Hash of parameters and BN buffers (state identity, eval-purity checks).
    std::uint64_t full_fingerprint() const {
        Fnv1a h;
        for_each_param([&](const std::string& k, const std::vector<T>& v) { hash_array(h, k, v); });
        for_each_buffer([&](const std::string& k, const std::vector<T>& v) { hash_array(h, k, v); });
        return h.value();
    }

    bool all_finite() const {
        bool ok = true;
        for_each_param([&](const std::string&, const std::vector<T>& v) {
            for (T x : v)
                if (!std::isfinite(static_cast<double>(x))) ok = false;
        });
        for_each_buffer([&](const std::string&, const std::vector<T>& v) {
            for (T x : v)
                if (!std::isfinite(static_cast<double>(x))) ok = false;
        });
        return ok;
    }

private:
    // Canonical serialization for hashing: key, element count, f32 payload.
    static void hash_array(Fnv1a& h, const std::string& key, const std::vector<T>& v) {
        h.update(key);
        std::uint64_t n = v.size();
        h.update(&n, 8);
        for (T x : v) {
            float f = static_cast<float>(x);
            h.update(&f, 4);
        }
    }
};

using Model = ModelT<float>;

template <typename T>
using GradMap = std::map<std::string, std::vector<T>>;

using TrainableFilter = std::function<bool(const std::string&)>;

inline bool trainable_all(const std::string&) { return true; }
inline TrainableFilter head_only_filter() {
    return [](const std::string& k) { return k.rfind("head.", 0) == 0; };
}

// ---------------------------------------------------------------------------
// construction

inline void ModelConfig::validate() const {
    if (in_channels <= 0 || in_height <= 0 || in_width <= 0)
        throw ConfigError("model config: input dimensions must be positive");
    if (blocks.empty()) throw ConfigError("model config: at least one conv block required");
    if (n_classes < 2) throw ConfigError("model config: class count must be >= 2");
    int h = in_height, w = in_width;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const ConvBlockSpec& b = blocks[i];
        if (b.out_channels <= 0 || b.kernel <= 0 || b.stride <= 0 || b.pad < 0)
            throw ConfigError("model config: invalid conv block " + std::to_string(i));
        if (b.kernel > h + 2 * b.pad || b.kernel > w + 2 * b.pad)
            throw ConfigError("model config: kernel larger than input at block " + std::to_string(i));
        h = (h + 2 * b.pad - b.kernel) / b.stride + 1;
        w = (w + 2 * b.pad - b.kernel) / b.stride + 1;
        if (b.pool) {
            h /= 2;
            w /= 2;
        }
        if (h < 1 || w < 1)
            throw ConfigError("model config: spatial size collapses to zero at block " + std::to_string(i));
    }
    if (head_width > 0 && head_width != blocks.back().out_channels)
        throw ConfigError("model config: head width must match the last conv block's channels");
}

// He fan-in init for conv/linear weights, zero biases, identity BN.
// Deterministic: same config + seed yields a bit-identical parameter store.
template <typename T>
ModelT<T> build_model(const ModelConfig& config) {
    config.validate();
    ModelT<T> m;
    m.config = config;
    Rng rng(mix_seed(config.seed, 0x6d6f64656cull));  // "model"
    int in_ch = config.in_channels;
    for (const ConvBlockSpec& spec : config.blocks) {
        ConvBlockT<T> block;
        block.conv.in_channels = in_ch;
        block.conv.out_channels = spec.out_channels;
        block.conv.kernel = spec.kernel;
        block.conv.stride = spec.stride;
        block.conv.pad = spec.pad;
        const int fan_in = in_ch * spec.kernel * spec.kernel;
        const double stddev = std::sqrt(2.0 / fan_in);
        block.conv.weight.resize(static_cast<std::size_t>(spec.out_channels) * fan_in);
        for (T& v : block.conv.weight) v = static_cast<T>(rng.normal() * stddev);
        block.conv.bias.assign(spec.out_channels, T(0));
        block.bn = BatchNormStateT<T>::identity(spec.out_channels);
        block.pool = spec.pool;
        m.blocks.push_back(std::move(block));
        in_ch = spec.out_channels;
    }
    m.head.in_features = config.resolved_head_width();
    m.head.out_features = config.n_classes;
    const double stddev = std::sqrt(2.0 / m.head.in_features);
    m.head.weight.resize(static_cast<std::size_t>(m.head.out_features) * m.head.in_features);
    for (T& v : m.head.weight) v = static_cast<T>(rng.normal() * stddev);
    m.head.bias.assign(m.head.out_features, T(0));
    m.mode = Mode::train;
    return m;
}

// ---------------------------------------------------------------------------
// forward / backward engine

namespace detail {

// col layout: [C*k*k, Ho*Wo]
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* col) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                T* row = col + ((static_cast<std::size_t>(c) * k + ki) * k + kj) *
                                   (static_cast<std::size_t>(Ho) * Wo);
                for (int ho = 0; ho < Ho; ++ho) {
                    const int ih = ho * stride - pad + ki;
                    T* out = row + static_cast<std::size_t>(ho) * Wo;
                    if (ih < 0 || ih >= H) {
                        for (int wo = 0; wo < Wo; ++wo) out[wo] = T(0);
                        continue;
                    }
                    const T* in = x + (static_cast<std::size_t>(c) * H + ih) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        const int iw = wo * stride - pad + kj;
                        out[wo] = (iw >= 0 && iw < W) ? in[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho, int Wo, T* x) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const T* row = col + ((static_cast<std::size_t>(c) * k + ki) * k + kj) *
                                         (static_cast<std::size_t>(Ho) * Wo);
                for (int ho = 0; ho < Ho; ++ho) {
                    const int ih = ho * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    const T* in = row + static_cast<std::size_t>(ho) * Wo;
                    T* out = x + (static_cast<std::size_t>(c) * H + ih) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        const int iw = wo * stride - pad + kj;
                        if (iw >= 0 && iw < W) out[iw] += in[wo];
                    }
                }
            }
        }
    }
}

template <typename T>
struct BlockCache {
    std::vector<std::vector<T>> cols;  // per-image im2col buffers
    BnBatchStats<T> stats;         // batch stats used for normalization (train)
    std::vector<T> inv_std;        // 1/sqrt(var+eps) actually used
    TensorT<T> xhat;               // normalized, pre-affine
    std::vector<std::uint8_t> relu_mask;
    std::vector<std::int32_t> pool_argmax;  // flat input index per pooled output element
    int h_in = 0, w_in = 0, h_conv = 0, w_conv = 0, h_out = 0, w_out = 0;
    bool bn_batch_mode = false;    // normalized by batch stats (train) vs running stats
};

template <typename T>
struct ForwardTrace {
    std::vector<BlockCache<T>> blocks;
    TensorT<T> gap_in;   // features entering global average pooling
    TensorT<T> head_in;  // [N, features]
    TensorT<T> logits;   // [N, classes]
};

template <typename T>
struct FwdOpts {
    bool training = false;
    bool bn_frozen = false;       // use running stats even when training
    T momentum_override = T(-1);  // <0: use each layer's own momentum
    bool check_finite = false;
};

template <typename T>
void conv_forward(const ConvLayerT<T>& conv, const TensorT<T>& x, TensorT<T>& y,
                  std::vector<std::vector<T>>* cols_out) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = (H + 2 * conv.pad - conv.kernel) / conv.stride + 1;
    const int Wo = (W + 2 * conv.pad - conv.kernel) / conv.stride + 1;
    const int CK = C * conv.kernel * conv.kernel;
    y = TensorT<T>({N, conv.out_channels, Ho, Wo});
    if (cols_out) cols_out->resize(static_cast<std::size_t>(N));
    std::vector<T> col_local;
    const std::size_t howo = static_cast<std::size_t>(Ho) * Wo;
    for (int n = 0; n < N; ++n) {
        std::vector<T>* col = cols_out ? &(*cols_out)[n] : &col_local;
        col->resize(static_cast<std::size_t>(CK) * howo);
        im2col(x.data.data() + static_cast<std::size_t>(n) * C * H * W, C, H, W, conv.kernel,
               conv.stride, conv.pad, Ho, Wo, col->data());
        T* yn = y.data.data() + static_cast<std::size_t>(n) * conv.out_channels * howo;
        gemm_nn(conv.out_channels, static_cast<int>(howo), CK, conv.weight.data(), col->data(), yn);
        for (int o = 0; o < conv.out_channels; ++o) {
            T b = conv.bias[o];
            T* yo = yn + static_cast<std::size_t>(o) * howo;
            for (std::size_t i = 0; i < howo; ++i) yo[i] += b;
        }
    }
}

template <typename T>
void maxpool2x2_forward(const TensorT<T>& x, TensorT<T>& y, std::vector<std::int32_t>* argmax) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = H / 2, Wo = W / 2;
    y = TensorT<T>({N, C, Ho, Wo});
    if (argmax) argmax->assign(y.data.size(), 0);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const T* xp = x.data.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
            T* yp = y.data.data() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
            std::int32_t* am =
                argmax ? argmax->data() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo : nullptr;
            for (int ho = 0; ho < Ho; ++ho) {
                for (int wo = 0; wo < Wo; ++wo) {
                    const int i0 = (2 * ho) * W + 2 * wo;
                    std::int32_t best = i0;
                    T v = xp[i0];
                    const std::int32_t cand[3] = {i0 + 1, i0 + W, i0 + W + 1};
                    for (std::int32_t idx : cand) {
                        if (xp[idx] > v) {
                            v = xp[idx];
                            best = idx;
                        }
                    }
                    yp[ho * Wo + wo] = v;
                    if (am) am[ho * Wo + wo] = best;
                }
            }
        }
    }
}

template <typename T>
void check_finite_or_throw(const TensorT<T>& t, const std::string& layer) {
    if (!t.all_finite()) throw NumericError("non-finite activations at " + layer);
}

// One engine serves eval, training, and statistics-adaptation forwards.
// `mut` must point at the same model when opts.training (BN updates run
// through it); it stays null on the pure eval path.
template <typename T>
TensorT<T> forward_engine(const ModelT<T>& m, const TensorT<T>& x, const FwdOpts<T>& opts,
                          ModelT<T>* mut, ForwardTrace<T>* trace) {
    if (x.ndim() != 4 || x.dim(1) != m.config.in_channels || x.dim(2) != m.config.in_height ||
        x.dim(3) != m.config.in_width)
        throw ShapeError("forward: batch shape " + x.shape_str() + " does not match model input");
    const bool update_stats = opts.training && !opts.bn_frozen;
    if (update_stats && x.dim(0) < 2)
        throw DegenerateBatchError("forward: train mode requires batch size >= 2");
    if (trace) trace->blocks.resize(m.blocks.size());

    TensorT<T> cur = x;
    for (std::size_t bi = 0; bi < m.blocks.size(); ++bi) {
        const ConvBlockT<T>& block = m.blocks[bi];
        BlockCache<T>* cache = trace ? &trace->blocks[bi] : nullptr;
        if (cache) {
            cache->h_in = cur.dim(2);
            cache->w_in = cur.dim(3);
        }

        TensorT<T> conv_out;
        conv_forward(block.conv, cur, conv_out, cache ? &cache->cols : nullptr);
        if (cache) {
            cache->h_conv = conv_out.dim(2);
            cache->w_conv = conv_out.dim(3);
        }

        // batch norm
        TensorT<T> bn_out;
        const bool batch_mode = opts.training && !opts.bn_frozen;
        if (batch_mode) {
            BnBatchStats<T> stats;
            bn_out = bn_forward_train(conv_out, mut->blocks[bi].bn, &stats, opts.momentum_override);
            if (cache) {
                cache->stats = stats;
                cache->bn_batch_mode = true;
                cache->inv_std.resize(stats.var.size());
                for (std::size_t c = 0; c < stats.var.size(); ++c)
                    cache->inv_std[c] = T(1) / std::sqrt(stats.var[c] + block.bn.eps);
            }
        } else {
            bn_out = bn_forward_eval(conv_out, block.bn);
            if (cache) {
                cache->bn_batch_mode = false;
                cache->inv_std.resize(static_cast<std::size_t>(block.bn.channels));
                for (int c = 0; c < block.bn.channels; ++c)
                    cache->inv_std[c] = T(1) / std::sqrt(block.bn.running_var[c] + block.bn.eps);
            }
        }
        if (cache) {
            // normalized pre-affine activations, straight from the conv output
            cache->xhat = TensorT<T>(bn_out.shape);
            const int N = bn_out.dim(0), C = bn_out.dim(1);
            const std::size_t hw = static_cast<std::size_t>(bn_out.dim(2)) * bn_out.dim(3);
            const std::vector<T>& mean =
                cache->bn_batch_mode ? cache->stats.mean : block.bn.running_mean;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const T mu = mean[c], is = cache->inv_std[c];
                    const T* xp = conv_out.data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
                    T* hp = cache->xhat.data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) hp[i] = (xp[i] - mu) * is;
                }
        }

        // relu
        if (cache) cache->relu_mask.resize(bn_out.data.size());
        for (std::size_t i = 0; i < bn_out.data.size(); ++i) {
            const bool pos = bn_out.data[i] > T(0);
            if (cache) cache->relu_mask[i] = pos ? 1 : 0;
            if (!pos) bn_out.data[i] = T(0);
        }

        // pool
        if (block.pool) {
            TensorT<T> pooled;
            maxpool2x2_forward(bn_out, pooled, cache ? &cache->pool_argmax : nullptr);
            cur = std::move(pooled);
        } else {
            cur = std::move(bn_out);
        }
        if (cache) {
            cache->h_out = cur.dim(2);
            cache->w_out = cur.dim(3);
        }
        if (opts.check_finite) check_finite_or_throw(cur, m.block_key(bi));
    }

    // global average pool
    if (trace) trace->gap_in = cur;
    const int N = cur.dim(0), C = cur.dim(1);
    const std::size_t hw = static_cast<std::size_t>(cur.dim(2)) * cur.dim(3);
    TensorT<T> feats({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* xp = cur.data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            double s = 0.0;
            for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(xp[i]);
            feats.data[static_cast<std::size_t>(n) * C + c] = static_cast<T>(s / static_cast<double>(hw));
        }
    if (trace) trace->head_in = feats;

    // linear head
    TensorT<T> logits({N, m.head.out_features});
    gemm_nt(N, m.head.out_features, m.head.in_features, feats.data.data(), m.head.weight.data(),
            logits.data.data());
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < m.head.out_features; ++o)
            logits.data[static_cast<std::size_t>(n) * m.head.out_features + o] += m.head.bias[o];
    if (opts.check_finite) check_finite_or_throw(logits, "head");
    if (trace) trace->logits = logits;
    return logits;
}

}  // namespace detail

// Pure eval-mode forward; never mutates the model.
template <typename T>
TensorT<T> forward_eval(const ModelT<T>& m, const TensorT<T>& batch) {
    detail::FwdOpts<T> opts;
    opts.training = false;
    return detail::forward_engine(m, batch, opts, static_cast<ModelT<T>*>(nullptr),
                                  static_cast<detail::ForwardTrace<T>*>(nullptr));
}

// Mode-dependent forward. In train mode BN running statistics update as a
// side effect; in eval mode the model is untouched.
template <typename T>
TensorT<T> forward(ModelT<T>& m, const TensorT<T>& batch) {
    if (m.mode == Mode::eval) return forward_eval(m, batch);
    detail::FwdOpts<T> opts;
    opts.training = true;
    return detail::forward_engine(m, batch, opts, &m, static_cast<detail::ForwardTrace<T>*>(nullptr));
}

// Statistics-adaptation forward: train-mode BN with an explicit momentum,
// finite checks on, no trace. Returns nothing useful beyond the side effect.
template <typename T>
void forward_adapt(ModelT<T>& m, const TensorT<T>& batch, T momentum) {
    detail::FwdOpts<T> opts;
    opts.training = true;
    opts.momentum_override = momentum;
    opts.check_finite = true;
    detail::forward_engine(m, batch, opts, &m, static_cast<detail::ForwardTrace<T>*>(nullptr));
}

// Mean softmax cross-entropy over the batch plus gradients for every
// trainable parameter. Train-mode forward (BN statistics update) unless the
// model was prepared with frozen BN via `bn_frozen`.
template <typename T>
std::pair<T, GradMap<T>> loss_and_backward(ModelT<T>& m, const TensorT<T>& batch,
                                           const std::vector<int>& labels, bool bn_frozen = false) {
    if (m.mode != Mode::train) throw ProtocolError("loss_and_backward requires train mode");
    const int N = batch.dim(0);
    if (static_cast<int>(labels.size()) != N)
        throw ShapeError("loss_and_backward: labels length must equal batch size");
    for (int y : labels)
        if (y < 0 || y >= m.config.n_classes)
            throw LabelError("label " + std::to_string(y) + " outside [0, " +
                             std::to_string(m.config.n_classes) + ")");

    detail::FwdOpts<T> opts;
    opts.training = true;
    opts.bn_frozen = bn_frozen;
    detail::ForwardTrace<T> trace;
    TensorT<T> logits = detail::forward_engine(m, batch, opts, &m, &trace);

    const int K = m.config.n_classes;
    TensorT<T> dlogits({N, K});
    double loss_acc = 0.0;
    for (int n = 0; n < N; ++n) {
        const T* l = logits.data.data() + static_cast<std::size_t>(n) * K;
        T mx = l[0];
        for (int k = 1; k < K; ++k) mx = std::max(mx, l[k]);
        double denom = 0.0;
        for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(l[k] - mx));
        const double logden = std::log(denom);
        loss_acc += logden - static_cast<double>(l[labels[n]] - mx);
        T* d = dlogits.data.data() + static_cast<std::size_t>(n) * K;
        for (int k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(l[k] - mx)) / denom;
            d[k] = static_cast<T>((p - (k == labels[n] ? 1.0 : 0.0)) / N);
        }
    }
    const T loss = static_cast<T>(loss_acc / N);

    GradMap<T> grads;
    // head
    {
        std::vector<T>& dW = grads["head.weight"];
        std::vector<T>& db = grads["head.bias"];
        dW.assign(m.head.weight.size(), T(0));
        db.assign(m.head.bias.size(), T(0));
        // dW[o,i] += sum_n dlogits[n,o] * head_in[n,i]
        gemm_tn(m.head.out_features, m.head.in_features, N, dlogits.data.data(),
                trace.head_in.data.data(), dW.data());
        for (int n = 0; n < N; ++n)
            for (int o = 0; o < m.head.out_features; ++o)
                db[o] += dlogits.data[static_cast<std::size_t>(n) * m.head.out_features + o];
    }
    // dX of head -> features
    TensorT<T> dfeat({N, m.head.in_features});
    gemm_nn(N, m.head.in_features, m.head.out_features, dlogits.data.data(), m.head.weight.data(),
            dfeat.data.data());

    // global average pool backward
    TensorT<T> dcur(trace.gap_in.shape);
    {
        const int C = trace.gap_in.dim(1);
        const std::size_t hw = static_cast<std::size_t>(trace.gap_in.dim(2)) * trace.gap_in.dim(3);
        const T inv = T(1) / static_cast<T>(hw);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T g = dfeat.data[static_cast<std::size_t>(n) * C + c] * inv;
                T* dp = dcur.data.data() + (static_cast<std::size_t>(n) * C + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) dp[i] = g;
            }
    }

    // blocks in reverse
    for (int bi = static_cast<int>(m.blocks.size()) - 1; bi >= 0; --bi) {
        const ConvBlockT<T>& block = m.blocks[bi];
        detail::BlockCache<T>& cache = trace.blocks[bi];
        const std::string bkey = m.block_key(bi);
        const int C = block.conv.out_channels;
        const std::size_t conv_hw = static_cast<std::size_t>(cache.h_conv) * cache.w_conv;

        // pool backward
        TensorT<T> dpost({N, C, cache.h_conv, cache.w_conv});
        if (block.pool) {
            const std::size_t out_hw = static_cast<std::size_t>(cache.h_out) * cache.w_out;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c);
                    const T* dy = dcur.data.data() + base * out_hw;
                    T* dx = dpost.data.data() + base * conv_hw;
                    const std::int32_t* am = cache.pool_argmax.data() + base * out_hw;
                    for (std::size_t i = 0; i < out_hw; ++i) dx[am[i]] += dy[i];
                }
        } else {
            dpost = std::move(dcur);
        }

        // relu backward
        for (std::size_t i = 0; i < dpost.data.size(); ++i)
            if (!cache.relu_mask[i]) dpost.data[i] = T(0);

        // batch norm backward
        std::vector<T>& dgamma = grads[bkey + ".bn.gamma"];
        std::vector<T>& dbeta = grads[bkey + ".bn.beta"];
        dgamma.assign(static_cast<std::size_t>(C), T(0));
        dbeta.assign(static_cast<std::size_t>(C), T(0));
        TensorT<T> dbn_in(dpost.shape);
        {
            const std::int64_t mcount = static_cast<std::int64_t>(N) * conv_hw;
            for (int c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (int n = 0; n < N; ++n) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * conv_hw;
                    const T* dy = dpost.data.data() + base;
                    const T* xh = cache.xhat.data.data() + base;
                    for (std::size_t i = 0; i < conv_hw; ++i) {
                        sum_dy += static_cast<double>(dy[i]);
                        sum_dy_xhat += static_cast<double>(dy[i]) * static_cast<double>(xh[i]);
                    }
                }
                dgamma[c] = static_cast<T>(sum_dy_xhat);
                dbeta[c] = static_cast<T>(sum_dy);
                const T g_is = block.bn.gamma[c] * cache.inv_std[c];
                if (cache.bn_batch_mode) {
                    const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(mcount));
                    const T mean_dy_xhat = static_cast<T>(sum_dy_xhat / static_cast<double>(mcount));
                    for (int n = 0; n < N; ++n) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * conv_hw;
                        const T* dy = dpost.data.data() + base;
                        const T* xh = cache.xhat.data.data() + base;
                        T* dx = dbn_in.data.data() + base;
                        for (std::size_t i = 0; i < conv_hw; ++i)
                            dx[i] = g_is * (dy[i] - mean_dy - xh[i] * mean_dy_xhat);
                    }
                } else {
                    // running statistics are constants; the map is affine
                    for (int n = 0; n < N; ++n) {
                        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * conv_hw;
                        const T* dy = dpost.data.data() + base;
                        T* dx = dbn_in.data.data() + base;
                        for (std::size_t i = 0; i < conv_hw; ++i) dx[i] = g_is * dy[i];
                    }
                }
            }
        }

        // conv backward
        const int CK = block.conv.in_channels * block.conv.kernel * block.conv.kernel;
        std::vector<T>& dW = grads[bkey + ".conv.weight"];
        std::vector<T>& db = grads[bkey + ".conv.bias"];
        dW.assign(block.conv.weight.size(), T(0));
        db.assign(block.conv.bias.size(), T(0));
        TensorT<T> dprev({N, block.conv.in_channels, cache.h_in, cache.w_in});
        std::vector<T> colT(static_cast<std::size_t>(conv_hw) * CK);
        std::vector<T> dcol(static_cast<std::size_t>(CK) * conv_hw);
        for (int n = 0; n < N; ++n) {
            const T* dy = dbn_in.data.data() + static_cast<std::size_t>(n) * C * conv_hw;
            for (int o = 0; o < C; ++o) {
                double s = 0.0;
                const T* dyo = dy + static_cast<std::size_t>(o) * conv_hw;
                for (std::size_t i = 0; i < conv_hw; ++i) s += static_cast<double>(dyo[i]);
                db[o] += static_cast<T>(s);
            }
            const std::vector<T>& col = cache.cols[n];
            for (int r = 0; r < CK; ++r)
                for (std::size_t p = 0; p < conv_hw; ++p)
                    colT[p * CK + r] = col[static_cast<std::size_t>(r) * conv_hw + p];
            gemm_nn(C, CK, static_cast<int>(conv_hw), dy, colT.data(), dW.data());
            std::fill(dcol.begin(), dcol.end(), T(0));
            gemm_tn(CK, static_cast<int>(conv_hw), C, block.conv.weight.data(), dy, dcol.data());
            detail::col2im_add(dcol.data(), block.conv.in_channels, cache.h_in, cache.w_in,
                               block.conv.kernel, block.conv.stride, block.conv.pad, cache.h_conv,
                               cache.w_conv,
                               dprev.data.data() + static_cast<std::size_t>(n) * block.conv.in_channels *
                                                       cache.h_in * cache.w_in);
        }
        dcur = std::move(dprev);
    }

    return {loss, std::move(grads)};
}

// theta <- theta - lr * g for parameters the filter selects; everything else
// stays bit-identical.
template <typename T>
void sgd_step(ModelT<T>& m, const GradMap<T>& grads, T lr, const TrainableFilter& filter = trainable_all) {
    if (!(lr > T(0))) throw ConfigError("sgd_step: learning rate must be positive");
    for (const auto& [key, g] : grads) {
        std::vector<T>* p = m.param_by_key(key);
        if (!p) throw ShapeError("sgd_step: gradient for unknown parameter " + key);
        if (p->size() != g.size())
            throw ShapeError("sgd_step: gradient shape mismatch for " + key);
        if (!filter(key)) continue;
        for (std::size_t i = 0; i < g.size(); ++i) (*p)[i] -= lr * g[i];
    }
}

}  // namespace disc
