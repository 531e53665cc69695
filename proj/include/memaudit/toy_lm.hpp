#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "memaudit/common.hpp"
#include "memaudit/parallel.hpp"
#include "memaudit/vocab.hpp"

namespace memaudit {

// ----------------------------- distributions -----------------------------

struct ModelOutput {
    std::vector<double> logits;
    std::vector<double> probs;
};

// Shannon entropy in bits; 0 * log 0 := 0.
inline double entropy_bits(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log2(p);
    }
    return h;
}

inline double token_entropy(const ModelOutput& out) { return entropy_bits(out.probs); }

template <typename S>
inline ModelOutput make_model_output(std::span<const S> logits_row) {
    ModelOutput out;
    out.logits.assign(logits_row.begin(), logits_row.end());
    out.probs.resize(out.logits.size());
    double max = out.logits[0];
    for (double z : out.logits) max = std::max(max, z);
    double sum = 0.0;
    for (std::size_t i = 0; i < out.logits.size(); ++i) {
        out.probs[i] = std::exp(out.logits[i] - max);
        sum += out.probs[i];
    }
    const double inv = 1.0 / sum;
    for (double& p : out.probs) p *= inv;
    return out;
}

struct EntropyProfile {
    std::vector<std::int64_t> positions;
    std::vector<double> entropies;
};

void save_entropy_profile_csv(const EntropyProfile& profile, const std::string& path);

struct DecodeConfig {
    double temperature = 0.0;  // 0 = greedy
    int max_new_tokens = 512;
    int min_new_tokens = 100;
    bool stop_at_eos = true;
};

enum class EntropyObjective { average_snippet_entropy, last_token_entropy };

// ----------------------------- model -----------------------------

struct ModelConfig {
    int n_layers = 2;
    int d_model = 128;
    int n_heads = 4;
    int context_len = 256;
    double init_std = 0.02;
    double rms_eps = 1e-5;
    bool zero_init_head = true;  // fresh models predict uniformly
};

namespace detail {

// Dot product with a fixed accumulation order: lane accumulators, then a
// tree reduction. The order never depends on runtime conditions, so results
// reproduce exactly, and the lane loop still vectorizes.
template <typename S>
inline S fixed_dot(const S* a, const S* b, int n) {
    constexpr int kLanes = 16;
    S acc[kLanes] = {};
    int i = 0;
    for (; i + kLanes <= n; i += kLanes) {
        for (int j = 0; j < kLanes; ++j) acc[j] += a[i + j] * b[i + j];
    }
    S tail = S(0);
    for (; i < n; ++i) tail += a[i] * b[i];
    for (int stride = kLanes / 2; stride > 0; stride /= 2) {
        for (int j = 0; j < stride; ++j) acc[j] += acc[j + stride];
    }
    return acc[0] + tail;
}

template <typename S>
inline void axpy(S a, const S* x, S* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace detail

// Decoder-only transformer: RMSNorm, multi-head causal attention, ReLU MLP,
// untied LM head, no biases. Inputs always begin with an eos token acting
// as begin-of-sequence; past the context length the input window slides,
// keeping the most recent tokens. The per-position primitives are shared
// between the whole-sequence training path and the incremental KV-cache
// path, so the two produce bit-identical logits.
template <typename S>
class ToyLMT {
public:
    ToyLMT(const ModelConfig& cfg, const Vocabulary& vocab, std::uint64_t seed)
        : cfg_(cfg), vocab_(vocab) {
        if (cfg.n_layers < 1 || cfg.d_model < 1 || cfg.n_heads < 1 ||
            cfg.context_len < 2 || cfg.d_model % cfg.n_heads != 0) {
            throw std::invalid_argument("ToyLM: invalid model config");
        }
        if (vocab.size < 3) {
            throw std::invalid_argument("ToyLM: vocabulary too small");
        }
        build_layout();
        params_.assign(static_cast<std::size_t>(n_params_), S(0));
        Rng rng(derive_seed(seed, 0x6d6f64656cull));
        for (auto& p : params_) {
            p = static_cast<S>(rng.normal() * cfg.init_std);
        }
        for (int l = 0; l < cfg_.n_layers; ++l) {
            fill_ones(off_rms1_[static_cast<std::size_t>(l)], cfg_.d_model);
            fill_ones(off_rms2_[static_cast<std::size_t>(l)], cfg_.d_model);
        }
        fill_ones(off_rmsf_, cfg_.d_model);
        if (cfg.zero_init_head) {
            const std::int64_t n = static_cast<std::int64_t>(vocab_.size) * cfg_.d_model;
            std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(off_lm_), n, S(0));
        }
    }

    const ModelConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    std::vector<S>& parameters() { return params_; }
    const std::vector<S>& parameters() const { return params_; }
    std::int64_t param_count() const { return n_params_; }

    // Whether the model exposes gradients w.r.t. one-hot input relaxations.
    // Always available here, but the contract lets a model refuse, and the
    // attack layer must cope; the toggle exists to exercise that path.
    bool gradient_hints_enabled() const { return gradient_hints_; }
    void set_gradient_hints_enabled(bool on) { gradient_hints_ = on; }

    std::span<const S> token_embedding_row(Token t) const {
        return {params_.data() + off_tok_ + static_cast<std::int64_t>(t) * cfg_.d_model,
                static_cast<std::size_t>(cfg_.d_model)};
    }

    // ----------------------------- activations -----------------------------

    struct Acts {
        int t_len = 0;
        // Residual stream: x[0] holds embeddings, x[l+1] the output of layer l.
        std::vector<std::vector<S>> x;
        struct Layer {
            std::vector<S> ln1;      // [T, d]
            std::vector<S> q, k, v;  // [T, d]
            std::vector<S> att;      // [H, T, T] softmax rows
            std::vector<S> att_mix;  // [T, d] head-concatenated context
            std::vector<S> x_mid;    // [T, d] residual after attention
            std::vector<S> ln2;      // [T, d]
            std::vector<S> h;        // [T, 4d] post-ReLU
        };
        std::vector<Layer> layers;
        std::vector<S> lnf;     // [T, d]
        std::vector<S> logits;  // [T, V]
    };

    // Teacher-forcing forward; logits row t predicts the token after
    // inputs[t]. Sequence length must fit the context.
    void forward_seq(TokenView inputs, Acts& acts) const {
        const int t_len = static_cast<int>(inputs.size());
        if (t_len < 1 || t_len > cfg_.context_len) {
            throw std::invalid_argument("forward_seq: sequence length out of range");
        }
        for (Token t : inputs) {
            if (!vocab_.is_valid(t)) {
                throw std::invalid_argument("forward_seq: token id out of vocabulary");
            }
        }
        const int d = cfg_.d_model;
        resize_acts(acts, t_len);

        parallel_for(0, t_len, [&](std::int64_t t) {
            embed_row(inputs[static_cast<std::size_t>(t)], static_cast<int>(t),
                      row(acts.x[0], t, d));
        });

        for (int l = 0; l < cfg_.n_layers; ++l) {
            layer_forward(l, t_len, acts.x[static_cast<std::size_t>(l)],
                          acts.layers[static_cast<std::size_t>(l)],
                          acts.x[static_cast<std::size_t>(l) + 1]);
        }

        const std::vector<S>& x_out = acts.x[static_cast<std::size_t>(cfg_.n_layers)];
        parallel_for(0, t_len, [&](std::int64_t t) {
            rms_row(row(x_out, t, d), off_rmsf_, row(acts.lnf, t, d));
            gemv(off_lm_, row(acts.lnf, t, d), row(acts.logits, t, vocab_.size),
                 vocab_.size, d);
        });
    }

    // Backprop of d(loss)/d(logits): accumulates parameter gradients and,
    // optionally, returns gradients w.r.t. the summed input embeddings.
    void backward_seq(TokenView inputs, const Acts& acts, const std::vector<S>& dlogits,
                      std::vector<S>& grads, std::vector<S>* d_input_emb = nullptr) const {
        const int t_len = acts.t_len;
        const int d = cfg_.d_model;
        const int v = vocab_.size;
        if (grads.size() != params_.size()) {
            throw std::invalid_argument("backward_seq: grad buffer size mismatch");
        }
        if (dlogits.size() < static_cast<std::size_t>(t_len) * v) {
            throw std::invalid_argument("backward_seq: dlogits size mismatch");
        }

        // Bound through a local reference so the worker lambdas all see the
        // calling thread's scratch.
        thread_local Scratch scratch_storage;
        Scratch& sc = scratch_storage;
        sc.resize(t_len, d, cfg_.n_heads);

        // LM head and final norm.
        parallel_for(0, t_len, [&](std::int64_t t) {
            gemv_transposed(off_lm_, &dlogits[static_cast<std::size_t>(t) * v],
                            row(sc.d_norm, t, d), v, d);
        });
        matmul_accum_weight(grads.data() + off_lm_, dlogits.data(), acts.lnf.data(), v,
                            d, t_len);
        const std::vector<S>& x_out = acts.x[static_cast<std::size_t>(cfg_.n_layers)];
        parallel_for(0, t_len, [&](std::int64_t t) {
            rms_row_backward(row(x_out, t, d), off_rmsf_, row(sc.d_norm, t, d),
                             row(sc.dx, t, d), row(sc.d_gain, t, d), false);
        });
        accum_rows(grads.data() + off_rmsf_, sc.d_gain.data(), t_len, d);

        for (int l = cfg_.n_layers - 1; l >= 0; --l) {
            layer_backward(l, t_len, acts.x[static_cast<std::size_t>(l)],
                           acts.layers[static_cast<std::size_t>(l)], grads, sc);
        }

        // Embedding grads, sequential: token rows may repeat across positions.
        for (int t = 0; t < t_len; ++t) {
            const S* dx = row(sc.dx, t, d);
            S* g_tok = grads.data() + off_tok_ +
                       static_cast<std::int64_t>(inputs[static_cast<std::size_t>(t)]) * d;
            S* g_pos = grads.data() + off_pos_ + static_cast<std::int64_t>(t) * d;
            for (int i = 0; i < d; ++i) {
                g_tok[i] += dx[i];
                g_pos[i] += dx[i];
            }
        }
        if (d_input_emb) {
            d_input_emb->assign(sc.dx.begin(),
                                sc.dx.begin() + static_cast<std::ptrdiff_t>(t_len) * d);
        }
    }

    // ----------------------------- incremental decoding -----------------------------

    class Session {
    public:
        explicit Session(const ToyLMT& model) : model_(&model) { reset_caches(); }

        void reset() {
            reset_caches();
            history_.clear();
        }

        // Feeds one input token; returns the logits row predicting the next
        // token. Valid until the next feed. Feeding past the context length
        // drops the oldest input and replays the trailing window.
        std::span<const S> feed(Token token) {
            if (!model_->vocab_.is_valid(token)) {
                throw std::invalid_argument("Session::feed: token id out of vocabulary");
            }
            history_.push_back(token);
            if (fed_ == model_->cfg_.context_len) {
                reset_caches();
                const std::size_t from = history_.size() -
                                         static_cast<std::size_t>(model_->cfg_.context_len);
                for (std::size_t i = from; i < history_.size(); ++i) {
                    step(history_[i]);
                }
            } else {
                step(token);
            }
            return {logits_.data(), logits_.size()};
        }

        std::span<const S> logits() const { return {logits_.data(), logits_.size()}; }
        int fed() const { return fed_; }

    private:
        void reset_caches() {
            const auto& cfg = model_->cfg_;
            const std::size_t kv = static_cast<std::size_t>(cfg.n_layers) *
                                   static_cast<std::size_t>(cfg.context_len) *
                                   static_cast<std::size_t>(cfg.d_model);
            k_cache_.assign(kv, S(0));
            v_cache_.assign(kv, S(0));
            logits_.assign(static_cast<std::size_t>(model_->vocab_.size), S(0));
            fed_ = 0;
        }

        void step(Token token) {
            model_->decode_step(token, fed_, k_cache_.data(), v_cache_.data(),
                                logits_.data());
            ++fed_;
        }

        const ToyLMT* model_;
        std::vector<S> k_cache_, v_cache_;  // [L, C, d]
        std::vector<S> logits_;
        TokenSequence history_;
        int fed_ = 0;
    };

    // ----------------------------- persistence -----------------------------

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("ToyLM::save: cannot open " + path);
        const char magic[4] = {'M', 'A', 'L', 'M'};
        out.write(magic, 4);
        auto put_u32 = [&](std::uint32_t x) {
            out.write(reinterpret_cast<const char*>(&x), 4);
        };
        auto put_f64 = [&](double x) {
            out.write(reinterpret_cast<const char*>(&x), 8);
        };
        put_u32(1);  // format version
        put_u32(sizeof(S));
        put_u32(static_cast<std::uint32_t>(cfg_.n_layers));
        put_u32(static_cast<std::uint32_t>(cfg_.d_model));
        put_u32(static_cast<std::uint32_t>(cfg_.n_heads));
        put_u32(static_cast<std::uint32_t>(cfg_.context_len));
        put_f64(cfg_.init_std);
        put_f64(cfg_.rms_eps);
        put_u32(static_cast<std::uint32_t>(vocab_.size));
        put_u32(static_cast<std::uint32_t>(vocab_.eos_id));
        put_u32(static_cast<std::uint32_t>(vocab_.sentinel_id));
        const std::uint64_t count = static_cast<std::uint64_t>(n_params_);
        out.write(reinterpret_cast<const char*>(&count), 8);
        out.write(reinterpret_cast<const char*>(params_.data()),
                  static_cast<std::streamsize>(params_.size() * sizeof(S)));
        if (!out) throw std::runtime_error("ToyLM::save: write failed for " + path);
    }

    static ToyLMT load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("ToyLM::load: cannot open " + path);
        char magic[4];
        in.read(magic, 4);
        if (!in || std::string(magic, 4) != "MALM") {
            throw std::runtime_error("ToyLM::load: bad magic in " + path);
        }
        auto get_u32 = [&]() {
            std::uint32_t x = 0;
            in.read(reinterpret_cast<char*>(&x), 4);
            return x;
        };
        auto get_f64 = [&]() {
            double x = 0;
            in.read(reinterpret_cast<char*>(&x), 8);
            return x;
        };
        if (get_u32() != 1) throw std::runtime_error("ToyLM::load: unsupported version");
        if (get_u32() != sizeof(S)) {
            throw std::runtime_error("ToyLM::load: checkpoint scalar width mismatch");
        }
        ModelConfig cfg;
        cfg.n_layers = static_cast<int>(get_u32());
        cfg.d_model = static_cast<int>(get_u32());
        cfg.n_heads = static_cast<int>(get_u32());
        cfg.context_len = static_cast<int>(get_u32());
        cfg.init_std = get_f64();
        cfg.rms_eps = get_f64();
        Vocabulary vocab;
        vocab.size = static_cast<int>(get_u32());
        vocab.eos_id = static_cast<Token>(get_u32());
        vocab.sentinel_id = static_cast<Token>(get_u32());
        std::uint64_t count = 0;
        in.read(reinterpret_cast<char*>(&count), 8);
        ToyLMT model(cfg, vocab, 0);
        if (count != static_cast<std::uint64_t>(model.n_params_)) {
            throw std::runtime_error("ToyLM::load: parameter count mismatch");
        }
        in.read(reinterpret_cast<char*>(model.params_.data()),
                static_cast<std::streamsize>(count * sizeof(S)));
        if (!in) throw std::runtime_error("ToyLM::load: truncated file " + path);
        return model;
    }

private:
    // ----------------------------- layout -----------------------------

    void build_layout() {
        const std::int64_t d = cfg_.d_model;
        const std::int64_t v = vocab_.size;
        std::int64_t cursor = 0;
        auto take = [&](std::int64_t n) {
            const std::int64_t at = cursor;
            cursor += n;
            return at;
        };
        off_tok_ = take(v * d);
        off_pos_ = take(static_cast<std::int64_t>(cfg_.context_len) * d);
        const std::size_t nl = static_cast<std::size_t>(cfg_.n_layers);
        off_rms1_.resize(nl);
        off_wq_.resize(nl);
        off_wk_.resize(nl);
        off_wv_.resize(nl);
        off_wo_.resize(nl);
        off_rms2_.resize(nl);
        off_w1_.resize(nl);
        off_w2_.resize(nl);
        for (std::size_t l = 0; l < nl; ++l) {
            off_rms1_[l] = take(d);
            off_wq_[l] = take(d * d);
            off_wk_[l] = take(d * d);
            off_wv_[l] = take(d * d);
            off_wo_[l] = take(d * d);
            off_rms2_[l] = take(d);
            off_w1_[l] = take(4 * d * d);
            off_w2_[l] = take(4 * d * d);
        }
        off_rmsf_ = take(d);
        off_lm_ = take(v * d);
        n_params_ = cursor;
    }

    void fill_ones(std::int64_t offset, int n) {
        for (int i = 0; i < n; ++i) params_[static_cast<std::size_t>(offset + i)] = S(1);
    }

    static S* row(std::vector<S>& v, std::int64_t t, int width) {
        return v.data() + t * width;
    }
    static const S* row(const std::vector<S>& v, std::int64_t t, int width) {
        return v.data() + t * width;
    }

    void resize_acts(Acts& acts, int t_len) const {
        const std::size_t td = static_cast<std::size_t>(t_len) * cfg_.d_model;
        acts.t_len = t_len;
        acts.x.resize(static_cast<std::size_t>(cfg_.n_layers) + 1);
        for (auto& xv : acts.x) xv.resize(td);
        acts.layers.resize(static_cast<std::size_t>(cfg_.n_layers));
        for (auto& lay : acts.layers) {
            lay.ln1.resize(td);
            lay.q.resize(td);
            lay.k.resize(td);
            lay.v.resize(td);
            lay.att.resize(static_cast<std::size_t>(cfg_.n_heads) * t_len * t_len);
            lay.att_mix.resize(td);
            lay.x_mid.resize(td);
            lay.ln2.resize(td);
            lay.h.resize(td * 4);
        }
        acts.lnf.resize(td);
        acts.logits.resize(static_cast<std::size_t>(t_len) * vocab_.size);
    }

    // ----------------------------- per-row primitives -----------------------------

    void embed_row(Token token, int pos, S* out) const {
        const int d = cfg_.d_model;
        const S* tok = params_.data() + off_tok_ + static_cast<std::int64_t>(token) * d;
        const S* ps = params_.data() + off_pos_ + static_cast<std::int64_t>(pos) * d;
        for (int i = 0; i < d; ++i) out[i] = tok[i] + ps[i];
    }

    void rms_row(const S* x, std::int64_t gain_off, S* out) const {
        const int d = cfg_.d_model;
        const S* g = params_.data() + gain_off;
        const S ms = detail::fixed_dot(x, x, d) / static_cast<S>(d);
        const S scale = S(1) / std::sqrt(ms + static_cast<S>(cfg_.rms_eps));
        for (int i = 0; i < d; ++i) out[i] = x[i] * scale * g[i];
    }

    // y_i = g_i x_i r with r = (mean(x^2)+eps)^{-1/2}.
    void rms_row_backward(const S* x, std::int64_t gain_off, const S* dy, S* dx,
                          S* d_gain, bool accumulate_dx) const {
        const int d = cfg_.d_model;
        const S* g = params_.data() + gain_off;
        const S ms = detail::fixed_dot(x, x, d) / static_cast<S>(d);
        const S r = S(1) / std::sqrt(ms + static_cast<S>(cfg_.rms_eps));
        S dot_dygx = S(0);
        for (int i = 0; i < d; ++i) dot_dygx += dy[i] * g[i] * x[i];
        const S coef = dot_dygx * r * r * r / static_cast<S>(d);
        for (int i = 0; i < d; ++i) {
            const S val = dy[i] * g[i] * r - x[i] * coef;
            if (accumulate_dx) {
                dx[i] += val;
            } else {
                dx[i] = val;
            }
            d_gain[i] = dy[i] * x[i] * r;
        }
    }

    // y = W x with W row-major [out, in].
    void gemv(std::int64_t w_off, const S* x, S* y, int out, int in) const {
        const S* w = params_.data() + w_off;
        for (int o = 0; o < out; ++o) {
            y[o] = detail::fixed_dot(w + static_cast<std::int64_t>(o) * in, x, in);
        }
    }

    // y_i = sum_o W[o, i] x_o (i.e. y = W^T x), for dX rows.
    void gemv_transposed(std::int64_t w_off, const S* x, S* y, int out, int in) const {
        const S* w = params_.data() + w_off;
        for (int i = 0; i < in; ++i) y[i] = S(0);
        for (int o = 0; o < out; ++o) {
            detail::axpy(x[o], w + static_cast<std::int64_t>(o) * in, y, in);
        }
    }

    // dW[o, :] += sum_t dY[t, o] * X[t, :]; parallel over output rows.
    void matmul_accum_weight(S* dw, const S* dy, const S* x, int out, int in,
                             int t_len) const {
        parallel_for(0, out, [&](std::int64_t o) {
            S* w_row = dw + o * in;
            for (int t = 0; t < t_len; ++t) {
                detail::axpy(dy[static_cast<std::int64_t>(t) * out + o],
                             x + static_cast<std::int64_t>(t) * in, w_row, in);
            }
        });
    }

    void accum_rows(S* dst, const S* per_row, int t_len, int d) const {
        for (int t = 0; t < t_len; ++t) {
            const S* src = per_row + static_cast<std::int64_t>(t) * d;
            for (int i = 0; i < d; ++i) dst[i] += src[i];
        }
    }

    // Causal attention for one query row against keys/values at positions
    // 0..t. When probs_out is given, the softmax row of head h is written to
    // probs_out[h * head_stride + j].
    void att_row(const S* q_row, const S* k_rows, const S* v_rows, int t, S* out,
                 S* probs_out, std::size_t head_stride) const {
        const int d = cfg_.d_model;
        const int hd = d / cfg_.n_heads;
        const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));
        thread_local std::vector<S> scores;
        scores.resize(static_cast<std::size_t>(t) + 1);
        for (int head = 0; head < cfg_.n_heads; ++head) {
            const int base = head * hd;
            S max_s = std::numeric_limits<S>::lowest();
            for (int j = 0; j <= t; ++j) {
                const S s = detail::fixed_dot(
                                q_row + base,
                                k_rows + static_cast<std::int64_t>(j) * d + base, hd) *
                            inv_sqrt;
                scores[static_cast<std::size_t>(j)] = s;
                max_s = std::max(max_s, s);
            }
            S sum = S(0);
            for (int j = 0; j <= t; ++j) {
                const S e = std::exp(scores[static_cast<std::size_t>(j)] - max_s);
                scores[static_cast<std::size_t>(j)] = e;
                sum += e;
            }
            const S inv = S(1) / sum;
            for (int i = 0; i < hd; ++i) out[base + i] = S(0);
            for (int j = 0; j <= t; ++j) {
                const S p = scores[static_cast<std::size_t>(j)] * inv;
                if (probs_out) {
                    probs_out[static_cast<std::size_t>(head) * head_stride +
                              static_cast<std::size_t>(j)] = p;
                }
                detail::axpy(p, v_rows + static_cast<std::int64_t>(j) * d + base,
                             out + base, hd);
            }
        }
    }

    // ----------------------------- layer forward/backward -----------------------------

    void layer_forward(int l, int t_len, const std::vector<S>& x_in,
                       typename Acts::Layer& lay, std::vector<S>& x_out) const {
        const int d = cfg_.d_model;
        const std::size_t li = static_cast<std::size_t>(l);
        const std::size_t att_head_stride =
            static_cast<std::size_t>(t_len) * static_cast<std::size_t>(t_len);

        parallel_for(0, t_len, [&](std::int64_t t) {
            rms_row(row(x_in, t, d), off_rms1_[li], row(lay.ln1, t, d));
            gemv(off_wq_[li], row(lay.ln1, t, d), row(lay.q, t, d), d, d);
            gemv(off_wk_[li], row(lay.ln1, t, d), row(lay.k, t, d), d, d);
            gemv(off_wv_[li], row(lay.ln1, t, d), row(lay.v, t, d), d, d);
        });

        parallel_for(0, t_len, [&](std::int64_t t) {
            att_row(row(lay.q, t, d), lay.k.data(), lay.v.data(), static_cast<int>(t),
                    row(lay.att_mix, t, d),
                    lay.att.data() + static_cast<std::size_t>(t) * t_len,
                    att_head_stride);
        });

        parallel_for(0, t_len, [&](std::int64_t t) {
            thread_local std::vector<S> proj;
            proj.resize(static_cast<std::size_t>(4) * d);
            gemv(off_wo_[li], row(lay.att_mix, t, d), proj.data(), d, d);
            for (int i = 0; i < d; ++i) {
                lay.x_mid[static_cast<std::size_t>(t) * d + i] =
                    x_in[static_cast<std::size_t>(t) * d + i] + proj[i];
            }
            rms_row(row(lay.x_mid, t, d), off_rms2_[li], row(lay.ln2, t, d));
            gemv(off_w1_[li], row(lay.ln2, t, d), row(lay.h, t, 4 * d), 4 * d, d);
            for (int i = 0; i < 4 * d; ++i) {
                S& hv = lay.h[static_cast<std::size_t>(t) * 4 * d + i];
                hv = hv > S(0) ? hv : S(0);
            }
            gemv(off_w2_[li], row(lay.h, t, 4 * d), proj.data(), d, 4 * d);
            for (int i = 0; i < d; ++i) {
                x_out[static_cast<std::size_t>(t) * d + i] =
                    lay.x_mid[static_cast<std::size_t>(t) * d + i] + proj[i];
            }
        });
    }

    struct Scratch {
        std::vector<S> dx;      // [T, d] grad of the residual stream
        std::vector<S> dx_mid;  // [T, d]
        std::vector<S> d_norm;  // [T, d]
        std::vector<S> d_gain;  // [T, d]
        std::vector<S> d_h;     // [T, 4d]
        std::vector<S> dq, dk, dv;
        std::vector<S> ds;  // [H, T, T]

        void resize(int t_len, int d, int n_heads) {
            const std::size_t td = static_cast<std::size_t>(t_len) * d;
            dx.resize(td);
            dx_mid.resize(td);
            d_norm.resize(td);
            d_gain.resize(td);
            d_h.resize(td * 4);
            dq.resize(td);
            dk.resize(td);
            dv.resize(td);
            ds.resize(static_cast<std::size_t>(n_heads) * t_len * t_len);
        }
    };

    // Consumes sc.dx as the gradient of this layer's output; leaves the
    // gradient of its input in sc.dx.
    void layer_backward(int l, int t_len, const std::vector<S>& x_in,
                        const typename Acts::Layer& lay, std::vector<S>& grads,
                        Scratch& sc) const {
        const int d = cfg_.d_model;
        const int hd = d / cfg_.n_heads;
        const std::size_t li = static_cast<std::size_t>(l);
        const std::size_t att_head_stride =
            static_cast<std::size_t>(t_len) * static_cast<std::size_t>(t_len);
        const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));

        // MLP: x_out = x_mid + W2 h, h = relu(W1 ln2), ln2 = rms2(x_mid).
        parallel_for(0, t_len, [&](std::int64_t t) {
            S* dh = row(sc.d_h, t, 4 * d);
            gemv_transposed(off_w2_[li], row(sc.dx, t, d), dh, d, 4 * d);
            const S* h = row(lay.h, t, 4 * d);
            for (int i = 0; i < 4 * d; ++i) {
                if (!(h[i] > S(0))) dh[i] = S(0);
            }
            gemv_transposed(off_w1_[li], dh, row(sc.d_norm, t, d), 4 * d, d);
        });
        matmul_accum_weight(grads.data() + off_w2_[li], sc.dx.data(), lay.h.data(), d,
                            4 * d, t_len);
        matmul_accum_weight(grads.data() + off_w1_[li], sc.d_h.data(), lay.ln2.data(),
                            4 * d, d, t_len);

        parallel_for(0, t_len, [&](std::int64_t t) {
            std::memcpy(row(sc.dx_mid, t, d), row(sc.dx, t, d),
                        static_cast<std::size_t>(d) * sizeof(S));
            rms_row_backward(row(lay.x_mid, t, d), off_rms2_[li], row(sc.d_norm, t, d),
                             row(sc.dx_mid, t, d), row(sc.d_gain, t, d), true);
        });
        accum_rows(grads.data() + off_rms2_[li], sc.d_gain.data(), t_len, d);

        // Attention output: x_mid = x_in + Wo att_mix.
        parallel_for(0, t_len, [&](std::int64_t t) {
            gemv_transposed(off_wo_[li], row(sc.dx_mid, t, d), row(sc.d_norm, t, d), d,
                            d);
        });
        matmul_accum_weight(grads.data() + off_wo_[li], sc.dx_mid.data(),
                            lay.att_mix.data(), d, d, t_len);
        // sc.d_norm now holds d(att_mix).

        // Attention core. Phase A (per query row): dp -> ds and dq.
        parallel_for(0, t_len, [&](std::int64_t t) {
            const S* da = row(sc.d_norm, t, d);
            S* dq_row = row(sc.dq, t, d);
            for (int head = 0; head < cfg_.n_heads; ++head) {
                const int base = head * hd;
                const S* p_row = lay.att.data() +
                                 static_cast<std::size_t>(head) * att_head_stride +
                                 static_cast<std::size_t>(t) * t_len;
                S* ds_row = sc.ds.data() +
                            static_cast<std::size_t>(head) * att_head_stride +
                            static_cast<std::size_t>(t) * t_len;
                S dot_sum = S(0);
                for (int j = 0; j <= static_cast<int>(t); ++j) {
                    const S dp = detail::fixed_dot(
                        da + base, row(lay.v, j, d) + base, hd);
                    ds_row[j] = dp;
                    dot_sum += dp * p_row[j];
                }
                for (int i = 0; i < hd; ++i) dq_row[base + i] = S(0);
                for (int j = 0; j <= static_cast<int>(t); ++j) {
                    const S dsj = p_row[j] * (ds_row[j] - dot_sum) * inv_sqrt;
                    ds_row[j] = dsj;
                    detail::axpy(dsj, row(lay.k, j, d) + base, dq_row + base, hd);
                }
            }
        });

        // Phase B (per key/value row): dk and dv from stored ds and p.
        parallel_for(0, t_len, [&](std::int64_t j) {
            S* dk_row = row(sc.dk, j, d);
            S* dv_row = row(sc.dv, j, d);
            for (int i = 0; i < d; ++i) {
                dk_row[i] = S(0);
                dv_row[i] = S(0);
            }
            for (int head = 0; head < cfg_.n_heads; ++head) {
                const int base = head * hd;
                for (int t = static_cast<int>(j); t < t_len; ++t) {
                    const S dsj = sc.ds[static_cast<std::size_t>(head) * att_head_stride +
                                        static_cast<std::size_t>(t) * t_len +
                                        static_cast<std::size_t>(j)];
                    const S pj = lay.att[static_cast<std::size_t>(head) * att_head_stride +
                                         static_cast<std::size_t>(t) * t_len +
                                         static_cast<std::size_t>(j)];
                    detail::axpy(dsj, row(lay.q, t, d) + base, dk_row + base, hd);
                    detail::axpy(pj, row(sc.d_norm, t, d) + base, dv_row + base, hd);
                }
            }
        });

        // Projections back to ln1 and weight grads.
        matmul_accum_weight(grads.data() + off_wq_[li], sc.dq.data(), lay.ln1.data(), d,
                            d, t_len);
        matmul_accum_weight(grads.data() + off_wk_[li], sc.dk.data(), lay.ln1.data(), d,
                            d, t_len);
        matmul_accum_weight(grads.data() + off_wv_[li], sc.dv.data(), lay.ln1.data(), d,
                            d, t_len);
        parallel_for(0, t_len, [&](std::int64_t t) {
            thread_local std::vector<S> tmp;
            tmp.resize(static_cast<std::size_t>(d));
            S* d_ln1 = row(sc.d_norm, t, d);
            gemv_transposed(off_wq_[li], row(sc.dq, t, d), d_ln1, d, d);
            gemv_transposed(off_wk_[li], row(sc.dk, t, d), tmp.data(), d, d);
            for (int i = 0; i < d; ++i) d_ln1[i] += tmp[i];
            gemv_transposed(off_wv_[li], row(sc.dv, t, d), tmp.data(), d, d);
            for (int i = 0; i < d; ++i) d_ln1[i] += tmp[i];
        });

        parallel_for(0, t_len, [&](std::int64_t t) {
            std::memcpy(row(sc.dx, t, d), row(sc.dx_mid, t, d),
                        static_cast<std::size_t>(d) * sizeof(S));
            rms_row_backward(row(x_in, t, d), off_rms1_[li], row(sc.d_norm, t, d),
                             row(sc.dx, t, d), row(sc.d_gain, t, d), true);
        });
        accum_rows(grads.data() + off_rms1_[li], sc.d_gain.data(), t_len, d);
    }

    // One incremental position against the KV caches.
    void decode_step(Token token, int pos, S* k_cache, S* v_cache, S* logits_out) const {
        const int d = cfg_.d_model;
        const std::size_t layer_kv = static_cast<std::size_t>(cfg_.context_len) * d;
        thread_local std::vector<S> x, norm, q, att_mix, h;
        x.resize(static_cast<std::size_t>(d));
        norm.resize(static_cast<std::size_t>(d));
        q.resize(static_cast<std::size_t>(d));
        att_mix.resize(static_cast<std::size_t>(d));
        h.resize(static_cast<std::size_t>(4) * d);

        embed_row(token, pos, x.data());
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const std::size_t li = static_cast<std::size_t>(l);
            S* k_rows = k_cache + li * layer_kv;
            S* v_rows = v_cache + li * layer_kv;
            rms_row(x.data(), off_rms1_[li], norm.data());
            gemv(off_wq_[li], norm.data(), q.data(), d, d);
            gemv(off_wk_[li], norm.data(), k_rows + static_cast<std::int64_t>(pos) * d, d,
                 d);
            gemv(off_wv_[li], norm.data(), v_rows + static_cast<std::int64_t>(pos) * d, d,
                 d);
            att_row(q.data(), k_rows, v_rows, pos, att_mix.data(), nullptr, 0);
            gemv(off_wo_[li], att_mix.data(), norm.data(), d, d);
            for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(i)] += norm[static_cast<std::size_t>(i)];
            rms_row(x.data(), off_rms2_[li], norm.data());
            gemv(off_w1_[li], norm.data(), h.data(), 4 * d, d);
            for (int i = 0; i < 4 * d; ++i) {
                h[static_cast<std::size_t>(i)] =
                    h[static_cast<std::size_t>(i)] > S(0) ? h[static_cast<std::size_t>(i)] : S(0);
            }
            gemv(off_w2_[li], h.data(), norm.data(), d, 4 * d);
            for (int i = 0; i < d; ++i) x[static_cast<std::size_t>(i)] += norm[static_cast<std::size_t>(i)];
        }
        rms_row(x.data(), off_rmsf_, norm.data());
        gemv(off_lm_, norm.data(), logits_out, vocab_.size, d);
    }

    ModelConfig cfg_;
    Vocabulary vocab_;
    std::vector<S> params_;
    bool gradient_hints_ = true;

    std::int64_t off_tok_ = 0, off_pos_ = 0, off_rmsf_ = 0, off_lm_ = 0;
    std::vector<std::int64_t> off_rms1_, off_wq_, off_wk_, off_wv_, off_wo_, off_rms2_,
        off_w1_, off_w2_;
    std::int64_t n_params_ = 0;
};

using ToyLM = ToyLMT<float>;

}  // namespace memaudit
