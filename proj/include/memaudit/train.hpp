#pragma once

#include <cmath>
#include <utility>

#include "memaudit/corpus_index.hpp"
#include "memaudit/lm_ops.hpp"
#include "memaudit/toy_lm.hpp"

namespace memaudit {

struct TrainConfig {
    int epochs = 1;
    int batch_size = 4;  // sequences per optimizer step
    int seq_len = 256;   // clamped to the model context
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // global norm; 0 disables
    std::uint64_t seed = 0;
    bool shuffle = true;
};

struct TrainReport {
    std::vector<double> epoch_losses;  // train_lm: nats/token; sft: mean per-pair sum
    std::int64_t total_steps = 0;
    std::int64_t total_target_tokens = 0;
};

namespace detail {

template <typename S>
struct AdamState {
    std::vector<S> m, v;
    std::int64_t t = 0;

    explicit AdamState(std::size_t n) : m(n, S(0)), v(n, S(0)) {}

    void step(std::vector<S>& params, std::vector<S>& grads, const TrainConfig& cfg) {
        ++t;
        if (cfg.grad_clip > 0.0) {
            double norm_sq = 0.0;
            for (S g : grads) norm_sq += static_cast<double>(g) * static_cast<double>(g);
            const double norm = std::sqrt(norm_sq);
            if (norm > cfg.grad_clip) {
                const S scale = static_cast<S>(cfg.grad_clip / norm);
                for (S& g : grads) g *= scale;
            }
        }
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        const S b1 = static_cast<S>(cfg.beta1);
        const S b2 = static_cast<S>(cfg.beta2);
        const S lr = static_cast<S>(cfg.learning_rate);
        const S eps = static_cast<S>(cfg.adam_eps);
        const S inv_bc1 = static_cast<S>(1.0 / bc1);
        const S inv_bc2 = static_cast<S>(1.0 / bc2);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const S g = grads[i];
            m[i] = b1 * m[i] + (S(1) - b1) * g;
            v[i] = b2 * v[i] + (S(1) - b2) * g * g;
            params[i] -= lr * (m[i] * inv_bc1) / (std::sqrt(v[i] * inv_bc2) + eps);
        }
        std::fill(grads.begin(), grads.end(), S(0));
    }
};

inline void check_finite(double loss, const char* what) {
    if (!std::isfinite(loss)) {
        throw std::runtime_error(std::string(what) +
                                 ": loss diverged (non-finite); lower the learning "
                                 "rate or enable gradient clipping");
    }
}

}  // namespace detail

// Next-token training on a document corpus. Documents are packed into an
// eos-separated stream and cut into seq_len chunks; the reported loss is
// mean nats per target token. Mutates the model in place and is exclusive;
// each call uses fresh optimizer state.
template <typename S>
TrainReport train_lm(ToyLMT<S>& model, const std::vector<Document>& corpus,
                     const TrainConfig& cfg) {
    if (corpus.empty()) {
        throw std::invalid_argument("train_lm: empty corpus");
    }
    if (cfg.epochs < 0 || cfg.batch_size < 1 || cfg.seq_len < 2) {
        throw std::invalid_argument("train_lm: invalid config");
    }
    const Vocabulary& vocab = model.vocab();
    const int seq_len = std::min(cfg.seq_len, model.config().context_len);

    TokenSequence stream;
    {
        std::size_t total = 1;
        for (const auto& doc : corpus) total += doc.tokens.size() + 1;
        stream.reserve(total);
        stream.push_back(vocab.eos_id);
        for (const auto& doc : corpus) {
            for (Token t : doc.tokens) {
                if (!vocab.is_valid(t) || t == vocab.sentinel_id) {
                    throw std::invalid_argument(
                        "train_lm: corpus token outside the trainable vocabulary");
                }
            }
            stream.insert(stream.end(), doc.tokens.begin(), doc.tokens.end());
            stream.push_back(vocab.eos_id);
        }
    }
    if (stream.size() < 2) {
        throw std::invalid_argument("train_lm: corpus too small");
    }

    // Chunk c covers stream[c*L, c*L+L]; a trailing chunk shorter than 2
    // tokens carries no target and is dropped.
    std::vector<std::int64_t> chunk_starts;
    for (std::int64_t start = 0; start + 1 < static_cast<std::int64_t>(stream.size());
         start += seq_len) {
        chunk_starts.push_back(start);
    }

    TrainReport report;
    std::vector<S> grads(model.parameters().size(), S(0));
    detail::AdamState<S> adam(model.parameters().size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::int64_t> order = chunk_starts;
        if (cfg.shuffle) {
            Rng rng(derive_seed(cfg.seed, 0x73687566ull + static_cast<std::uint64_t>(epoch)));
            rng.shuffle(order);
        }
        double epoch_loss = 0.0;
        std::int64_t epoch_targets = 0;

        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t batch_end =
                std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
            std::int64_t batch_targets = 0;
            for (std::size_t b = at; b < batch_end; ++b) {
                const std::int64_t start = order[b];
                const std::int64_t len = std::min<std::int64_t>(
                    seq_len, static_cast<std::int64_t>(stream.size()) - 1 - start);
                batch_targets += len;
            }
            const S scale = static_cast<S>(1.0 / static_cast<double>(batch_targets));

            double batch_loss = 0.0;
            for (std::size_t b = at; b < batch_end; ++b) {
                const std::int64_t start = order[b];
                const std::int64_t len = std::min<std::int64_t>(
                    seq_len, static_cast<std::int64_t>(stream.size()) - 1 - start);
                TokenView inputs(stream.data() + start, static_cast<std::size_t>(len));
                TokenView targets(stream.data() + start + 1, static_cast<std::size_t>(len));
                thread_local std::vector<S> weights;
                weights.assign(static_cast<std::size_t>(len), S(1));
                batch_loss += sequence_loss_impl<S>(model, inputs, targets, weights,
                                                    scale, &grads);
            }
            detail::check_finite(batch_loss, "train_lm");
            adam.step(model.parameters(), grads, cfg);
            ++report.total_steps;
            epoch_loss += batch_loss;
            epoch_targets += batch_targets;
        }
        report.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_targets));
        report.total_target_tokens += epoch_targets;
    }
    return report;
}

// Supervised fine-tuning on (prompt, target) pairs with the loss masked to
// target positions: per pair the summed -log P(y_i | x, y_<i), averaged
// over the pairs of each batch. Reported per-epoch loss is the mean
// per-pair sum, i.e. the mismatched-SFT curve when the pairs are shifted.
template <typename S>
TrainReport sft(ToyLMT<S>& model,
                const std::vector<std::pair<TokenSequence, TokenSequence>>& pairs,
                const TrainConfig& cfg) {
    if (pairs.empty()) {
        throw std::invalid_argument("sft: empty pair list");
    }
    if (cfg.epochs < 0 || cfg.batch_size < 1) {
        throw std::invalid_argument("sft: invalid config");
    }
    const Vocabulary& vocab = model.vocab();
    const int context = model.config().context_len;
    for (const auto& [prompt, target] : pairs) {
        if (target.empty()) {
            throw std::invalid_argument("sft: empty target in pair");
        }
        if (static_cast<int>(prompt.size() + target.size()) > context) {
            throw std::invalid_argument("sft: prompt+target does not fit the context");
        }
    }

    TrainReport report;
    std::vector<S> grads(model.parameters().size(), S(0));
    detail::AdamState<S> adam(model.parameters().size());

    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (cfg.shuffle) {
            Rng rng(derive_seed(cfg.seed, 0x736674ull + static_cast<std::uint64_t>(epoch)));
            rng.shuffle(order);
        }
        double epoch_loss = 0.0;

        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t batch_end =
                std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
            const S scale = static_cast<S>(1.0 / static_cast<double>(batch_end - at));
            double batch_loss = 0.0;
            for (std::size_t b = at; b < batch_end; ++b) {
                const auto& [prompt, target] = pairs[order[b]];
                // inputs: eos + prompt + target[..n-1]; weights select rows
                // predicting the target tokens.
                const std::size_t p_len = prompt.size();
                const std::size_t n = target.size();
                thread_local TokenSequence inputs, targets;
                thread_local std::vector<S> weights;
                inputs.clear();
                inputs.push_back(vocab.eos_id);
                inputs.insert(inputs.end(), prompt.begin(), prompt.end());
                inputs.insert(inputs.end(), target.begin(), target.end() - 1);
                targets.assign(inputs.begin() + 1, inputs.end());
                targets.push_back(target.back());
                weights.assign(inputs.size(), S(0));
                for (std::size_t j = p_len; j < p_len + n; ++j) weights[j] = S(1);
                batch_loss += sequence_loss_impl<S>(model, inputs, targets, weights,
                                                    scale, &grads);
                report.total_target_tokens += static_cast<std::int64_t>(n);
            }
            detail::check_finite(batch_loss, "sft");
            adam.step(model.parameters(), grads, cfg);
            ++report.total_steps;
            epoch_loss += batch_loss;
        }
        report.epoch_losses.push_back(epoch_loss / static_cast<double>(pairs.size()));
    }
    return report;
}

// Mean log-probability of a target continuation given a prompt, in nats.
// Used to compare models before/after fine-tuning.
template <typename S>
double target_log_prob(const ToyLMT<S>& model, TokenView prompt, TokenView target) {
    if (target.empty()) {
        throw std::invalid_argument("target_log_prob: empty target");
    }
    typename ToyLMT<S>::Session session(model);
    std::span<const S> logits = session.feed(model.vocab().eos_id);
    for (Token t : prompt) logits = session.feed(t);
    double sum = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const ModelOutput out = make_model_output(logits);
        sum += std::log(out.probs[static_cast<std::size_t>(target[i])]);
        if (i + 1 < target.size()) logits = session.feed(target[i]);
    }
    return sum / static_cast<double>(target.size());
}

}  // namespace memaudit
