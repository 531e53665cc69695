#pragma once

#include <optional>
#include <stdexcept>

#include "memaudit/toy_lm.hpp"

namespace memaudit {

// Next-token distribution given a context (which may be empty). The model
// input is the context prefixed with eos, truncated to the trailing
// context window.
template <typename S>
ModelOutput next_distribution(const ToyLMT<S>& model, TokenView context) {
    if (static_cast<int>(context.size()) > model.config().context_len) {
        throw std::invalid_argument("next_distribution: context too long");
    }
    typename ToyLMT<S>::Session session(model);
    session.feed(model.vocab().eos_id);
    for (Token t : context) session.feed(t);
    return make_model_output(session.logits());
}

// Per-position prediction entropies: entry t is the entropy of the
// distribution over tokens[t] given tokens[..t], in bits.
template <typename S>
EntropyProfile entropy_profile(const ToyLMT<S>& model, TokenView tokens) {
    if (tokens.empty()) {
        throw std::invalid_argument("entropy_profile: empty sequence");
    }
    EntropyProfile profile;
    profile.positions.reserve(tokens.size());
    profile.entropies.reserve(tokens.size());
    typename ToyLMT<S>::Session session(model);
    std::span<const S> logits = session.feed(model.vocab().eos_id);
    profile.positions.push_back(0);
    profile.entropies.push_back(token_entropy(make_model_output(logits)));
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
        logits = session.feed(tokens[i]);
        profile.positions.push_back(static_cast<std::int64_t>(i) + 1);
        profile.entropies.push_back(token_entropy(make_model_output(logits)));
    }
    return profile;
}

// ----------------------------- generation -----------------------------

struct Generation {
    TokenSequence tokens;    // newly generated tokens only
    EntropyProfile profile;  // entries over prompt + generation positions
    std::int64_t prompt_len = 0;
};

// Greedy/temperature decoding. eos is suppressed before min_new_tokens and
// the sentinel id is never emitted; at temperature 0 ties go to the lowest
// token id. Deterministic given (model, prompt, cfg, seed).
template <typename S>
Generation generate_traced(const ToyLMT<S>& model, TokenView prompt,
                           const DecodeConfig& cfg, std::uint64_t seed) {
    if (cfg.max_new_tokens < 1 || cfg.min_new_tokens < 0 ||
        cfg.min_new_tokens > cfg.max_new_tokens || cfg.temperature < 0.0) {
        throw std::invalid_argument("generate: invalid decode config");
    }
    const Vocabulary& vocab = model.vocab();
    Rng rng(derive_seed(seed, 0x67656e65ull));

    Generation gen;
    gen.prompt_len = static_cast<std::int64_t>(prompt.size());

    typename ToyLMT<S>::Session session(model);
    auto record = [&](std::span<const S> logits) {
        gen.profile.positions.push_back(
            static_cast<std::int64_t>(gen.profile.positions.size()));
        gen.profile.entropies.push_back(token_entropy(make_model_output(logits)));
    };
    std::span<const S> logits = session.feed(vocab.eos_id);
    record(logits);
    for (Token t : prompt) {
        logits = session.feed(t);
        record(logits);
    }

    while (static_cast<int>(gen.tokens.size()) < cfg.max_new_tokens) {
        const bool eos_allowed =
            static_cast<int>(gen.tokens.size()) >= cfg.min_new_tokens;
        auto allowed = [&](Token t) {
            if (t == vocab.sentinel_id) return false;
            if (t == vocab.eos_id && !eos_allowed) return false;
            return true;
        };

        Token picked = -1;
        if (cfg.temperature == 0.0) {
            double best = -std::numeric_limits<double>::infinity();
            for (Token t = 0; t < static_cast<Token>(vocab.size); ++t) {
                if (!allowed(t)) continue;
                const double z = static_cast<double>(logits[static_cast<std::size_t>(t)]);
                if (z > best) {
                    best = z;
                    picked = t;
                }
            }
        } else {
            double max_z = -std::numeric_limits<double>::infinity();
            for (Token t = 0; t < static_cast<Token>(vocab.size); ++t) {
                if (!allowed(t)) continue;
                max_z = std::max(max_z,
                                 static_cast<double>(logits[static_cast<std::size_t>(t)]) /
                                     cfg.temperature);
            }
            double sum = 0.0;
            thread_local std::vector<double> weights;
            weights.assign(static_cast<std::size_t>(vocab.size), 0.0);
            for (Token t = 0; t < static_cast<Token>(vocab.size); ++t) {
                if (!allowed(t)) continue;
                const double w =
                    std::exp(static_cast<double>(logits[static_cast<std::size_t>(t)]) /
                                 cfg.temperature -
                             max_z);
                weights[static_cast<std::size_t>(t)] = w;
                sum += w;
            }
            const double r = rng.real01() * sum;
            double acc = 0.0;
            for (Token t = 0; t < static_cast<Token>(vocab.size); ++t) {
                if (weights[static_cast<std::size_t>(t)] == 0.0) continue;
                acc += weights[static_cast<std::size_t>(t)];
                picked = t;
                if (r < acc) break;
            }
        }

        if (picked == vocab.eos_id && cfg.stop_at_eos) break;
        gen.tokens.push_back(picked);
        if (static_cast<int>(gen.tokens.size()) == cfg.max_new_tokens) break;
        logits = session.feed(picked);
        record(logits);
    }
    // One entry per prompt+generated position; an eos stop leaves a trailing
    // entry past the sequence, dropped for profile consistency.
    const std::size_t want =
        static_cast<std::size_t>(gen.prompt_len) + gen.tokens.size();
    gen.profile.positions.resize(want);
    gen.profile.entropies.resize(want);
    return gen;
}

template <typename S>
TokenSequence generate(const ToyLMT<S>& model, TokenView prompt, const DecodeConfig& cfg,
                       std::uint64_t seed) {
    return generate_traced(model, prompt, cfg, seed).tokens;
}

// ----------------------------- loss -----------------------------

// Weighted next-token cross entropy over one forwarded sequence, in nats.
// When grads is non-null, d(loss * grad_scale)/d(theta) is accumulated into
// it (and the input-embedding gradient into d_input_emb when given).
template <typename S>
double sequence_loss_impl(const ToyLMT<S>& model, TokenView inputs, TokenView targets,
                          std::span<const S> weights, S grad_scale,
                          std::vector<S>* grads, std::vector<S>* d_input_emb = nullptr) {
    if (inputs.empty() || inputs.size() != targets.size() ||
        inputs.size() != weights.size()) {
        throw std::invalid_argument("sequence_loss: inputs/targets/weights mismatch");
    }
    const int v = model.vocab().size;
    for (Token t : targets) {
        if (!model.vocab().is_valid(t)) {
            throw std::invalid_argument("sequence_loss: target id out of vocabulary");
        }
    }
    thread_local typename ToyLMT<S>::Acts acts;
    model.forward_seq(inputs, acts);

    const int t_len = acts.t_len;
    thread_local std::vector<S> dlogits;
    if (grads) {
        dlogits.assign(static_cast<std::size_t>(t_len) * v, S(0));
    }

    double loss = 0.0;
    for (int t = 0; t < t_len; ++t) {
        const S w = weights[static_cast<std::size_t>(t)];
        if (w == S(0)) continue;
        const S* z = acts.logits.data() + static_cast<std::size_t>(t) * v;
        S max_z = z[0];
        for (int i = 1; i < v; ++i) max_z = std::max(max_z, z[i]);
        S sum = S(0);
        for (int i = 0; i < v; ++i) sum += std::exp(z[i] - max_z);
        const S lse = max_z + std::log(sum);
        const Token target = targets[static_cast<std::size_t>(t)];
        loss += static_cast<double>(w * (lse - z[target]));
        if (grads) {
            S* dl = dlogits.data() + static_cast<std::size_t>(t) * v;
            const S inv = S(1) / sum;
            const S scale = w * grad_scale;
            for (int i = 0; i < v; ++i) {
                dl[i] = std::exp(z[i] - max_z) * inv * scale;
            }
            dl[target] -= scale;
        }
    }
    if (grads) {
        model.backward_seq(inputs, acts, dlogits, *grads, d_input_emb);
    }
    return loss;
}

template <typename S>
double sequence_loss(const ToyLMT<S>& model, TokenView inputs, TokenView targets,
                     std::span<const S> weights) {
    return sequence_loss_impl<S>(model, inputs, targets, weights, S(1), nullptr);
}

// ----------------------------- uncertainty objectives -----------------------------

// Mean prediction entropy over the snippet positions, or the entropy of the
// distribution after the full snippet, in bits.
template <typename S>
double snippet_entropy_objective(const ToyLMT<S>& model, TokenView snippet,
                                 EntropyObjective objective) {
    if (snippet.empty()) {
        throw std::invalid_argument("snippet_entropy_objective: empty snippet");
    }
    if (objective == EntropyObjective::average_snippet_entropy) {
        const EntropyProfile profile = entropy_profile(model, snippet);
        double sum = 0.0;
        for (double e : profile.entropies) sum += e;
        return sum / static_cast<double>(profile.entropies.size());
    }
    return token_entropy(next_distribution(model, snippet));
}

// d(objective in bits)/d(one-hot input relaxation) per snippet position:
// result[t][u] is the gradient for substituting token u at position t.
// Throws when the model refuses gradient hints.
template <typename S>
std::vector<std::vector<double>> entropy_objective_input_gradients(
    const ToyLMT<S>& model, TokenView snippet, EntropyObjective objective) {
    if (!model.gradient_hints_enabled()) {
        throw std::runtime_error(
            "entropy_objective_input_gradients: model exposes no gradient hint; "
            "use the sampled proposal mode");
    }
    const int l_len = static_cast<int>(snippet.size());
    if (l_len < 1 || l_len + 1 > model.config().context_len) {
        throw std::invalid_argument(
            "entropy_objective_input_gradients: snippet does not fit the context");
    }
    const int v = model.vocab().size;
    const int d = model.config().d_model;
    constexpr double kLn2 = 0.6931471805599453;

    TokenSequence inputs;
    inputs.reserve(static_cast<std::size_t>(l_len) + 1);
    inputs.push_back(model.vocab().eos_id);
    inputs.insert(inputs.end(), snippet.begin(), snippet.end());

    thread_local typename ToyLMT<S>::Acts acts;
    model.forward_seq(inputs, acts);

    const int t_len = acts.t_len;
    std::vector<S> dlogits(static_cast<std::size_t>(t_len) * v, S(0));
    auto fill_row = [&](int row_index, double row_scale) {
        const S* z = acts.logits.data() + static_cast<std::size_t>(row_index) * v;
        const ModelOutput out = make_model_output(std::span<const S>(z, static_cast<std::size_t>(v)));
        double h_nats = 0.0;
        for (double p : out.probs) {
            if (p > 0.0) h_nats -= p * std::log(p);
        }
        S* dl = dlogits.data() + static_cast<std::size_t>(row_index) * v;
        for (int u = 0; u < v; ++u) {
            const double p = out.probs[static_cast<std::size_t>(u)];
            const double dh = p > 0.0 ? -p * (std::log(p) + h_nats) : 0.0;
            dl[u] = static_cast<S>(dh / kLn2 * row_scale);
        }
    };
    if (objective == EntropyObjective::average_snippet_entropy) {
        for (int r = 0; r < l_len; ++r) fill_row(r, 1.0 / l_len);
    } else {
        fill_row(l_len, 1.0);
    }

    std::vector<S> grads(model.parameters().size(), S(0));
    std::vector<S> d_emb;
    model.backward_seq(inputs, acts, dlogits, grads, &d_emb);

    std::vector<std::vector<double>> scores(static_cast<std::size_t>(l_len));
    for (int t = 0; t < l_len; ++t) {
        auto& row = scores[static_cast<std::size_t>(t)];
        row.resize(static_cast<std::size_t>(v));
        const S* dx = d_emb.data() + static_cast<std::size_t>(t + 1) * d;
        for (int u = 0; u < v; ++u) {
            row[static_cast<std::size_t>(u)] = static_cast<double>(
                detail::fixed_dot(dx, model.token_embedding_row(u).data(), d));
        }
    }
    return scores;
}

}  // namespace memaudit
