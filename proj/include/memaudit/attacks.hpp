#pragma once

#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "memaudit/corpus_index.hpp"
#include "memaudit/lm_ops.hpp"
#include "memaudit/train.hpp"
#include "memaudit/vocab.hpp"

namespace memaudit {

// ----------------------------- snippets -----------------------------

struct AttackSnippet {
    TokenSequence tokens;
    std::string provenance;  // attack name, seed, optimization summary
};

enum class ProposalMode { gradient_guided, sampled };

struct CIAConfig {
    int steps = 200;
    int top_k = 64;
    int candidates_per_step = 256;
    int init_length = 20;  // random-init snippet length
    EntropyObjective objective = EntropyObjective::average_snippet_entropy;
    ProposalMode proposal = ProposalMode::gradient_guided;
    std::uint64_t seed = 0;
};

// `Repeat "<word>" <n> times.` rendered as text and byte-tokenized; the
// instructed copies themselves are not included.
AttackSnippet repetition_prompt(TokenView word, int repeat_hint, const Vocabulary& vocab);

// n end-of-sequence ids.
AttackSnippet eos_prompt(int n, const Vocabulary& vocab);

// Uniformly random span_len-token span from a uniformly random eligible
// document of the public corpus.
AttackSnippet rwa_snippet(const std::vector<Document>& public_corpus, int span_len,
                          std::uint64_t seed);

// i.i.d. uniform draws over the non-reserved vocabulary.
AttackSnippet rsa_snippet(const Vocabulary& vocab, int length, std::uint64_t seed);

// Word pool for per-sample repetition prompts.
const std::vector<std::string>& repetition_word_pool();
std::string repetition_word_for_seed(std::uint64_t seed);

// ----------------------------- CIA -----------------------------

// Entropy objective of a snippet in bits (Lm-side implementation; exposed
// under the attack-facing name).
template <typename S>
double cia_objective(const ToyLMT<S>& model, const AttackSnippet& snippet,
                     EntropyObjective objective) {
    return snippet_entropy_objective(model, snippet.tokens, objective);
}

// Greedy coordinate optimization of the snippet against the entropy
// objective. Each round proposes candidate single-token substitutions
// (gradient-ranked top-k pools or uniform draws), evaluates them exactly,
// and accepts the best candidate only on strict improvement, which makes
// the returned trace non-decreasing. trace[0] is the initial objective and
// one entry follows per round.
template <typename S>
std::pair<AttackSnippet, std::vector<double>> cia_optimize(const ToyLMT<S>& model,
                                                           const AttackSnippet& init,
                                                           const CIAConfig& cfg) {
    const Vocabulary& vocab = model.vocab();
    if (init.tokens.empty()) {
        throw std::invalid_argument("cia_optimize: empty init snippet");
    }
    for (Token t : init.tokens) {
        if (!vocab.is_valid(t) || vocab.is_reserved(t)) {
            throw std::invalid_argument("cia_optimize: init contains reserved/invalid ids");
        }
    }
    if (cfg.steps < 0 || cfg.candidates_per_step < 1 || cfg.top_k < 1 ||
        cfg.top_k > vocab.size) {
        throw std::invalid_argument("cia_optimize: invalid config");
    }
    if (cfg.proposal == ProposalMode::gradient_guided && !model.gradient_hints_enabled()) {
        throw std::runtime_error(
            "cia_optimize: gradient_guided proposals need a model gradient hint; "
            "switch the proposal mode to sampled");
    }

    std::vector<Token> pool;
    pool.reserve(static_cast<std::size_t>(vocab.size));
    for (Token t = 0; t < static_cast<Token>(vocab.size); ++t) {
        if (!vocab.is_reserved(t)) pool.push_back(t);
    }
    const int top_k = std::min<int>(cfg.top_k, static_cast<int>(pool.size()));
    const std::size_t l_len = init.tokens.size();

    Rng rng(derive_seed(cfg.seed, 0x636961ull));
    TokenSequence current = init.tokens;
    double current_obj = snippet_entropy_objective(model, current, cfg.objective);
    const double initial_obj = current_obj;
    std::vector<double> trace;
    trace.reserve(static_cast<std::size_t>(cfg.steps) + 1);
    trace.push_back(current_obj);

    std::vector<std::pair<int, Token>> proposals(
        static_cast<std::size_t>(cfg.candidates_per_step));
    std::vector<double> scores(proposals.size());
    std::vector<std::vector<Token>> top_tokens;

    for (int step = 0; step < cfg.steps; ++step) {
        if (cfg.proposal == ProposalMode::gradient_guided) {
            const auto grads =
                entropy_objective_input_gradients(model, current, cfg.objective);
            top_tokens.assign(l_len, {});
            for (std::size_t pos = 0; pos < l_len; ++pos) {
                std::vector<Token> order = pool;
                const auto& g = grads[pos];
                std::sort(order.begin(), order.end(), [&](Token a, Token b) {
                    const double ga = g[static_cast<std::size_t>(a)];
                    const double gb = g[static_cast<std::size_t>(b)];
                    if (ga != gb) return ga > gb;
                    return a < b;
                });
                order.resize(static_cast<std::size_t>(top_k));
                top_tokens[pos] = std::move(order);
            }
        }
        for (auto& [pos, tok] : proposals) {
            pos = static_cast<int>(rng.below(l_len));
            if (cfg.proposal == ProposalMode::gradient_guided) {
                tok = top_tokens[static_cast<std::size_t>(pos)]
                                [rng.below(static_cast<std::uint64_t>(top_k))];
            } else {
                tok = pool[rng.below(pool.size())];
            }
        }

        parallel_for(0, static_cast<std::int64_t>(proposals.size()), [&](std::int64_t c) {
            thread_local TokenSequence candidate;
            candidate = current;
            candidate[static_cast<std::size_t>(proposals[static_cast<std::size_t>(c)].first)] =
                proposals[static_cast<std::size_t>(c)].second;
            scores[static_cast<std::size_t>(c)] =
                snippet_entropy_objective(model, candidate, cfg.objective);
        });

        std::size_t best = 0;
        for (std::size_t c = 1; c < scores.size(); ++c) {
            if (scores[c] > scores[best]) best = c;
        }
        if (scores[best] > current_obj) {
            current[static_cast<std::size_t>(proposals[best].first)] = proposals[best].second;
            current_obj = scores[best];
        }
        trace.push_back(current_obj);
    }

    char summary[160];
    std::snprintf(summary, sizeof(summary),
                  "cia seed=%llu steps=%d proposal=%s obj=%.6f->%.6f bits",
                  static_cast<unsigned long long>(cfg.seed), cfg.steps,
                  cfg.proposal == ProposalMode::gradient_guided ? "grad" : "sampled",
                  initial_obj, current_obj);
    AttackSnippet out;
    out.tokens = std::move(current);
    out.provenance = summary;
    return {std::move(out), std::move(trace)};
}

void save_trace_csv(const std::vector<double>& trace, const std::string& path);

// ----------------------------- mismatched SFT -----------------------------

struct QaPair {
    std::string question;
    std::string answer;
};

struct MismatchedPair {
    std::string question;
    std::string answer;          // shifted, originally someone else's
    std::int64_t source_i = 0;   // index in the deduplicated list
    std::int64_t source_j = 0;   // index the answer came from
};

struct MismatchedDataset {
    std::vector<MismatchedPair> pairs;
};

// Dedup questions (keeping the first answer), rotate answers by shift, then
// filter to length(question) >= min_q_chars and length(answer) >= min_a_chars.
// Order follows the deduplicated input.
MismatchedDataset build_mismatched_dataset(const std::vector<QaPair>& qa, int shift,
                                           int min_q_chars = 10, int min_a_chars = 50);

// JSON-lines of {"instruction": q, "input": "", "output": a}.
void save_mismatched_jsonl(const MismatchedDataset& dataset, const std::string& path);
std::vector<QaPair> load_qa_jsonl(const std::string& path);

// Tokenizes instruction/output records into raw SFT pairs: prompt is the
// question plus a newline, target the answer plus eos; no chat template.
// Over-long records are clipped to the model context.
std::vector<std::pair<TokenSequence, TokenSequence>> tokenize_qa_for_sft(
    const std::vector<QaPair>& records, const Vocabulary& vocab, int context_len);

template <typename S>
TrainReport mismatched_sft(ToyLMT<S>& model, const MismatchedDataset& dataset,
                           const TrainConfig& cfg) {
    if (dataset.pairs.empty()) {
        throw std::invalid_argument("mismatched_sft: empty dataset");
    }
    std::vector<QaPair> records;
    records.reserve(dataset.pairs.size());
    for (const auto& p : dataset.pairs) {
        records.push_back(QaPair{p.question, p.answer});
    }
    const auto pairs =
        tokenize_qa_for_sft(records, model.vocab(), model.config().context_len);
    return sft(model, pairs, cfg);
}

// ----------------------------- registry -----------------------------

enum class AttackKind { ra, ea, rwa, rsa, cia };

AttackKind parse_attack_name(const std::string& name);
std::string attack_name(AttackKind kind);
const std::vector<std::string>& attack_registry();

struct AttackParams {
    AttackKind kind = AttackKind::rsa;
    int ra_repeat_hint = 50;
    int ea_n = 20;
    int rwa_span_len = 5;
    int rsa_length = 20;
    CIAConfig cia;
};

// Per-sample snippet construction; sample_seed individualizes prompts
// within an experiment (RA cycles its word pool, RWA/RSA draw fresh spans,
// CIA optimizes from a fresh random init).
template <typename S>
AttackSnippet make_attack_snippet(const AttackParams& params, const ToyLMT<S>& model,
                                  const std::vector<Document>& public_docs,
                                  std::uint64_t sample_seed) {
    const Vocabulary& vocab = model.vocab();
    switch (params.kind) {
        case AttackKind::ra: {
            const std::string word = repetition_word_for_seed(sample_seed);
            return repetition_prompt(encode_text(word), params.ra_repeat_hint, vocab);
        }
        case AttackKind::ea:
            return eos_prompt(params.ea_n, vocab);
        case AttackKind::rwa:
            return rwa_snippet(public_docs, params.rwa_span_len, sample_seed);
        case AttackKind::rsa:
            return rsa_snippet(vocab, params.rsa_length, sample_seed);
        case AttackKind::cia: {
            CIAConfig cfg = params.cia;
            cfg.seed = derive_seed(sample_seed, 0x63696173ull);
            // same draw as the rsa attack: a zero-step cia degenerates to rsa
            AttackSnippet init = rsa_snippet(vocab, cfg.init_length, sample_seed);
            return cia_optimize(model, init, cfg).first;
        }
    }
    throw std::invalid_argument("make_attack_snippet: unknown attack kind");
}

}  // namespace memaudit
