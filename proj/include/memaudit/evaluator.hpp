#pragma once

#include <map>
#include <optional>

#include "memaudit/attacks.hpp"
#include "memaudit/corpus_index.hpp"
#include "memaudit/matcher.hpp"

namespace memaudit {

enum class DivergenceClass {
    simple_repetition,
    verbatim_memorization,
    non_meaningful_divergence,
};

std::string divergence_name(DivergenceClass c);

struct ExperimentConfig {
    int n_prompts = 200;
    AttackParams attack;
    DecodeConfig decode;
    MatchConfig match;
    RetrievalConfig retrieval;
    double rep_threshold = 0.9;
    int precursor_window = 5;
    std::uint64_t seed = 0;
    std::vector<std::int64_t> canary_doc_ids;  // manifest: planted documents
};

struct SampleResult {
    int sample_id = 0;
    AttackSnippet snippet;
    TokenSequence generation;
    double diversity = 0.0;
    MatchReport match;
    bool canary_hit = false;
    std::optional<DivergenceClass> divergence;       // repetition attacks only
    std::optional<double> pre_emission_mean_bits;    // memorized samples
    std::optional<double> early_gen_mean_bits;       // first-w generated tokens
    EntropyProfile profile;                          // prompt + generation positions
};

struct MetricsReport {
    std::string attack;
    int n_prompts = 0;
    std::uint64_t seed = 0;
    int window = 0;
    std::vector<int> tolerances;
    // Cumulative match rates in percent, parallel to tolerances; the usual
    // three names map onto tolerances {0, 5, 10}.
    std::vector<double> tolerance_rates;
    double vm_rate = 0.0;
    double m5_rate = 0.0;
    double m10_rate = 0.0;
    double canary_hit_rate = 0.0;
    std::map<std::string, std::int64_t> divergence_counts;
    std::vector<SampleResult> samples;
};

// One generation classified against the repetition instruction: mostly
// instructed copies -> simple repetition; otherwise a corpus match decides
// between verbatim memorization and non-meaningful divergence.
DivergenceClass classify_divergence(TokenView generation, TokenView instructed,
                                    const MatchReport& match, double rep_threshold);

// Mean entropy (bits) over the w profile entries before emission_start.
double pre_emission_entropy(const EntropyProfile& profile, std::int64_t emission_start,
                            int w);

struct PrecursorRow {
    int sample_id = 0;
    bool memorized = false;
    double mean_entropy_bits = 0.0;
};

struct PrecursorResult {
    std::optional<double> mean_memorized;
    std::optional<double> mean_non_memorized;
    std::vector<PrecursorRow> rows;
};

// ----------------------------- serialization -----------------------------

std::string metrics_report_to_json(const MetricsReport& report);
void save_metrics_report(const MetricsReport& report, const std::string& json_path,
                         const std::string& jsonl_sidecar_path);
void save_entropy_csv(const MetricsReport& report, const std::string& path);
void save_precursor_csv(const PrecursorResult& result, const std::string& path);

// ----------------------------- suite -----------------------------

namespace detail_eval {

MetricsReport aggregate_samples(std::vector<SampleResult> samples,
                                const ExperimentConfig& cfg);
PrecursorResult precursor_from_samples(const std::vector<SampleResult>& samples, int w,
                                       std::int64_t prompt_positions_required);

}  // namespace detail_eval

// Runs every per-sample stage: snippet construction, decoding, candidate
// retrieval, match classification, divergence labeling and entropy
// bookkeeping. Deterministic under (model, index, cfg); samples run
// concurrently against the immutable model snapshot.
template <typename S>
std::vector<SampleResult> run_samples(const ToyLMT<S>& model, const SuffixIndex& index,
                                      const ExperimentConfig& cfg) {
    if (cfg.n_prompts < 1) {
        throw std::invalid_argument("run_samples: n_prompts must be >= 1");
    }
    if (model.vocab().size != index.vocab_size()) {
        throw std::invalid_argument(
            "run_samples: model and index vocabulary sizes differ");
    }
    std::vector<Document> public_docs;
    if (cfg.attack.kind == AttackKind::rwa) {
        public_docs = index.documents();
    }

    std::vector<SampleResult> samples(static_cast<std::size_t>(cfg.n_prompts));
    parallel_for(0, cfg.n_prompts, [&](std::int64_t i) {
        SampleResult& sample = samples[static_cast<std::size_t>(i)];
        sample.sample_id = static_cast<int>(i);
        const std::uint64_t sample_seed =
            derive_seed(cfg.seed, 0x70726d70ull + static_cast<std::uint64_t>(i));

        sample.snippet =
            make_attack_snippet(cfg.attack, model, public_docs, sample_seed);
        Generation gen =
            generate_traced(model, sample.snippet.tokens, cfg.decode, sample_seed);
        sample.generation = std::move(gen.tokens);
        sample.profile = std::move(gen.profile);
        sample.diversity =
            sample.generation.empty() ? 0.0 : diversity_score(sample.generation);

        if (!sample.generation.empty()) {
            const auto candidate_ids =
                index.retrieve_candidates(sample.generation, cfg.retrieval);
            std::vector<Document> candidates;
            candidates.reserve(candidate_ids.size());
            for (std::int64_t id : candidate_ids) {
                candidates.push_back(index.document(id));
            }
            sample.match = classify_match(sample.generation, candidates, cfg.match);
        }
        if (sample.match.matched) {
            for (std::int64_t id : cfg.canary_doc_ids) {
                if (id == sample.match.doc_id) {
                    sample.canary_hit = true;
                    break;
                }
            }
        }
        if (cfg.attack.kind == AttackKind::ra && !sample.generation.empty()) {
            const std::string word = repetition_word_for_seed(sample_seed);
            sample.divergence = classify_divergence(
                sample.generation, encode_text(word), sample.match, cfg.rep_threshold);
        }

        const std::int64_t prompt_len = static_cast<std::int64_t>(sample.snippet.tokens.size());
        const int w = cfg.precursor_window;
        if (sample.match.matched) {
            const std::int64_t emission = prompt_len + sample.match.gen_span.start;
            if (emission >= w) {
                sample.pre_emission_mean_bits =
                    pre_emission_entropy(sample.profile, emission, w);
            }
        }
        if (static_cast<std::int64_t>(sample.profile.entropies.size()) >= prompt_len + w) {
            double sum = 0.0;
            for (int k = 0; k < w; ++k) {
                sum += sample.profile.entropies[static_cast<std::size_t>(prompt_len + k)];
            }
            sample.early_gen_mean_bits = sum / w;
        }
    });
    return samples;
}

template <typename S>
MetricsReport run_attack_suite(const ToyLMT<S>& model, const SuffixIndex& index,
                               const ExperimentConfig& cfg) {
    return detail_eval::aggregate_samples(run_samples(model, index, cfg), cfg);
}

// Appendix-style precursor statistic: the mean pre-emission entropy over
// memorized samples against the early-generation mean over non-memorized
// ones. Empty partitions report an absent mean.
template <typename S>
PrecursorResult precursor_study(const ToyLMT<S>& model, const SuffixIndex& index,
                                const ExperimentConfig& cfg, int w) {
    ExperimentConfig run_cfg = cfg;
    run_cfg.precursor_window = w;
    const auto samples = run_samples(model, index, run_cfg);
    return detail_eval::precursor_from_samples(samples, w, 0);
}

}  // namespace memaudit
