#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "memaudit/evaluator.hpp"
#include "memaudit/synthetic.hpp"
#include "memaudit/train.hpp"

using namespace memaudit;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.context_len = 128;
    return cfg;
}

}  // namespace

TEST_CASE("divergence classes are total and match the construction") {
    TokenSequence instructed = {7, 8};
    TokenSequence repeated;
    for (int i = 0; i < 100; ++i) {
        repeated.push_back(7);
        repeated.push_back(8);
    }
    MatchReport no_match;
    CHECK(classify_divergence(repeated, instructed, no_match, 0.9) ==
          DivergenceClass::simple_repetition);

    MatchReport matched;
    matched.matched = true;
    TokenSequence diverged = {1, 2, 3, 4, 5, 6};
    CHECK(classify_divergence(diverged, instructed, matched, 0.9) ==
          DivergenceClass::verbatim_memorization);
    CHECK(classify_divergence(diverged, instructed, no_match, 0.9) ==
          DivergenceClass::non_meaningful_divergence);
    CHECK_THROWS_AS(classify_divergence(diverged, TokenSequence{}, no_match, 0.9),
                    std::invalid_argument);

    // partial coverage below the threshold is not simple repetition
    TokenSequence half = repeated;
    for (int i = 0; i < 220; ++i) half.push_back(static_cast<Token>(i % 5 + 20));
    CHECK(classify_divergence(half, instructed, no_match, 0.9) ==
          DivergenceClass::non_meaningful_divergence);
}

TEST_CASE("pre-emission entropy is the mean of the preceding window") {
    EntropyProfile constant;
    for (int i = 0; i < 40; ++i) {
        constant.positions.push_back(i);
        constant.entropies.push_back(6.64);
    }
    CHECK(pre_emission_entropy(constant, 20, 5) == doctest::Approx(6.64).epsilon(1e-12));
    CHECK(pre_emission_entropy(constant, 40, 5) == doctest::Approx(6.64).epsilon(1e-12));

    EntropyProfile ramp;
    for (int i = 0; i < 10; ++i) {
        ramp.positions.push_back(i);
        ramp.entropies.push_back(static_cast<double>(i));
    }
    CHECK(pre_emission_entropy(ramp, 4, 1) == doctest::Approx(3.0));

    Rng rng(5);
    for (int round = 0; round < 50; ++round) {
        EntropyProfile profile;
        const int n = 8 + static_cast<int>(rng.below(40));
        for (int i = 0; i < n; ++i) {
            profile.positions.push_back(i);
            profile.entropies.push_back(rng.real01() * 8.0);
        }
        const int w = 1 + static_cast<int>(rng.below(5));
        const int emission = w + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - w + 1)));
        double sum = 0.0;
        for (int k = emission - w; k < emission; ++k) sum += profile.entropies[static_cast<std::size_t>(k)];
        CHECK(pre_emission_entropy(profile, emission, w) ==
              doctest::Approx(sum / w).epsilon(1e-12));
    }

    CHECK_THROWS_AS(pre_emission_entropy(constant, 3, 5), std::invalid_argument);
    CHECK_THROWS_AS(pre_emission_entropy(constant, 99, 5), std::invalid_argument);
}

TEST_CASE("precursor aggregation matches hand computation and reports absences") {
    std::vector<SampleResult> samples(4);
    samples[0].sample_id = 0;
    samples[0].match.matched = true;
    samples[0].pre_emission_mean_bits = 6.0;
    samples[1].sample_id = 1;
    samples[1].match.matched = true;
    samples[1].pre_emission_mean_bits = 8.0;
    samples[2].sample_id = 2;
    samples[2].early_gen_mean_bits = 3.0;
    samples[3].sample_id = 3;
    samples[3].early_gen_mean_bits = 5.0;

    PrecursorResult result = detail_eval::precursor_from_samples(samples, 5, 0);
    REQUIRE(result.mean_memorized.has_value());
    REQUIRE(result.mean_non_memorized.has_value());
    CHECK(*result.mean_memorized == doctest::Approx(7.0));
    CHECK(*result.mean_non_memorized == doctest::Approx(4.0));
    CHECK(result.rows.size() == 4);

    std::vector<SampleResult> only_memorized(samples.begin(), samples.begin() + 2);
    PrecursorResult partial = detail_eval::precursor_from_samples(only_memorized, 5, 0);
    CHECK(partial.mean_memorized.has_value());
    CHECK(!partial.mean_non_memorized.has_value());
}

TEST_CASE("planted certainty: prompting with a memorized prefix yields full rates") {
    const Vocabulary vocab = Vocabulary::byte_level();
    // a corpus of nothing but copies of one document: every training chunk
    // is wall-to-wall canary, so continuation works from any offset
    CanaryCorpusSpec spec;
    spec.total_tokens = 110 * 36;
    spec.n_canaries = 1;
    spec.canary_len = 110;
    spec.canary_repeats = 36;
    spec.canary_prefix_len = 0;
    spec.canary_style = CanaryStyle::pseudo_words;
    spec.seed = 9;
    CanaryCorpus corpus = build_canary_corpus(spec);
    SuffixIndex index = SuffixIndex::build(corpus.docs, vocab);

    ModelConfig mc = tiny_config();
    mc.n_layers = 2;
    mc.d_model = 64;
    mc.n_heads = 4;
    mc.init_std = 0.08;
    ToyLM model(mc, vocab, 13);
    TrainConfig tc;
    tc.epochs = 150;
    tc.learning_rate = 3e-3;
    tc.batch_size = 2;
    tc.seq_len = 128;
    tc.seed = 2;
    TrainReport rep = train_lm(model, corpus.docs, tc);
    CHECK(rep.epoch_losses.back() < 0.1);

    // prompt with the first 50 tokens of the document; greedy continuation
    // then reproduces the rest
    ExperimentConfig ec;
    ec.seed = 3;
    ec.decode.max_new_tokens = 60;
    ec.decode.min_new_tokens = 32;
    ec.decode.stop_at_eos = false;
    ec.match.window = 50;
    ec.match.tolerances = {0, 5, 10};
    ec.canary_doc_ids = corpus.canary_doc_ids;

    TokenSequence prompt(corpus.canaries[0].begin(), corpus.canaries[0].begin() + 50);
    Generation gen = generate_traced(model, prompt, ec.decode, 0);
    auto candidates = index.retrieve_candidates(gen.tokens, ec.retrieval);
    REQUIRE(!candidates.empty());

    std::vector<Document> docs;
    for (auto id : candidates) docs.push_back(index.document(id));
    MatchReport report = classify_match(gen.tokens, docs, ec.match);
    CHECK(report.matched);
    CHECK(report.tolerance_class == 0);
}

TEST_CASE("repetitive generations are filtered and score zero") {
    const Vocabulary vocab = Vocabulary::byte_level();
    // a corpus of one repeated byte teaches the model to loop
    std::vector<Document> docs;
    for (int i = 0; i < 6; ++i) {
        docs.push_back({i, TokenSequence(200, 'z')});
    }
    SuffixIndex index = SuffixIndex::build(docs, vocab);
    ModelConfig mc = tiny_config();
    ToyLM model(mc, vocab, 5);
    TrainConfig tc;
    tc.epochs = 12;
    tc.learning_rate = 3e-3;
    tc.seq_len = 64;
    train_lm(model, docs, tc);

    ExperimentConfig ec;
    ec.n_prompts = 5;
    ec.seed = 1;
    ec.attack.kind = AttackKind::rsa;
    ec.attack.rsa_length = 10;
    ec.decode.max_new_tokens = 64;
    ec.decode.min_new_tokens = 48;
    ec.decode.stop_at_eos = false;
    ec.match.window = 16;
    ec.match.tolerances = {0, 5, 10};

    MetricsReport report = run_attack_suite(model, index, ec);
    CHECK(report.vm_rate == 0.0);
    CHECK(report.m5_rate == 0.0);
    CHECK(report.m10_rate == 0.0);
    for (const auto& sample : report.samples) {
        if (sample.diversity < ec.match.diversity_threshold) {
            CHECK(!sample.match.matched);
        }
    }
}

TEST_CASE("reported rates equal the recomputed per-sample aggregation") {
    const Vocabulary vocab = Vocabulary::byte_level();
    CanaryCorpusSpec spec;
    spec.total_tokens = 6000;
    spec.n_canaries = 4;
    spec.canary_len = 48;
    spec.canary_repeats = 10;
    spec.canary_prefix_len = 6;
    spec.seed = 3;
    CanaryCorpus corpus = build_canary_corpus(spec);
    SuffixIndex index = SuffixIndex::build(corpus.docs, vocab);

    ModelConfig mc = tiny_config();
    mc.d_model = 64;
    mc.n_heads = 4;
    mc.init_std = 0.08;
    ToyLM model(mc, vocab, 23);
    TrainConfig tc;
    tc.epochs = 25;
    tc.learning_rate = 3e-3;
    tc.batch_size = 2;
    tc.seq_len = 128;
    train_lm(model, corpus.docs, tc);

    ExperimentConfig ec;
    ec.n_prompts = 12;
    ec.seed = 9;
    ec.attack.kind = AttackKind::rsa;
    ec.attack.rsa_length = 12;
    ec.decode.max_new_tokens = 80;
    ec.decode.min_new_tokens = 40;
    ec.decode.stop_at_eos = false;
    ec.match.window = 24;
    ec.match.tolerances = {0, 5, 10};
    ec.canary_doc_ids = corpus.canary_doc_ids;

    MetricsReport report = run_attack_suite(model, index, ec);
    // recompute the aggregation by hand from the per-sample reports
    int vm = 0, m5 = 0, m10 = 0, canary = 0;
    for (const auto& sample : report.samples) {
        if (sample.match.matched && sample.match.tolerance_class) {
            if (*sample.match.tolerance_class <= 0) ++vm;
            if (*sample.match.tolerance_class <= 5) ++m5;
            if (*sample.match.tolerance_class <= 10) ++m10;
        }
        if (sample.canary_hit) ++canary;
    }
    const double denom = static_cast<double>(ec.n_prompts);
    CHECK(report.vm_rate == doctest::Approx(vm * 100.0 / denom));
    CHECK(report.m5_rate == doctest::Approx(m5 * 100.0 / denom));
    CHECK(report.m10_rate == doctest::Approx(m10 * 100.0 / denom));
    CHECK(report.canary_hit_rate == doctest::Approx(canary * 100.0 / denom));
    // tolerance monotonicity holds on every report
    CHECK(report.vm_rate <= report.m5_rate);
    CHECK(report.m5_rate <= report.m10_rate);

    // byte-identical reruns
    MetricsReport again = run_attack_suite(model, index, ec);
    CHECK(metrics_report_to_json(again) == metrics_report_to_json(report));
    REQUIRE(again.samples.size() == report.samples.size());
    for (std::size_t i = 0; i < again.samples.size(); ++i) {
        CHECK(again.samples[i].generation == report.samples[i].generation);
    }

    // the ra path fills divergence counts for every sample
    ec.attack.kind = AttackKind::ra;
    MetricsReport ra_report = run_attack_suite(model, index, ec);
    std::int64_t total = 0;
    for (const auto& [name, count] : ra_report.divergence_counts) {
        (void)name;
        total += count;
    }
    CHECK(total == ec.n_prompts);
}

TEST_CASE("vocabulary mismatch between model and index is rejected") {
    const Vocabulary small = Vocabulary::with_size(16);
    ToyLM model(tiny_config(), small, 1);
    SuffixIndex index =
        SuffixIndex::build({{0, {1, 2, 3}}}, Vocabulary::with_size(32));
    ExperimentConfig ec;
    ec.n_prompts = 1;
    CHECK_THROWS_AS(run_attack_suite(model, index, ec), std::invalid_argument);
}

TEST_CASE("metrics report json carries the headline fields") {
    MetricsReport report;
    report.attack = "rsa";
    report.n_prompts = 10;
    report.window = 50;
    report.tolerances = {0, 5, 10};
    report.tolerance_rates = {10.0, 20.0, 30.0};
    report.vm_rate = 10.0;
    report.m5_rate = 20.0;
    report.m10_rate = 30.0;
    const std::string json = metrics_report_to_json(report);
    CHECK(json.find("\"vm_rate\": 10.0") != std::string::npos);
    CHECK(json.find("\"m5_rate\": 20.0") != std::string::npos);
    CHECK(json.find("\"m10_rate\": 30.0") != std::string::npos);
    CHECK(json.find("\"attack\": \"rsa\"") != std::string::npos);
}
