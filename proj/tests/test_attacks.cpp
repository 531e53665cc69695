#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "memaudit/attacks.hpp"
#include "memaudit/matcher.hpp"
#include "memaudit/synthetic.hpp"
#include "memaudit/train.hpp"

using namespace memaudit;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 1;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.context_len = 64;
    return cfg;
}

// chi-squared upper tail critical values at alpha = 0.01
double chi2_crit(int df) {
    static const std::map<int, double> table = {{7, 18.475}, {15, 30.578}};
    return table.at(df);
}

}  // namespace

TEST_CASE("repetition prompt renders the instruction text") {
    const Vocabulary vocab = Vocabulary::byte_level();
    AttackSnippet snippet = repetition_prompt(encode_text("Debug"), 50, vocab);
    CHECK(decode_text(snippet.tokens, vocab) == "Repeat \"Debug\" 50 times.");
    AttackSnippet again = repetition_prompt(encode_text("Debug"), 50, vocab);
    CHECK(snippet.tokens == again.tokens);
    CHECK_THROWS_AS(repetition_prompt(TokenSequence{}, 50, vocab), std::invalid_argument);
}

TEST_CASE("eos prompt is n end-of-sequence ids") {
    const Vocabulary vocab = Vocabulary::byte_level();
    CHECK(eos_prompt(1, vocab).tokens == TokenSequence{vocab.eos_id});
    AttackSnippet twenty = eos_prompt(20, vocab);
    CHECK(twenty.tokens.size() == 20);
    for (Token t : twenty.tokens) CHECK(t == vocab.eos_id);
    CHECK(diversity_score(twenty.tokens) == doctest::Approx(1.0 / 20.0).epsilon(1e-12));
    CHECK_THROWS_AS(eos_prompt(0, vocab), std::invalid_argument);
}

TEST_CASE("rwa snippet on a span-length document is forced") {
    std::vector<Document> corpus = {{0, {9, 8, 7, 6, 5}}};
    AttackSnippet snippet = rwa_snippet(corpus, 5, 3);
    CHECK(snippet.tokens == TokenSequence{9, 8, 7, 6, 5});
    CHECK(rwa_snippet(corpus, 5, 3).tokens == snippet.tokens);
    CHECK_THROWS_AS(rwa_snippet(corpus, 6, 0), std::invalid_argument);
}

TEST_CASE("rwa span starts are uniform by a chi-squared test") {
    // a single 12-token document leaves 8 possible 5-token span starts
    std::vector<Document> corpus = {{0, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}}};
    std::vector<std::int64_t> counts(8, 0);
    const int draws = 10000;
    for (int s = 0; s < draws; ++s) {
        AttackSnippet snippet = rwa_snippet(corpus, 5, static_cast<std::uint64_t>(s));
        ++counts[static_cast<std::size_t>(snippet.tokens[0] - 1)];
    }
    const double expect = draws / 8.0;
    double chi2 = 0.0;
    for (std::int64_t c : counts) {
        chi2 += (c - expect) * (c - expect) / expect;
    }
    CHECK(chi2 < chi2_crit(7));
}

TEST_CASE("rsa snippets stay inside the non-reserved vocabulary") {
    const Vocabulary vocab = Vocabulary::byte_level();
    AttackSnippet snippet = rsa_snippet(vocab, 20, 5);
    CHECK(snippet.tokens.size() == 20);
    for (Token t : snippet.tokens) {
        CHECK(t >= 0);
        CHECK(t < vocab.size);
        CHECK(!vocab.is_reserved(t));
    }
    CHECK(rsa_snippet(vocab, 20, 5).tokens == snippet.tokens);
}

TEST_CASE("rsa per-position marginals are uniform by a chi-squared test") {
    const Vocabulary vocab = Vocabulary::with_size(18);  // 16 regular ids
    const int draws = 10000;
    std::vector<std::int64_t> counts(16, 0);
    for (int s = 0; s < draws; ++s) {
        AttackSnippet snippet = rsa_snippet(vocab, 3, static_cast<std::uint64_t>(s));
        ++counts[static_cast<std::size_t>(snippet.tokens[1])];
    }
    const double expect = draws / 16.0;
    double chi2 = 0.0;
    for (std::int64_t c : counts) {
        chi2 += (c - expect) * (c - expect) / expect;
    }
    CHECK(chi2 < chi2_crit(15));
}

TEST_CASE("cia objective on a uniform model is the full log2 vocabulary") {
    const Vocabulary vocab = Vocabulary::with_size(256);
    ToyLM model(tiny_config(), vocab, 1);  // zeroed head: uniform everywhere
    AttackSnippet snippet = rsa_snippet(vocab, 6, 2);
    CHECK(std::abs(cia_objective(model, snippet,
                                 EntropyObjective::average_snippet_entropy) -
                   8.0) < 1e-9);
    CHECK(std::abs(cia_objective(model, snippet, EntropyObjective::last_token_entropy) -
                   8.0) < 1e-9);
}

TEST_CASE("average objective of a length-1 snippet is the empty-context entropy") {
    const Vocabulary vocab = Vocabulary::with_size(32);
    ModelConfig cfg = tiny_config();
    cfg.zero_init_head = false;
    ToyLM model(cfg, vocab, 7);
    AttackSnippet one;
    one.tokens = {5};
    const double objective =
        cia_objective(model, one, EntropyObjective::average_snippet_entropy);
    const double direct = token_entropy(next_distribution(model, TokenSequence{}));
    CHECK(objective == direct);
}

TEST_CASE("average objective equals the entropy-profile mean") {
    const Vocabulary vocab = Vocabulary::with_size(40);
    ModelConfig cfg = tiny_config();
    cfg.zero_init_head = false;
    ToyLM model(cfg, vocab, 3);
    Rng rng(9);
    for (int round = 0; round < 20; ++round) {
        AttackSnippet snippet = rsa_snippet(vocab, 1 + static_cast<int>(rng.below(12)),
                                            rng.next_u64());
        EntropyProfile profile = entropy_profile(model, snippet.tokens);
        double mean = 0.0;
        for (double e : profile.entropies) mean += e;
        mean /= static_cast<double>(profile.entropies.size());
        const double objective =
            cia_objective(model, snippet, EntropyObjective::average_snippet_entropy);
        CHECK(std::abs(objective - mean) < 1e-9);
        CHECK(objective <= std::log2(static_cast<double>(vocab.size)) + 1e-9);
    }
}

TEST_CASE("cia optimize with zero steps returns the init and its objective") {
    const Vocabulary vocab = Vocabulary::with_size(24);
    ToyLM model(tiny_config(), vocab, 1);
    AttackSnippet init = rsa_snippet(vocab, 5, 8);
    CIAConfig cfg;
    cfg.steps = 0;
    cfg.top_k = 8;
    auto [out, trace] = cia_optimize(model, init, cfg);
    CHECK(out.tokens == init.tokens);
    REQUIRE(trace.size() == 1);
    CHECK(trace[0] ==
          cia_objective(model, init, EntropyObjective::average_snippet_entropy));
}

TEST_CASE("cia optimize on a uniform model never moves") {
    const Vocabulary vocab = Vocabulary::with_size(16);
    ToyLM model(tiny_config(), vocab, 1);  // uniform: objective already maximal
    AttackSnippet init = rsa_snippet(vocab, 4, 3);
    CIAConfig cfg;
    cfg.steps = 10;
    cfg.top_k = 8;
    cfg.candidates_per_step = 8;
    cfg.proposal = ProposalMode::sampled;
    auto [out, trace] = cia_optimize(model, init, cfg);
    CHECK(out.tokens == init.tokens);
    for (double v : trace) CHECK(std::abs(v - 4.0) < 1e-9);  // log2 16
}

TEST_CASE("cia traces are non-decreasing and seeded runs reproduce") {
    const Vocabulary vocab = Vocabulary::with_size(32);
    ModelConfig cfg_model = tiny_config();
    cfg_model.zero_init_head = false;
    ToyLM model(cfg_model, vocab, 17);
    // brief training so the entropy landscape is non-trivial
    std::vector<Document> corpus;
    Rng rng(2);
    for (int i = 0; i < 4; ++i) {
        Document doc;
        doc.doc_id = i;
        for (int j = 0; j < 30; ++j) doc.tokens.push_back(static_cast<Token>(rng.below(30)));
        corpus.push_back(std::move(doc));
    }
    TrainConfig tc;
    tc.epochs = 30;
    tc.learning_rate = 3e-3;
    train_lm(model, corpus, tc);

    for (auto proposal : {ProposalMode::sampled, ProposalMode::gradient_guided}) {
        CIAConfig cfg;
        cfg.steps = 12;
        cfg.candidates_per_step = 16;
        cfg.top_k = 8;
        cfg.proposal = proposal;
        cfg.seed = 77;
        AttackSnippet init = rsa_snippet(vocab, 6, 5);
        auto [out, trace] = cia_optimize(model, init, cfg);
        REQUIRE(trace.size() == 13);
        for (std::size_t i = 1; i < trace.size(); ++i) {
            CHECK(trace[i] >= trace[i - 1]);
        }
        CHECK(trace.back() >= trace.front());
        auto [out2, trace2] = cia_optimize(model, init, cfg);
        CHECK(out.tokens == out2.tokens);
        CHECK(trace == trace2);
        // optimized snippets stay legal
        for (Token t : out.tokens) CHECK(!vocab.is_reserved(t));
    }
}

TEST_CASE("gradient-guided proposals require the model hint") {
    const Vocabulary vocab = Vocabulary::with_size(24);
    ToyLM model(tiny_config(), vocab, 1);
    model.set_gradient_hints_enabled(false);
    AttackSnippet init = rsa_snippet(vocab, 4, 1);
    CIAConfig cfg;
    cfg.steps = 2;
    cfg.top_k = 8;
    CHECK_THROWS_AS(cia_optimize(model, init, cfg), std::runtime_error);
    cfg.proposal = ProposalMode::sampled;  // degrades gracefully
    auto [out, trace] = cia_optimize(model, init, cfg);
    CHECK(trace.size() == 3);
}

TEST_CASE("mismatched dataset rotates answers after dedup") {
    std::vector<QaPair> qa = {
        {"question zero long enough?", std::string(60, 'a')},
        {"question one long enough??", std::string(60, 'b')},
        {"question zero long enough?", std::string(60, 'X')},  // dup, dropped
        {"question two long enough??", std::string(60, 'c')},
    };
    MismatchedDataset dataset = build_mismatched_dataset(qa, 1);
    REQUIRE(dataset.pairs.size() == 3);
    CHECK(dataset.pairs[0].question == qa[0].question);
    CHECK(dataset.pairs[0].answer == std::string(60, 'b'));
    CHECK(dataset.pairs[1].answer == std::string(60, 'c'));
    CHECK(dataset.pairs[2].answer == std::string(60, 'a'));  // wrap-around
    CHECK(dataset.pairs[0].source_i == 0);
    CHECK(dataset.pairs[0].source_j == 1);
    // pure function
    MismatchedDataset again = build_mismatched_dataset(qa, 1);
    REQUIRE(again.pairs.size() == dataset.pairs.size());
    for (std::size_t i = 0; i < again.pairs.size(); ++i) {
        CHECK(again.pairs[i].question == dataset.pairs[i].question);
        CHECK(again.pairs[i].answer == dataset.pairs[i].answer);
    }
}

TEST_CASE("length filters drop short questions and answers after shifting") {
    std::vector<QaPair> qa = {
        {"short q?", std::string(60, 'a')},              // 8 chars: dropped
        {"long enough question", std::string(60, 'b')},
        {"another long question", std::string(10, 'c')},  // its shifted answer decides
    };
    // shift 1: q0 gets a1 (60 chars) but q0 is 8 chars -> dropped
    //          q1 gets a2 (10 chars) -> dropped by answer filter
    //          q2 gets a0 (60 chars) -> kept
    MismatchedDataset dataset = build_mismatched_dataset(qa, 1);
    REQUIRE(dataset.pairs.size() == 1);
    CHECK(dataset.pairs[0].question == "another long question");
    CHECK(dataset.pairs[0].answer == std::string(60, 'a'));
    CHECK_THROWS_AS(build_mismatched_dataset({{"q?", "a"}}, 1), std::runtime_error);
    CHECK_THROWS_AS(build_mismatched_dataset({}, 1), std::invalid_argument);
}

TEST_CASE("mismatched jsonl uses the instruction/input/output record shape") {
    MismatchedDataset dataset;
    dataset.pairs.push_back(MismatchedPair{"why?", "because of reasons", 0, 1});
    const std::string path = "test_mismatched.jsonl";
    save_mismatched_jsonl(dataset, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line ==
          R"({"input":"","instruction":"why?","output":"because of reasons"})");
    auto loaded = load_qa_jsonl(path);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].question == "why?");
    CHECK(loaded[0].answer == "because of reasons");
    std::filesystem::remove(path);
}

TEST_CASE("mismatched sft shifts probability mass toward the shifted answers") {
    const Vocabulary vocab = Vocabulary::byte_level();
    ModelConfig cfg = tiny_config();
    cfg.context_len = 128;
    ToyLM model(cfg, vocab, 41);

    auto qa = make_qa_pairs(12, 3);
    MismatchedDataset dataset = build_mismatched_dataset(qa, 1);
    REQUIRE(!dataset.pairs.empty());

    // log P(a'_i | q_i) before vs after
    auto mean_logp = [&](const ToyLM& m) {
        double sum = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < std::min<std::size_t>(4, dataset.pairs.size()); ++i) {
            TokenSequence q = encode_text(dataset.pairs[i].question);
            q.push_back('\n');
            TokenSequence a = encode_text(dataset.pairs[i].answer);
            a.resize(std::min<std::size_t>(a.size(), 60));
            sum += target_log_prob(m, q, a);
            ++n;
        }
        return sum / n;
    };
    const double before = mean_logp(model);

    TrainConfig tc;
    tc.epochs = 25;
    tc.learning_rate = 2e-3;
    tc.seed = 4;
    TrainReport report = mismatched_sft(model, dataset, tc);
    CHECK(report.epoch_losses.back() < report.epoch_losses.front());
    const double after = mean_logp(model);
    CHECK(after > before);

    MismatchedDataset empty;
    CHECK_THROWS_AS(mismatched_sft(model, empty, tc), std::invalid_argument);
}

TEST_CASE("attack registry round trips and rejects unknown names") {
    for (const auto& name : attack_registry()) {
        CHECK(attack_name(parse_attack_name(name)) == name);
    }
    try {
        parse_attack_name("nope");
        FAIL("expected an error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("rsa") != std::string::npos);
    }
}

TEST_CASE("per-sample snippets are reproducible across calls") {
    const Vocabulary vocab = Vocabulary::byte_level();
    ToyLM model(tiny_config(), vocab, 1);
    std::vector<Document> pub = {{0, {1, 2, 3, 4, 5, 6, 7, 8}}};
    for (const auto& name : {"ra", "ea", "rwa", "rsa"}) {
        AttackParams params;
        params.kind = parse_attack_name(name);
        AttackSnippet a = make_attack_snippet(params, model, pub, 42);
        AttackSnippet b = make_attack_snippet(params, model, pub, 42);
        CHECK(a.tokens == b.tokens);
        CHECK(!a.tokens.empty());
    }
    // different seeds give different ra words eventually
    AttackParams ra;
    ra.kind = AttackKind::ra;
    bool differs = false;
    AttackSnippet first = make_attack_snippet(ra, model, pub, 0);
    for (std::uint64_t s = 1; s < 16 && !differs; ++s) {
        differs = make_attack_snippet(ra, model, pub, s).tokens != first.tokens;
    }
    CHECK(differs);
}
