// memaudit-datagen: seeded synthetic inputs for desk-scale experiments.
// `corpus` emits a filler corpus with planted canaries plus its manifest;
// `qa` emits templated factual question/answer pairs.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>

#include "memaudit/synthetic.hpp"

using namespace memaudit;

int main(int argc, char** argv) {
    CLI::App app{"memaudit-datagen: synthetic corpora and Q/A sets"};
    app.require_subcommand(1);

    CanaryCorpusSpec spec;
    std::string corpus_out, manifest_out, qa_out, style = "pseudo_words";
    int qa_pairs = 2000;
    std::uint64_t seed = 0;

    auto* c_corpus = app.add_subcommand("corpus", "filler corpus with planted canaries");
    c_corpus->add_option("--out", corpus_out, "corpus JSONL path")->required();
    c_corpus->add_option("--manifest", manifest_out, "canary manifest JSON path")
        ->required();
    c_corpus->add_option("--tokens", spec.total_tokens, "total corpus tokens");
    c_corpus->add_option("--canaries", spec.n_canaries, "number of distinct canaries");
    c_corpus->add_option("--canary-len", spec.canary_len, "canary length in tokens");
    c_corpus->add_option("--canary-repeats", spec.canary_repeats,
                         "planted copies per canary");
    c_corpus->add_option("--canary-prefix", spec.canary_prefix_len,
                         "random prefix tokens per planted copy");
    c_corpus->add_option("--style", style,
                         "canary style: random_bytes|word_soup|pseudo_words");
    c_corpus->add_option("--seed", seed, "generator seed");

    auto* c_qa = app.add_subcommand("qa", "templated factual question/answer pairs");
    c_qa->add_option("--out", qa_out, "Q/A JSONL path")->required();
    c_qa->add_option("--pairs", qa_pairs, "number of pairs");
    c_qa->add_option("--seed", seed, "generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (c_corpus->parsed()) {
            spec.seed = seed;
            if (style == "random_bytes") {
                spec.canary_style = CanaryStyle::random_bytes;
            } else if (style == "word_soup") {
                spec.canary_style = CanaryStyle::word_soup;
            } else if (style == "pseudo_words") {
                spec.canary_style = CanaryStyle::pseudo_words;
            } else {
                throw std::runtime_error("unknown canary style '" + style + "'");
            }
            CanaryCorpus corpus = build_canary_corpus(spec);
            save_corpus_jsonl(corpus_out, corpus.docs);
            save_canary_manifest(corpus, manifest_out);
            std::int64_t tokens = 0;
            for (const auto& doc : corpus.docs) tokens += static_cast<std::int64_t>(doc.tokens.size());
            std::cout << "wrote " << corpus.docs.size() << " documents (" << tokens
                      << " tokens, " << corpus.canary_doc_ids.size()
                      << " canary copies) -> " << corpus_out << "\n";
        } else if (c_qa->parsed()) {
            auto pairs = make_qa_pairs(qa_pairs, seed);
            std::ofstream out(qa_out, std::ios::trunc);
            if (!out) throw std::runtime_error("cannot open " + qa_out);
            for (const auto& pair : pairs) {
                nlohmann::json obj;
                obj["question"] = pair.question;
                obj["answer"] = pair.answer;
                out << obj.dump() << "\n";
            }
            std::cout << "wrote " << pairs.size() << " qa pairs -> " << qa_out << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
