#pragma once

#include <string>
#include <vector>

#include "memaudit/attacks.hpp"
#include "memaudit/corpus_index.hpp"

namespace memaudit {

// Seeded generators for desk-scale experiments: filler prose, planted
// canaries and templated factual Q/A pairs. Everything is a pure function
// of its seed.

enum class CanaryStyle {
    random_bytes,  // printable high-entropy byte strings
    word_soup,     // random lexicon words, same alphabet as the filler
    pseudo_words,  // random lowercase letter jumbles, filler alphabet but no lexicon
};

struct CanaryCorpusSpec {
    std::int64_t total_tokens = 1'000'000;
    int n_canaries = 50;
    int canary_len = 64;
    int canary_repeats = 120;  // copies of each canary planted as documents
    // Every planted copy is prefixed with that many fresh random bytes, so
    // the model learns that high-uncertainty context precedes canary text -
    // the desk-scale analog of the entropy-spike precursor.
    int canary_prefix_len = 12;
    int filler_doc_min_chars = 120;
    int filler_doc_max_chars = 280;
    CanaryStyle canary_style = CanaryStyle::pseudo_words;
    std::uint64_t seed = 0;
};

struct CanaryCorpus {
    std::vector<Document> docs;                 // shuffled filler + canary copies
    std::vector<std::int64_t> canary_doc_ids;   // every planted copy
    std::vector<TokenSequence> canaries;        // the distinct canary sequences
};

// English-like word-soup sentence text of roughly n_chars characters.
std::string make_filler_text(std::int64_t n_chars, std::uint64_t seed);

// Random printable high-entropy byte string of the given token length.
TokenSequence make_canary_tokens(int length, std::uint64_t seed);

// Random word sequence of exactly the given token length, lowercase words
// separated by single spaces.
TokenSequence make_word_canary_tokens(int length, std::uint64_t seed);

// Random lowercase letter jumbles ("qzkf mwhpxi ...") of exactly the given
// token length.
TokenSequence make_pseudo_word_canary_tokens(int length, std::uint64_t seed);

CanaryCorpus build_canary_corpus(const CanaryCorpusSpec& spec);

// Templated factual pairs; questions >= 10 chars and answers >= 50 chars so
// the mismatched-dataset filters keep them.
std::vector<QaPair> make_qa_pairs(int n, std::uint64_t seed);

void save_canary_manifest(const CanaryCorpus& corpus, const std::string& path);
std::vector<std::int64_t> load_canary_manifest(const std::string& path);

}  // namespace memaudit
