#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "memaudit/common.hpp"
#include "memaudit/vocab.hpp"

namespace memaudit {

struct Document {
    std::int64_t doc_id = 0;
    TokenSequence tokens;
};

struct RetrievalConfig {
    int shingle_length = 10;
    int shingle_stride = 5;
    int max_candidates = 20;
    double pre_filter_diversity_threshold = 0.1;
};

// Exact-match search structure over a token corpus: documents are
// concatenated with a sentinel after each one and the suffix start
// positions are sorted lexicographically. Immutable once built; queries
// are safe to run concurrently.
class SuffixIndex {
public:
    static SuffixIndex build(const std::vector<Document>& documents,
                             const Vocabulary& vocab);

    // Number of exact occurrences of query across all documents,
    // overlapping occurrences included.
    std::int64_t count_occurrences(TokenView query) const;

    // Every (doc_id, document-local offsets) placement of query, doc ids
    // ascending, offsets ascending. Matches never cross documents.
    std::vector<std::pair<std::int64_t, std::vector<std::int64_t>>>
    find_documents(TokenView query) const;

    // Candidate documents for a generation: shingle windows sampled at the
    // configured stride vote for the documents containing them; ties break
    // toward smaller doc ids. Generations failing the diversity pre-filter
    // return no candidates.
    std::vector<std::int64_t> retrieve_candidates(TokenView generation,
                                                  const RetrievalConfig& cfg) const;

    Document document(std::int64_t doc_id) const;
    bool has_document(std::int64_t doc_id) const;
    std::vector<Document> documents() const;

    std::int64_t doc_count() const { return static_cast<std::int64_t>(doc_ids_.size()); }
    std::int64_t token_count() const;  // corpus tokens, sentinels excluded
    int vocab_size() const { return vocab_size_; }
    Token sentinel_id() const { return sentinel_; }

    void save(const std::string& path) const;
    static SuffixIndex load(const std::string& path);

private:
    SuffixIndex() = default;

    int vocab_size_ = 0;
    Token sentinel_ = -1;
    TokenSequence text_;                    // doc tokens, sentinel-terminated each
    std::vector<std::int64_t> suffix_order_;
    std::vector<std::int64_t> doc_starts_;  // ascending offsets into text_
    std::vector<std::int64_t> doc_ids_;     // parallel to doc_starts_
    std::unordered_map<std::int64_t, std::size_t> slot_by_id_;  // rebuilt, not serialized

    std::pair<std::int64_t, std::int64_t> suffix_range(TokenView query) const;
    std::size_t doc_slot(std::int64_t text_pos) const;
    Document document_at_slot(std::size_t slot) const;
    void rebuild_slot_map();
};

// Corpus ingestion: JSON-lines, one object per line with fields
// {"doc_id": int, "text": str} or {"doc_id": int, "tokens": [int, ...]}.
// Text is tokenized byte-level. Throws with the 1-based line number on a
// malformed line.
std::vector<Document> load_corpus_jsonl(const std::string& path,
                                        const Vocabulary& vocab);
void save_corpus_jsonl(const std::string& path,
                       const std::vector<Document>& docs);

}  // namespace memaudit
