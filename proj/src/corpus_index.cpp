#include "memaudit/corpus_index.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "memaudit/matcher.hpp"

namespace memaudit {

namespace {

// Lexicographic compare of the suffix at pos against query, looking at most
// |query| tokens ahead: -1 below, 0 when query is a prefix of the suffix,
// +1 above.
int compare_suffix_to_query(const TokenSequence& text, std::int64_t pos,
                            TokenView query) {
    const std::int64_t n = static_cast<std::int64_t>(text.size());
    for (std::size_t qi = 0; qi < query.size(); ++qi) {
        const std::int64_t ti = pos + static_cast<std::int64_t>(qi);
        if (ti >= n) return -1;  // suffix ran out: it is a proper prefix
        if (text[ti] < query[qi]) return -1;
        if (text[ti] > query[qi]) return 1;
    }
    return 0;
}

}  // namespace

SuffixIndex SuffixIndex::build(const std::vector<Document>& documents,
                               const Vocabulary& vocab) {
    if (documents.empty()) {
        throw std::invalid_argument("build_index: empty document list");
    }
    SuffixIndex index;
    index.vocab_size_ = vocab.size;
    index.sentinel_ = vocab.sentinel_id;

    std::int64_t total = 0;
    for (const auto& doc : documents) {
        if (doc.tokens.empty()) {
            throw std::invalid_argument("build_index: document " +
                                        std::to_string(doc.doc_id) + " is empty");
        }
        if (doc.doc_id < 0) {
            throw std::invalid_argument("build_index: negative doc_id");
        }
        for (Token t : doc.tokens) {
            if (t == vocab.sentinel_id) {
                throw std::invalid_argument(
                    "build_index: document " + std::to_string(doc.doc_id) +
                    " contains the sentinel token id");
            }
            if (!vocab.is_valid(t)) {
                throw std::invalid_argument(
                    "build_index: token id out of vocabulary in document " +
                    std::to_string(doc.doc_id));
            }
        }
        total += static_cast<std::int64_t>(doc.tokens.size()) + 1;
    }
    {
        std::unordered_set<std::int64_t> seen;
        for (const auto& doc : documents) {
            if (!seen.insert(doc.doc_id).second) {
                throw std::invalid_argument("build_index: duplicate doc_id " +
                                            std::to_string(doc.doc_id));
            }
        }
    }

    index.text_.reserve(total);
    for (const auto& doc : documents) {
        index.doc_starts_.push_back(static_cast<std::int64_t>(index.text_.size()));
        index.doc_ids_.push_back(doc.doc_id);
        index.text_.insert(index.text_.end(), doc.tokens.begin(), doc.tokens.end());
        index.text_.push_back(vocab.sentinel_id);
    }

    const std::int64_t n = static_cast<std::int64_t>(index.text_.size());
    index.suffix_order_.resize(n);
    for (std::int64_t i = 0; i < n; ++i) index.suffix_order_[i] = i;

    const TokenSequence& text = index.text_;
    std::sort(index.suffix_order_.begin(), index.suffix_order_.end(),
              [&text, n](std::int64_t a, std::int64_t b) {
                  while (a < n && b < n) {
                      if (text[a] != text[b]) return text[a] < text[b];
                      ++a;
                      ++b;
                  }
                  return a == n && b < n;  // shorter suffix sorts first
              });
    index.rebuild_slot_map();
    return index;
}

std::pair<std::int64_t, std::int64_t> SuffixIndex::suffix_range(TokenView query) const {
    auto lo = std::lower_bound(
        suffix_order_.begin(), suffix_order_.end(), 0,
        [&](std::int64_t pos, int) { return compare_suffix_to_query(text_, pos, query) < 0; });
    auto hi = std::upper_bound(
        suffix_order_.begin(), suffix_order_.end(), 0,
        [&](int, std::int64_t pos) { return compare_suffix_to_query(text_, pos, query) > 0; });
    return {lo - suffix_order_.begin(), hi - suffix_order_.begin()};
}

std::int64_t SuffixIndex::count_occurrences(TokenView query) const {
    if (query.empty()) {
        throw std::invalid_argument("count_occurrences: empty query");
    }
    for (Token t : query) {
        if (t == sentinel_) {
            throw std::invalid_argument("count_occurrences: query contains the sentinel");
        }
    }
    auto [lo, hi] = suffix_range(query);
    return hi - lo;
}

std::size_t SuffixIndex::doc_slot(std::int64_t text_pos) const {
    auto it = std::upper_bound(doc_starts_.begin(), doc_starts_.end(), text_pos);
    return static_cast<std::size_t>(it - doc_starts_.begin()) - 1;
}

std::vector<std::pair<std::int64_t, std::vector<std::int64_t>>>
SuffixIndex::find_documents(TokenView query) const {
    if (query.empty()) {
        throw std::invalid_argument("find_documents: empty query");
    }
    for (Token t : query) {
        if (t == sentinel_) {
            throw std::invalid_argument("find_documents: query contains the sentinel");
        }
    }
    auto [lo, hi] = suffix_range(query);
    std::vector<std::pair<std::int64_t, std::int64_t>> hits;  // (slot, local offset)
    hits.reserve(static_cast<std::size_t>(hi - lo));
    for (std::int64_t i = lo; i < hi; ++i) {
        const std::int64_t pos = suffix_order_[i];
        const std::size_t slot = doc_slot(pos);
        hits.emplace_back(static_cast<std::int64_t>(slot), pos - doc_starts_[slot]);
    }
    std::sort(hits.begin(), hits.end(), [&](const auto& a, const auto& b) {
        if (doc_ids_[a.first] != doc_ids_[b.first])
            return doc_ids_[a.first] < doc_ids_[b.first];
        return a.second < b.second;
    });

    std::vector<std::pair<std::int64_t, std::vector<std::int64_t>>> out;
    for (const auto& [slot, off] : hits) {
        const std::int64_t id = doc_ids_[slot];
        if (out.empty() || out.back().first != id) {
            out.emplace_back(id, std::vector<std::int64_t>{});
        }
        out.back().second.push_back(off);
    }
    return out;
}

std::vector<std::int64_t> SuffixIndex::retrieve_candidates(
    TokenView generation, const RetrievalConfig& cfg) const {
    if (generation.empty()) {
        throw std::invalid_argument("retrieve_candidates: empty generation");
    }
    if (cfg.shingle_length < 2 || cfg.shingle_stride < 1 || cfg.max_candidates < 1) {
        throw std::invalid_argument("retrieve_candidates: invalid config");
    }
    if (diversity_score(generation) < cfg.pre_filter_diversity_threshold) {
        return {};
    }

    std::unordered_map<std::int64_t, std::int64_t> hit_counts;
    const std::int64_t n = static_cast<std::int64_t>(generation.size());
    for (std::int64_t start = 0; start + cfg.shingle_length <= n;
         start += cfg.shingle_stride) {
        TokenView shingle = generation.subspan(static_cast<std::size_t>(start),
                                               static_cast<std::size_t>(cfg.shingle_length));
        bool has_sentinel = false;
        for (Token t : shingle) {
            if (t == sentinel_) {
                has_sentinel = true;
                break;
            }
        }
        if (has_sentinel) continue;  // a sentinel can never occur in a document
        for (const auto& [doc_id, offsets] : find_documents(shingle)) {
            (void)offsets;
            ++hit_counts[doc_id];
        }
    }

    std::vector<std::pair<std::int64_t, std::int64_t>> ranked(hit_counts.begin(),
                                                              hit_counts.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (static_cast<int>(ranked.size()) > cfg.max_candidates) {
        ranked.resize(static_cast<std::size_t>(cfg.max_candidates));
    }
    std::vector<std::int64_t> out;
    out.reserve(ranked.size());
    for (const auto& [id, count] : ranked) {
        (void)count;
        out.push_back(id);
    }
    return out;
}

void SuffixIndex::rebuild_slot_map() {
    slot_by_id_.clear();
    slot_by_id_.reserve(doc_ids_.size());
    for (std::size_t slot = 0; slot < doc_ids_.size(); ++slot) {
        slot_by_id_[doc_ids_[slot]] = slot;
    }
}

bool SuffixIndex::has_document(std::int64_t doc_id) const {
    return slot_by_id_.count(doc_id) != 0;
}

Document SuffixIndex::document_at_slot(std::size_t slot) const {
    const std::int64_t start = doc_starts_[slot];
    const std::int64_t end = (slot + 1 < doc_starts_.size())
                                 ? doc_starts_[slot + 1] - 1
                                 : static_cast<std::int64_t>(text_.size()) - 1;
    Document doc;
    doc.doc_id = doc_ids_[slot];
    doc.tokens.assign(text_.begin() + start, text_.begin() + end);
    return doc;
}

Document SuffixIndex::document(std::int64_t doc_id) const {
    auto it = slot_by_id_.find(doc_id);
    if (it == slot_by_id_.end()) {
        throw std::invalid_argument("SuffixIndex::document: unknown doc_id " +
                                    std::to_string(doc_id));
    }
    return document_at_slot(it->second);
}

std::vector<Document> SuffixIndex::documents() const {
    std::vector<Document> out;
    out.reserve(doc_ids_.size());
    for (std::size_t slot = 0; slot < doc_ids_.size(); ++slot) {
        out.push_back(document_at_slot(slot));
    }
    return out;
}

std::int64_t SuffixIndex::token_count() const {
    return static_cast<std::int64_t>(text_.size()) -
           static_cast<std::int64_t>(doc_starts_.size());
}

// ----------------------------- serialization -----------------------------
//
// Little-endian binary layout:
//   magic "MASI", u32 version, u32 vocab_size, u32 sentinel,
//   u64 text_len, u64 doc_count, text tokens (i32), suffix order (i64),
//   doc starts (i64), doc ids (i64).

namespace {

constexpr char kIndexMagic[4] = {'M', 'A', 'S', 'I'};
constexpr std::uint32_t kIndexVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

template <typename T>
void write_vec(std::ofstream& out, const std::vector<T>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <typename T>
void read_vec(std::ifstream& in, std::vector<T>& v, std::size_t n) {
    v.resize(n);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(n * sizeof(T)));
}

}  // namespace

void SuffixIndex::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("SuffixIndex::save: cannot open " + path);
    }
    out.write(kIndexMagic, 4);
    write_pod(out, kIndexVersion);
    write_pod(out, static_cast<std::uint32_t>(vocab_size_));
    write_pod(out, static_cast<std::uint32_t>(sentinel_));
    write_pod(out, static_cast<std::uint64_t>(text_.size()));
    write_pod(out, static_cast<std::uint64_t>(doc_starts_.size()));
    write_vec(out, text_);
    write_vec(out, suffix_order_);
    write_vec(out, doc_starts_);
    write_vec(out, doc_ids_);
    if (!out) {
        throw std::runtime_error("SuffixIndex::save: write failed for " + path);
    }
}

SuffixIndex SuffixIndex::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("SuffixIndex::load: cannot open " + path);
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string_view(magic, 4) != std::string_view(kIndexMagic, 4)) {
        throw std::runtime_error("SuffixIndex::load: bad magic in " + path);
    }
    std::uint32_t version = 0, vocab_size = 0, sentinel = 0;
    std::uint64_t text_len = 0, doc_count = 0;
    read_pod(in, version);
    if (version != kIndexVersion) {
        throw std::runtime_error("SuffixIndex::load: unsupported version");
    }
    read_pod(in, vocab_size);
    read_pod(in, sentinel);
    read_pod(in, text_len);
    read_pod(in, doc_count);

    SuffixIndex index;
    index.vocab_size_ = static_cast<int>(vocab_size);
    index.sentinel_ = static_cast<Token>(sentinel);
    read_vec(in, index.text_, text_len);
    read_vec(in, index.suffix_order_, text_len);
    read_vec(in, index.doc_starts_, doc_count);
    read_vec(in, index.doc_ids_, doc_count);
    if (!in) {
        throw std::runtime_error("SuffixIndex::load: truncated file " + path);
    }
    index.rebuild_slot_map();
    return index;
}

// ----------------------------- corpus JSONL -----------------------------

std::vector<Document> load_corpus_jsonl(const std::string& path,
                                        const Vocabulary& vocab) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_corpus_jsonl: cannot open " + path);
    }
    std::vector<Document> docs;
    std::string line;
    std::int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
            Document doc;
            doc.doc_id = obj.at("doc_id").get<std::int64_t>();
            if (obj.contains("tokens")) {
                doc.tokens = obj.at("tokens").get<TokenSequence>();
            } else {
                doc.tokens = encode_text(obj.at("text").get<std::string>());
            }
            docs.push_back(std::move(doc));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("load_corpus_jsonl: " + path + " line " +
                                     std::to_string(line_no) + ": " + e.what());
        }
        for (Token t : docs.back().tokens) {
            if (!vocab.is_valid(t)) {
                throw std::runtime_error("load_corpus_jsonl: " + path + " line " +
                                         std::to_string(line_no) +
                                         ": token id out of vocabulary");
            }
        }
    }
    return docs;
}

void save_corpus_jsonl(const std::string& path, const std::vector<Document>& docs) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("save_corpus_jsonl: cannot open " + path);
    }
    for (const auto& doc : docs) {
        nlohmann::json obj;
        obj["doc_id"] = doc.doc_id;
        obj["tokens"] = doc.tokens;
        out << obj.dump() << "\n";
    }
    if (!out) {
        throw std::runtime_error("save_corpus_jsonl: write failed for " + path);
    }
}

}  // namespace memaudit
