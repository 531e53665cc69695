#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "memaudit/common.hpp"
#include "memaudit/corpus_index.hpp"

namespace memaudit {

struct MatchConfig {
    int window = 50;
    std::vector<int> tolerances = {0, 5, 10};  // strictly increasing, each < window
    double diversity_threshold = 0.1;
};

// Half-open [start, end) token span.
struct Span {
    std::int64_t start = 0;
    std::int64_t end = 0;
    std::int64_t length() const { return end - start; }
    bool operator==(const Span&) const = default;
};

struct LcsResult {
    Span a;
    Span b;
};

struct Extension {
    Span gen_span;
    Span doc_span;
    int mismatches = 0;
};

// Best (near-)verbatim alignment of a generation against the corpus
// candidates. When matched, the spans have exactly window length and lie on
// one alignment diagonal; tolerance_class is the smallest configured
// tolerance the mismatch count satisfies.
struct MatchReport {
    bool matched = false;
    std::int64_t doc_id = -1;
    Span gen_span;
    Span doc_span;
    int mismatches = 0;
    std::optional<int> tolerance_class;
};

// Unique-token fraction of a sequence, in (0, 1].
double diversity_score(TokenView tokens);

// Longest exactly-equal substring of a and b; ties prefer the smallest
// a start, then the smallest b start. No common token yields zero-length
// spans at (0, 0).
LcsResult longest_common_substring(TokenView a, TokenView b);

// Grows a window-length substitution-only alignment around an exact anchor,
// staying on the anchor's diagonal and keeping at least one anchor token in
// the window. Returns the minimum-mismatch window (earliest gen start on
// ties) when that minimum is <= k, nothing otherwise.
std::optional<Extension> extend_with_tolerance(TokenView gen, TokenView doc,
                                               const LcsResult& anchor, int k,
                                               int window);

MatchReport classify_match(TokenView gen, const std::vector<Document>& candidates,
                           const MatchConfig& cfg);

std::string match_report_to_json(const MatchReport& report);

}  // namespace memaudit
