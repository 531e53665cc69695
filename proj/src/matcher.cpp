#include "memaudit/matcher.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace memaudit {

double diversity_score(TokenView tokens) {
    if (tokens.empty()) {
        throw std::invalid_argument("diversity_score: empty sequence");
    }
    std::unordered_set<Token> unique(tokens.begin(), tokens.end());
    return static_cast<double>(unique.size()) / static_cast<double>(tokens.size());
}

LcsResult longest_common_substring(TokenView a, TokenView b) {
    if (a.empty() || b.empty()) {
        throw std::invalid_argument("longest_common_substring: empty input");
    }
    const std::int64_t n = static_cast<std::int64_t>(a.size());
    const std::int64_t m = static_cast<std::int64_t>(b.size());

    // Rolling-row DP over match-run lengths ending at (i, j). Strict
    // improvement keeps the first (smallest a end, then b end) maximal run,
    // which is the smallest-start tie-break for a fixed length.
    std::vector<std::int32_t> prev(static_cast<std::size_t>(m) + 1, 0);
    std::vector<std::int32_t> cur(static_cast<std::size_t>(m) + 1, 0);
    std::int64_t best_len = 0, best_a_end = 0, best_b_end = 0;
    for (std::int64_t i = 1; i <= n; ++i) {
        cur[0] = 0;
        const Token ai = a[static_cast<std::size_t>(i - 1)];
        for (std::int64_t j = 1; j <= m; ++j) {
            if (ai == b[static_cast<std::size_t>(j - 1)]) {
                const std::int32_t len = prev[static_cast<std::size_t>(j - 1)] + 1;
                cur[static_cast<std::size_t>(j)] = len;
                if (len > best_len) {
                    best_len = len;
                    best_a_end = i;
                    best_b_end = j;
                }
            } else {
                cur[static_cast<std::size_t>(j)] = 0;
            }
        }
        std::swap(prev, cur);
    }
    LcsResult result;
    result.a = Span{best_a_end - best_len, best_a_end};
    result.b = Span{best_b_end - best_len, best_b_end};
    return result;
}

std::optional<Extension> extend_with_tolerance(TokenView gen, TokenView doc,
                                               const LcsResult& anchor, int k,
                                               int window) {
    if (window < 1 || k < 0) {
        throw std::invalid_argument("extend_with_tolerance: invalid k/window");
    }
    if (anchor.a.length() != anchor.b.length()) {
        throw std::invalid_argument("extend_with_tolerance: anchor spans differ in length");
    }
    const std::int64_t gn = static_cast<std::int64_t>(gen.size());
    const std::int64_t dn = static_cast<std::int64_t>(doc.size());
    if (anchor.a.start < 0 || anchor.a.end > gn || anchor.b.start < 0 ||
        anchor.b.end > dn) {
        throw std::invalid_argument("extend_with_tolerance: anchor out of bounds");
    }
    for (std::int64_t i = 0; i < anchor.a.length(); ++i) {
        if (gen[static_cast<std::size_t>(anchor.a.start + i)] !=
            doc[static_cast<std::size_t>(anchor.b.start + i)]) {
            throw std::invalid_argument("extend_with_tolerance: anchor is not an exact match");
        }
    }
    if (anchor.a.length() == 0) return std::nullopt;

    // Window start range on the anchor diagonal d = doc_start - gen_start.
    const std::int64_t d = anchor.b.start - anchor.a.start;
    const std::int64_t w = window;
    std::int64_t lo = std::max<std::int64_t>(
        {0, -d, anchor.a.start - w + 1});
    std::int64_t hi = std::min<std::int64_t>(
        {gn - w, dn - d - w, anchor.a.end - 1});
    if (lo > hi) return std::nullopt;

    // Prefix sums of mismatch indicators along the diagonal.
    const std::int64_t span = hi + w - lo;
    std::vector<std::int32_t> prefix(static_cast<std::size_t>(span) + 1, 0);
    for (std::int64_t i = 0; i < span; ++i) {
        const std::int64_t g = lo + i;
        const int mism = gen[static_cast<std::size_t>(g)] !=
                                 doc[static_cast<std::size_t>(g + d)]
                             ? 1
                             : 0;
        prefix[static_cast<std::size_t>(i + 1)] =
            prefix[static_cast<std::size_t>(i)] + mism;
    }

    std::int64_t best_g = -1;
    std::int32_t best_mm = -1;
    for (std::int64_t g = lo; g <= hi; ++g) {
        const std::int64_t off = g - lo;
        const std::int32_t mm = prefix[static_cast<std::size_t>(off + w)] -
                                prefix[static_cast<std::size_t>(off)];
        if (best_g < 0 || mm < best_mm) {
            best_g = g;
            best_mm = mm;
        }
    }
    if (best_mm > k) return std::nullopt;
    Extension ext;
    ext.gen_span = Span{best_g, best_g + w};
    ext.doc_span = Span{best_g + d, best_g + d + w};
    ext.mismatches = static_cast<int>(best_mm);
    return ext;
}

namespace {

struct SeedHasher {
    std::size_t operator()(const std::vector<Token>& v) const {
        std::size_t h = 1469598103934665603ull;
        for (Token t : v) {
            h ^= static_cast<std::size_t>(t) + 0x9e3779b9ull;
            h *= 1099511628211ull;
        }
        return h;
    }
};

// Maximal exact common runs of length >= min_len, as anchors. By the
// pigeonhole bound any window with at most k mismatches contains an exact
// run of length >= ceil((window - k) / (k + 1)), so extending every such
// run sees every qualifying window.
std::vector<LcsResult> maximal_common_runs(TokenView gen, TokenView doc,
                                           int min_len) {
    std::vector<LcsResult> runs;
    const std::int64_t gn = static_cast<std::int64_t>(gen.size());
    const std::int64_t dn = static_cast<std::int64_t>(doc.size());
    if (gn < min_len || dn < min_len) return runs;

    std::unordered_map<std::vector<Token>, std::vector<std::int64_t>, SeedHasher> grams;
    for (std::int64_t j = 0; j + min_len <= dn; ++j) {
        std::vector<Token> key(doc.begin() + j, doc.begin() + j + min_len);
        grams[key].push_back(j);
    }
    for (std::int64_t i = 0; i + min_len <= gn; ++i) {
        std::vector<Token> key(gen.begin() + i, gen.begin() + i + min_len);
        auto it = grams.find(key);
        if (it == grams.end()) continue;
        for (std::int64_t j : it->second) {
            // Only run starts; interior hits belong to an earlier start.
            if (i > 0 && j > 0 &&
                gen[static_cast<std::size_t>(i - 1)] ==
                    doc[static_cast<std::size_t>(j - 1)]) {
                continue;
            }
            std::int64_t len = min_len;
            while (i + len < gn && j + len < dn &&
                   gen[static_cast<std::size_t>(i + len)] ==
                       doc[static_cast<std::size_t>(j + len)]) {
                ++len;
            }
            runs.push_back(LcsResult{Span{i, i + len}, Span{j, j + len}});
        }
    }
    return runs;
}

}  // namespace

MatchReport classify_match(TokenView gen, const std::vector<Document>& candidates,
                           const MatchConfig& cfg) {
    if (gen.empty()) {
        throw std::invalid_argument("classify_match: empty generation");
    }
    if (cfg.window < 1 || cfg.tolerances.empty()) {
        throw std::invalid_argument("classify_match: invalid config");
    }
    for (std::size_t i = 0; i < cfg.tolerances.size(); ++i) {
        if (cfg.tolerances[i] < 0 || cfg.tolerances[i] >= cfg.window ||
            (i > 0 && cfg.tolerances[i] <= cfg.tolerances[i - 1])) {
            throw std::invalid_argument(
                "classify_match: tolerances must be strictly increasing and < window");
        }
    }

    MatchReport report;
    if (diversity_score(gen) < cfg.diversity_threshold) {
        return report;  // repetitive generation, filtered
    }
    if (static_cast<std::int64_t>(gen.size()) < cfg.window) {
        return report;
    }

    const int k_max = cfg.tolerances.back();
    // ceil((w - k) / (k + 1)) simplifies to floor(w / (k + 1)).
    const int seed_len = std::max(1, cfg.window / (k_max + 1));

    bool have_best = false;
    int best_tol = 0;
    std::int64_t best_anchor_len = 0;
    std::int64_t best_doc_id = 0;
    Extension best_ext;

    for (const auto& doc : candidates) {
        if (doc.tokens.empty()) continue;
        LcsResult lcs = longest_common_substring(gen, doc.tokens);
        const std::int64_t anchor_len = lcs.a.length();
        if (anchor_len < seed_len) continue;  // pigeonhole: no window can pass

        std::optional<Extension> doc_best;
        for (const auto& run : maximal_common_runs(gen, doc.tokens, seed_len)) {
            auto ext = extend_with_tolerance(gen, doc.tokens, run, k_max, cfg.window);
            if (!ext) continue;
            if (!doc_best || ext->mismatches < doc_best->mismatches ||
                (ext->mismatches == doc_best->mismatches &&
                 ext->gen_span.start < doc_best->gen_span.start)) {
                doc_best = ext;
            }
        }
        if (!doc_best) continue;

        int tol_class = -1;
        for (int t : cfg.tolerances) {
            if (doc_best->mismatches <= t) {
                tol_class = t;
                break;
            }
        }
        if (tol_class < 0) continue;

        const bool better =
            !have_best || tol_class < best_tol ||
            (tol_class == best_tol &&
             (anchor_len > best_anchor_len ||
              (anchor_len == best_anchor_len && doc.doc_id < best_doc_id)));
        if (better) {
            have_best = true;
            best_tol = tol_class;
            best_anchor_len = anchor_len;
            best_doc_id = doc.doc_id;
            best_ext = *doc_best;
        }
    }

    if (have_best) {
        report.matched = true;
        report.doc_id = best_doc_id;
        report.gen_span = best_ext.gen_span;
        report.doc_span = best_ext.doc_span;
        report.mismatches = best_ext.mismatches;
        report.tolerance_class = best_tol;
    }
    return report;
}

std::string match_report_to_json(const MatchReport& report) {
    nlohmann::json obj;
    obj["matched"] = report.matched;
    obj["doc_id"] = report.doc_id;
    obj["gen_span"] = {report.gen_span.start, report.gen_span.end};
    obj["doc_span"] = {report.doc_span.start, report.doc_span.end};
    obj["mismatches"] = report.mismatches;
    if (report.tolerance_class) {
        obj["tolerance_class"] = *report.tolerance_class;
    } else {
        obj["tolerance_class"] = nullptr;
    }
    return obj.dump();
}

}  // namespace memaudit
