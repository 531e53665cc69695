#include "memaudit/synthetic.hpp"

#include <array>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace memaudit {

namespace {

const char* const kLexicon[] = {
    "the",     "a",        "of",       "and",     "to",      "in",      "was",
    "for",     "with",     "on",       "as",      "by",      "at",      "from",
    "river",   "mountain", "village",  "harbor",  "market",  "garden",  "library",
    "bridge",  "castle",   "meadow",   "forest",  "island",  "valley",  "temple",
    "road",    "tower",    "mill",     "farm",    "coast",   "lake",    "plain",
    "old",     "small",    "large",    "quiet",   "busy",    "narrow",  "wide",
    "ancient", "northern", "southern", "eastern", "western", "stone",   "wooden",
    "green",   "grey",     "famous",   "local",   "early",   "late",    "new",
    "people",  "traders",  "farmers",  "sailors", "masons",  "scholars", "weavers",
    "built",   "crossed",  "settled",  "traded",  "carried", "repaired", "gathered",
    "opened",  "closed",   "walked",   "sailed",  "planted", "measured", "recorded",
    "grain",   "timber",   "cloth",    "salt",    "iron",    "copper",  "wool",
    "water",   "winter",   "summer",   "spring",  "autumn",  "morning", "evening",
    "year",    "season",   "century",  "decade",  "journey", "letter",  "ledger",
    "house",   "street",   "square",   "gate",    "wall",    "roof",    "cellar",
    "bell",    "wheel",    "boat",     "cart",    "rope",    "barrel",  "lantern",
    "north",   "south",    "east",     "west",    "upstream", "downhill", "nearby",
    "slowly",  "often",

};

}  // namespace

std::string make_filler_text(std::int64_t n_chars, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x66696c6cull));
    std::string out;
    out.reserve(static_cast<std::size_t>(n_chars) + 64);
    bool sentence_start = true;
    std::int64_t words_left = 0;
    while (static_cast<std::int64_t>(out.size()) < n_chars) {
        if (words_left == 0) {
            words_left = 4 + static_cast<std::int64_t>(rng.below(9));
            sentence_start = true;
        }
        std::string word = kLexicon[rng.below(std::size(kLexicon))];
        if (sentence_start) {
            word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
            sentence_start = false;
        }
        if (!out.empty()) out += ' ';
        out += word;
        if (--words_left == 0) out += '.';
    }
    if (out.back() != '.') out += '.';
    return out;
}

TokenSequence make_canary_tokens(int length, std::uint64_t seed) {
    if (length < 1) {
        throw std::invalid_argument("make_canary_tokens: length must be >= 1");
    }
    Rng rng(derive_seed(seed, 0x63616e72ull));
    TokenSequence tokens;
    tokens.reserve(static_cast<std::size_t>(length));
    for (int i = 0; i < length; ++i) {
        // printable, non-space bytes: '!' (33) .. '~' (126)
        tokens.push_back(static_cast<Token>(33 + rng.below(94)));
    }
    return tokens;
}

TokenSequence make_word_canary_tokens(int length, std::uint64_t seed) {
    if (length < 1) {
        throw std::invalid_argument("make_word_canary_tokens: length must be >= 1");
    }
    Rng rng(derive_seed(seed, 0x77636e72ull));
    std::string text;
    while (static_cast<int>(text.size()) < length) {
        if (!text.empty()) text += ' ';
        text += kLexicon[rng.below(std::size(kLexicon))];
    }
    text.resize(static_cast<std::size_t>(length));
    if (text.back() == ' ') text.back() = 'x';
    return encode_text(text);
}

TokenSequence make_pseudo_word_canary_tokens(int length, std::uint64_t seed) {
    if (length < 1) {
        throw std::invalid_argument("make_pseudo_word_canary_tokens: length must be >= 1");
    }
    Rng rng(derive_seed(seed, 0x70776e72ull));
    std::string text;
    while (static_cast<int>(text.size()) < length) {
        if (!text.empty()) text += ' ';
        const int word_len = 3 + static_cast<int>(rng.below(6));
        for (int i = 0; i < word_len; ++i) {
            text += static_cast<char>('a' + rng.below(26));
        }
    }
    text.resize(static_cast<std::size_t>(length));
    if (text.back() == ' ') text.back() = 'q';
    return encode_text(text);
}

CanaryCorpus build_canary_corpus(const CanaryCorpusSpec& spec) {
    if (spec.n_canaries < 0 || spec.canary_len < 1 || spec.canary_repeats < 1 ||
        spec.total_tokens < 1) {
        throw std::invalid_argument("build_canary_corpus: invalid spec");
    }
    CanaryCorpus corpus;
    Rng rng(derive_seed(spec.seed, 0x636f7270ull));

    std::vector<TokenSequence> doc_payloads;
    std::vector<int> payload_canary;  // -1 for filler, else canary index

    for (int c = 0; c < spec.n_canaries; ++c) {
        const std::uint64_t canary_seed = derive_seed(spec.seed, 0x10000ull + c);
        switch (spec.canary_style) {
            case CanaryStyle::random_bytes:
                corpus.canaries.push_back(
                    make_canary_tokens(spec.canary_len, canary_seed));
                break;
            case CanaryStyle::word_soup:
                corpus.canaries.push_back(
                    make_word_canary_tokens(spec.canary_len, canary_seed));
                break;
            case CanaryStyle::pseudo_words:
                corpus.canaries.push_back(
                    make_pseudo_word_canary_tokens(spec.canary_len, canary_seed));
                break;
        }
    }
    const std::int64_t canary_tokens =
        static_cast<std::int64_t>(spec.n_canaries) * spec.canary_repeats *
        (spec.canary_len + spec.canary_prefix_len);
    if (canary_tokens > spec.total_tokens) {
        throw std::invalid_argument(
            "build_canary_corpus: canaries alone exceed total_tokens");
    }
    std::uint64_t prefix_seq = 0;
    for (int c = 0; c < spec.n_canaries; ++c) {
        for (int r = 0; r < spec.canary_repeats; ++r) {
            TokenSequence payload;
            if (spec.canary_prefix_len > 0) {
                // High bytes only: they occur nowhere else in the corpus, so
                // reading them is a maximal-uncertainty state for the model,
                // and sustained uncertainty is what precedes canary text.
                Rng prefix_rng(derive_seed(spec.seed, 0x30000ull + prefix_seq++));
                for (int i = 0; i < spec.canary_prefix_len; ++i) {
                    payload.push_back(static_cast<Token>(128 + prefix_rng.below(128)));
                }
            }
            const auto& body = corpus.canaries[static_cast<std::size_t>(c)];
            payload.insert(payload.end(), body.begin(), body.end());
            doc_payloads.push_back(std::move(payload));
            payload_canary.push_back(c);
        }
    }

    std::int64_t filler_budget = spec.total_tokens - canary_tokens;
    std::uint64_t filler_seq = 0;
    while (filler_budget > 0) {
        const std::int64_t span = spec.filler_doc_min_chars +
                                  static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(
                                      spec.filler_doc_max_chars - spec.filler_doc_min_chars + 1)));
        const std::int64_t want = std::min<std::int64_t>(span, filler_budget);
        std::string text =
            make_filler_text(want, derive_seed(spec.seed, 0x20000ull + filler_seq++));
        if (static_cast<std::int64_t>(text.size()) > filler_budget) {
            text.resize(static_cast<std::size_t>(filler_budget));
        }
        if (text.empty()) break;
        doc_payloads.push_back(encode_text(text));
        payload_canary.push_back(-1);
        filler_budget -= static_cast<std::int64_t>(text.size());
    }

    std::vector<std::size_t> order(doc_payloads.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    corpus.docs.reserve(order.size());
    for (std::size_t at = 0; at < order.size(); ++at) {
        Document doc;
        doc.doc_id = static_cast<std::int64_t>(at);
        doc.tokens = std::move(doc_payloads[order[at]]);
        if (payload_canary[order[at]] >= 0) {
            corpus.canary_doc_ids.push_back(doc.doc_id);
        }
        corpus.docs.push_back(std::move(doc));
    }
    return corpus;
}

std::vector<QaPair> make_qa_pairs(int n, std::uint64_t seed) {
    if (n < 1) {
        throw std::invalid_argument("make_qa_pairs: n must be >= 1");
    }
    static const std::array<const char*, 24> kPlaces = {
        "Arvenholm", "Bramwick", "Caldermoor", "Dunmere",   "Eastvale", "Fenbridge",
        "Garthwood", "Hollowby", "Ironcliff",  "Juniperry", "Kestwick", "Lornmouth",
        "Marrowfen", "Nethervale", "Oakhollow", "Pinecrest", "Quarryton", "Ravensmere",
        "Stonewick", "Thornfield", "Umberdale", "Vexley",    "Wyndham",  "Yarrowgate",
    };
    static const std::array<const char*, 12> kGoods = {
        "salted fish", "river pearls", "blue clay",  "barley malt",
        "pine resin",  "copper wire",  "flax cloth", "black honey",
        "slate tiles", "apple cider",  "goose down", "beet sugar",
    };
    static const std::array<const char*, 10> kFeatures = {
        "a granite lighthouse",  "an eleven-arch bridge", "a floating market",
        "a twin-spired hall",    "a tidal mill",          "a sunken amphitheater",
        "a chalk labyrinth",     "a copper observatory",  "a terraced orchard",
        "a glass-roofed bazaar",
    };

    Rng rng(derive_seed(seed, 0x7161ull));
    std::vector<QaPair> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const char* place = kPlaces[rng.below(kPlaces.size())];
        const char* good = kGoods[rng.below(kGoods.size())];
        const char* feature = kFeatures[rng.below(kFeatures.size())];
        const int year = 1400 + static_cast<int>(rng.below(500));
        QaPair pair;
        switch (rng.below(3)) {
            case 0:
                pair.question = "What is the town of " + std::string(place) +
                                " number " + std::to_string(i) + " known for?";
                pair.answer = "The town of " + std::string(place) +
                              " is known for trading " + good + " and for " + feature +
                              " raised around the year " + std::to_string(year) + ".";
                break;
            case 1:
                pair.question = "Which landmark stands in " + std::string(place) +
                                " (entry " + std::to_string(i) + ")?";
                pair.answer = "Visitors to " + std::string(place) +
                              " usually come to see " + feature +
                              ", finished in " + std::to_string(year) +
                              " by guilds that shipped " + good + ".";
                break;
            default:
                pair.question = "When was the fair of " + std::string(place) +
                                " held, case " + std::to_string(i) + "?";
                pair.answer = "The fair of " + std::string(place) +
                              " was first held in " + std::to_string(year) +
                              " beside " + feature + ", where " + good +
                              " changed hands.";
                break;
        }
        out.push_back(std::move(pair));
    }
    return out;
}

void save_canary_manifest(const CanaryCorpus& corpus, const std::string& path) {
    nlohmann::json obj;
    obj["canary_doc_ids"] = corpus.canary_doc_ids;
    nlohmann::json canaries = nlohmann::json::array();
    for (const auto& c : corpus.canaries) canaries.push_back(c);
    obj["canaries"] = canaries;
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("save_canary_manifest: cannot open " + path);
    }
    out << obj.dump(2) << "\n";
}

std::vector<std::int64_t> load_canary_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_canary_manifest: cannot open " + path);
    }
    nlohmann::json obj;
    in >> obj;
    return obj.at("canary_doc_ids").get<std::vector<std::int64_t>>();
}

}  // namespace memaudit
