#include "memaudit/vocab.hpp"

#include <stdexcept>

namespace memaudit {

Vocabulary Vocabulary::with_size(int size) {
    if (size < 3) {
        throw std::invalid_argument("Vocabulary::with_size: need size >= 3");
    }
    Vocabulary v;
    v.size = size;
    v.eos_id = size - 2;
    v.sentinel_id = size - 1;
    return v;
}

TokenSequence encode_text(std::string_view text) {
    TokenSequence out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(static_cast<Token>(c));
    }
    return out;
}

std::string decode_text(TokenView tokens, const Vocabulary& vocab) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        if (t >= 0 && t < 256 && !vocab.is_reserved(t)) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
        }
    }
    return out;
}

}  // namespace memaudit
