#pragma once

#include <string>
#include <string_view>

#include "memaudit/common.hpp"

namespace memaudit {

// Token id space. Regular ids come first; the two reserved ids close the
// range. The byte-level vocabulary maps id i <-> byte i for i < 256 and is
// the default everywhere text enters the toolkit; smaller vocabularies with
// the same reserved-id layout back the tiny-model tests.
struct Vocabulary {
    int size = 0;
    Token eos_id = -1;
    Token sentinel_id = -1;

    static Vocabulary byte_level() {
        Vocabulary v;
        v.size = 258;
        v.eos_id = 256;
        v.sentinel_id = 257;
        return v;
    }

    // size >= 3; ids [0, size-2) are regular, then eos, then sentinel.
    static Vocabulary with_size(int size);

    bool is_reserved(Token t) const { return t == eos_id || t == sentinel_id; }
    bool is_valid(Token t) const { return t >= 0 && t < size; }
    int num_regular() const { return size - 2; }
    bool is_byte_level() const { return size == 258; }
};

// Byte-level text <-> token conversion. Reserved ids decode to nothing.
TokenSequence encode_text(std::string_view text);
std::string decode_text(TokenView tokens, const Vocabulary& vocab);

}  // namespace memaudit
