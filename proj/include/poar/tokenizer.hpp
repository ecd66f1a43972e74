#pragma once

// Byte-level tokenizer: every byte is its own token, plus START/END/PAD.
// Any string is representable, so unseen attribute words never fall out of
// vocabulary.

#include <cstddef>
#include <string_view>
#include <vector>

#include "poar/errors.hpp"

namespace poar {

inline constexpr int token_start = 256;
inline constexpr int token_end = 257;
inline constexpr int token_pad = 258;
inline constexpr std::size_t vocabulary_size = 259;

struct TokenSequence {
    std::vector<int> ids;          // always exactly L entries
    std::size_t valid_length = 0;  // START..END inclusive

    std::size_t length() const { return ids.size(); }
    std::size_t end_position() const { return valid_length - 1; }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

// [START, bytes..., END, PAD...]. Sentences longer than L-2 bytes are cut
// and END moves to the last slot.
inline TokenSequence tokenize(std::string_view sentence, std::size_t length) {
    if (sentence.empty()) throw validation_error("tokenize: empty sentence");
    if (length < 3) throw validation_error("tokenize: sequence length must be at least 3");
    TokenSequence seq;
    seq.ids.assign(length, token_pad);
    const std::size_t kept = std::min(sentence.size(), length - 2);
    seq.ids[0] = token_start;
    for (std::size_t i = 0; i < kept; ++i) seq.ids[i + 1] = static_cast<unsigned char>(sentence[i]);
    seq.ids[kept + 1] = token_end;
    seq.valid_length = kept + 2;
    return seq;
}

}  // namespace poar
