#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace chunklm {

using TokenStream = std::vector<int32_t>;

enum class PairFamily { speaker_swap, content_corrupt, continuation };

inline std::string to_string(PairFamily f) {
    switch (f) {
        case PairFamily::speaker_swap: return "speaker-swap";
        case PairFamily::content_corrupt: return "content-corrupt";
        case PairFamily::continuation: return "continuation";
    }
    throw std::logic_error("unknown pair family");
}

inline PairFamily pair_family_from_string(const std::string& s) {
    if (s == "speaker-swap") return PairFamily::speaker_swap;
    if (s == "content-corrupt") return PairFamily::content_corrupt;
    if (s == "continuation") return PairFamily::continuation;
    throw std::invalid_argument("unknown pair family '" + s + "'");
}

// One binary-choice item: two candidate streams, optionally sharing a prompt
// prefix of prompt_len tokens. The positive stream is the genuine one.
struct EvalPair {
    TokenStream positive;
    TokenStream negative;
    int64_t prompt_len = 0;
    PairFamily family = PairFamily::continuation;
};

} // namespace chunklm
