#pragma once

// Token id layout shared by the tokenizer, the hierarchy, and the heads:
// ids 0..63 are codons indexed base-4 (A=0, C=1, G=2, T=3, most significant
// nucleotide first), ids 64..69 are the special tokens.

#include <array>
#include <string>
#include <string_view>

#include "codonball/common.hpp"

namespace codonball::vocab {

constexpr int kCodonCount = 64;
constexpr int kSpecialCount = 6;
constexpr int kSize = kCodonCount + kSpecialCount;

constexpr int kPad = 64;
constexpr int kMask = 65;
constexpr int kCls = 66;
constexpr int kSep = 67;
constexpr int kUnk = 68;
constexpr int kEos = 69;

inline const std::array<std::string, kSpecialCount>& special_names() {
    static const std::array<std::string, kSpecialCount> names = {
        "[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]", "[EOS]"};
    return names;
}

inline bool is_codon(int id) { return id >= 0 && id < kCodonCount; }
inline bool is_special(int id) { return id >= kCodonCount && id < kSize; }

// -1 for characters outside {A,C,G,T,U} (case insensitive; U reads as T).
inline int base_index(char ch) {
    switch (ch) {
        case 'A': case 'a': return 0;
        case 'C': case 'c': return 1;
        case 'G': case 'g': return 2;
        case 'T': case 't': case 'U': case 'u': return 3;
        default: return -1;
    }
}

inline int codon_id(std::string_view triplet) {
    if (triplet.size() != 3) throw ValidationError("codon_id: need exactly 3 nucleotides");
    int id = 0;
    for (char ch : triplet) {
        const int b = base_index(ch);
        if (b < 0)
            throw ValidationError(std::string("codon_id: invalid nucleotide '") + ch + "'");
        id = id * 4 + b;
    }
    return id;
}

inline std::string codon_string(int id) {
    if (!is_codon(id)) throw ValidationError("codon_string: id " + std::to_string(id) + " is not a codon");
    static constexpr char bases[] = {'A', 'C', 'G', 'T'};
    std::string s(3, ' ');
    s[0] = bases[(id >> 4) & 3];
    s[1] = bases[(id >> 2) & 3];
    s[2] = bases[id & 3];
    return s;
}

inline std::string token_string(int id) {
    if (is_codon(id)) return codon_string(id);
    if (is_special(id)) return special_names()[static_cast<std::size_t>(id - kCodonCount)];
    throw ValidationError("token_string: id " + std::to_string(id) + " outside vocabulary");
}

// Token id for a codon triplet or a special token name; -1 if unknown.
inline int token_id(std::string_view s) {
    if (s.size() == 3 && base_index(s[0]) >= 0 && base_index(s[1]) >= 0 && base_index(s[2]) >= 0)
        return codon_id(s);
    for (int k = 0; k < kSpecialCount; ++k)
        if (special_names()[static_cast<std::size_t>(k)] == s) return kCodonCount + k;
    return -1;
}

} // namespace codonball::vocab
