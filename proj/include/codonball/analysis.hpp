#pragma once

// Sequence statistics: effective number of codons (ENC), GC content,
// length/GC strata, and family-level confusion of predictions.

#include <Eigen/Dense>

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "codonball/hierarchy.hpp"

namespace codonball::analysis {

struct CodonUsage {
    std::array<long, 64> counts{};

    long total() const;
    void add_sequence(const std::vector<int>& token_ids);
    void merge(const CodonUsage& other);
};

CodonUsage count_usage(const std::vector<std::vector<int>>& token_seqs);

// Wright-style ENC over the standard code: 2 + 9/F2 + 1/F3 + 5/F4 + 3/F6
// with per-family homozygosity F = (n*sum(p^2) - 1)/(n - 1). Stop codons are
// excluded; the lone 3-fold family falls back to the mean of the 2- and
// 4-fold class means when unavailable. Result clamped to [20, 61].
double enc(const CodonUsage& usage);

double gc_content(std::string_view sequence);

enum class GcBin { Low, Medium, High };
GcBin gc_bin(double fraction);
std::string to_string(GcBin bin);

enum class LengthBin { Short, Medium, Long, OutOfRange };
LengthBin length_bin(std::size_t nucleotides);
std::string to_string(LengthBin bin);

struct FamilyConfusion {
    std::optional<double> within_family_error_fraction;
    std::optional<double> cross_family_error_fraction;
    long errors = 0;
    long total = 0;
    // error counts by (target family, predicted family) over the tree's
    // family list order
    Eigen::MatrixXi per_family;
};

// Fractions among erroneous predictions; absent when every prediction is
// correct. Codon tokens only.
FamilyConfusion family_confusion(const std::vector<int>& predictions,
                                 const std::vector<int>& targets,
                                 const hierarchy::CodonTree& tree);

} // namespace codonball::analysis
