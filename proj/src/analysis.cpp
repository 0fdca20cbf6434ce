#include "codonball/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "codonball/vocab.hpp"

namespace codonball::analysis {

long CodonUsage::total() const {
    long t = 0;
    for (long c : counts) t += c;
    return t;
}

void CodonUsage::add_sequence(const std::vector<int>& token_ids) {
    for (int id : token_ids) {
        if (!vocab::is_codon(id))
            throw ValidationError("codon usage: token " + std::to_string(id) + " is not a codon");
        ++counts[static_cast<std::size_t>(id)];
    }
}

void CodonUsage::merge(const CodonUsage& other) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

CodonUsage count_usage(const std::vector<std::vector<int>>& token_seqs) {
    CodonUsage usage;
    for (const auto& seq : token_seqs) usage.add_sequence(seq);
    return usage;
}

namespace {

// degeneracy class -> Wright coefficient (number of families of that class)
constexpr double kCoef2 = 9.0, kCoef3 = 1.0, kCoef4 = 5.0, kCoef6 = 3.0;

std::optional<double> family_homozygosity(const CodonUsage& usage, const std::vector<int>& codons) {
    long n = 0;
    for (int id : codons) n += usage.counts[static_cast<std::size_t>(id)];
    if (n < 2) return std::nullopt;
    double sum_p2 = 0.0;
    for (int id : codons) {
        const double p = static_cast<double>(usage.counts[static_cast<std::size_t>(id)]) /
                         static_cast<double>(n);
        sum_p2 += p * p;
    }
    return (static_cast<double>(n) * sum_p2 - 1.0) / (static_cast<double>(n) - 1.0);
}

} // namespace

double enc(const CodonUsage& usage) {
    if (usage.total() <= 0) throw ValidationError("enc: empty usage");
    std::map<int, std::vector<double>> by_class;   // degeneracy -> family F values
    for (const auto& [name, codon_strings] : hierarchy::standard_genetic_code()) {
        if (name == "Stop") continue;
        std::vector<int> codons;
        for (const auto& c : codon_strings) codons.push_back(vocab::codon_id(c));
        if (codons.size() == 1) continue;   // Met/Trp contribute the constant 2
        if (auto f = family_homozygosity(usage, codons))
            by_class[static_cast<int>(codons.size())].push_back(*f);
    }
    auto class_mean = [&](int k) -> std::optional<double> {
        auto it = by_class.find(k);
        if (it == by_class.end() || it->second.empty()) return std::nullopt;
        double s = 0.0;
        for (double f : it->second) s += f;
        return s / static_cast<double>(it->second.size());
    };
    const auto f2 = class_mean(2);
    const auto f4 = class_mean(4);
    const auto f6 = class_mean(6);
    if (!f2 || !f4 || !f6)
        throw ValidationError("enc: a required degeneracy class has no family with 2+ counts");
    auto f3 = class_mean(3);
    if (!f3) f3 = 0.5 * (*f2 + *f4);   // isoleucine fallback
    const double value = 2.0 + kCoef2 / *f2 + kCoef3 / *f3 + kCoef4 / *f4 + kCoef6 / *f6;
    return std::clamp(value, 20.0, 61.0);
}

double gc_content(std::string_view sequence) {
    if (sequence.empty()) throw ValidationError("gc_content: empty sequence");
    long gc = 0;
    for (char ch : sequence) {
        if (vocab::base_index(ch) < 0)
            throw ValidationError(std::string("gc_content: invalid nucleotide '") + ch + "'");
        gc += (ch == 'G' || ch == 'g' || ch == 'C' || ch == 'c');
    }
    return static_cast<double>(gc) / static_cast<double>(sequence.size());
}

GcBin gc_bin(double fraction) {
    if (fraction < 0.0 || fraction > 1.0) throw ValidationError("gc_bin: fraction outside [0,1]");
    if (fraction <= 0.47) return GcBin::Low;
    if (fraction <= 0.55) return GcBin::Medium;
    return GcBin::High;
}

std::string to_string(GcBin bin) {
    switch (bin) {
        case GcBin::Low: return "low";
        case GcBin::Medium: return "medium";
        case GcBin::High: return "high";
    }
    return "?";
}

LengthBin length_bin(std::size_t nucleotides) {
    if (nucleotides < 30 || nucleotides > 3000) return LengthBin::OutOfRange;
    if (nucleotides <= 1000) return LengthBin::Short;
    if (nucleotides <= 2000) return LengthBin::Medium;
    return LengthBin::Long;
}

std::string to_string(LengthBin bin) {
    switch (bin) {
        case LengthBin::Short: return "short";
        case LengthBin::Medium: return "medium";
        case LengthBin::Long: return "long";
        case LengthBin::OutOfRange: return "out_of_range";
    }
    return "?";
}

FamilyConfusion family_confusion(const std::vector<int>& predictions,
                                 const std::vector<int>& targets,
                                 const hierarchy::CodonTree& tree) {
    if (predictions.size() != targets.size())
        throw ValidationError("family_confusion: prediction/target length mismatch");
    const auto& families = tree.families();
    std::map<int, int> family_slot;
    for (std::size_t f = 0; f < families.size(); ++f) family_slot[families[f]] = static_cast<int>(f);

    FamilyConfusion out;
    out.per_family = Eigen::MatrixXi::Zero(static_cast<int>(families.size()),
                                           static_cast<int>(families.size()));
    out.total = static_cast<long>(predictions.size());
    long within = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (!vocab::is_codon(targets[i]))
            throw ValidationError("family_confusion: target at " + std::to_string(i) +
                                  " is not a codon");
        if (predictions[i] == targets[i]) continue;
        ++out.errors;
        const int tf = tree.family_index_of_token(targets[i]);
        const int pf = tree.family_index_of_token(predictions[i]);
        out.per_family(family_slot.at(tf), family_slot.at(pf)) += 1;
        within += (tf == pf);
    }
    if (out.errors > 0) {
        out.within_family_error_fraction = static_cast<double>(within) / static_cast<double>(out.errors);
        out.cross_family_error_fraction = 1.0 - *out.within_family_error_fraction;
    }
    return out;
}

} // namespace codonball::analysis
