#pragma once

// Codon tokenizer, MLM masking, and a compact pre-norm transformer encoder
// producing per-token hidden states on the diff tape.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "codonball/diff.hpp"
#include "codonball/vocab.hpp"

namespace codonball::lm {

// One token per nucleotide triplet, left to right; U reads as T, case
// insensitive. Rejects other characters and lengths not divisible by 3,
// naming the offending position.
std::vector<int> tokenize(std::string_view nucleotides);

// Inverse of tokenize (T spelling). Rejects special tokens.
std::string detokenize(const std::vector<int>& ids);

enum class MaskScheme { Plain, Bert };

MaskScheme mask_scheme_from_string(const std::string& name);
std::string to_string(MaskScheme scheme);

struct MaskedBatch {
    std::vector<std::vector<int>> input_ids;        // corrupted sequences
    std::vector<std::vector<int>> target_ids;       // kIgnore except at mask positions
    std::vector<std::vector<int>> mask_positions;

    static constexpr int kIgnore = -1;
    std::size_t total_masked() const;
};

// Independently selects each non-special position with probability `rate`.
// Plain: every selected position becomes [MASK]. Bert: 80% [MASK], 10%
// random codon, 10% unchanged. Deterministic given the seed.
MaskedBatch mask_batch(const std::vector<std::vector<int>>& sequences, double rate,
                       MaskScheme scheme, std::uint64_t seed);

struct BackboneConfig {
    int layers = 2;
    int hidden = 64;
    int intermediate = 256;
    int heads = 4;
    int max_context = 128;
    int pos_table = 128;
    double dropout = 0.0;

    void validate() const;
    static BackboneConfig full_scale();
};

// Named parameter tensors with a stable order (checkpoint and optimizer
// state key off the names).
struct ParamSet {
    std::vector<std::pair<std::string, diff::Matrix>> items;

    diff::Matrix& at(const std::string& name);
    const diff::Matrix& at(const std::string& name) const;
    bool has(const std::string& name) const;
    void add(const std::string& name, diff::Matrix value);
};

// Tape handles for every parameter, registered with requires_grad.
struct TapeParams {
    std::map<std::string, diff::Var> vars;

    diff::Var at(const std::string& name) const;
};

TapeParams register_params(diff::Tape& tape, const ParamSet& params, bool requires_grad = true);

ParamSet init_backbone(const BackboneConfig& cfg, std::uint64_t seed);

// Pre-norm transformer encoder over one sequence. `real` marks non-pad
// positions (nullptr = all real); padded keys are masked out of attention so
// they cannot influence real positions. `dropout_rng` enables dropout.
diff::Var backbone_forward(diff::Tape& tape, const TapeParams& params, const BackboneConfig& cfg,
                           const std::vector<int>& ids, const std::vector<bool>* real = nullptr,
                           std::mt19937_64* dropout_rng = nullptr);

// Whole-batch forward without padding: sequences are stacked into one row
// block so layer norms, projections and feed-forwards run as single matrix
// ops; attention stays per sequence. states row r of sequence s lives at
// offsets[s] + r.
struct BatchStates {
    diff::Var states;
    std::vector<int> offsets;
};

BatchStates backbone_forward_batch(diff::Tape& tape, const TapeParams& params,
                                   const BackboneConfig& cfg,
                                   const std::vector<std::vector<int>>& batch,
                                   std::mt19937_64* dropout_rng = nullptr);

// Smooth gelu approximation composed from tape primitives.
diff::Var gelu(diff::Var x);

} // namespace codonball::lm
