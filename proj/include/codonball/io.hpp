#pragma once

// File formats: FASTA corpora, the JSON tree schema, the prototype file
// (JSON header + base64 payload), the tensor-archive checkpoint, labeled
// CSV for the probe, and JSONL metric logs. Byte-level layouts are
// documented in docs/formats.md; doubles are stored little-endian and
// round-trip bit-exactly.

#include <Eigen/Dense>

#include <json.hpp>

#include <string>
#include <utility>
#include <vector>

#include "codonball/common.hpp"
#include "codonball/hierarchy.hpp"
#include "codonball/prototypes.hpp"

namespace codonball::io {

using nlohmann::json;

struct FastaRecord {
    std::string name;
    std::string sequence;
};

std::vector<FastaRecord> read_fasta(const std::string& path);
void write_fasta(const std::string& path, const std::vector<FastaRecord>& records, int width = 60);

json tree_to_json(const hierarchy::CodonTree& tree);
hierarchy::CodonTree tree_from_json(const json& j);
hierarchy::CodonTree read_tree(const std::string& path);
void write_tree(const std::string& path, const hierarchy::CodonTree& tree);

std::string base64_encode(const std::uint8_t* data, std::size_t len);
std::vector<std::uint8_t> base64_decode(const std::string& text);

void save_prototypes(const std::string& path, const heads::PrototypeSet& protos);
heads::PrototypeSet load_prototypes(const std::string& path);

// Named-tensor archive with a JSON meta document; used for checkpoints.
struct TensorArchive {
    json meta;
    std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors;

    const Eigen::MatrixXd& at(const std::string& name) const;
    bool has(const std::string& name) const;
};

void save_archive(const std::string& path, const TensorArchive& archive);
TensorArchive load_archive(const std::string& path);

struct LabeledData {
    std::vector<std::string> sequences;
    std::vector<double> labels;
};

// CSV with a header naming (at least) `sequence` and `label` columns.
LabeledData read_labeled_csv(const std::string& path);
void write_labeled_csv(const std::string& path, const LabeledData& data);

void append_jsonl(const std::string& path, const json& object);
std::vector<json> read_jsonl(const std::string& path);

json read_json_file(const std::string& path);
void write_json_file(const std::string& path, const json& j, int indent = 2);

} // namespace codonball::io
