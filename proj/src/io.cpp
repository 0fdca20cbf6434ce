#include "codonball/io.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

namespace codonball::io {

namespace {

std::ifstream open_in(const std::string& path, std::ios_base::openmode mode = std::ios_base::in) {
    std::ifstream in(path, mode);
    if (!in) throw ValidationError("cannot open " + path);
    return in;
}

std::ofstream open_out(const std::string& path, std::ios_base::openmode mode = std::ios_base::out) {
    std::ofstream out(path, mode);
    if (!out) throw RuntimeFailure("cannot write " + path);
    return out;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

std::vector<FastaRecord> read_fasta(const std::string& path) {
    std::ifstream in = open_in(path);
    std::vector<FastaRecord> records;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        if (line[0] == '>') {
            records.push_back({line.substr(1), ""});
        } else {
            if (records.empty())
                throw ValidationError(path + ":" + std::to_string(line_no) +
                                      ": sequence data before the first '>' header");
            records.back().sequence += line;
        }
    }
    if (records.empty()) throw ValidationError(path + ": no FASTA records");
    return records;
}

void write_fasta(const std::string& path, const std::vector<FastaRecord>& records, int width) {
    std::ofstream out = open_out(path);
    for (const auto& rec : records) {
        out << '>' << rec.name << '\n';
        for (std::size_t i = 0; i < rec.sequence.size(); i += static_cast<std::size_t>(width))
            out << rec.sequence.substr(i, static_cast<std::size_t>(width)) << '\n';
    }
}

json tree_to_json(const hierarchy::CodonTree& tree) {
    json nodes = json::array();
    for (int i = 0; i < tree.size(); ++i) {
        const auto& n = tree.node(i);
        json jn;
        jn["id"] = n.id;
        jn["parent"] = n.parent < 0 ? json(nullptr) : json(tree.node(n.parent).id);
        switch (n.kind) {
            case hierarchy::NodeKind::Root: jn["kind"] = "root"; break;
            case hierarchy::NodeKind::Family: jn["kind"] = "family"; break;
            case hierarchy::NodeKind::Leaf: jn["kind"] = "leaf"; break;
        }
        jn["token"] = n.token < 0 ? json(nullptr) : json(vocab::token_string(n.token));
        nodes.push_back(jn);
    }
    return json{{"nodes", nodes}};
}

hierarchy::CodonTree tree_from_json(const json& j) {
    if (!j.contains("nodes") || !j["nodes"].is_array())
        throw ValidationError("tree json: missing 'nodes' array");
    std::vector<hierarchy::TreeNode> nodes;
    std::unordered_map<std::string, int> index;
    for (const auto& jn : j["nodes"]) {
        hierarchy::TreeNode n;
        if (!jn.contains("id") || !jn["id"].is_string())
            throw ValidationError("tree json: node without string 'id'");
        n.id = jn["id"].get<std::string>();
        index.emplace(n.id, static_cast<int>(nodes.size()));
        nodes.push_back(n);
    }
    int i = 0;
    for (const auto& jn : j["nodes"]) {
        hierarchy::TreeNode& n = nodes[static_cast<std::size_t>(i++)];
        const std::string kind = jn.value("kind", "");
        if (kind == "root") n.kind = hierarchy::NodeKind::Root;
        else if (kind == "family") n.kind = hierarchy::NodeKind::Family;
        else if (kind == "leaf") n.kind = hierarchy::NodeKind::Leaf;
        else throw ValidationError("tree json: node '" + n.id + "' has unknown kind '" + kind + "'");
        if (jn.contains("parent") && !jn["parent"].is_null()) {
            const std::string pid = jn["parent"].get<std::string>();
            auto it = index.find(pid);
            if (it == index.end())
                throw ValidationError("tree json: node '" + n.id + "' references missing parent '" + pid + "'");
            n.parent = it->second;
        }
        if (jn.contains("token") && !jn["token"].is_null()) {
            const std::string tok = jn["token"].get<std::string>();
            n.token = vocab::token_id(tok);
            if (n.token < 0) throw ValidationError("tree json: unknown token '" + tok + "'");
        }
    }
    return hierarchy::CodonTree::from_nodes(std::move(nodes));
}

hierarchy::CodonTree read_tree(const std::string& path) { return tree_from_json(read_json_file(path)); }

void write_tree(const std::string& path, const hierarchy::CodonTree& tree) {
    write_json_file(path, tree_to_json(tree));
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::uint8_t* data, std::size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        std::uint32_t v = static_cast<std::uint32_t>(data[i]) << 16;
        if (i + 1 < len) v |= static_cast<std::uint32_t>(data[i + 1]) << 8;
        if (i + 2 < len) v |= static_cast<std::uint32_t>(data[i + 2]);
        out.push_back(kB64[(v >> 18) & 63]);
        out.push_back(kB64[(v >> 12) & 63]);
        out.push_back(i + 1 < len ? kB64[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? kB64[v & 63] : '=');
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(const std::string& text) {
    std::array<int, 256> lut;
    lut.fill(-1);
    for (int i = 0; i < 64; ++i) lut[static_cast<unsigned char>(kB64[i])] = i;
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    std::uint32_t acc = 0;
    int bits = 0;
    for (char ch : text) {
        if (ch == '=' || ch == '\n' || ch == '\r') continue;
        const int v = lut[static_cast<unsigned char>(ch)];
        if (v < 0) throw ValidationError("base64: invalid character");
        acc = (acc << 6) | static_cast<std::uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xFF));
        }
    }
    return out;
}

void save_prototypes(const std::string& path, const heads::PrototypeSet& protos) {
    protos.validate();
    json j;
    j["curvature"] = protos.curvature;
    j["tau"] = protos.tau;
    j["dim"] = protos.dim();
    j["K"] = protos.cone_k;
    j["eta"] = protos.cone_eta;
    j["token_order"] = protos.token_order;
    // row-major little-endian doubles
    std::vector<std::uint8_t> raw(static_cast<std::size_t>(protos.points.size()) * sizeof(double));
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = protos.points;
    std::memcpy(raw.data(), rm.data(), raw.size());
    j["points_b64"] = base64_encode(raw.data(), raw.size());
    write_json_file(path, j);
}

heads::PrototypeSet load_prototypes(const std::string& path) {
    const json j = read_json_file(path);
    heads::PrototypeSet protos;
    try {
        protos.curvature = j.at("curvature").get<double>();
        protos.tau = j.at("tau").get<double>();
        protos.cone_k = j.at("K").get<double>();
        protos.cone_eta = j.at("eta").get<double>();
        protos.token_order = j.at("token_order").get<std::vector<std::string>>();
        const auto dim = j.at("dim").get<Eigen::Index>();
        const auto raw = base64_decode(j.at("points_b64").get<std::string>());
        const auto rows = static_cast<Eigen::Index>(protos.token_order.size());
        if (raw.size() != static_cast<std::size_t>(rows * dim) * sizeof(double))
            throw ValidationError("prototype file: payload size does not match dim/count");
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, dim);
        std::memcpy(rm.data(), raw.data(), raw.size());
        protos.points = rm;
    } catch (const json::exception& e) {
        throw ValidationError(path + ": malformed prototype file: " + e.what());
    }
    protos.validate();
    return protos;
}

const Eigen::MatrixXd& TensorArchive::at(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return m;
    throw ValidationError("archive: missing tensor '" + name + "'");
}

bool TensorArchive::has(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return true;
    return false;
}

void save_archive(const std::string& path, const TensorArchive& archive) {
    json header;
    header["meta"] = archive.meta;
    json list = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : archive.tensors) {
        list.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(m.size()) * sizeof(double);
    }
    header["tensors"] = list;
    const std::string hs = header.dump();

    std::ofstream out = open_out(path, std::ios_base::binary);
    out.write("CBAR0001", 8);
    const std::uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, m] : archive.tensors) {
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
        out.write(reinterpret_cast<const char*>(rm.data()),
                  static_cast<std::streamsize>(static_cast<std::size_t>(rm.size()) * sizeof(double)));
    }
    if (!out) throw RuntimeFailure("short write to " + path);
}

TensorArchive load_archive(const std::string& path) {
    std::ifstream in = open_in(path, std::ios_base::binary);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "CBAR0001")
        throw ValidationError(path + ": not a tensor archive");
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw ValidationError(path + ": truncated header");
    TensorArchive archive;
    json header;
    try {
        header = json::parse(hs);
        archive.meta = header.at("meta");
        for (const auto& jt : header.at("tensors")) {
            const auto rows = jt.at("rows").get<Eigen::Index>();
            const auto cols = jt.at("cols").get<Eigen::Index>();
            Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
            in.read(reinterpret_cast<char*>(rm.data()),
                    static_cast<std::streamsize>(static_cast<std::size_t>(rm.size()) * sizeof(double)));
            if (!in) throw ValidationError(path + ": truncated tensor data");
            archive.tensors.emplace_back(jt.at("name").get<std::string>(), Eigen::MatrixXd(rm));
        }
    } catch (const json::exception& e) {
        throw ValidationError(path + ": malformed archive header: " + e.what());
    }
    return archive;
}

LabeledData read_labeled_csv(const std::string& path) {
    std::ifstream in = open_in(path);
    std::string line;
    if (!std::getline(in, line)) throw ValidationError(path + ": empty file");
    std::vector<std::string> cols;
    {
        std::stringstream ss(trim(line));
        std::string cell;
        while (std::getline(ss, cell, ',')) cols.push_back(trim(cell));
    }
    int seq_col = -1, label_col = -1;
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] == "sequence") seq_col = static_cast<int>(i);
        if (cols[i] == "label") label_col = static_cast<int>(i);
    }
    if (seq_col < 0) throw ValidationError(path + ": header has no 'sequence' column");
    if (label_col < 0) throw ValidationError(path + ": header has no 'label' column");

    LabeledData data;
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
        if (static_cast<int>(cells.size()) <= std::max(seq_col, label_col))
            throw ValidationError(path + ":" + std::to_string(line_no) + ": too few columns");
        data.sequences.push_back(cells[static_cast<std::size_t>(seq_col)]);
        try {
            data.labels.push_back(std::stod(cells[static_cast<std::size_t>(label_col)]));
        } catch (const std::exception&) {
            throw ValidationError(path + ":" + std::to_string(line_no) + ": label is not numeric");
        }
    }
    if (data.sequences.empty()) throw ValidationError(path + ": no data rows");
    return data;
}

void write_labeled_csv(const std::string& path, const LabeledData& data) {
    std::ofstream out = open_out(path);
    out << "sequence,label\n";
    out.precision(17);
    for (std::size_t i = 0; i < data.sequences.size(); ++i)
        out << data.sequences[i] << ',' << data.labels[i] << '\n';
}

void append_jsonl(const std::string& path, const json& object) {
    std::ofstream out(path, std::ios_base::app);
    if (!out) throw RuntimeFailure("cannot append to " + path);
    out << object.dump() << '\n';
}

std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in = open_in(path);
    std::vector<json> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        rows.push_back(json::parse(line));
    }
    return rows;
}

json read_json_file(const std::string& path) {
    std::ifstream in = open_in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ValidationError(path + ": " + e.what());
    }
}

void write_json_file(const std::string& path, const json& j, int indent) {
    std::ofstream out = open_out(path);
    out << j.dump(indent) << '\n';
}

} // namespace codonball::io
