#include "codonball/lm.hpp"

#include <cmath>
#include <numbers>

namespace codonball::lm {

using diff::Matrix;
using diff::Tape;
using diff::Var;

std::vector<int> tokenize(std::string_view nucleotides) {
    if (nucleotides.size() % 3 != 0)
        throw ValidationError("tokenize: length " + std::to_string(nucleotides.size()) +
                              " is not divisible by 3");
    std::vector<int> ids;
    ids.reserve(nucleotides.size() / 3);
    for (std::size_t i = 0; i < nucleotides.size(); ++i) {
        if (vocab::base_index(nucleotides[i]) < 0)
            throw ValidationError("tokenize: invalid character '" + std::string(1, nucleotides[i]) +
                                  "' at position " + std::to_string(i));
        if (i % 3 == 2) ids.push_back(vocab::codon_id(nucleotides.substr(i - 2, 3)));
    }
    return ids;
}

std::string detokenize(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size() * 3);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!vocab::is_codon(ids[i]))
            throw ValidationError("detokenize: token at position " + std::to_string(i) +
                                  " is not a codon");
        out += vocab::codon_string(ids[i]);
    }
    return out;
}

MaskScheme mask_scheme_from_string(const std::string& name) {
    if (name == "plain") return MaskScheme::Plain;
    if (name == "bert") return MaskScheme::Bert;
    throw ValidationError("unknown mask scheme '" + name + "' (plain|bert)");
}

std::string to_string(MaskScheme scheme) {
    return scheme == MaskScheme::Plain ? "plain" : "bert";
}

std::size_t MaskedBatch::total_masked() const {
    std::size_t n = 0;
    for (const auto& positions : mask_positions) n += positions.size();
    return n;
}

MaskedBatch mask_batch(const std::vector<std::vector<int>>& sequences, double rate,
                       MaskScheme scheme, std::uint64_t seed) {
    if (rate < 0.0 || rate > 1.0) throw ValidationError("mask_batch: rate must be in [0,1]");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<int> random_codon(0, vocab::kCodonCount - 1);

    MaskedBatch batch;
    batch.input_ids = sequences;
    batch.target_ids.resize(sequences.size());
    batch.mask_positions.resize(sequences.size());
    for (std::size_t s = 0; s < sequences.size(); ++s) {
        batch.target_ids[s].assign(sequences[s].size(), MaskedBatch::kIgnore);
        for (std::size_t i = 0; i < sequences[s].size(); ++i) {
            const int id = sequences[s][i];
            if (vocab::is_special(id)) continue;
            if (unif(rng) >= rate) continue;
            batch.target_ids[s][i] = id;
            batch.mask_positions[s].push_back(static_cast<int>(i));
            if (scheme == MaskScheme::Plain) {
                batch.input_ids[s][i] = vocab::kMask;
            } else {
                const double roll = unif(rng);
                if (roll < 0.8) batch.input_ids[s][i] = vocab::kMask;
                else if (roll < 0.9) batch.input_ids[s][i] = random_codon(rng);
                // else unchanged
            }
        }
    }
    return batch;
}

void BackboneConfig::validate() const {
    if (layers < 1) throw ValidationError("backbone: layers must be positive");
    if (hidden < 1 || intermediate < 1) throw ValidationError("backbone: sizes must be positive");
    if (heads < 1 || hidden % heads != 0)
        throw ValidationError("backbone: hidden (" + std::to_string(hidden) +
                              ") must be divisible by heads (" + std::to_string(heads) + ")");
    if (pos_table < max_context)
        throw ValidationError("backbone: positional table smaller than the context");
    if (dropout < 0.0 || dropout >= 1.0) throw ValidationError("backbone: dropout must be in [0,1)");
}

BackboneConfig BackboneConfig::full_scale() {
    BackboneConfig cfg;
    cfg.layers = 10;
    cfg.hidden = 640;
    cfg.intermediate = 2560;
    cfg.heads = 8;
    cfg.max_context = 444;
    cfg.pos_table = 2048;
    return cfg;
}

Matrix& ParamSet::at(const std::string& name) {
    for (auto& [n, m] : items)
        if (n == name) return m;
    throw ValidationError("params: missing '" + name + "'");
}

const Matrix& ParamSet::at(const std::string& name) const {
    for (const auto& [n, m] : items)
        if (n == name) return m;
    throw ValidationError("params: missing '" + name + "'");
}

bool ParamSet::has(const std::string& name) const {
    for (const auto& [n, m] : items)
        if (n == name) return true;
    return false;
}

void ParamSet::add(const std::string& name, Matrix value) {
    if (has(name)) throw ValidationError("params: duplicate '" + name + "'");
    items.emplace_back(name, std::move(value));
}

Var TapeParams::at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ValidationError("tape params: missing '" + name + "'");
    return it->second;
}

TapeParams register_params(Tape& tape, const ParamSet& params, bool requires_grad) {
    TapeParams out;
    for (const auto& [name, value] : params.items)
        out.vars.emplace(name, tape.input(value, requires_grad));
    return out;
}

namespace {

Matrix gaussian(Eigen::Index r, Eigen::Index c, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, stddev);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = gauss(rng);
    return m;
}

} // namespace

ParamSet init_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const double std0 = 0.02;
    ParamSet p;
    p.add("tok_emb", gaussian(vocab::kSize, cfg.hidden, std0, rng));
    p.add("pos_emb", gaussian(cfg.pos_table, cfg.hidden, std0, rng));
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        p.add(pre + "ln1_g", Matrix::Ones(1, cfg.hidden));
        p.add(pre + "ln1_b", Matrix::Zero(1, cfg.hidden));
        for (const char* w : {"wq", "wk", "wv", "wo"})
            p.add(pre + w, gaussian(cfg.hidden, cfg.hidden, std0, rng));
        for (const char* b : {"bq", "bk", "bv", "bo"})
            p.add(pre + b, Matrix::Zero(1, cfg.hidden));
        p.add(pre + "ln2_g", Matrix::Ones(1, cfg.hidden));
        p.add(pre + "ln2_b", Matrix::Zero(1, cfg.hidden));
        p.add(pre + "w1", gaussian(cfg.hidden, cfg.intermediate, std0, rng));
        p.add(pre + "b1", Matrix::Zero(1, cfg.intermediate));
        p.add(pre + "w2", gaussian(cfg.intermediate, cfg.hidden, std0, rng));
        p.add(pre + "b2", Matrix::Zero(1, cfg.hidden));
    }
    p.add("lnf_g", Matrix::Ones(1, cfg.hidden));
    p.add("lnf_b", Matrix::Zero(1, cfg.hidden));
    return p;
}

Var gelu(Var x) {
    // 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
    const double k = std::sqrt(2.0 / std::numbers::pi);
    Var x3 = diff::mul(diff::mul(x, x), x);
    Var inner = diff::mul_scalar(diff::add(x, diff::mul_scalar(x3, 0.044715)), k);
    Var t = diff::add_scalar(diff::tanh(inner), 1.0);
    return diff::mul_scalar(diff::mul(x, t), 0.5);
}

namespace {

Var maybe_dropout(Tape& tape, Var x, double rate, std::mt19937_64* rng) {
    if (rate <= 0.0 || rng == nullptr) return x;
    std::bernoulli_distribution keep(1.0 - rate);
    Matrix mask(x.rows(), x.cols());
    const double scale = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask(i) = keep(*rng) ? scale : 0.0;
    return diff::mul(x, tape.constant(std::move(mask)));
}

} // namespace

BatchStates backbone_forward_batch(Tape& tape, const TapeParams& params, const BackboneConfig& cfg,
                                   const std::vector<std::vector<int>>& batch,
                                   std::mt19937_64* dropout_rng) {
    cfg.validate();
    if (batch.empty()) throw ValidationError("backbone: empty batch");
    std::vector<int> ids, positions, offsets;
    offsets.reserve(batch.size());
    for (const auto& seq : batch) {
        if (seq.empty()) throw ValidationError("backbone: empty sequence");
        if (static_cast<int>(seq.size()) > cfg.max_context)
            throw ValidationError("backbone: sequence length " + std::to_string(seq.size()) +
                                  " exceeds the context " + std::to_string(cfg.max_context));
        offsets.push_back(static_cast<int>(ids.size()));
        for (std::size_t i = 0; i < seq.size(); ++i) {
            ids.push_back(seq[i]);
            positions.push_back(static_cast<int>(i));
        }
    }

    Var x = diff::add(diff::embedding_lookup(params.at("tok_emb"), ids),
                      diff::embedding_lookup(params.at("pos_emb"), positions));

    const int dh = cfg.hidden / cfg.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int l = 0; l < cfg.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        Var xn = diff::layer_norm(x, params.at(pre + "ln1_g"), params.at(pre + "ln1_b"));
        Var q = diff::mul_scalar(
            diff::add(diff::matmul(xn, params.at(pre + "wq")), params.at(pre + "bq")), inv_sqrt_dh);
        Var k = diff::add(diff::matmul(xn, params.at(pre + "wk")), params.at(pre + "bk"));
        Var v = diff::add(diff::matmul(xn, params.at(pre + "wv")), params.at(pre + "bv"));
        std::vector<Var> per_seq;
        per_seq.reserve(batch.size());
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const int off = offsets[s];
            const int len = static_cast<int>(batch[s].size());
            Var qs = diff::slice_rows(q, off, len);
            Var ks = diff::slice_rows(k, off, len);
            Var vs = diff::slice_rows(v, off, len);
            std::vector<Var> heads_out;
            heads_out.reserve(static_cast<std::size_t>(cfg.heads));
            for (int h = 0; h < cfg.heads; ++h) {
                Var qh = diff::slice_cols(qs, h * dh, dh);
                Var kh = diff::slice_cols(ks, h * dh, dh);
                Var vh = diff::slice_cols(vs, h * dh, dh);
                Var att = diff::softmax(diff::matmul(qh, kh, false, true));
                heads_out.push_back(diff::matmul(att, vh));
            }
            per_seq.push_back(diff::concat(heads_out, 1));
        }
        Var att_all = per_seq.size() == 1 ? per_seq[0] : diff::concat(per_seq, 0);
        Var proj = diff::add(diff::matmul(att_all, params.at(pre + "wo")), params.at(pre + "bo"));
        proj = maybe_dropout(tape, proj, cfg.dropout, dropout_rng);
        x = diff::add(x, proj);

        Var xn2 = diff::layer_norm(x, params.at(pre + "ln2_g"), params.at(pre + "ln2_b"));
        Var mid = gelu(diff::add(diff::matmul(xn2, params.at(pre + "w1")), params.at(pre + "b1")));
        Var ff = diff::add(diff::matmul(mid, params.at(pre + "w2")), params.at(pre + "b2"));
        ff = maybe_dropout(tape, ff, cfg.dropout, dropout_rng);
        x = diff::add(x, ff);
    }
    Var out = diff::layer_norm(x, params.at("lnf_g"), params.at("lnf_b"));
    return BatchStates{out, std::move(offsets)};
}

Var backbone_forward(Tape& tape, const TapeParams& params, const BackboneConfig& cfg,
                     const std::vector<int>& ids, const std::vector<bool>* real,
                     std::mt19937_64* dropout_rng) {
    cfg.validate();
    const int len = static_cast<int>(ids.size());
    if (len == 0) throw ValidationError("backbone: empty sequence");
    if (len > cfg.max_context)
        throw ValidationError("backbone: sequence length " + std::to_string(len) +
                              " exceeds the context " + std::to_string(cfg.max_context));
    if (real && static_cast<int>(real->size()) != len)
        throw ValidationError("backbone: pad mask length mismatch");

    Var x = diff::add(diff::embedding_lookup(params.at("tok_emb"), ids),
                      diff::slice_rows(params.at("pos_emb"), 0, len));

    // additive attention mask: padded keys get a large negative score
    Matrix att_mask = Matrix::Zero(len, len);
    if (real) {
        for (int j = 0; j < len; ++j)
            if (!(*real)[static_cast<std::size_t>(j)]) att_mask.col(j).setConstant(-1e9);
    }
    Var mask = tape.constant(att_mask);

    const int dh = cfg.hidden / cfg.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (int l = 0; l < cfg.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        Var xn = diff::layer_norm(x, params.at(pre + "ln1_g"), params.at(pre + "ln1_b"));
        Var q = diff::add(diff::matmul(xn, params.at(pre + "wq")), params.at(pre + "bq"));
        Var k = diff::add(diff::matmul(xn, params.at(pre + "wk")), params.at(pre + "bk"));
        Var v = diff::add(diff::matmul(xn, params.at(pre + "wv")), params.at(pre + "bv"));
        std::vector<Var> heads_out;
        heads_out.reserve(static_cast<std::size_t>(cfg.heads));
        for (int h = 0; h < cfg.heads; ++h) {
            Var qh = diff::slice_cols(q, h * dh, dh);
            Var kh = diff::slice_cols(k, h * dh, dh);
            Var vh = diff::slice_cols(v, h * dh, dh);
            Var scores = diff::add(diff::mul_scalar(diff::matmul(qh, kh, false, true), inv_sqrt_dh), mask);
            heads_out.push_back(diff::matmul(diff::softmax(scores), vh));
        }
        Var att = diff::concat(heads_out, 1);
        Var proj = diff::add(diff::matmul(att, params.at(pre + "wo")), params.at(pre + "bo"));
        proj = maybe_dropout(tape, proj, cfg.dropout, dropout_rng);
        x = diff::add(x, proj);

        Var xn2 = diff::layer_norm(x, params.at(pre + "ln2_g"), params.at(pre + "ln2_b"));
        Var mid = gelu(diff::add(diff::matmul(xn2, params.at(pre + "w1")), params.at(pre + "b1")));
        Var ff = diff::add(diff::matmul(mid, params.at(pre + "w2")), params.at(pre + "b2"));
        ff = maybe_dropout(tape, ff, cfg.dropout, dropout_rng);
        x = diff::add(x, ff);
    }
    return diff::layer_norm(x, params.at("lnf_g"), params.at("lnf_b"));
}

} // namespace codonball::lm
