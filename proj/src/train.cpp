#include "codonball/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>

#include "codonball/ball_diff.hpp"

namespace codonball::train {

using diff::Matrix;
using diff::Tape;
using diff::Var;
using Eigen::VectorXd;
using nlohmann::json;

// ---------------------------------------------------------------- HXE loss

namespace {

// leaf-token indicator per tree node: L(t, n) = 1 iff the leaf of token t
// lies in the subtree rooted at n
Matrix subtree_indicator(const hierarchy::CodonTree& tree) {
    Matrix ind = Matrix::Zero(vocab::kSize, tree.size());
    for (int token = 0; token < vocab::kSize; ++token) {
        if (!tree.has_token(token)) continue;
        int node = tree.leaf_of_token(token);
        while (true) {
            ind(token, node) = 1.0;
            if (node == tree.root()) break;
            node = tree.node(node).parent;
        }
    }
    return ind;
}

void check_probability_row(const VectorXd& probs) {
    if (probs.size() != vocab::kSize)
        throw ValidationError("hxe: probability row must have " + std::to_string(vocab::kSize) +
                              " entries");
    if (std::abs(probs.sum() - 1.0) > 1e-6)
        throw ValidationError("hxe: probability row does not sum to 1");
}

} // namespace

double hxe_loss(const VectorXd& probabilities, int target, const hierarchy::CodonTree& tree,
                const HxeConfig& cfg) {
    if (cfg.alpha < 0) throw ValidationError("hxe: alpha must be non-negative");
    check_probability_row(probabilities);
    const Matrix ind = subtree_indicator(tree);
    Eigen::RowVectorXd masses = probabilities.transpose() * ind;
    double loss = 0.0;
    int node = tree.leaf_of_token(target);
    int height = 0;
    while (node != tree.root()) {
        const int parent = tree.node(node).parent;
        const double child_mass = std::max(masses(node), 1e-12);
        const double parent_mass = std::max(masses(parent), 1e-12);
        loss += std::exp(-cfg.alpha * height) * (-std::log(child_mass / parent_mass));
        node = parent;
        ++height;
    }
    return loss;
}

Var hxe_loss_tape(Var probabilities, const std::vector<int>& targets,
                  const hierarchy::CodonTree& tree, const HxeConfig& cfg) {
    if (cfg.alpha < 0) throw ValidationError("hxe: alpha must be non-negative");
    const auto rows = probabilities.rows();
    if (rows != static_cast<Eigen::Index>(targets.size()))
        throw ValidationError("hxe: target count does not match probability rows");
    Tape* t = probabilities.tape;

    // path-edge coefficients: +exp(-alpha h) on the parent, -exp(-alpha h)
    // on the child, summed over the leaf-to-root path of each target
    Matrix coef = Matrix::Zero(rows, tree.size());
    for (Eigen::Index i = 0; i < rows; ++i) {
        int node = tree.leaf_of_token(targets[static_cast<std::size_t>(i)]);
        int height = 0;
        while (node != tree.root()) {
            const int parent = tree.node(node).parent;
            const double w = std::exp(-cfg.alpha * height);
            coef(i, parent) += w;
            coef(i, node) -= w;
            node = parent;
            ++height;
        }
    }

    Var masses = diff::matmul(probabilities, t->constant(subtree_indicator(tree)));
    Var logm = diff::log(diff::clamp(masses, 1e-12, std::numeric_limits<double>::infinity()));
    Var per_row = diff::sum(diff::mul(t->constant(coef), logm), diff::Axis::Cols);
    return diff::mul_scalar(diff::sum(per_row), 1.0 / static_cast<double>(rows));
}

// ---------------------------------------------------------------- optimizer

OptimizerState OptimizerState::init(const lm::ParamSet& params, const OptimConfig& cfg) {
    OptimizerState state;
    state.cfg = cfg;
    for (const auto& [name, value] : params.items) {
        state.m.add(name, Matrix::Zero(value.rows(), value.cols()));
        state.v.add(name, Matrix::Zero(value.rows(), value.cols()));
    }
    return state;
}

bool adamw_step(lm::ParamSet& params, const std::map<std::string, Matrix>& grads,
                OptimizerState& state, double lr) {
    for (const auto& [name, value] : params.items) {
        auto it = grads.find(name);
        if (it == grads.end()) throw ValidationError("adamw: missing gradient for '" + name + "'");
        if (!it->second.allFinite()) return false;
        if (it->second.rows() != value.rows() || it->second.cols() != value.cols())
            throw ValidationError("adamw: gradient shape mismatch for '" + name + "'");
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.cfg.beta2, static_cast<double>(state.step));
    for (auto& [name, p] : params.items) {
        const Matrix& g = grads.at(name);
        Matrix& m = state.m.at(name);
        Matrix& v = state.v.at(name);
        m = state.cfg.beta1 * m + (1.0 - state.cfg.beta1) * g;
        v = state.cfg.beta2 * v + (1.0 - state.cfg.beta2) * g.cwiseProduct(g);
        const Matrix update =
            (m / bc1).array() / ((v / bc2).array().sqrt() + state.cfg.eps);
        p -= lr * update + (lr * state.cfg.weight_decay) * p;
    }
    return true;
}

double lr_schedule(long step, long total_steps, long warmup_steps, double lr_max, double lr_min) {
    if (step < 0 || step > total_steps)
        throw ValidationError("lr_schedule: step outside [0, total]");
    if (warmup_steps < 0 || warmup_steps > total_steps)
        throw ValidationError("lr_schedule: bad warmup");
    if (step <= warmup_steps)
        return warmup_steps == 0 ? lr_max
                                 : lr_max * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------- spearman

namespace {

std::vector<double> average_ranks(const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

} // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ValidationError("spearman: length mismatch");
    if (x.size() < 2) throw ValidationError("spearman: need at least 2 points");
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0)
        throw ValidationError("spearman: undefined for a constant vector");
    return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------- corpus

namespace {

struct CodingFamily {
    std::string name;
    std::vector<int> codons;   // token ids, table order
};

std::vector<CodingFamily> coding_families() {
    std::vector<CodingFamily> fams;
    for (const auto& [name, codons] : hierarchy::standard_genetic_code()) {
        if (name == "Stop") continue;
        CodingFamily f{name, {}};
        for (const auto& c : codons) f.codons.push_back(vocab::codon_id(c));
        fams.push_back(std::move(f));
    }
    return fams;
}

std::vector<double> family_distribution(const CodingFamily& fam, double bias_temp) {
    std::vector<double> probs(fam.codons.size(), 0.0);
    if (bias_temp <= 0.0) {
        probs[0] = 1.0;
        return probs;
    }
    double total = 0.0;
    for (std::size_t r = 0; r < probs.size(); ++r) {
        probs[r] = std::exp(-static_cast<double>(r) / bias_temp);
        total += probs[r];
    }
    for (double& p : probs) p /= total;
    return probs;
}

} // namespace

std::vector<std::vector<int>> generate_corpus(const CorpusConfig& cfg) {
    if (cfg.sequences < 1 || cfg.length < 1)
        throw ValidationError("corpus: sequences and length must be positive");
    const auto fams = coding_families();
    std::vector<double> weights(fams.size(), 1.0);
    for (const auto& [name, w] : cfg.family_weights) {
        bool found = false;
        for (std::size_t f = 0; f < fams.size(); ++f)
            if (fams[f].name == name) {
                weights[f] = w;
                found = true;
            }
        if (!found) throw ValidationError("corpus: unknown family '" + name + "'");
    }

    std::mt19937_64 rng(derive_seed(cfg.seed, "corpus"));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::discrete_distribution<std::size_t> weighted(weights.begin(), weights.end());
    std::uniform_int_distribution<std::size_t> uniform_family(0, fams.size() - 1);

    // positional family template; when the length allows, every coding
    // family is covered twice before weighted filling so ENC sees every
    // degeneracy class, otherwise the whole template is weighted
    std::vector<std::size_t> tmpl(static_cast<std::size_t>(cfg.length));
    const std::size_t covered = tmpl.size() >= 2 * fams.size() ? 2 * fams.size() : 0;
    for (std::size_t p = 0; p < tmpl.size(); ++p)
        tmpl[p] = (p < covered) ? p % fams.size() : weighted(rng);
    std::shuffle(tmpl.begin(), tmpl.end(), rng);

    std::vector<std::vector<double>> dists;
    dists.reserve(fams.size());
    for (const auto& fam : fams) dists.push_back(family_distribution(fam, cfg.bias_temp));

    std::vector<int> stop_codons;
    for (const auto& [name, codons] : hierarchy::standard_genetic_code())
        if (name == "Stop")
            for (const auto& c : codons) stop_codons.push_back(vocab::codon_id(c));

    auto sample_codon = [&](std::size_t f) {
        const auto& probs = dists[f];
        double roll = unif(rng);
        for (std::size_t r = 0; r < probs.size(); ++r) {
            roll -= probs[r];
            if (roll <= 0.0) return fams[f].codons[r];
        }
        return fams[f].codons.back();
    };

    std::vector<std::vector<int>> corpus(static_cast<std::size_t>(cfg.sequences));
    for (auto& seq : corpus) {
        seq.resize(static_cast<std::size_t>(cfg.length));
        for (int p = 0; p < cfg.length; ++p) {
            if (cfg.framing && p == 0) {
                seq[0] = vocab::codon_id("ATG");
                continue;
            }
            if (cfg.framing && p == cfg.length - 1) {
                seq[static_cast<std::size_t>(p)] =
                    stop_codons[static_cast<std::size_t>(unif(rng) * 3.0) % 3];
                continue;
            }
            std::size_t f = tmpl[static_cast<std::size_t>(p)];
            if (unif(rng) < cfg.template_noise) f = uniform_family(rng);
            seq[static_cast<std::size_t>(p)] = sample_codon(f);
        }
    }
    return corpus;
}

std::vector<io::FastaRecord> corpus_to_fasta(const std::vector<std::vector<int>>& corpus) {
    std::vector<io::FastaRecord> records;
    records.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i)
        records.push_back({"seq" + std::to_string(i), lm::detokenize(corpus[i])});
    return records;
}

double gct_fraction(const std::vector<int>& token_ids) {
    if (token_ids.empty()) throw ValidationError("gct_fraction: empty sequence");
    const int gct = vocab::codon_id("GCT");
    long count = 0;
    for (int id : token_ids) count += (id == gct);
    return static_cast<double>(count) / static_cast<double>(token_ids.size());
}

// ---------------------------------------------------------------- config

HeadKind head_from_string(const std::string& name) {
    if (name == "xe") return HeadKind::Xe;
    if (name == "helm-hxe") return HeadKind::HelmHxe;
    if (name == "hyper-mlr") return HeadKind::HyperMlr;
    if (name == "proto-dist") return HeadKind::ProtoDist;
    if (name == "proto-entail") return HeadKind::ProtoEntail;
    throw ValidationError("unknown head '" + name +
                          "' (xe|helm-hxe|hyper-mlr|proto-dist|proto-entail)");
}

std::string to_string(HeadKind head) {
    switch (head) {
        case HeadKind::Xe: return "xe";
        case HeadKind::HelmHxe: return "helm-hxe";
        case HeadKind::HyperMlr: return "hyper-mlr";
        case HeadKind::ProtoDist: return "proto-dist";
        case HeadKind::ProtoEntail: return "proto-entail";
    }
    return "?";
}

void TrainConfig::validate() const {
    backbone.validate();
    if (alpha < 0) throw ValidationError("config: alpha must be non-negative");
    if (!(beta > 0)) throw ValidationError("config: beta must be positive");
    if (!(curvature > 0)) throw ValidationError("config: curvature must be positive");
    if (proto_dim < 2) throw ValidationError("config: proto_dim must be at least 2");
    if (mask_rate < 0 || mask_rate > 1) throw ValidationError("config: mask_rate must be in [0,1]");
    if (batch_size < 1) throw ValidationError("config: batch_size must be positive");
    if (steps < 1) throw ValidationError("config: steps must be positive");
    if (eval_sequences < 1) throw ValidationError("config: eval_sequences must be positive");
}

// ---------------------------------------------------------------- head wiring

namespace {

bool is_proto_head(HeadKind head) {
    return head == HeadKind::ProtoDist || head == HeadKind::ProtoEntail;
}

void add_head_params(lm::ParamSet& params, const TrainConfig& cfg, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 0.02);
    auto gaussian = [&](Eigen::Index r, Eigen::Index c) {
        Matrix m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = gauss(rng);
        return m;
    };
    switch (cfg.head) {
        case HeadKind::Xe:
        case HeadKind::HelmHxe:
            params.add("head.w", gaussian(vocab::kSize, cfg.backbone.hidden));
            params.add("head.b", Matrix::Zero(1, vocab::kSize));
            break;
        case HeadKind::HyperMlr:
            params.add("head.z", gaussian(vocab::kSize, cfg.backbone.hidden));
            params.add("head.r", Matrix::Zero(1, vocab::kSize));
            break;
        case HeadKind::ProtoDist:
        case HeadKind::ProtoEntail:
            params.add("head.fc_z", gaussian(cfg.proto_dim, cfg.backbone.hidden));
            params.add("head.fc_r", Matrix::Zero(1, cfg.proto_dim));
            break;
    }
}

// Backbone states enter hyperbolic heads as tangent vectors at the origin.
// Layer-norm output has row norm ~sqrt(hidden); this scale keeps the mapped
// points in the well-conditioned interior of the ball.
double tangent_scale(const TrainConfig& cfg) {
    return 1.0 / std::sqrt(static_cast<double>(cfg.backbone.hidden));
}

heads::DiffHeadOutput apply_head(Var h, const lm::TapeParams& params, const TrainConfig& cfg,
                                 const std::optional<heads::PrototypeSet>& protos) {
    switch (cfg.head) {
        case HeadKind::Xe:
        case HeadKind::HelmHxe:
            return heads::euclidean_mlr_tape(h, params.at("head.w"), params.at("head.b"));
        case HeadKind::HyperMlr: {
            Var x = ball::exp_map_origin(diff::mul_scalar(h, tangent_scale(cfg)), cfg.curvature);
            Var scores =
                heads::hyperbolic_mlr_scores_tape(x, params.at("head.z"), params.at("head.r"), cfg.curvature);
            return heads::DiffHeadOutput{scores, diff::softmax(scores)};
        }
        case HeadKind::ProtoDist:
        case HeadKind::ProtoEntail: {
            Var z = heads::project_tokens_tape(diff::mul_scalar(h, tangent_scale(cfg)),
                                               params.at("head.fc_z"), params.at("head.fc_r"),
                                               cfg.curvature);
            const auto mode = cfg.head == HeadKind::ProtoDist ? heads::ProtoMode::Distance
                                                              : heads::ProtoMode::Entailment;
            return heads::proto_logits_tape(z, *protos, mode, cfg.beta);
        }
    }
    throw ValidationError("apply_head: unknown head");
}

void check_head_inputs(const TrainConfig& cfg, const std::optional<heads::PrototypeSet>& protos) {
    if (!is_proto_head(cfg.head)) return;
    if (!protos)
        throw ValidationError("head '" + to_string(cfg.head) + "' requires a prototype set");
    protos->validate();
    if (protos->dim() != cfg.proto_dim)
        throw ValidationError("prototype dimension " + std::to_string(protos->dim()) +
                              " does not match configured proto_dim " + std::to_string(cfg.proto_dim));
    if (protos->curvature != cfg.curvature)
        throw ValidationError("prototype curvature does not match the configured curvature");
    if (cfg.head == HeadKind::ProtoEntail) {
        heads::ConeConfig cone{protos->cone_k, protos->cone_eta, protos->curvature};
        cone.validate();
        for (Eigen::Index i = 0; i < protos->points.rows(); ++i)
            if (protos->points.row(i).norm() < cone.min_radius())
                throw ValidationError("prototype radius below the entailment cone minimum");
    }
}

} // namespace

// ---------------------------------------------------------------- config json

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw ValidationError(where + ": unknown key '" + key + "'");
}

json backbone_to_json(const lm::BackboneConfig& b) {
    return json{{"layers", b.layers},           {"hidden", b.hidden},
                {"intermediate", b.intermediate}, {"heads", b.heads},
                {"max_context", b.max_context}, {"pos_table", b.pos_table},
                {"dropout", b.dropout}};
}

lm::BackboneConfig backbone_from_json(const json& j) {
    check_keys(j, {"layers", "hidden", "intermediate", "heads", "max_context", "pos_table", "dropout"},
               "backbone");
    lm::BackboneConfig b;
    b.layers = j.value("layers", b.layers);
    b.hidden = j.value("hidden", b.hidden);
    b.intermediate = j.value("intermediate", b.intermediate);
    b.heads = j.value("heads", b.heads);
    b.max_context = j.value("max_context", b.max_context);
    b.pos_table = j.value("pos_table", b.pos_table);
    b.dropout = j.value("dropout", b.dropout);
    return b;
}

} // namespace

json train_config_to_json(const TrainConfig& cfg) {
    return json{{"backbone", backbone_to_json(cfg.backbone)},
                {"head", to_string(cfg.head)},
                {"alpha", cfg.alpha},
                {"beta", cfg.beta},
                {"curvature", cfg.curvature},
                {"proto_dim", cfg.proto_dim},
                {"mask_rate", cfg.mask_rate},
                {"mask_scheme", lm::to_string(cfg.scheme)},
                {"batch_size", cfg.batch_size},
                {"steps", cfg.steps},
                {"lr_max", cfg.schedule.lr_max},
                {"lr_min", cfg.schedule.lr_min},
                {"warmup", cfg.schedule.warmup},
                {"weight_decay", cfg.optim.weight_decay},
                {"adam_beta1", cfg.optim.beta1},
                {"adam_beta2", cfg.optim.beta2},
                {"adam_eps", cfg.optim.eps},
                {"seed", cfg.seed},
                {"eval_sequences", cfg.eval_sequences},
                {"halt_step", cfg.halt_step}};
}

TrainConfig train_config_from_json(const json& j) {
    check_keys(j,
               {"backbone", "head", "alpha", "beta", "curvature", "proto_dim", "mask_rate",
                "mask_scheme", "batch_size", "steps", "lr_max", "lr_min", "warmup", "weight_decay",
                "adam_beta1", "adam_beta2", "adam_eps", "seed", "eval_sequences", "halt_step"},
               "config");
    TrainConfig cfg;
    if (j.contains("backbone")) cfg.backbone = backbone_from_json(j["backbone"]);
    if (j.contains("head")) cfg.head = head_from_string(j["head"].get<std::string>());
    cfg.alpha = j.value("alpha", cfg.alpha);
    cfg.beta = j.value("beta", cfg.beta);
    cfg.curvature = j.value("curvature", cfg.curvature);
    cfg.proto_dim = j.value("proto_dim", cfg.proto_dim);
    cfg.mask_rate = j.value("mask_rate", cfg.mask_rate);
    if (j.contains("mask_scheme"))
        cfg.scheme = lm::mask_scheme_from_string(j["mask_scheme"].get<std::string>());
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.steps = j.value("steps", cfg.steps);
    cfg.schedule.lr_max = j.value("lr_max", cfg.schedule.lr_max);
    cfg.schedule.lr_min = j.value("lr_min", cfg.schedule.lr_min);
    cfg.schedule.warmup = j.value("warmup", cfg.schedule.warmup);
    cfg.optim.weight_decay = j.value("weight_decay", cfg.optim.weight_decay);
    cfg.optim.beta1 = j.value("adam_beta1", cfg.optim.beta1);
    cfg.optim.beta2 = j.value("adam_beta2", cfg.optim.beta2);
    cfg.optim.eps = j.value("adam_eps", cfg.optim.eps);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.eval_sequences = j.value("eval_sequences", cfg.eval_sequences);
    cfg.halt_step = j.value("halt_step", cfg.halt_step);
    return cfg;
}

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    io::TensorArchive archive;
    archive.meta["config"] = ckpt.config;
    archive.meta["step"] = ckpt.step;
    archive.meta["seed"] = ckpt.seed;
    archive.meta["adam_step"] = ckpt.optimizer.step;
    archive.meta["adam"] = {{"weight_decay", ckpt.optimizer.cfg.weight_decay},
                            {"beta1", ckpt.optimizer.cfg.beta1},
                            {"beta2", ckpt.optimizer.cfg.beta2},
                            {"eps", ckpt.optimizer.cfg.eps}};
    json names = json::array();
    for (const auto& [name, value] : ckpt.params.items) names.push_back(name);
    archive.meta["param_names"] = names;
    for (const auto& [name, value] : ckpt.params.items) archive.tensors.emplace_back("param." + name, value);
    for (const auto& [name, value] : ckpt.optimizer.m.items)
        archive.tensors.emplace_back("adam_m." + name, value);
    for (const auto& [name, value] : ckpt.optimizer.v.items)
        archive.tensors.emplace_back("adam_v." + name, value);
    if (ckpt.prototypes) {
        archive.meta["prototypes"] = {{"curvature", ckpt.prototypes->curvature},
                                      {"tau", ckpt.prototypes->tau},
                                      {"K", ckpt.prototypes->cone_k},
                                      {"eta", ckpt.prototypes->cone_eta},
                                      {"token_order", ckpt.prototypes->token_order}};
        archive.tensors.emplace_back("prototypes.points", ckpt.prototypes->points);
    } else {
        archive.meta["prototypes"] = nullptr;
    }
    io::save_archive(path, archive);
}

Checkpoint load_checkpoint(const std::string& path) {
    io::TensorArchive archive = io::load_archive(path);
    Checkpoint ckpt;
    try {
        ckpt.config = archive.meta.at("config");
        ckpt.step = archive.meta.at("step").get<long>();
        ckpt.seed = archive.meta.at("seed").get<std::uint64_t>();
        ckpt.optimizer.step = archive.meta.at("adam_step").get<long>();
        const json& adam = archive.meta.at("adam");
        ckpt.optimizer.cfg.weight_decay = adam.at("weight_decay").get<double>();
        ckpt.optimizer.cfg.beta1 = adam.at("beta1").get<double>();
        ckpt.optimizer.cfg.beta2 = adam.at("beta2").get<double>();
        ckpt.optimizer.cfg.eps = adam.at("eps").get<double>();
        for (const auto& jn : archive.meta.at("param_names")) {
            const std::string name = jn.get<std::string>();
            ckpt.params.add(name, archive.at("param." + name));
            ckpt.optimizer.m.add(name, archive.at("adam_m." + name));
            ckpt.optimizer.v.add(name, archive.at("adam_v." + name));
        }
        if (!archive.meta.at("prototypes").is_null()) {
            heads::PrototypeSet protos;
            const json& jp = archive.meta["prototypes"];
            protos.curvature = jp.at("curvature").get<double>();
            protos.tau = jp.at("tau").get<double>();
            protos.cone_k = jp.at("K").get<double>();
            protos.cone_eta = jp.at("eta").get<double>();
            protos.token_order = jp.at("token_order").get<std::vector<std::string>>();
            protos.points = archive.at("prototypes.points");
            ckpt.prototypes = std::move(protos);
        }
    } catch (const json::exception& e) {
        throw ValidationError(path + ": malformed checkpoint: " + e.what());
    }
    return ckpt;
}

// ---------------------------------------------------------------- pretrain

namespace {

struct BatchStats {
    double loss_sum = 0.0;
    long steps = 0;
    long masked = 0;
    long correct = 0;
    long errors = 0;
    long within_family = 0;

    void absorb_predictions(const Matrix& logits, const std::vector<int>& targets,
                            const hierarchy::CodonTree& tree) {
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            Eigen::Index argmax = 0;
            logits.row(i).maxCoeff(&argmax);
            const int target = targets[static_cast<std::size_t>(i)];
            ++masked;
            if (static_cast<int>(argmax) == target) {
                ++correct;
            } else {
                ++errors;
                if (tree.family_index_of_token(static_cast<int>(argmax)) ==
                    tree.family_index_of_token(target))
                    ++within_family;
            }
        }
    }
};

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, long epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, "order", static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

struct ForwardResult {
    Var probs;
    Matrix logits_value;
    std::vector<int> targets;
    Var loss;
};

// One masked batch through backbone and head on a fresh tape.
ForwardResult forward_batch(Tape& tape, const lm::TapeParams& tp,
                            const std::vector<std::vector<int>>& seqs, const TrainConfig& cfg,
                            const hierarchy::CodonTree& tree,
                            const std::optional<heads::PrototypeSet>& protos, std::uint64_t mask_seed) {
    lm::MaskedBatch batch;
    for (int salt = 0; salt < 64; ++salt) {
        batch = lm::mask_batch(seqs, cfg.mask_rate, cfg.scheme,
                               derive_seed(mask_seed, "retry", static_cast<std::uint64_t>(salt)));
        if (batch.total_masked() > 0) break;
    }
    if (batch.total_masked() == 0)
        throw RuntimeFailure("masking produced no positions after 64 attempts");

    auto fwd = lm::backbone_forward_batch(tape, tp, cfg.backbone, batch.input_ids);
    std::vector<int> gather_rows;
    std::vector<int> targets;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        for (int pos : batch.mask_positions[s]) {
            gather_rows.push_back(fwd.offsets[s] + pos);
            targets.push_back(batch.target_ids[s][static_cast<std::size_t>(pos)]);
        }
    }
    Var h = diff::embedding_lookup(fwd.states, gather_rows);
    auto out = apply_head(h, tp, cfg, protos);
    Var loss = hxe_loss_tape(out.probabilities, targets, tree, HxeConfig{cfg.alpha});
    return ForwardResult{out.probabilities, out.logits.value(), std::move(targets), loss};
}

EvalMetrics eval_pass(const std::vector<std::vector<int>>& corpus, const TrainConfig& cfg,
                      const hierarchy::CodonTree& tree,
                      const std::optional<heads::PrototypeSet>& protos, const lm::ParamSet& params) {
    const std::size_t n = std::min<std::size_t>(corpus.size(), static_cast<std::size_t>(cfg.eval_sequences));
    BatchStats stats;
    double loss_weighted = 0.0;
    double baseline_sum = 0.0;
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<std::vector<int>> seqs(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                                           corpus.begin() + static_cast<std::ptrdiff_t>(stop));
        Tape tape;
        lm::TapeParams tp = lm::register_params(tape, params, false);
        auto fwd = forward_batch(tape, tp, seqs, cfg, tree, protos,
                                 derive_seed(cfg.seed, "eval", start));
        stats.absorb_predictions(fwd.logits_value, fwd.targets, tree);
        loss_weighted += fwd.loss.value()(0, 0) * static_cast<double>(fwd.targets.size());
        for (int target : fwd.targets) {
            const int fam = tree.family_index_of_token(target);
            baseline_sum += static_cast<double>(tree.children(fam).size() - 1) / 63.0;
        }
    }
    EvalMetrics eval;
    eval.masked_count = stats.masked;
    eval.loss = loss_weighted / static_cast<double>(std::max<long>(stats.masked, 1));
    eval.masked_acc = static_cast<double>(stats.correct) / static_cast<double>(std::max<long>(stats.masked, 1));
    eval.within_family_err_frac =
        stats.errors > 0 ? static_cast<double>(stats.within_family) / static_cast<double>(stats.errors) : 0.0;
    eval.random_within_baseline = baseline_sum / static_cast<double>(std::max<long>(stats.masked, 1));
    return eval;
}

} // namespace

TrainResult pretrain_mlm(const std::vector<std::vector<int>>& corpus, const TrainConfig& cfg,
                         const hierarchy::CodonTree& tree,
                         const std::optional<heads::PrototypeSet>& prototypes,
                         const std::string* metrics_path, const Checkpoint* resume) {
    cfg.validate();
    if (corpus.empty()) throw ValidationError("pretrain: empty corpus");
    for (const auto& seq : corpus) {
        if (seq.empty()) throw ValidationError("pretrain: empty sequence in the corpus");
        if (static_cast<int>(seq.size()) > cfg.backbone.max_context)
            throw ValidationError("pretrain: sequence longer than the context window");
        for (int id : seq)
            if (id < 0 || id >= vocab::kSize)
                throw ValidationError("pretrain: token id outside the vocabulary");
    }
    check_head_inputs(cfg, prototypes);
    if (!tree.covers_vocabulary())
        throw ValidationError("pretrain: tree does not cover the vocabulary");

    TrainResult result;
    long start_step = 0;
    lm::ParamSet params;
    OptimizerState opt;
    if (resume) {
        params = resume->params;
        opt = resume->optimizer;
        start_step = resume->step;
        if (resume->config.at("head").get<std::string>() != to_string(cfg.head))
            throw ValidationError("resume: head kind differs from the checkpoint");
    } else {
        std::mt19937_64 rng(derive_seed(cfg.seed, "init"));
        params = lm::init_backbone(cfg.backbone, derive_seed(cfg.seed, "backbone"));
        add_head_params(params, cfg, rng);
        opt = OptimizerState::init(params, cfg.optim);
    }

    if (metrics_path && !resume) {
        std::ofstream truncate(*metrics_path, std::ios_base::trunc);
        if (!truncate) throw RuntimeFailure("cannot write " + *metrics_path);
    }

    const auto steps_per_epoch =
        static_cast<long>((corpus.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                          static_cast<std::size_t>(cfg.batch_size));
    BatchStats epoch_stats;
    long rejected_steps = 0;
    const long warmup = std::min(cfg.schedule.warmup, cfg.steps);
    const long stop_step = cfg.halt_step > 0 ? std::min(cfg.halt_step, cfg.steps) : cfg.steps;

    for (long step = start_step; step < stop_step; ++step) {
        const long epoch = step / steps_per_epoch;
        const long offset = (step % steps_per_epoch) * cfg.batch_size;
        const auto order = epoch_order(corpus.size(), cfg.seed, epoch);
        std::vector<std::vector<int>> seqs;
        for (long i = offset; i < offset + cfg.batch_size && i < static_cast<long>(corpus.size()); ++i)
            seqs.push_back(corpus[order[static_cast<std::size_t>(i)]]);

        Tape tape;
        lm::TapeParams tp = lm::register_params(tape, params, true);
        auto fwd = forward_batch(tape, tp, seqs, cfg, tree, prototypes,
                                 derive_seed(cfg.seed, "mask", static_cast<std::uint64_t>(step)));
        const double loss = fwd.loss.value()(0, 0);
        if (!std::isfinite(loss))
            throw RuntimeFailure("pretrain: non-finite loss at step " + std::to_string(step) +
                                 " (head " + to_string(cfg.head) + ")");
        tape.backward(fwd.loss);

        std::map<std::string, Matrix> grads;
        for (const auto& [name, var] : tp.vars) grads.emplace(name, tape.grad(var));
        const double lr = lr_schedule(step + 1, cfg.steps, warmup, cfg.schedule.lr_max,
                                      cfg.schedule.lr_min);
        if (!adamw_step(params, grads, opt, lr)) {
            ++rejected_steps;
            std::cerr << "pretrain: rejected step " << step << " (non-finite gradient)\n";
        }

        result.step_losses.push_back(loss);
        epoch_stats.loss_sum += loss;
        epoch_stats.steps += 1;
        epoch_stats.absorb_predictions(fwd.logits_value, fwd.targets, tree);

        const bool epoch_end = ((step + 1) % steps_per_epoch == 0) || (step + 1 == stop_step);
        if (epoch_end) {
            EpochMetrics em;
            em.step = step + 1;
            em.loss = epoch_stats.loss_sum / static_cast<double>(epoch_stats.steps);
            em.masked_acc =
                static_cast<double>(epoch_stats.correct) / static_cast<double>(std::max<long>(epoch_stats.masked, 1));
            em.within_family_err_frac =
                epoch_stats.errors > 0
                    ? static_cast<double>(epoch_stats.within_family) / static_cast<double>(epoch_stats.errors)
                    : 0.0;
            em.lr = lr;
            result.epochs.push_back(em);
            if (metrics_path)
                io::append_jsonl(*metrics_path,
                                 json{{"step", em.step},
                                      {"loss", em.loss},
                                      {"masked_acc", em.masked_acc},
                                      {"within_family_err_frac", em.within_family_err_frac},
                                      {"lr", em.lr}});
            epoch_stats = BatchStats{};
        }
    }
    if (rejected_steps > 0)
        std::cerr << "pretrain: " << rejected_steps << " steps rejected\n";

    result.final_eval = eval_pass(corpus, cfg, tree, prototypes, params);
    result.checkpoint.config = train_config_to_json(cfg);
    result.checkpoint.step = stop_step;
    result.checkpoint.seed = cfg.seed;
    result.checkpoint.params = std::move(params);
    result.checkpoint.optimizer = std::move(opt);
    result.checkpoint.prototypes = prototypes;
    return result;
}

// ---------------------------------------------------------------- probe

namespace {

// column-wise max over rows by pairwise folding: max(a,b) = a + max0(b-a)
Var fold_max_rows(Var x) {
    while (x.rows() > 1) {
        const int nr = static_cast<int>(x.rows());
        const int half = nr / 2;
        Var a = diff::slice_rows(x, 0, half);
        Var b = diff::slice_rows(x, half, half);
        Var m = diff::add(a, diff::max0(diff::sub(b, a)));
        if (nr % 2 == 1) {
            Var last = diff::slice_rows(x, nr - 1, 1);
            x = diff::concat({m, last}, 0);
        } else {
            x = m;
        }
    }
    return x;
}

struct ProbeData {
    std::vector<Matrix> features;   // standardized backbone states per sequence
    std::vector<double> labels;
    std::vector<std::size_t> train_idx, val_idx, test_idx;
    int classes = 0;                // 0 for regression
};

// One convolution GEMM per width for the whole batch; sequences are pooled
// from their row blocks of the shared output.
std::vector<Var> textcnn_features(Tape& tape, const std::vector<const Matrix*>& batch_feats,
                                  const ProbeConfig& cfg, const lm::TapeParams& tp) {
    std::vector<std::vector<Var>> pooled(batch_feats.size());
    for (int w : cfg.widths) {
        const auto hidden = batch_feats.front()->cols();
        Eigen::Index total = 0;
        std::vector<Eigen::Index> window_counts;
        for (const Matrix* f : batch_feats) {
            window_counts.push_back(f->rows() - w + 1);
            total += window_counts.back();
        }
        Matrix win(total, w * hidden);
        Eigen::Index row = 0;
        for (const Matrix* f : batch_feats) {
            const auto windows = f->rows() - w + 1;
            for (Eigen::Index i = 0; i < windows; ++i)
                for (int k = 0; k < w; ++k) win.block(row + i, k * hidden, 1, hidden) = f->row(i + k);
            row += windows;
        }
        Var conv = diff::max0(diff::add(diff::matmul(tape.constant(std::move(win)),
                                                     tp.at("conv" + std::to_string(w) + ".w")),
                                        tp.at("conv" + std::to_string(w) + ".b")));
        Eigen::Index off = 0;
        for (std::size_t s = 0; s < batch_feats.size(); ++s) {
            pooled[s].push_back(fold_max_rows(
                diff::slice_rows(conv, static_cast<int>(off), static_cast<int>(window_counts[s]))));
            off += window_counts[s];
        }
    }
    std::vector<Var> rows;
    rows.reserve(batch_feats.size());
    for (auto& parts : pooled) rows.push_back(diff::concat(parts, 1));
    return rows;   // one (1 x widths*channels) row per sequence
}

lm::ParamSet init_textcnn(const ProbeConfig& cfg, Eigen::Index hidden, int out_dim,
                          std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    lm::ParamSet p;
    auto gaussian = [&](Eigen::Index r, Eigen::Index c, double stddev) {
        std::normal_distribution<double> gauss(0.0, stddev);
        Matrix m(r, c);
        for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = gauss(rng);
        return m;
    };
    for (int w : cfg.widths) {
        p.add("conv" + std::to_string(w) + ".w",
              gaussian(w * hidden, cfg.channels, std::sqrt(2.0 / static_cast<double>(w * hidden))));
        p.add("conv" + std::to_string(w) + ".b", Matrix::Zero(1, cfg.channels));
    }
    const auto feat_dim = static_cast<Eigen::Index>(cfg.widths.size()) * cfg.channels;
    p.add("out.w", gaussian(feat_dim, out_dim, 0.01));
    p.add("out.b", Matrix::Zero(1, out_dim));
    return p;
}

std::vector<double> probe_predict(const ProbeData& data, const std::vector<std::size_t>& idx,
                                  const ProbeConfig& cfg, const lm::ParamSet& params) {
    std::vector<double> preds;
    preds.reserve(idx.size());
    for (std::size_t start = 0; start < idx.size(); start += 64) {
        const std::size_t stop = std::min(idx.size(), start + 64);
        Tape tape;
        lm::TapeParams tp = lm::register_params(tape, params, false);
        std::vector<const Matrix*> feats;
        for (std::size_t k = start; k < stop; ++k) feats.push_back(&data.features[idx[k]]);
        Var rows = diff::concat(textcnn_features(tape, feats, cfg, tp), 0);
        Var out = diff::add(diff::matmul(rows, tp.at("out.w")), tp.at("out.b"));
        for (Eigen::Index r = 0; r < out.rows(); ++r) {
            if (data.classes > 0) {
                Eigen::Index argmax = 0;
                out.value().row(r).maxCoeff(&argmax);
                preds.push_back(static_cast<double>(argmax));
            } else {
                preds.push_back(out.value()(r, 0));
            }
        }
    }
    return preds;
}

double probe_metric(const ProbeData& data, const std::vector<std::size_t>& idx,
                    const std::vector<double>& preds) {
    std::vector<double> truth;
    truth.reserve(idx.size());
    for (std::size_t i : idx) truth.push_back(data.labels[i]);
    if (data.classes > 0) {
        long correct = 0;
        for (std::size_t k = 0; k < idx.size(); ++k)
            correct += (static_cast<long>(preds[k]) == static_cast<long>(truth[k]));
        return static_cast<double>(correct) / static_cast<double>(idx.size());
    }
    return spearman(preds, truth);
}

} // namespace

ProbeResult probe_train(const Checkpoint& ckpt, const std::vector<std::string>& sequences,
                        const std::vector<double>& labels, const ProbeConfig& cfg) {
    if (sequences.size() != labels.size())
        throw ValidationError("probe: sequence and label counts differ");
    if (sequences.size() < 20) throw ValidationError("probe: need at least 20 labeled sequences");
    if (cfg.learning_rates.empty() || cfg.batch_sizes.empty())
        throw ValidationError("probe: empty hyperparameter grid");
    if (cfg.epochs < 1 || cfg.channels < 1) throw ValidationError("probe: bad epochs/channels");

    const TrainConfig train_cfg = train_config_from_json(ckpt.config);
    const lm::BackboneConfig& backbone = train_cfg.backbone;

    ProbeData data;
    data.labels = labels;
    const int max_width = *std::max_element(cfg.widths.begin(), cfg.widths.end());

    // frozen backbone features
    for (const auto& seq : sequences) {
        const auto ids = lm::tokenize(seq);
        if (static_cast<int>(ids.size()) < max_width)
            throw ValidationError("probe: sequence shorter than the widest convolution");
        Tape tape;
        lm::TapeParams tp = lm::register_params(tape, ckpt.params, false);
        data.features.push_back(lm::backbone_forward(tape, tp, backbone, ids).value());
    }

    // 70/15/15 split
    std::vector<std::size_t> perm(sequences.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 split_rng(derive_seed(cfg.seed, "split"));
    std::shuffle(perm.begin(), perm.end(), split_rng);
    const auto n_train = static_cast<std::size_t>(0.7 * static_cast<double>(perm.size()));
    const auto n_val = static_cast<std::size_t>(0.15 * static_cast<double>(perm.size()));
    data.train_idx.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    data.val_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                        perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    data.test_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
    if (data.train_idx.empty() || data.val_idx.empty() || data.test_idx.empty())
        throw ValidationError("probe: a split is empty");

    if (cfg.classification) {
        int max_class = 0;
        for (double label : labels) {
            if (std::abs(label - std::round(label)) > 1e-9 || label < 0)
                throw ValidationError("probe: classification labels must be non-negative integers");
            max_class = std::max(max_class, static_cast<int>(std::round(label)));
        }
        data.classes = max_class + 1;
        if (data.classes < 2) throw ValidationError("probe: need at least two classes");
    }

    // standardize features with train-split statistics
    {
        Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(backbone.hidden);
        Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(backbone.hidden);
        long rows = 0;
        for (std::size_t i : data.train_idx) {
            mean += data.features[i].colwise().sum();
            sq += data.features[i].array().square().matrix().colwise().sum();
            rows += data.features[i].rows();
        }
        mean /= static_cast<double>(rows);
        Eigen::RowVectorXd std_dev =
            (sq / static_cast<double>(rows) - mean.array().square().matrix()).array().max(1e-12).sqrt();
        for (auto& f : data.features)
            f = (f.rowwise() - mean).array().rowwise() / std_dev.array();
    }

    // label standardization for the regression loss (metric uses raw labels)
    double label_mean = 0.0, label_std = 1.0;
    if (!cfg.classification) {
        for (std::size_t i : data.train_idx) label_mean += labels[i];
        label_mean /= static_cast<double>(data.train_idx.size());
        double var = 0.0;
        for (std::size_t i : data.train_idx) var += (labels[i] - label_mean) * (labels[i] - label_mean);
        label_std = std::sqrt(std::max(var / static_cast<double>(data.train_idx.size()), 1e-12));
    }

    const int out_dim = cfg.classification ? data.classes : 1;
    ProbeResult result;
    lm::ParamSet best_params;
    double best_val = -1e300;

    int cell_index = 0;
    for (double lr : cfg.learning_rates) {
        for (int batch_size : cfg.batch_sizes) {
            lm::ParamSet params = init_textcnn(cfg, backbone.hidden, out_dim,
                                               derive_seed(cfg.seed, "cell", static_cast<std::uint64_t>(cell_index)));
            OptimConfig adam;
            adam.weight_decay = 0.0;
            OptimizerState opt = OptimizerState::init(params, adam);

            for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
                std::vector<std::size_t> order = data.train_idx;
                std::mt19937_64 rng(derive_seed(cfg.seed, "epoch",
                                                static_cast<std::uint64_t>(cell_index * 10000 + epoch)));
                std::shuffle(order.begin(), order.end(), rng);
                for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
                    const std::size_t stop =
                        std::min(order.size(), start + static_cast<std::size_t>(batch_size));
                    Tape tape;
                    lm::TapeParams tp = lm::register_params(tape, params, true);
                    std::vector<const Matrix*> batch_feats;
                    for (std::size_t k = start; k < stop; ++k)
                        batch_feats.push_back(&data.features[order[k]]);
                    std::vector<Var> rows = textcnn_features(tape, batch_feats, cfg, tp);
                    Var feats = rows.size() == 1 ? rows[0] : diff::concat(rows, 0);
                    Var out = diff::add(diff::matmul(feats, tp.at("out.w")), tp.at("out.b"));
                    Var loss;
                    if (cfg.classification) {
                        Matrix onehot = Matrix::Zero(static_cast<Eigen::Index>(stop - start), out_dim);
                        for (std::size_t k = start; k < stop; ++k)
                            onehot(static_cast<Eigen::Index>(k - start),
                                   static_cast<Eigen::Index>(std::round(data.labels[order[k]]))) = 1.0;
                        Var probs = diff::softmax(out);
                        Var picked = diff::sum(diff::mul(probs, tape.constant(onehot)), diff::Axis::Cols);
                        loss = diff::mul_scalar(
                            diff::mean(diff::log(diff::clamp(picked, 1e-12, 1.0))), -1.0);
                    } else {
                        Matrix y(static_cast<Eigen::Index>(stop - start), 1);
                        for (std::size_t k = start; k < stop; ++k)
                            y(static_cast<Eigen::Index>(k - start), 0) =
                                (data.labels[order[k]] - label_mean) / label_std;
                        Var err = diff::sub(out, tape.constant(y));
                        loss = diff::mean(diff::mul(err, err));
                    }
                    tape.backward(loss);
                    std::map<std::string, Matrix> grads;
                    for (const auto& [name, var] : tp.vars) grads.emplace(name, tape.grad(var));
                    adamw_step(params, grads, opt, lr);
                }
            }

            const auto val_preds = probe_predict(data, data.val_idx, cfg, params);
            ProbeCell cell{lr, batch_size, probe_metric(data, data.val_idx, val_preds)};
            result.cells.push_back(cell);
            if (cell.val_metric > best_val) {
                best_val = cell.val_metric;
                result.best = cell;
                best_params = params;
            }
            ++cell_index;
        }
    }

    const auto test_preds = probe_predict(data, data.test_idx, cfg, best_params);
    result.test_metric = probe_metric(data, data.test_idx, test_preds);
    result.test_count = static_cast<long>(data.test_idx.size());
    return result;
}

} // namespace codonball::train
