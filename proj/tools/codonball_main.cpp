// codonball command line: geomcheck, embed-tree, pretrain, probe, analyze.
//
// Every command resolves its configuration (config file, then flag
// overrides), echoes the resolved JSON to stdout, and only then does work.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <random>

#include "codonball/analysis.hpp"
#include "codonball/ball.hpp"
#include "codonball/ball_diff.hpp"
#include "codonball/heads.hpp"
#include "codonball/io.hpp"
#include "codonball/train.hpp"
#include "codonball/treembed.hpp"

namespace cb = codonball;
using cb::io::json;

namespace {

struct GeomOptions {
    std::vector<double> curvatures = {0.2, 0.5, 1.0};
    int cases = 1000;
    double boundary_eps = 1e-5;   // test hook; widening it breaks inversion
    std::uint64_t seed = 1;
    std::string report_path;
};

json geom_config_json(const GeomOptions& opt) {
    return json{{"command", "geomcheck"},
                {"curvatures", opt.curvatures},
                {"cases", opt.cases},
                {"boundary_eps", opt.boundary_eps},
                {"seed", opt.seed}};
}

Eigen::VectorXd random_interior(int dim, double c, double max_radius, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss;
    std::uniform_real_distribution<double> unif(0.05, max_radius);
    Eigen::VectorXd v(dim);
    for (int i = 0; i < dim; ++i) v(i) = gauss(rng);
    v *= unif(rng) / (std::sqrt(c) * v.norm());
    return v;
}

int run_geomcheck(const GeomOptions& opt) {
    std::cout << geom_config_json(opt).dump() << std::endl;
    json report;
    report["curvatures"] = json::array();
    bool ok = true;
    const double eps = opt.boundary_eps;

    for (double c : opt.curvatures) {
        std::mt19937_64 rng(cb::derive_seed(opt.seed, "geom", static_cast<std::uint64_t>(c * 1000)));
        double worst_inv = 0.0, worst_mobius = 0.0, worst_len = 0.0, worst_triangle = 0.0;
        for (int k = 0; k < opt.cases; ++k) {
            const int dim = 4;
            Eigen::VectorXd x = random_interior(dim, c, 0.7, rng);
            Eigen::VectorXd v = random_interior(dim, c, 0.5, rng) * 0.3;
            // radii up to 0.96 stay accurate at the default projection
            // epsilon and cross the clip radius when the hook widens it
            Eigen::VectorXd y = random_interior(dim, c, 0.96, rng);
            Eigen::VectorXd z = random_interior(dim, c, 0.96, rng);

            Eigen::VectorXd ex = cb::ball::exp_map<double>(x, v, c, eps);
            worst_inv = std::max(worst_inv,
                                 (cb::ball::log_map<double>(x, ex, c) - v).cwiseAbs().maxCoeff());
            Eigen::VectorXd lg = cb::ball::log_map<double>(x, y, c);
            worst_inv = std::max(worst_inv,
                                 (cb::ball::exp_map<double>(x, lg, c, eps) - y).cwiseAbs().maxCoeff());

            Eigen::VectorXd zero = Eigen::VectorXd::Zero(dim);
            worst_mobius = std::max(worst_mobius,
                                    (cb::ball::mobius_add<double>(x, zero, c, eps) - x).cwiseAbs().maxCoeff());
            Eigen::VectorXd minus = -x;
            worst_mobius = std::max(worst_mobius,
                                    cb::ball::mobius_add<double>(minus, x, c, eps).cwiseAbs().maxCoeff());

            const double lam = cb::ball::conformal_factor<double>(x, c);
            worst_len = std::max(worst_len,
                                 std::abs(cb::ball::dist<double>(x, ex, c) - lam * v.norm()));

            const double dxz = cb::ball::dist<double>(x, z, c);
            const double through = cb::ball::dist<double>(x, y, c) + cb::ball::dist<double>(y, z, c);
            worst_triangle = std::max(worst_triangle, dxz - through);
        }

        // gradient spot checks through the tape
        double worst_grad = 0.0;
        for (int k = 0; k < 5; ++k) {
            cb::diff::Matrix x = random_interior(4, c, 0.6, rng).transpose();
            cb::diff::Matrix y = random_interior(4, c, 0.6, rng).transpose();
            worst_grad = std::max(worst_grad,
                                  cb::diff::grad_check(
                                      [c](cb::diff::Tape&, const std::vector<cb::diff::Var>& in) {
                                          return cb::diff::sum(cb::ball::dist(in[0], in[1], c));
                                      },
                                      {x, y}, {})
                                      .max_rel_err);
        }

        // cone evaluations at this curvature
        cb::heads::ConeConfig cone{0.1, 1.05, c};
        double worst_cone = 0.0;
        for (int k = 0; k < 50; ++k) {
            Eigen::VectorXd apex = random_interior(3, c, 0.7, rng);
            if (apex.norm() < cone.min_radius()) continue;
            Eigen::VectorXd dir = apex / apex.norm();
            Eigen::VectorXd member = cb::ball::exp_map<double>(apex, Eigen::VectorXd(0.1 * dir), c, eps);
            worst_cone = std::max(worst_cone, cb::heads::cone_energy(apex, member, cone));
        }

        json entry{{"curvature", c},
                   {"exp_log_inversion_max_abs", worst_inv},
                   {"mobius_identity_max_abs", worst_mobius},
                   {"geodesic_length_max_abs", worst_len},
                   {"triangle_violation_max", worst_triangle},
                   {"grad_check_max_rel", worst_grad},
                   {"radial_cone_energy_max", worst_cone}};
        const bool pass = worst_inv < 1e-8 && worst_mobius < 1e-10 && worst_len < 1e-9 &&
                          worst_triangle < 1e-9 && worst_grad < 1e-4 && worst_cone == 0.0;
        entry["pass"] = pass;
        if (!pass) {
            ok = false;
            std::cerr << "geomcheck: violation at curvature " << c << "\n";
        }
        report["curvatures"].push_back(entry);
    }
    report["pass"] = ok;
    if (!opt.report_path.empty()) cb::io::write_json_file(opt.report_path, report);
    std::cout << report.dump(2) << std::endl;
    return ok ? 0 : 1;
}

cb::hierarchy::CodonTree load_tree_or_standard(const std::string& path) {
    if (path.empty()) return cb::hierarchy::CodonTree::standard();
    return cb::io::read_tree(path);
}

std::vector<std::vector<int>> tokenize_fasta(const std::vector<cb::io::FastaRecord>& records,
                                             int max_context) {
    std::vector<std::vector<int>> corpus;
    corpus.reserve(records.size());
    for (const auto& rec : records) {
        auto ids = cb::lm::tokenize(rec.sequence);
        if (static_cast<int>(ids.size()) > max_context)
            throw cb::ValidationError("sequence '" + rec.name + "' exceeds the context window (" +
                                      std::to_string(ids.size()) + " codons)");
        corpus.push_back(std::move(ids));
    }
    return corpus;
}

int dispatch(int argc, char** argv) {
    CLI::App app{"hyperbolic codon language modeling toolkit"};
    app.require_subcommand(1);

    // ---- geomcheck ----
    GeomOptions geom;
    auto* geomcheck = app.add_subcommand("geomcheck", "verify ball geometry identities and gradients");
    geomcheck->add_option("--curvature", geom.curvatures, "curvatures to sweep")->expected(-1);
    geomcheck->add_option("--cases", geom.cases, "random cases per curvature");
    geomcheck->add_option("--boundary-eps", geom.boundary_eps, "projection epsilon (test hook)");
    geomcheck->add_option("--seed", geom.seed, "random seed");
    geomcheck->add_option("--report", geom.report_path, "write the JSON report here");

    // ---- embed-tree ----
    struct {
        std::string tree_path, out_path = "prototypes.json", distortion_path;
        int dim = 128;
        double curvature = 1.0, tau = 2.0, cone_k = 0.1, cone_eta = 1.05, refine_lr = 0.5;
        int refine_steps = 300;
        std::uint64_t seed = 1;
    } embed;
    auto* embed_tree = app.add_subcommand("embed-tree", "embed the codon tree and export prototypes");
    embed_tree->add_option("--tree", embed.tree_path, "tree JSON (default: built-in codon tree)");
    embed_tree->add_option("--out", embed.out_path, "prototype file to write");
    embed_tree->add_option("--distortion-report", embed.distortion_path, "distortion JSON to write");
    embed_tree->add_option("--dim", embed.dim, "prototype dimension");
    embed_tree->add_option("--curvature", embed.curvature, "ball curvature c");
    embed_tree->add_option("--tau", embed.tau, "target distance per tree edge");
    embed_tree->add_option("--cone-k", embed.cone_k, "entailment cone K");
    embed_tree->add_option("--eta", embed.cone_eta, "entailment cone threshold");
    embed_tree->add_option("--refine-steps", embed.refine_steps, "refinement steps");
    embed_tree->add_option("--refine-lr", embed.refine_lr, "refinement learning rate");
    embed_tree->add_option("--seed", embed.seed, "random seed");

    // ---- pretrain ----
    struct {
        std::string corpus_path, config_path, out_dir = ".", prototypes_path, tree_path, resume_path;
        std::string head;
        double alpha = -1, beta = -1, curvature = -1, mask_rate = -1, lr_max = -1, lr_min = -1;
        long steps = -1, warmup = -1, halt = -1;
        int batch_size = -1, proto_dim = -1;
        std::int64_t seed = -1;
        bool full_scale = false;
    } pre;
    auto* pretrain = app.add_subcommand("pretrain", "masked-LM pre-training on a FASTA corpus");
    pretrain->add_option("corpus", pre.corpus_path, "FASTA corpus")->required();
    pretrain->add_option("--config", pre.config_path, "JSON config file");
    pretrain->add_option("--out", pre.out_dir, "output directory");
    pretrain->add_option("--head", pre.head, "xe|helm-hxe|hyper-mlr|proto-dist|proto-entail");
    pretrain->add_option("--prototypes", pre.prototypes_path, "prototype file (proto heads)");
    pretrain->add_option("--tree", pre.tree_path, "tree JSON (default: built-in)");
    pretrain->add_option("--resume", pre.resume_path, "checkpoint to resume from");
    pretrain->add_option("--alpha", pre.alpha, "HXE discount");
    pretrain->add_option("--beta", pre.beta, "prototype temperature");
    pretrain->add_option("--curvature", pre.curvature, "ball curvature c");
    pretrain->add_option("--mask-rate", pre.mask_rate, "masking rate");
    pretrain->add_option("--steps", pre.steps, "training steps");
    pretrain->add_option("--halt-step", pre.halt, "stop early at this step (same schedule)");
    pretrain->add_option("--batch-size", pre.batch_size, "sequences per step");
    pretrain->add_option("--proto-dim", pre.proto_dim, "prototype dimension");
    double pre_eta = -1, pre_cone_k = -1;
    pretrain->add_option("--eta", pre_eta, "override the prototypes' entailment threshold");
    pretrain->add_option("--cone-k", pre_cone_k, "override the prototypes' cone K");
    pretrain->add_option("--lr-max", pre.lr_max, "peak learning rate");
    pretrain->add_option("--lr-min", pre.lr_min, "final learning rate");
    pretrain->add_option("--warmup", pre.warmup, "warmup steps");
    pretrain->add_option("--seed", pre.seed, "random seed");
    pretrain->add_flag("--full-scale", pre.full_scale,
                       "use the full-scale backbone and schedule preset");

    // ---- probe ----
    struct {
        std::string checkpoint_path, data_path, report_path = "probe_report.json", metric = "spearman";
        int epochs = 8, channels = 100;
        std::uint64_t seed = 11;
    } probe;
    auto* probe_cmd = app.add_subcommand("probe", "TextCNN probe on a frozen checkpoint");
    probe_cmd->add_option("checkpoint", probe.checkpoint_path, "pretraining checkpoint")->required();
    probe_cmd->add_option("data", probe.data_path, "CSV with sequence,label columns")->required();
    probe_cmd->add_option("--report", probe.report_path, "JSON report path");
    probe_cmd->add_option("--metric", probe.metric, "spearman|accuracy");
    probe_cmd->add_option("--epochs", probe.epochs, "epochs per grid cell");
    probe_cmd->add_option("--channels", probe.channels, "convolution channels");
    probe_cmd->add_option("--seed", probe.seed, "random seed");

    // ---- analyze ----
    struct {
        std::string corpus_path, predictions_path, csv_path = "sequences.csv",
                    json_path = "corpus_stats.json";
    } ana;
    auto* analyze = app.add_subcommand("analyze", "sequence statistics (ENC, GC, length strata)");
    analyze->add_option("corpus", ana.corpus_path, "FASTA corpus")->required();
    analyze->add_option("--predictions", ana.predictions_path,
                        "JSON {\"pairs\":[{\"pred\":[ids],\"target\":[ids]}]}");
    analyze->add_option("--csv", ana.csv_path, "per-sequence CSV path");
    analyze->add_option("--json", ana.json_path, "corpus aggregate JSON path");

    CLI11_PARSE(app, argc, argv);

    if (geomcheck->parsed()) return run_geomcheck(geom);

    if (embed_tree->parsed()) {
        json config{{"command", "embed-tree"}, {"tree", embed.tree_path},
                    {"out", embed.out_path},  {"dim", embed.dim},
                    {"curvature", embed.curvature}, {"tau", embed.tau},
                    {"K", embed.cone_k},      {"eta", embed.cone_eta},
                    {"refine_steps", embed.refine_steps}, {"refine_lr", embed.refine_lr},
                    {"seed", embed.seed}};
        std::cout << config.dump() << std::endl;
        auto tree = load_tree_or_standard(embed.tree_path);
        auto constructed = cb::treembed::embed_tree_constructive(tree, embed.dim, embed.curvature,
                                                                 embed.tau, embed.seed);
        auto refined = cb::treembed::refine_embedding(constructed, tree, embed.refine_steps,
                                                      embed.refine_lr);
        auto report = cb::treembed::distortion_report(refined.embedding, tree);
        auto protos = cb::treembed::leaf_prototypes(refined.embedding, tree, embed.cone_k, embed.cone_eta);
        cb::io::save_prototypes(embed.out_path, protos);

        json jr{{"mean_rel_distortion", report.mean_rel},
                {"worst_rel_distortion", report.worst_rel},
                {"pair_count", report.pair_count},
                {"objective_initial", refined.objective_trace.front()},
                {"objective_final", refined.objective_trace.back()},
                {"prototypes_written", protos.count()}};
        for (const auto& [dt, mean] : report.class_mean_dist)
            jr["class_mean_dist"][std::to_string(dt)] = mean;
        if (!embed.distortion_path.empty()) cb::io::write_json_file(embed.distortion_path, jr);
        std::cout << jr.dump(2) << std::endl;
        return 0;
    }

    if (pretrain->parsed()) {
        cb::train::TrainConfig cfg;
        if (pre.full_scale) {
            cfg.backbone = cb::lm::BackboneConfig::full_scale();
            cfg.batch_size = 1024;
            cfg.schedule = {1e-4, 1e-5, 1000};
            cfg.beta = 10.0;
        }
        if (!pre.config_path.empty())
            cfg = cb::train::train_config_from_json(cb::io::read_json_file(pre.config_path));
        if (!pre.head.empty()) cfg.head = cb::train::head_from_string(pre.head);
        // Transformer XE is the non-hierarchical baseline: alpha defaults to 0
        // there and to the HXE value elsewhere; an explicit flag always wins.
        if (pre.head == "xe" && pre.alpha < 0) cfg.alpha = 0.0;
        if (pre.alpha >= 0) cfg.alpha = pre.alpha;
        if (pre.beta > 0) cfg.beta = pre.beta;
        if (pre.curvature > 0) cfg.curvature = pre.curvature;
        if (pre.mask_rate >= 0) cfg.mask_rate = pre.mask_rate;
        if (pre.steps > 0) cfg.steps = pre.steps;
        if (pre.halt > 0) cfg.halt_step = pre.halt;
        if (pre.batch_size > 0) cfg.batch_size = pre.batch_size;
        if (pre.proto_dim > 0) cfg.proto_dim = pre.proto_dim;
        if (pre.lr_max > 0) cfg.schedule.lr_max = pre.lr_max;
        if (pre.lr_min > 0) cfg.schedule.lr_min = pre.lr_min;
        if (pre.warmup >= 0) cfg.schedule.warmup = pre.warmup;
        if (pre.seed >= 0) cfg.seed = static_cast<std::uint64_t>(pre.seed);

        json config = cb::train::train_config_to_json(cfg);
        config["command"] = "pretrain";
        config["corpus"] = pre.corpus_path;
        config["out"] = pre.out_dir;
        std::cout << config.dump() << std::endl;

        auto tree = load_tree_or_standard(pre.tree_path);
        auto corpus = tokenize_fasta(cb::io::read_fasta(pre.corpus_path), cfg.backbone.max_context);

        std::optional<cb::heads::PrototypeSet> protos;
        const bool needs_protos = cfg.head == cb::train::HeadKind::ProtoDist ||
                                  cfg.head == cb::train::HeadKind::ProtoEntail;
        if (needs_protos) {
            if (pre.prototypes_path.empty())
                throw cb::ValidationError("head '" + cb::train::to_string(cfg.head) +
                                          "' requires --prototypes");
            protos = cb::io::load_prototypes(pre.prototypes_path);
            if (pre_eta > 0) protos->cone_eta = pre_eta;
            if (pre_cone_k > 0) protos->cone_k = pre_cone_k;
        } else if (!pre.prototypes_path.empty()) {
            throw cb::ValidationError("--prototypes given but head '" + cb::train::to_string(cfg.head) +
                                      "' does not use prototypes");
        }

        std::optional<cb::train::Checkpoint> resume;
        if (!pre.resume_path.empty()) resume = cb::train::load_checkpoint(pre.resume_path);

        std::filesystem::create_directories(pre.out_dir);
        const std::string metrics_path = pre.out_dir + "/metrics.jsonl";
        auto result = cb::train::pretrain_mlm(corpus, cfg, tree, protos, &metrics_path,
                                              resume ? &*resume : nullptr);
        const std::string ckpt_path = pre.out_dir + "/checkpoint.bin";
        cb::train::save_checkpoint(ckpt_path, result.checkpoint);

        json summary{{"checkpoint", ckpt_path},
                     {"metrics", metrics_path},
                     {"final_eval",
                      {{"loss", result.final_eval.loss},
                       {"masked_acc", result.final_eval.masked_acc},
                       {"within_family_err_frac", result.final_eval.within_family_err_frac},
                       {"random_within_baseline", result.final_eval.random_within_baseline},
                       {"masked_count", result.final_eval.masked_count}}}};
        cb::io::write_json_file(pre.out_dir + "/eval.json", summary);
        std::cout << summary.dump(2) << std::endl;
        return 0;
    }

    if (probe_cmd->parsed()) {
        json config{{"command", "probe"},   {"checkpoint", probe.checkpoint_path},
                    {"data", probe.data_path}, {"metric", probe.metric},
                    {"epochs", probe.epochs},  {"channels", probe.channels},
                    {"seed", probe.seed}};
        std::cout << config.dump() << std::endl;
        if (probe.metric != "spearman" && probe.metric != "accuracy")
            throw cb::ValidationError("--metric must be spearman or accuracy");

        auto ckpt = cb::train::load_checkpoint(probe.checkpoint_path);
        auto data = cb::io::read_labeled_csv(probe.data_path);
        cb::train::ProbeConfig pc;
        pc.epochs = probe.epochs;
        pc.channels = probe.channels;
        pc.seed = probe.seed;
        pc.classification = probe.metric == "accuracy";
        auto result = cb::train::probe_train(ckpt, data.sequences, data.labels, pc);

        json cells = json::array();
        for (const auto& cell : result.cells)
            cells.push_back({{"lr", cell.lr}, {"batch_size", cell.batch_size},
                             {"val_metric", cell.val_metric}});
        json jr{{"cells", cells},
                {"best", {{"lr", result.best.lr}, {"batch_size", result.best.batch_size},
                          {"val_metric", result.best.val_metric}}},
                {"test_metric", result.test_metric},
                {"test_count", result.test_count},
                {"metric", probe.metric}};
        cb::io::write_json_file(probe.report_path, jr);
        std::cout << jr.dump(2) << std::endl;
        return 0;
    }

    if (analyze->parsed()) {
        json config{{"command", "analyze"},
                    {"corpus", ana.corpus_path},
                    {"predictions", ana.predictions_path},
                    {"csv", ana.csv_path},
                    {"json", ana.json_path}};
        std::cout << config.dump() << std::endl;
        auto records = cb::io::read_fasta(ana.corpus_path);

        std::ofstream csv(ana.csv_path);
        if (!csv) throw cb::RuntimeFailure("cannot write " + ana.csv_path);
        csv << "name,length,length_bin,gc,gc_bin\n";
        cb::analysis::CodonUsage usage;
        for (const auto& rec : records) {
            const double gc = cb::analysis::gc_content(rec.sequence);
            csv << rec.name << ',' << rec.sequence.size() << ','
                << cb::analysis::to_string(cb::analysis::length_bin(rec.sequence.size())) << ','
                << gc << ',' << cb::analysis::to_string(cb::analysis::gc_bin(gc)) << '\n';
            usage.add_sequence(cb::lm::tokenize(rec.sequence));
        }

        json jr{{"sequences", records.size()}, {"codons", usage.total()}};
        try {
            jr["enc"] = cb::analysis::enc(usage);
        } catch (const cb::ValidationError& e) {
            jr["enc"] = nullptr;
            jr["enc_error"] = e.what();
        }

        if (!ana.predictions_path.empty()) {
            const json preds = cb::io::read_json_file(ana.predictions_path);
            if (!preds.contains("pairs") || !preds["pairs"].is_array())
                throw cb::ValidationError(ana.predictions_path + ": missing 'pairs' array");
            auto tree = cb::hierarchy::CodonTree::standard();
            std::vector<int> all_preds, all_targets;
            for (const auto& pair : preds["pairs"]) {
                auto p = pair.at("pred").get<std::vector<int>>();
                auto t = pair.at("target").get<std::vector<int>>();
                if (p.size() != t.size())
                    throw cb::ValidationError("predictions: pred/target lengths differ");
                all_preds.insert(all_preds.end(), p.begin(), p.end());
                all_targets.insert(all_targets.end(), t.begin(), t.end());
            }
            auto confusion = cb::analysis::family_confusion(all_preds, all_targets, tree);
            jr["confusion"] = {{"total", confusion.total}, {"errors", confusion.errors}};
            if (confusion.within_family_error_fraction) {
                jr["confusion"]["within_family_error_fraction"] = *confusion.within_family_error_fraction;
                jr["confusion"]["cross_family_error_fraction"] = *confusion.cross_family_error_fraction;
            }
        }
        cb::io::write_json_file(ana.json_path, jr);
        std::cout << jr.dump(2) << std::endl;
        return 0;
    }

    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const cb::ValidationError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    } catch (const cb::RuntimeFailure& e) {
        std::cerr << "failure: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << std::endl;
        return 2;
    }
}
