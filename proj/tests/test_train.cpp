#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <random>
#include <set>

#include "codonball/analysis.hpp"
#include "codonball/train.hpp"
#include "codonball/treembed.hpp"

using namespace codonball;
using diff::Matrix;
using diff::Tape;
using diff::Var;
using Eigen::VectorXd;
using hierarchy::CodonTree;

namespace {

VectorXd random_prob_row(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif(0.01, 1.0);
    VectorXd p(vocab::kSize);
    for (int i = 0; i < vocab::kSize; ++i) p(i) = unif(rng);
    return p / p.sum();
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("codonball_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace

TEST_CASE("hxe reduces to cross-entropy at alpha zero") {
    CodonTree tree = CodonTree::standard();
    std::mt19937_64 rng(5);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        VectorXd p = random_prob_row(rng);
        const int target = static_cast<int>(rng() % 70);
        const double loss = train::hxe_loss(p, target, tree, {0.0});
        worst = std::max(worst, std::abs(loss - (-std::log(p(target)))));
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("hxe closed form on the uniform row") {
    CodonTree tree = CodonTree::standard();
    VectorXd uniform = VectorXd::Constant(vocab::kSize, 1.0 / 70.0);
    // Leucine has six synonymous codons: loss = ln 6 + e^-0.2 ln(70/6),
    // frozen from a 40-digit evaluation
    const double loss = train::hxe_loss(uniform, vocab::codon_id("CTT"), tree, {0.2});
    CHECK(loss == doctest::Approx(3.803164598623659).epsilon(1e-12));

    // one-hot on the target -> all conditionals are 1
    VectorXd onehot = VectorXd::Zero(vocab::kSize);
    onehot(vocab::codon_id("ATG")) = 1.0;
    CHECK(train::hxe_loss(onehot, vocab::codon_id("ATG"), tree, {0.2}) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("hxe is permutation-equivariant within a family") {
    CodonTree tree = CodonTree::standard();
    std::mt19937_64 rng(7);
    VectorXd p = random_prob_row(rng);
    // swapping the probabilities of two synonymous codons and swapping the
    // target accordingly leaves the loss unchanged
    const int a = vocab::codon_id("CTT"), b = vocab::codon_id("CTC");
    VectorXd q = p;
    std::swap(q(a), q(b));
    CHECK(train::hxe_loss(p, a, tree, {0.2}) ==
          doctest::Approx(train::hxe_loss(q, b, tree, {0.2})).epsilon(1e-12));
    CHECK(std::isfinite(train::hxe_loss(p, a, tree, {0.2})));
}

TEST_CASE("hxe tape batch matches the scalar version and differentiates") {
    CodonTree tree = CodonTree::standard();
    std::mt19937_64 rng(11);
    Matrix logits(4, vocab::kSize);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) = 0.3 * static_cast<double>(rng() % 100) / 50.0;
    std::vector<int> targets = {3, vocab::codon_id("CTT"), 40, 69};

    Tape t;
    Var probs = diff::softmax(t.input(logits, true));
    Var loss = train::hxe_loss_tape(probs, targets, tree, {0.2});
    double expected = 0.0;
    const Matrix probs_val = probs.value();
    for (int i = 0; i < 4; ++i)
        expected += train::hxe_loss(probs_val.row(i).transpose(), targets[static_cast<std::size_t>(i)],
                                    tree, {0.2});
    CHECK(loss.value()(0, 0) == doctest::Approx(expected / 4.0).epsilon(1e-12));

    auto res = diff::grad_check(
        [&](Tape&, const std::vector<Var>& in) {
            return train::hxe_loss_tape(diff::softmax(in[0]), targets, tree, {0.2});
        },
        {logits}, {.step = 1e-6, .max_coords_per_input = 60, .seed = 3});
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("adamw decoupled decay") {
    lm::ParamSet params;
    params.add("w", Matrix::Constant(2, 2, 1.0));
    train::OptimConfig cfg;
    cfg.weight_decay = 0.0;
    auto state = train::OptimizerState::init(params, cfg);
    std::map<std::string, Matrix> zero{{"w", Matrix::Zero(2, 2)}};

    CHECK(train::adamw_step(params, zero, state, 0.1));
    CHECK(params.at("w") == Matrix::Constant(2, 2, 1.0));   // zero grad, zero decay

    cfg.weight_decay = 0.5;
    auto state2 = train::OptimizerState::init(params, cfg);
    CHECK(train::adamw_step(params, zero, state2, 0.1));
    CHECK(params.at("w") == Matrix::Constant(2, 2, 1.0 * (1.0 - 0.1 * 0.5)));

    // non-finite gradient rejects the step
    std::map<std::string, Matrix> bad{{"w", Matrix::Constant(2, 2, std::nan(""))}};
    Matrix before = params.at("w");
    CHECK_FALSE(train::adamw_step(params, bad, state2, 0.1));
    CHECK(params.at("w") == before);
}

TEST_CASE("adamw descends a quadratic bowl") {
    lm::ParamSet params;
    params.add("x", Matrix::Constant(1, 3, 5.0));
    train::OptimConfig cfg;
    cfg.weight_decay = 0.0;
    auto state = train::OptimizerState::init(params, cfg);
    auto loss_of = [](const Matrix& x) { return x.squaredNorm(); };
    const double initial = loss_of(params.at("x"));
    for (int step = 0; step < 200; ++step) {
        std::map<std::string, Matrix> grads{{"x", 2.0 * params.at("x")}};
        train::adamw_step(params, grads, state, 0.05);
    }
    CHECK(loss_of(params.at("x")) < initial);
}

TEST_CASE("lr schedule endpoints") {
    CHECK(train::lr_schedule(100, 2000, 100, 1e-4, 1e-5) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(train::lr_schedule(2000, 2000, 100, 1e-4, 1e-5) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(train::lr_schedule(0, 2000, 100, 1e-4, 1e-5) == 0.0);
    // frozen midpoint of the cosine branch
    CHECK(train::lr_schedule(1050, 2000, 100, 1e-4, 1e-5) == doctest::Approx(5.5e-5).epsilon(1e-12));
    CHECK_THROWS_AS(train::lr_schedule(-1, 10, 0, 1, 1), ValidationError);
    CHECK_THROWS_AS(train::lr_schedule(11, 10, 0, 1, 1), ValidationError);
}

TEST_CASE("spearman") {
    CHECK(train::spearman({1, 2, 3, 4}, {1, 2, 3, 4}) == 1.0);
    CHECK(train::spearman({1, 2, 3, 4}, {-1, -2, -3, -4}) == -1.0);
    CHECK(train::spearman({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(0.8).epsilon(1e-12));
    // monotone transform invariance
    CHECK(train::spearman({1, 2, 3, 4}, {1, 8, 27, 64}) == 1.0);
    CHECK_THROWS_AS(train::spearman({1, 1, 1}, {1, 2, 3}), ValidationError);
    CHECK_THROWS_AS(train::spearman({1}, {1}), ValidationError);
    CHECK_THROWS_AS(train::spearman({1, 2}, {1, 2, 3}), ValidationError);
}

TEST_CASE("synthetic corpus") {
    train::CorpusConfig cfg;
    cfg.sequences = 50;
    cfg.length = 60;
    cfg.seed = 3;
    auto corpus = train::generate_corpus(cfg);
    CHECK(corpus.size() == 50);
    for (const auto& seq : corpus) {
        CHECK(seq.size() == 60);
        for (int id : seq) CHECK(vocab::is_codon(id));
    }
    // deterministic
    CHECK(train::generate_corpus(cfg) == corpus);

    // framing
    cfg.framing = true;
    auto framed = train::generate_corpus(cfg);
    CodonTree tree = CodonTree::standard();
    for (const auto& seq : framed) {
        CHECK(seq.front() == vocab::codon_id("ATG"));
        CHECK(tree.family_of_token(seq.back()) == "Stop");
    }

    // fully biased corpora use one codon per family
    cfg.framing = false;
    cfg.bias_temp = 0.0;
    auto biased = train::generate_corpus(cfg);
    std::set<int> used;
    for (const auto& seq : biased)
        for (int id : seq) used.insert(id);
    std::set<std::string> fams;
    for (int id : used) fams.insert(tree.family_of_token(id));
    CHECK(used.size() == fams.size());   // one codon per family

    CHECK_THROWS_AS(train::generate_corpus({.sequences = 0}), ValidationError);
    train::CorpusConfig bad;
    bad.family_weights["NotAFamily"] = 2.0;
    CHECK_THROWS_AS(train::generate_corpus(bad), ValidationError);
}

TEST_CASE("gct fraction") {
    const int gct = vocab::codon_id("GCT");
    const int aaa = vocab::codon_id("AAA");
    CHECK(train::gct_fraction({gct, aaa, gct, aaa}) == 0.5);
    CHECK_THROWS_AS(train::gct_fraction({}), ValidationError);
}

namespace {

train::TrainConfig tiny_train_config(train::HeadKind head) {
    train::TrainConfig cfg;
    cfg.backbone.layers = 1;
    cfg.backbone.hidden = 16;
    cfg.backbone.intermediate = 32;
    cfg.backbone.heads = 2;
    cfg.backbone.max_context = 24;
    cfg.backbone.pos_table = 24;
    cfg.head = head;
    cfg.proto_dim = 8;
    cfg.batch_size = 4;
    cfg.steps = 12;
    cfg.schedule = {1e-3, 1e-4, 4};
    cfg.seed = 101;
    cfg.eval_sequences = 16;
    return cfg;
}

std::optional<heads::PrototypeSet> tiny_prototypes(const CodonTree& tree, const train::TrainConfig& cfg) {
    if (cfg.head != train::HeadKind::ProtoDist && cfg.head != train::HeadKind::ProtoEntail)
        return std::nullopt;
    auto emb = treembed::embed_tree_constructive(tree, cfg.proto_dim, cfg.curvature, 2.0, 5);
    return treembed::leaf_prototypes(emb, tree, 0.1, 1.05);
}

} // namespace

TEST_CASE("pretrain smoke: schema, determinism, loss decrease") {
    CodonTree tree = CodonTree::standard();
    train::CorpusConfig corpus_cfg;
    corpus_cfg.sequences = 48;
    corpus_cfg.length = 20;
    corpus_cfg.bias_temp = 0.25;
    corpus_cfg.seed = 9;
    auto corpus = train::generate_corpus(corpus_cfg);

    for (auto head : {train::HeadKind::Xe, train::HeadKind::HyperMlr, train::HeadKind::ProtoDist,
                      train::HeadKind::ProtoEntail}) {
        CAPTURE(train::to_string(head));
        auto cfg = tiny_train_config(head);
        auto protos = tiny_prototypes(tree, cfg);
        auto r1 = train::pretrain_mlm(corpus, cfg, tree, protos);
        CHECK(r1.step_losses.size() == 12);
        CHECK(r1.epochs.size() == 1);
        CHECK(std::isfinite(r1.final_eval.loss));
        CHECK(r1.final_eval.masked_count > 0);

        auto r2 = train::pretrain_mlm(corpus, cfg, tree, protos);
        CHECK(r1.step_losses == r2.step_losses);   // bit-identical rerun
        CHECK(r1.final_eval.masked_acc == r2.final_eval.masked_acc);
    }
}

TEST_CASE("pretrain rejects prototype heads without prototypes") {
    CodonTree tree = CodonTree::standard();
    auto cfg = tiny_train_config(train::HeadKind::ProtoDist);
    auto corpus = train::generate_corpus({.sequences = 8, .length = 10});
    CHECK_THROWS_WITH_AS(train::pretrain_mlm(corpus, cfg, tree, std::nullopt),
                         doctest::Contains("prototype"), ValidationError);
}

TEST_CASE("checkpoint round trip is bit-exact and resumes identically") {
    TempDir tmp;
    CodonTree tree = CodonTree::standard();
    auto cfg = tiny_train_config(train::HeadKind::Xe);
    cfg.steps = 20;
    auto corpus = train::generate_corpus({.sequences = 24, .length = 16, .seed = 13});

    // full run
    auto full = train::pretrain_mlm(corpus, cfg, tree, std::nullopt);

    // run to step 10 under the same schedule horizon, checkpoint, reload,
    // resume to 20
    auto cfg_half = cfg;
    cfg_half.halt_step = 10;
    auto half = train::pretrain_mlm(corpus, cfg_half, tree, std::nullopt);
    const std::string path = tmp.file("ckpt.bin");
    train::save_checkpoint(path, half.checkpoint);
    auto loaded = train::load_checkpoint(path);

    for (const auto& [name, value] : half.checkpoint.params.items)
        CHECK(loaded.params.at(name) == value);   // bit-exact tensors
    CHECK(loaded.step == 10);
    CHECK(loaded.optimizer.step == half.checkpoint.optimizer.step);

    auto resumed = train::pretrain_mlm(corpus, cfg, tree, std::nullopt, nullptr, &loaded);
    CHECK(resumed.step_losses.size() == 10);
    for (int k = 0; k < 10; ++k)
        CHECK(resumed.step_losses[static_cast<std::size_t>(k)] ==
              full.step_losses[static_cast<std::size_t>(10 + k)]);
    for (const auto& [name, value] : full.checkpoint.params.items)
        CHECK(resumed.checkpoint.params.at(name) == value);   // bit-identical continuation
}

TEST_CASE("metrics log is written per epoch") {
    TempDir tmp;
    CodonTree tree = CodonTree::standard();
    auto cfg = tiny_train_config(train::HeadKind::Xe);
    cfg.steps = 12;   // 2 epochs at 48/4... adjusted below
    auto corpus = train::generate_corpus({.sequences = 16, .length = 10, .seed = 31});
    const std::string path = tmp.file("metrics.jsonl");
    train::pretrain_mlm(corpus, cfg, tree, std::nullopt, &path);
    auto rows = io::read_jsonl(path);
    REQUIRE(rows.size() == 3);   // 16 seqs / batch 4 = 4 steps per epoch
    for (const auto& row : rows) {
        CHECK(row.contains("step"));
        CHECK(row.contains("loss"));
        CHECK(row.contains("masked_acc"));
        CHECK(row.contains("within_family_err_frac"));
        CHECK(row.contains("lr"));
        CHECK(std::isfinite(row["loss"].get<double>()));
    }
}

TEST_CASE("train config json round trip rejects unknown keys") {
    auto cfg = tiny_train_config(train::HeadKind::ProtoEntail);
    auto j = train::train_config_to_json(cfg);
    auto back = train::train_config_from_json(j);
    CHECK(train::train_config_to_json(back) == j);

    j["mystery"] = 1;
    CHECK_THROWS_WITH_AS(train::train_config_from_json(j), doctest::Contains("mystery"),
                         ValidationError);
    auto j2 = train::train_config_to_json(cfg);
    j2["backbone"]["extra"] = 2;
    CHECK_THROWS_AS(train::train_config_from_json(j2), ValidationError);
}

TEST_CASE("probe on a linear signal") {
    // quick sanity of the probe path at toy scale: the label is a linear
    // function of the codon counts, so even a tiny grid should order test
    // points well
    CodonTree tree = CodonTree::standard();
    train::CorpusConfig corpus_cfg;
    corpus_cfg.sequences = 240;
    corpus_cfg.length = 18;
    corpus_cfg.bias_temp = 2.0;
    corpus_cfg.family_weights["Alanine"] = 10.0;
    corpus_cfg.seed = 17;
    auto corpus = train::generate_corpus(corpus_cfg);

    auto cfg = tiny_train_config(train::HeadKind::Xe);
    cfg.steps = 2;
    auto trained = train::pretrain_mlm(corpus, cfg, tree, std::nullopt);

    std::vector<std::string> sequences;
    std::vector<double> labels;
    for (const auto& seq : corpus) {
        sequences.push_back(lm::detokenize(seq));
        labels.push_back(train::gct_fraction(seq));
    }

    train::ProbeConfig probe;
    probe.epochs = 8;
    probe.channels = 16;
    probe.learning_rates = {3e-4, 1e-4};
    probe.batch_sizes = {8, 16};
    probe.seed = 23;
    auto result = train::probe_train(trained.checkpoint, sequences, labels, probe);
    CHECK(result.cells.size() == 4);
    CHECK(result.test_count >= 15);
    CHECK(result.test_metric > 0.5);

    // determinism
    auto again = train::probe_train(trained.checkpoint, sequences, labels, probe);
    CHECK(again.test_metric == result.test_metric);

    // label/sequence mismatch rejected
    labels.pop_back();
    CHECK_THROWS_AS(train::probe_train(trained.checkpoint, sequences, labels, probe),
                    ValidationError);
}
