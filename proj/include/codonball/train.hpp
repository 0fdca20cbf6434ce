#pragma once

// Pre-training machinery: hierarchical cross-entropy, AdamW with decoupled
// weight decay, the warmup+cosine schedule, deterministic checkpoints, the
// synthetic corpus generator, the MLM loop, and the frozen-backbone TextCNN
// probe.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "codonball/heads.hpp"
#include "codonball/hierarchy.hpp"
#include "codonball/io.hpp"
#include "codonball/lm.hpp"

namespace codonball::train {

// --- hierarchical cross-entropy ---

struct HxeConfig {
    double alpha = 0.2;   // exponential discount toward the root
};

// Loss for one probability row (length 70, sums to 1) and a leaf target.
// Heights count from the leaf edge: the leaf conditional is weighted 1 and
// each edge toward the root picks up another factor exp(-alpha).
double hxe_loss(const Eigen::VectorXd& probabilities, int target, const hierarchy::CodonTree& tree,
                const HxeConfig& cfg);

// Mean loss over a batch of probability rows on the tape.
diff::Var hxe_loss_tape(diff::Var probabilities, const std::vector<int>& targets,
                        const hierarchy::CodonTree& tree, const HxeConfig& cfg);

// --- optimizer and schedule ---

struct OptimConfig {
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct OptimizerState {
    lm::ParamSet m, v;
    long step = 0;
    OptimConfig cfg;

    static OptimizerState init(const lm::ParamSet& params, const OptimConfig& cfg);
};

// One AdamW update with decoupled decay. Returns false (parameters
// untouched) when any gradient is non-finite.
bool adamw_step(lm::ParamSet& params, const std::map<std::string, diff::Matrix>& grads,
                OptimizerState& state, double lr);

struct ScheduleConfig {
    double lr_max = 1e-3;
    double lr_min = 1e-4;
    long warmup = 100;
};

// Linear warmup to lr_max, then cosine decay to lr_min at total_steps.
double lr_schedule(long step, long total_steps, long warmup_steps, double lr_max, double lr_min);

// --- rank correlation ---

// Spearman rank correlation with average-rank tie handling. Rejects
// constant or too-short inputs.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// --- synthetic corpus ---

struct CorpusConfig {
    int sequences = 5000;
    int length = 60;               // codons
    double bias_temp = 1.0;        // within-family sharpness; 0 collapses to one codon
    double template_noise = 0.1;   // chance a position ignores the family template
    bool framing = false;          // ATG start / stop end
    std::uint64_t seed = 7;
    // relative weight of each family in the positional template
    std::map<std::string, double> family_weights;
};

// Token sequences over codon ids. Families follow a corpus-wide positional
// template (all 20 coding families guaranteed present) so masked positions
// are predictable from context; codons within a family follow a
// rank-geometric distribution sharpened by bias_temp.
std::vector<std::vector<int>> generate_corpus(const CorpusConfig& cfg);

std::vector<io::FastaRecord> corpus_to_fasta(const std::vector<std::vector<int>>& corpus);

// fraction of GCT codons, the probe's synthetic label
double gct_fraction(const std::vector<int>& token_ids);

// --- pre-training ---

enum class HeadKind { Xe, HelmHxe, HyperMlr, ProtoDist, ProtoEntail };

HeadKind head_from_string(const std::string& name);
std::string to_string(HeadKind head);

struct TrainConfig {
    lm::BackboneConfig backbone;
    HeadKind head = HeadKind::ProtoDist;
    double alpha = 0.2;       // HXE discount
    double beta = 1.0;        // prototype temperature
    double curvature = 1.0;
    int proto_dim = 128;
    double mask_rate = 0.15;
    lm::MaskScheme scheme = lm::MaskScheme::Plain;
    int batch_size = 8;
    long steps = 2000;
    ScheduleConfig schedule;
    OptimConfig optim;
    std::uint64_t seed = 1;
    int eval_sequences = 1000;   // final evaluation subset
    // stop after this many steps while keeping the schedule horizon at
    // `steps`; -1 runs to the end. A halted run's checkpoint resumes
    // bit-identically under the full config.
    long halt_step = -1;

    void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct Checkpoint {
    nlohmann::json config;
    long step = 0;
    std::uint64_t seed = 0;
    lm::ParamSet params;
    OptimizerState optimizer;
    std::optional<heads::PrototypeSet> prototypes;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

struct EpochMetrics {
    long step = 0;
    double loss = 0.0;
    double masked_acc = 0.0;
    double within_family_err_frac = 0.0;
    double lr = 0.0;
};

struct EvalMetrics {
    double loss = 0.0;
    double masked_acc = 0.0;
    double within_family_err_frac = 0.0;
    double random_within_baseline = 0.0;
    long masked_count = 0;
};

struct TrainResult {
    std::vector<EpochMetrics> epochs;
    std::vector<double> step_losses;
    EvalMetrics final_eval;
    Checkpoint checkpoint;
};

// Runs the masked-LM loop. Loss is computed only at mask positions. Writes
// one JSONL row per epoch when metrics_path is given. Fully deterministic
// given cfg.seed; resuming from a checkpoint continues bit-identically.
TrainResult pretrain_mlm(const std::vector<std::vector<int>>& corpus, const TrainConfig& cfg,
                         const hierarchy::CodonTree& tree,
                         const std::optional<heads::PrototypeSet>& prototypes,
                         const std::string* metrics_path = nullptr,
                         const Checkpoint* resume = nullptr);

// --- downstream probe ---

struct ProbeConfig {
    int channels = 100;
    std::vector<int> widths = {3, 4, 5};
    int epochs = 8;
    bool classification = false;
    std::uint64_t seed = 11;
    std::vector<double> learning_rates = {3e-4, 1e-4, 1e-5};
    std::vector<int> batch_sizes = {8, 16, 32, 64};
};

struct ProbeCell {
    double lr = 0.0;
    int batch_size = 0;
    double val_metric = 0.0;
};

struct ProbeResult {
    std::vector<ProbeCell> cells;
    ProbeCell best;
    double test_metric = 0.0;
    long test_count = 0;
};

// TextCNN over frozen backbone token states: parallel 1-D convolutions,
// max-pool over time, linear output. Grid search over the configured
// learning rates x batch sizes on the validation split (70/15/15), then one
// test evaluation of the winning cell. Metric: Spearman for regression,
// accuracy for classification.
ProbeResult probe_train(const Checkpoint& ckpt, const std::vector<std::string>& sequences,
                        const std::vector<double>& labels, const ProbeConfig& cfg);

} // namespace codonball::train
