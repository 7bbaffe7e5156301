#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "slu/common.hpp"
#include "slu/features.hpp"
#include "slu/network.hpp"
#include "slu/synthdata.hpp"

namespace slu {

// Training strategy; the Ce variants add a last-step cross-entropy term and
// CtlMil adds the pooled recording-level term.
enum class LossKind { Ctc, Ctl, CtcCe, CtlCe, CtlMil };

std::string to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& s);
inline bool uses_ctl(LossKind k) {
    return k == LossKind::Ctl || k == LossKind::CtlCe || k == LossKind::CtlMil;
}

// One experiment = corpus + model + strategy + optimizer settings. Defaults
// are desk scale: a few thousand gradient steps converge in seconds.
struct ExperimentConfig {
    CorpusSpec corpus;
    ModelConfig model;
    LossKind loss = LossKind::CtcCe;

    bool pretrain_layer1 = false;
    int pretrain_epochs = 4;
    int train_labels = 1;  // commands per training utterance (1 or 2)
    int test_labels = 1;
    int train_size = 240;
    int test_size = 80;

    int epochs = 40;
    int batch = 8;
    double lr = 2e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double dropout = 0.1;
    double w_seq = 0.6, w_ce = 0.4;   // sequence-loss / last-step CE mix
    double w_ctl = 0.5, w_mil = 0.5;  // ctl / pooled-bag mix
    double theta = 0.5;               // ctl decode threshold
    uint64_t seed = 1;

    ExperimentConfig();

    // Syncs model head mode and vocabularies with `corpus` and `loss`.
    void resolve();
};

ExperimentConfig load_experiment(const std::string& path);
void save_experiment(const std::string& path, const ExperimentConfig& cfg);

// Decoupled-weight-decay Adam over a flat parameter vector; frozen entries
// are skipped entirely (no update, no decay).
class AdamW {
public:
    AdamW(size_t n, double lr, double beta1, double beta2, double eps, double weight_decay);
    void set_frozen(std::vector<uint8_t> mask);  // 1 = frozen, empty = none
    void step(std::span<double> params, std::span<const double> grad);

private:
    double lr_, beta1_, beta2_, eps_, wd_;
    int t_ = 0;
    std::vector<double> m_, v_;
    std::vector<uint8_t> frozen_;
};

// Speaker-disjoint train/test bundles; CMVN is estimated on train only.
struct DataBundle {
    std::vector<SyntheticUtterance> train, test;
    CmvnStats cmvn;
};
DataBundle make_datasets(const ExperimentConfig& cfg);

// CMVN + frame stacking into the network input.
Matrix prepare_input(const Matrix& features, const CmvnStats& cmvn, const ModelConfig& model);

// Merges runs of equal values and drops zeros: per-frame targets to a CTC
// label sequence.
std::vector<int> collapse_frame_targets(const std::vector<int>& frame_targets);

// Per-utterance loss and head-logit gradients for the configured strategy.
// Throws (like the underlying losses) when a target is infeasible.
struct UttGrad {
    double loss = 0.0;
    Matrix d_slot;    // gradient w.r.t. slot head logits
    Matrix d_intent;  // gradient w.r.t. intent head logits
};
UttGrad head_losses(const ExperimentConfig& cfg, const Tape& tape, const ForwardOutput& out,
                    const SyntheticUtterance& u);

struct TrainResult {
    ModelParams params;
    int skipped = 0;         // utterances with infeasible targets
    double final_loss = 0.0; // mean over the last epoch
};

// Full training loop (optional layer-1 pretraining, then the main strategy).
// When `metrics` is non-null one JSON line per epoch is appended.
TrainResult train_model(const ExperimentConfig& cfg, const DataBundle& data,
                        std::ostream* metrics = nullptr);

struct EvalResult {
    int count = 0;
    double intent_acc = 0.0;  // exact sequence match
    double slot_acc = 0.0;
    double joint_acc = 0.0;   // both sequences exact
};
EvalResult evaluate_model(const ExperimentConfig& cfg, const ModelParams& params,
                          std::span<const SyntheticUtterance> test, const CmvnStats& cmvn);
std::string metrics_line(const ExperimentConfig& cfg, const std::string& split,
                         const EvalResult& eval);

// Condensed self-check: loss oracles, gradient checks, streaming prefix
// consistency. Prints one line per check; returns 0 on success, 2 on any
// failure. `mutate_ctl_grad` flips the analytic CTL gradient's sign so the
// suite can demonstrate that it detects a broken gradient.
int run_verification(std::ostream& log, bool mutate_ctl_grad = false);

}  // namespace slu
