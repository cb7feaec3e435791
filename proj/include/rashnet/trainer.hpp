#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rashnet/data.hpp"
#include "rashnet/eval.hpp"
#include "rashnet/optim.hpp"
#include "rashnet/resnet.hpp"

namespace rashnet {

/// Training produced a non-finite loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LrRange {
  double lo = 1e-6;
  double hi = 1e-4;
  bool operator==(const LrRange&) const = default;
};

struct PhaseConfig {
  std::string name = "head";
  int epochs = 8;
  int batch_size = 64;
  TrainPolicy policy = TrainPolicy::head_only;
  // Single rate when discriminative is false; nonpositive means "ask lr_find".
  double lr = 0.0;
  bool discriminative = false;
  LrRange range{};
  std::uint64_t seed = 0;
  bool augment = false;

  /// Frozen backbone, one rate picked by the LR finder, 8 epochs.
  static PhaseConfig head(std::uint64_t seed = 0);
  /// Everything trainable, rates spread over [1e-6, 1e-4], 3 epochs.
  static PhaseConfig finetune(std::uint64_t seed = 0);

  /// allow_zero_epochs admits a null phase (used to switch refinement off).
  void validate(bool allow_zero_epochs = false) const;
  /// One rate per layer group.
  std::vector<double> group_rates(int groups) const;
};

/// lo·(hi/lo)^(g/(G−1)) for g = 0..G−1; a single group gets hi.
std::vector<double> discriminative_lrs(double lo, double hi, int groups);

// ---------------------------------------------------------------------------
// LR range finder
// ---------------------------------------------------------------------------

struct LrFindOptions {
  double start = 1e-7;
  double end = 10.0;
  int iterations = 100;
  double beta = 0.98;
  double divergence_factor = 4.0;
};

struct LrPoint {
  double lr = 0;
  double loss = 0;           // raw
  double smoothed_loss = 0;  // bias-corrected exponential average
};

struct LrCurve {
  std::vector<LrPoint> points;
  std::optional<std::size_t> divergence_index;
  std::size_t best_index = 0;
  double suggested_lr = 0;

  double divergence_lr() const { return divergence_index ? points[*divergence_index].lr : 0.0; }
  /// `lr,loss_smoothed` rows.
  std::string to_csv() const;
};

/// Core sweep. step(lr, i) evaluates the loss at the current state, applies
/// one update at rate lr, and returns the loss. State handling is the
/// caller's business.
LrCurve lr_sweep(const std::function<double(double lr, int iteration)>& step,
                 const LrFindOptions& options = {});

/// A view of training examples: which rows of a source to use.
struct Split {
  const ImageSource* source = nullptr;
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }
  std::vector<int> labels() const;
};

/// Sweep on a network using its current trainable set, cycling seeded
/// batches. Parameters, buffers, gradients and optimizer state are restored
/// afterwards.
LrCurve lr_find(Network& net, const Split& data, int batch_size, const OptimizerState& state,
                const LrFindOptions& options = {}, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;  // 1-based within its phase
  std::string phase;
  double mean_loss = 0;
  double train_accuracy = 0;      // percent, from the training forward passes
  std::optional<FoldMetrics> validation;
};

struct PhaseLog {
  std::vector<EpochRecord> epochs;
  std::int64_t steps = 0;

  /// One line per epoch: epoch,phase,mean_loss,sensitivity,specificity,accuracy,auc
  std::string to_csv() const;
};

/// Stacks source rows into one N×3×S×S batch.
Tensor make_batch(const ImageSource& source, const std::vector<std::size_t>& rows);

/// Positive-class probability per row, eval-mode normalization, no graph.
std::vector<double> predict_scores(Network& net, const Split& data, int batch_size = 64);

/// Applies config.policy, then config.epochs passes over `train` in a
/// permutation seeded by (seed, epoch). The last partial batch is kept.
PhaseLog train_phase(Network& net, const Split& train, const PhaseConfig& config,
                     OptimizerState& state, const Split* validation = nullptr);

// ---------------------------------------------------------------------------
// Two-phase cross-validated protocol
// ---------------------------------------------------------------------------

struct ProtocolOptions {
  bool oversample = false;
  LrFindOptions lr_find{};
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::string init = "random";  // echoed in the reports
  /// Called after each fold finishes, for progress output.
  std::function<void(int fold, const FoldMetrics& head, const FoldMetrics& finetune)> on_fold;
};

struct FoldOutcome {
  Network network;
  PhaseLog head_log;
  PhaseLog finetune_log;
  std::vector<std::string> warnings;
};

struct ProtocolResult {
  MetricsReport head;      // after phase 1
  MetricsReport finetune;  // after phase 2
  double head_lr = 0;      // rate used for phase 1
  std::optional<LrCurve> head_lr_curve;
  // Validation AUC per fold: after phase 1, then after each phase-2 epoch.
  std::vector<std::vector<double>> auc_trajectory;
  std::vector<double> mean_auc_trajectory;
  std::vector<FoldOutcome> folds;
};

/// For each fold: clone `initial`, train the head, evaluate, unfreeze and
/// refine with per-group rates, evaluate again. When head.lr is not set the
/// rate comes from one LR sweep on the first fold.
ProtocolResult fit_protocol(const Network& initial, const ImageSource& data, const FoldPlan& plan,
                            PhaseConfig head, const PhaseConfig& finetune,
                            const ProtocolOptions& options = {});

}  // namespace rashnet
