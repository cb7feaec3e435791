#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rashnet {

/// A metric whose denominator is zero, or malformed evaluation input.
class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct ConfusionMatrix {
  std::int64_t tp = 0, tn = 0, fp = 0, fn = 0;

  std::int64_t total() const { return tp + tn + fp + fn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Positive iff score >= threshold. Scores must lie in [0, 1].
ConfusionMatrix confusion_matrix(std::span<const double> scores, std::span<const int> labels,
                                 double threshold = 0.5);

/// Percentages, unrounded.
struct BinaryMetrics {
  double sensitivity = 0;
  double specificity = 0;
  double accuracy = 0;
};

double sensitivity(const ConfusionMatrix& cm);
double specificity(const ConfusionMatrix& cm);
double accuracy(const ConfusionMatrix& cm);
BinaryMetrics binary_metrics(const ConfusionMatrix& cm);

struct RocPoint {
  double fpr = 0;
  double tpr = 0;
  double threshold = 0;  // score at which this point is reached; +inf for (0,0)
};

struct RocResult {
  std::vector<RocPoint> curve;  // (0,0) first, (1,1) last
  double auc = 0;               // trapezoid
  double auc_pairs = 0;         // Mann-Whitney, ties count one half
};

/// Threshold sweep over every distinct score. Throws when one class is absent
/// or when the two AUC computations disagree beyond 1e-12.
RocResult roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Quadratic pair count, used as an independent check.
double auc_pair_count(std::span<const double> scores, std::span<const int> labels);

struct FoldMetrics {
  int fold = 0;
  double sensitivity = 0;
  double specificity = 0;
  double accuracy = 0;
  std::optional<double> auc;
};

struct MetricsReport {
  std::string phase;
  std::vector<FoldMetrics> folds;
  FoldMetrics average;  // fold == -1
  std::string init;     // "random" or "checkpoint:<path>", empty when unknown

  std::string to_json() const;
  std::string to_text() const;
};

/// Average row is the arithmetic mean of the rows; AUC averaged only when
/// every row has one.
MetricsReport cross_validate_report(std::vector<FoldMetrics> folds, std::string phase);

FoldMetrics fold_metrics(int fold, std::span<const double> scores, std::span<const int> labels,
                         double threshold = 0.5);

/// Fixed-point display, ties to even on the scaled value.
std::string format_fixed(double value, int digits = 2);

}  // namespace rashnet
