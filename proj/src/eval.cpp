#include "rashnet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace rashnet {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) throw MetricError("evaluation input is empty");
  if (scores.size() != labels.size()) {
    throw MetricError("scores and labels differ in length (" + std::to_string(scores.size()) +
                      " vs " + std::to_string(labels.size()) + ")");
  }
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!(scores[i] >= 0.0 && scores[i] <= 1.0)) {
      throw MetricError("score " + std::to_string(scores[i]) + " at index " + std::to_string(i) +
                        " is outside [0, 1]");
    }
    if (labels[i] != 0 && labels[i] != 1) {
      throw MetricError("label at index " + std::to_string(i) + " is not 0 or 1");
    }
  }
}

double percent(std::int64_t num, std::int64_t den) {
  return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

nlohmann::ordered_json row_json(const FoldMetrics& m) {
  nlohmann::ordered_json j;
  if (m.fold >= 0) j["fold"] = m.fold;
  j["sensitivity"] = m.sensitivity;
  j["specificity"] = m.specificity;
  j["accuracy"] = m.accuracy;
  j["auc"] = m.auc ? nlohmann::ordered_json(*m.auc) : nlohmann::ordered_json(nullptr);
  return j;
}

}  // namespace

ConfusionMatrix confusion_matrix(std::span<const double> scores, std::span<const int> labels,
                                 double threshold) {
  check_inputs(scores, labels);
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (labels[i] == 1) {
      (predicted ? cm.tp : cm.fn) += 1;
    } else {
      (predicted ? cm.fp : cm.tn) += 1;
    }
  }
  return cm;
}

double sensitivity(const ConfusionMatrix& cm) {
  if (cm.tp + cm.fn == 0) throw MetricError("sensitivity undefined: no positive samples (TP+FN = 0)");
  return percent(cm.tp, cm.tp + cm.fn);
}

double specificity(const ConfusionMatrix& cm) {
  if (cm.tn + cm.fp == 0) throw MetricError("specificity undefined: no negative samples (TN+FP = 0)");
  return percent(cm.tn, cm.tn + cm.fp);
}

double accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw MetricError("accuracy undefined: empty confusion matrix");
  return percent(cm.tp + cm.tn, cm.total());
}

BinaryMetrics binary_metrics(const ConfusionMatrix& cm) {
  if (cm.tp < 0 || cm.tn < 0 || cm.fp < 0 || cm.fn < 0) {
    throw MetricError("confusion matrix has a negative count");
  }
  return {sensitivity(cm), specificity(cm), accuracy(cm)};
}

RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  const auto pos = static_cast<std::int64_t>(std::count(labels.begin(), labels.end(), 1));
  const auto neg = static_cast<std::int64_t>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw MetricError("ROC needs both classes present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult r;
  r.curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  // Twice the trapezoid area in units of one (pos, neg) cell stays integral.
  std::int64_t tp = 0, fp = 0, twice_area = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    const std::int64_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && scores[order[i]] == t; ++i) (labels[order[i]] == 1 ? tp : fp) += 1;
    twice_area += (fp - fp0) * (tp + tp0);
    r.curve.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                       static_cast<double>(tp) / static_cast<double>(pos), t});
  }
  if (r.curve.back().fpr != 1.0 || r.curve.back().tpr != 1.0) {
    r.curve.push_back({1.0, 1.0, 0.0});
  }
  r.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));

  // Mann-Whitney over ranks of the same ordering: each negative beats nothing,
  // each positive beats every negative with a strictly lower score.
  std::int64_t twice_pairs = 0, neg_below = neg;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    std::int64_t p = 0, n = 0;
    for (; i < order.size() && scores[order[i]] == t; ++i) (labels[order[i]] == 1 ? p : n) += 1;
    neg_below -= n;
    twice_pairs += p * (2 * neg_below + n);
  }
  r.auc_pairs = static_cast<double>(twice_pairs) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
  if (std::abs(r.auc - r.auc_pairs) > 1e-12) {
    throw MetricError("AUC methods disagree: trapezoid " + std::to_string(r.auc) + " vs pairs " +
                      std::to_string(r.auc_pairs));
  }
  return r;
}

double auc_pair_count(std::span<const double> scores, std::span<const int> labels) {
  double wins = 0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  if (pairs == 0) throw MetricError("pair count needs both classes present");
  return wins / static_cast<double>(pairs);
}

FoldMetrics fold_metrics(int fold, std::span<const double> scores, std::span<const int> labels,
                         double threshold) {
  const auto m = binary_metrics(confusion_matrix(scores, labels, threshold));
  FoldMetrics out{fold, m.sensitivity, m.specificity, m.accuracy, std::nullopt};
  out.auc = roc_auc(scores, labels).auc;
  return out;
}

MetricsReport cross_validate_report(std::vector<FoldMetrics> folds, std::string phase) {
  if (folds.empty()) throw MetricError("cross_validate_report: no folds");
  MetricsReport r;
  r.phase = std::move(phase);
  r.folds = std::move(folds);
  const auto k = static_cast<double>(r.folds.size());
  FoldMetrics avg{-1, 0, 0, 0, std::nullopt};
  bool all_auc = true;
  double auc_sum = 0;
  for (const auto& f : r.folds) {
    avg.sensitivity += f.sensitivity;
    avg.specificity += f.specificity;
    avg.accuracy += f.accuracy;
    if (f.auc) auc_sum += *f.auc;
    else all_auc = false;
  }
  avg.sensitivity /= k;
  avg.specificity /= k;
  avg.accuracy /= k;
  if (all_auc) avg.auc = auc_sum / k;
  r.average = avg;
  return r;
}

std::string format_fixed(double value, int digits) {
  if (!std::isfinite(value)) return value != value ? "nan" : (value > 0 ? "inf" : "-inf");
  const double scale = std::pow(10.0, digits);
  // nearbyint honours the default round-to-nearest-even mode.
  const double units = std::nearbyint(value * scale);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, units == 0.0 ? 0.0 : units / scale);
  return buf;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["phase"] = phase;
  if (!init.empty()) j["init"] = init;
  j["folds"] = nlohmann::ordered_json::array();
  for (const auto& f : folds) j["folds"].push_back(row_json(f));
  j["average"] = row_json(average);
  return j.dump(2) + "\n";
}

std::string MetricsReport::to_text() const {
  std::ostringstream out;
  out << "Phase: " << phase << "\n";
  if (!init.empty()) out << "Initialization: " << init << "\n";
  out << "Iteration   Sensitivity   Specificity   Accuracy   AUC\n";
  auto line = [&](const std::string& name, const FoldMetrics& m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-11s %11s   %11s   %8s   %s\n", name.c_str(),
                  format_fixed(m.sensitivity).c_str(), format_fixed(m.specificity).c_str(),
                  format_fixed(m.accuracy).c_str(),
                  m.auc ? format_fixed(*m.auc, 3).c_str() : "-");
    out << buf;
  };
  for (const auto& f : folds) line(std::to_string(f.fold + 1), f);
  line("Average", average);
  return out.str();
}

}  // namespace rashnet
