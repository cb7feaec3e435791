#pragma once

// Shared fixtures: the published class sizes and temp directories.

#include <array>
#include <filesystem>
#include <random>
#include <string>
#include <utility>

#include "rashnet/data.hpp"
#include "rashnet/eval.hpp"

namespace rashnet::testing {

// Image counts per class of the published corpus, in vocabulary order.
inline constexpr std::array<std::size_t, kFineLabelCount> kCorpusCounts{
    124, 170, 87, 80, 95, 117, 112, 158, 41, 122, 131, 79};

// Displayed first-phase row 1 and the displayed refined-model rows, as
// (sensitivity, specificity, accuracy) percentages.
struct DisplayedRow {
  double sensitivity, specificity, accuracy;
};
inline constexpr DisplayedRow kHeadRow1{83.87, 96.54, 95.04};
inline constexpr std::array<DisplayedRow, 5> kRefinedRows{{
    {87.10, 96.10, 95.04},
    {84.38, 96.55, 95.08},
    {80.65, 98.27, 96.18},
    {71.88, 96.12, 93.18},
    {84.38, 98.28, 96.59},
}};
inline constexpr DisplayedRow kRefinedAverage{81.67, 97.06, 95.21};

// Integer confusion counts that round to each displayed refined row.
inline const std::array<ConfusionMatrix, 5> kRefinedCounts{{
    {.tp = 27, .tn = 222, .fp = 9, .fn = 4},
    {.tp = 27, .tn = 224, .fp = 8, .fn = 5},
    {.tp = 25, .tn = 227, .fp = 4, .fn = 6},
    {.tp = 23, .tn = 223, .fp = 9, .fn = 9},
    {.tp = 27, .tn = 228, .fp = 4, .fn = 5},
}};

inline DatasetManifest corpus_manifest() {
  DatasetManifest m;
  for (std::size_t c = 0; c < kFineLabelCount; ++c) {
    const auto label = static_cast<FineLabel>(c);
    for (std::size_t i = 0; i < kCorpusCounts[c]; ++i) {
      m.add(std::string(label_name(label)) + "/" + std::to_string(i) + ".jpg", label);
    }
  }
  return m;
}

// Two classes whose per-channel image means are exactly +0.05 and -0.05
// under unit-scale noise, so the pooled features separate them while single
// pixels do not.
inline TensorSource separable_source(std::size_t n, std::int64_t size, std::uint64_t seed,
                                     DType dtype = DType::f32) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> noise(-1.0, 1.0);
  const std::int64_t plane = size * size;
  std::vector<Tensor> images;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    Tensor t({3, size, size}, dtype);
    for (std::int64_t c = 0; c < 3; ++c) {
      std::vector<double> v(static_cast<std::size_t>(plane));
      double mean = 0;
      for (auto& x : v) mean += (x = noise(rng));
      mean /= static_cast<double>(plane);
      for (std::int64_t j = 0; j < plane; ++j) {
        t.set(c * plane + j, v[static_cast<std::size_t>(j)] - mean + (label ? 0.05 : -0.05));
      }
    }
    images.push_back(std::move(t));
    labels.push_back(label);
  }
  return TensorSource(std::move(images), std::move(labels));
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("rashnet_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace rashnet::testing
