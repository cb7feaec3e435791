#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rashnet/resnet.hpp"
#include "rashnet/trainer.hpp"

namespace rashnet {

/// Everything a command needs. Defaults are the published protocol:
/// 5 folds, batch 64, 8 head epochs then 3 refinement epochs over rates
/// [1e-6, 1e-4], no oversampling, no augmentation, 32-bit.
struct RunConfig {
  std::string manifest;
  int variant = 50;  // 34, 50, 101, 152, or 0 for the one-block-per-stage layout
  int k = 5;
  std::uint64_t seed = 0;
  int batch_size = 64;
  int epochs_head = 8;
  int epochs_finetune = 3;
  double lr_lo = 1e-6;
  double lr_hi = 1e-4;
  bool oversample = false;
  bool augment = false;
  int precision = 32;
  std::string init_checkpoint;

  // Scale and plumbing.
  int resolution = 224;
  double lr_head = 0.0;  // nonpositive: pick with the LR finder
  int lr_iterations = 100;
  std::string out_dir = "rashnet_out";
  std::string checkpoint;            // evaluate, predict
  std::vector<std::string> images;   // predict
  std::vector<int> variants{34, 50, 101, 152};  // compare-variants

  /// Throws std::invalid_argument naming the first bad field.
  void validate() const;
  NetworkConfig network_config(int variant_override = -1) const;
  DType dtype() const { return precision == 64 ? DType::f64 : DType::f32; }
  PhaseConfig head_phase() const;
  PhaseConfig finetune_phase() const;
  /// Stable JSON echo of every field, in declaration order.
  std::string snapshot() const;
};

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

/// Runs one command line (argv[0] excluded). Artifacts go under
/// config.out_dir; human-readable output to `out`, diagnostics to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rashnet
