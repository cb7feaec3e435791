#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rashnet/autograd.hpp"
#include "rashnet/ops.hpp"
#include "rashnet/optim.hpp"

namespace rashnet {

enum class BlockKind : std::uint8_t { basic = 1, bottleneck = 2 };

/// Layout of a residual network. variant is 34/50/101/152 for the canonical
/// family, or 0 for a custom stage layout (used for desk-scale runs).
struct NetworkConfig {
  int variant = 50;
  BlockKind block = BlockKind::bottleneck;
  std::array<int, 4> stage_blocks{3, 4, 6, 3};
  std::array<int, 4> stage_widths{64, 128, 256, 512};
  int num_classes = 2;
  int input_size = 224;
  int input_channels = 3;
  DType dtype = DType::f32;

  static NetworkConfig for_variant(int variant, int num_classes = 2);
  /// One block per stage; the layout of the convergence suite.
  static NetworkConfig tiny(BlockKind block = BlockKind::basic, int input_size = 32);

  int expansion() const { return block == BlockKind::bottleneck ? 4 : 1; }
  int feature_width() const { return stage_widths[3] * expansion(); }
  /// Named weight layers: convolutions on the main path plus the head.
  int weight_layer_count() const;
  void validate() const;

  bool operator==(const NetworkConfig&) const = default;
};

struct ConvLayer {
  std::string name;
  Variable weight;  // OIHW
  std::int64_t stride = 1;
  std::int64_t padding = 0;
};

struct NormLayer {
  std::string name;
  Variable gamma;
  Variable beta;
  Tensor running_mean;
  Tensor running_var;
};

struct ResidualBlock {
  std::string name;
  BlockKind kind = BlockKind::basic;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t stride = 1;
  std::vector<ConvLayer> convs;  // branch, in order
  std::vector<NormLayer> norms;  // one per branch conv
  std::optional<ConvLayer> skip_conv;
  std::optional<NormLayer> skip_norm;

  bool identity_skip() const { return !skip_conv.has_value(); }
};

enum class TrainPolicy { head_only, all };

struct NormContext {
  NormMode mode = NormMode::train;
  bool frozen = false;  // normalize with running stats, never update them
};

/// out = relu(branch(x) + skip(x)).
Variable block_forward(ResidualBlock& block, const Variable& input, NormContext ctx);

/// Spatial extents and widths observed during a forward pass.
struct ForwardTrace {
  std::vector<Shape> stage_outputs;  // stage 1 (after stem conv) .. stage 5
  Shape pooled;
  Shape logits;
};

struct LayerGroups {
  int count = 0;
  std::map<std::string, int> group_of;
};

/// Residual network: stem conv 7x7/2 + norm + relu + max pool 3x3/2, four
/// residual stages, global average pool, affine head.
class Network {
 public:
  static constexpr int kGroupCount = 3;

  explicit Network(NetworkConfig config, std::uint64_t seed = 0);

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// Deep copy; the clone shares no storage with this network.
  Network clone() const;

  const NetworkConfig& config() const { return config_; }

  /// batch N×C×S×S -> logits N×num_classes.
  Variable forward(const Tensor& batch, NormMode mode, ForwardTrace* trace = nullptr);

  /// Parameters in a fixed order, each tagged with its layer group.
  std::vector<ParamRef> parameters() const;
  /// Running statistics, named "<norm>.running_mean" / "<norm>.running_var".
  std::vector<std::pair<std::string, Tensor*>> buffers();
  std::vector<std::pair<std::string, const Tensor*>> buffers() const;

  void set_trainable(TrainPolicy policy);
  TrainPolicy policy() const { return policy_; }
  std::size_t trainable_count() const;

  LayerGroups layer_groups() const;
  int weight_layer_count() const;

  /// Fresh head of width num_classes; backbone untouched.
  void replace_head(int num_classes, std::uint64_t seed);

  /// Concatenated bytes of every backbone parameter and buffer.
  std::vector<std::byte> backbone_bytes() const;
  /// Concatenated bytes of every parameter and buffer.
  std::vector<std::byte> state_bytes() const;

  std::vector<ResidualBlock>& stage(int index) { return stages_.at(static_cast<std::size_t>(index)); }
  ConvLayer& stem_conv() { return stem_conv_; }
  const ConvLayer& stem_conv() const { return stem_conv_; }
  Variable& head_weight() { return head_weight_; }
  Variable& head_bias() { return head_bias_; }

 private:
  Network() = default;
  void build(std::mt19937_64& rng);

  NetworkConfig config_;
  TrainPolicy policy_ = TrainPolicy::all;
  ConvLayer stem_conv_;
  NormLayer stem_norm_;
  std::vector<std::vector<ResidualBlock>> stages_;
  Variable head_weight_;  // D×K
  Variable head_bias_;    // K
};

Network build_resnet(const NetworkConfig& config, std::uint64_t seed = 0);

}  // namespace rashnet
