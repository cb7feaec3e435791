#include "rashnet/resnet.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace rashnet {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kNormMomentum = 0.1;

Tensor he_normal(Shape shape, std::int64_t fan_in, DType dtype, std::mt19937_64& rng) {
  Tensor t(std::move(shape), dtype);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set(i, dist(rng));
  return t;
}

ConvLayer make_conv(std::string name, std::int64_t in, std::int64_t out, std::int64_t k,
                    std::int64_t stride, std::int64_t pad, DType dtype, std::mt19937_64& rng) {
  ConvLayer c;
  c.name = std::move(name);
  c.weight = Variable(he_normal({out, in, k, k}, in * k * k, dtype, rng), true);
  c.stride = stride;
  c.padding = pad;
  return c;
}

NormLayer make_norm(std::string name, std::int64_t channels, DType dtype) {
  NormLayer n;
  n.name = std::move(name);
  n.gamma = Variable(Tensor::full({channels}, 1.0, dtype), true);
  n.beta = Variable(Tensor::zeros({channels}, dtype), true);
  n.running_mean = Tensor::zeros({channels}, dtype);
  n.running_var = Tensor::full({channels}, 1.0, dtype);
  return n;
}

Variable conv_forward(const ConvLayer& c, const Variable& x) {
  return conv2d(x, c.weight, nullptr, {c.stride, c.padding});
}

Variable norm_forward(NormLayer& n, const Variable& x, NormContext ctx) {
  BatchNormOptions opt;
  opt.eps = kNormEps;
  opt.momentum = kNormMomentum;
  opt.mode = (ctx.mode == NormMode::eval || ctx.frozen) ? NormMode::eval : NormMode::train;
  opt.update_running_stats = !ctx.frozen;
  return batch_norm2d(x, n.gamma, n.beta, n.running_mean, n.running_var, opt);
}

ConvLayer clone_conv(const ConvLayer& c) {
  ConvLayer out = c;
  out.weight = Variable(c.weight.value(), c.weight.requires_grad());
  return out;
}

NormLayer clone_norm(const NormLayer& n) {
  NormLayer out = n;
  out.gamma = Variable(n.gamma.value(), n.gamma.requires_grad());
  out.beta = Variable(n.beta.value(), n.beta.requires_grad());
  return out;
}

void append_bytes(std::vector<std::byte>& out, const Tensor& t) {
  auto b = t.bytes();
  out.insert(out.end(), b.begin(), b.end());
}

}  // namespace

NetworkConfig NetworkConfig::for_variant(int variant, int num_classes) {
  NetworkConfig c;
  c.variant = variant;
  c.num_classes = num_classes;
  switch (variant) {
    case 34:
      c.block = BlockKind::basic;
      c.stage_blocks = {3, 4, 6, 3};
      break;
    case 50:
      c.block = BlockKind::bottleneck;
      c.stage_blocks = {3, 4, 6, 3};
      break;
    case 101:
      c.block = BlockKind::bottleneck;
      c.stage_blocks = {3, 4, 23, 3};
      break;
    case 152:
      c.block = BlockKind::bottleneck;
      c.stage_blocks = {3, 8, 36, 3};
      break;
    default:
      throw std::invalid_argument("unknown ResNet variant " + std::to_string(variant) +
                                  " (expected 34, 50, 101 or 152)");
  }
  if (num_classes < 2) {
    throw std::invalid_argument("num_classes must be at least 2, got " + std::to_string(num_classes));
  }
  return c;
}

NetworkConfig NetworkConfig::tiny(BlockKind block, int input_size) {
  NetworkConfig c;
  c.variant = 0;
  c.block = block;
  c.stage_blocks = {1, 1, 1, 1};
  c.input_size = input_size;
  c.validate();
  return c;
}

int NetworkConfig::weight_layer_count() const {
  int blocks = 0;
  for (int b : stage_blocks) blocks += b;
  const int per_block = block == BlockKind::bottleneck ? 3 : 2;
  return blocks * per_block + 2;
}

void NetworkConfig::validate() const {
  if (variant != 0) {
    const NetworkConfig canonical = for_variant(variant, num_classes);
    if (canonical.block != block || canonical.stage_blocks != stage_blocks) {
      throw std::invalid_argument("stage layout does not match ResNet-" + std::to_string(variant));
    }
  }
  if (num_classes < 2) {
    throw std::invalid_argument("num_classes must be at least 2, got " + std::to_string(num_classes));
  }
  for (int b : stage_blocks) {
    if (b < 1) throw std::invalid_argument("every stage needs at least one block");
  }
  for (int w : stage_widths) {
    if (w < 1) throw std::invalid_argument("stage widths must be positive");
  }
  if (input_size < 32) {
    throw std::invalid_argument("input size must be at least 32, got " + std::to_string(input_size));
  }
  if (input_channels < 1) throw std::invalid_argument("input channels must be positive");
  if (block != BlockKind::basic && block != BlockKind::bottleneck) {
    throw std::invalid_argument("unknown block kind");
  }
}

Network::Network(NetworkConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  build(rng);
}

void Network::build(std::mt19937_64& rng) {
  const DType dt = config_.dtype;
  stem_conv_ = make_conv("stem.conv", config_.input_channels, 64, 7, 2, 3, dt, rng);
  stem_norm_ = make_norm("stem.bn", 64, dt);

  std::int64_t in = 64;
  const std::int64_t expansion = config_.expansion();
  stages_.clear();
  for (int s = 0; s < 4; ++s) {
    std::vector<ResidualBlock> blocks;
    const std::int64_t width = config_.stage_widths[static_cast<std::size_t>(s)];
    const std::int64_t out = width * expansion;
    for (int b = 0; b < config_.stage_blocks[static_cast<std::size_t>(s)]; ++b) {
      ResidualBlock blk;
      blk.name = "stage" + std::to_string(s + 2) + "." + std::to_string(b);
      blk.kind = config_.block;
      blk.in_channels = in;
      blk.out_channels = out;
      blk.stride = (b == 0 && s > 0) ? 2 : 1;
      const std::string p = blk.name + ".";
      if (config_.block == BlockKind::basic) {
        blk.convs.push_back(make_conv(p + "conv1", in, width, 3, blk.stride, 1, dt, rng));
        blk.convs.push_back(make_conv(p + "conv2", width, width, 3, 1, 1, dt, rng));
      } else {
        blk.convs.push_back(make_conv(p + "conv1", in, width, 1, 1, 0, dt, rng));
        blk.convs.push_back(make_conv(p + "conv2", width, width, 3, blk.stride, 1, dt, rng));
        blk.convs.push_back(make_conv(p + "conv3", width, out, 1, 1, 0, dt, rng));
      }
      for (std::size_t i = 0; i < blk.convs.size(); ++i) {
        blk.norms.push_back(make_norm(p + "bn" + std::to_string(i + 1), blk.convs[i].weight.shape()[0], dt));
      }
      if (blk.stride != 1 || in != out) {
        blk.skip_conv = make_conv(p + "downsample.conv", in, out, 1, blk.stride, 0, dt, rng);
        blk.skip_norm = make_norm(p + "downsample.bn", out, dt);
      }
      blocks.push_back(std::move(blk));
      in = out;
    }
    stages_.push_back(std::move(blocks));
  }
  const std::int64_t d = config_.feature_width();
  const std::int64_t k = config_.num_classes;
  head_weight_ = Variable(he_normal({d, k}, d, dt, rng), true);
  head_bias_ = Variable(Tensor::zeros({k}, dt), true);
}

Network Network::clone() const {
  Network out;
  out.config_ = config_;
  out.policy_ = policy_;
  out.stem_conv_ = clone_conv(stem_conv_);
  out.stem_norm_ = clone_norm(stem_norm_);
  out.stages_.reserve(stages_.size());
  for (const auto& stage : stages_) {
    std::vector<ResidualBlock> blocks;
    for (const auto& blk : stage) {
      ResidualBlock b = blk;
      for (auto& c : b.convs) c = clone_conv(c);
      for (auto& n : b.norms) n = clone_norm(n);
      if (b.skip_conv) b.skip_conv = clone_conv(*b.skip_conv);
      if (b.skip_norm) b.skip_norm = clone_norm(*b.skip_norm);
      blocks.push_back(std::move(b));
    }
    out.stages_.push_back(std::move(blocks));
  }
  out.head_weight_ = Variable(head_weight_.value(), head_weight_.requires_grad());
  out.head_bias_ = Variable(head_bias_.value(), head_bias_.requires_grad());
  return out;
}

Variable block_forward(ResidualBlock& block, const Variable& input, NormContext ctx) {
  if (input.value().rank() != 4 || input.shape()[1] != block.in_channels) {
    throw ShapeError(block.name + ": expected " + std::to_string(block.in_channels) +
                     " input channels, got " + shape_str(input.shape()));
  }
  Variable h = input;
  for (std::size_t i = 0; i < block.convs.size(); ++i) {
    h = norm_forward(block.norms[i], conv_forward(block.convs[i], h), ctx);
    if (i + 1 < block.convs.size()) h = relu(h);
  }
  Variable skip = input;
  if (block.skip_conv) skip = norm_forward(*block.skip_norm, conv_forward(*block.skip_conv, input), ctx);
  return relu(add(h, skip));
}

Variable Network::forward(const Tensor& batch, NormMode mode, ForwardTrace* trace) {
  if (batch.rank() != 4 || batch.dim(1) != config_.input_channels ||
      batch.dim(2) != config_.input_size || batch.dim(3) != config_.input_size) {
    throw ShapeError("forward: expected N x " + std::to_string(config_.input_channels) + " x " +
                     std::to_string(config_.input_size) + " x " +
                     std::to_string(config_.input_size) + " batch, got " + shape_str(batch.shape()));
  }
  if (batch.dtype() != config_.dtype) throw ShapeError("forward: batch dtype does not match network");
  const bool backbone_frozen = policy_ == TrainPolicy::head_only;
  const NormContext ctx{mode, backbone_frozen};

  Variable x(batch, false);
  x = conv_forward(stem_conv_, x);
  if (trace) {
    trace->stage_outputs.clear();
    trace->stage_outputs.push_back(x.shape());
  }
  x = relu(norm_forward(stem_norm_, x, ctx));
  x = max_pool2d(x, {3, 2, 1});
  for (auto& stage : stages_) {
    for (auto& blk : stage) x = block_forward(blk, x, ctx);
    if (trace) trace->stage_outputs.push_back(x.shape());
  }
  x = global_avg_pool2d(x);
  if (trace) trace->pooled = x.shape();
  Variable logits = affine(x, head_weight_, head_bias_);
  if (trace) trace->logits = logits.shape();
  return logits;
}

std::vector<ParamRef> Network::parameters() const {
  std::vector<ParamRef> out;
  auto conv = [&](const ConvLayer& c, int g) { out.push_back({c.name + ".weight", c.weight, g}); };
  auto norm = [&](const NormLayer& n, int g) {
    out.push_back({n.name + ".gamma", n.gamma, g});
    out.push_back({n.name + ".beta", n.beta, g});
  };
  conv(stem_conv_, 0);
  norm(stem_norm_, 0);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    const int g = s < 2 ? 0 : 1;
    for (const auto& blk : stages_[s]) {
      for (std::size_t i = 0; i < blk.convs.size(); ++i) {
        conv(blk.convs[i], g);
        norm(blk.norms[i], g);
      }
      if (blk.skip_conv) {
        conv(*blk.skip_conv, g);
        norm(*blk.skip_norm, g);
      }
    }
  }
  out.push_back({"head.weight", head_weight_, 2});
  out.push_back({"head.bias", head_bias_, 2});
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Network::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto norm = [&](NormLayer& n) {
    out.emplace_back(n.name + ".running_mean", &n.running_mean);
    out.emplace_back(n.name + ".running_var", &n.running_var);
  };
  norm(stem_norm_);
  for (auto& stage : stages_) {
    for (auto& blk : stage) {
      for (auto& n : blk.norms) norm(n);
      if (blk.skip_norm) norm(*blk.skip_norm);
    }
  }
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Network::buffers() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<Network*>(this)->buffers()) out.emplace_back(name, t);
  return out;
}

void Network::set_trainable(TrainPolicy policy) {
  policy_ = policy;
  for (auto& p : parameters()) {
    const bool head = p.group == 2;
    p.var.set_requires_grad(policy == TrainPolicy::all || head);
  }
}

std::size_t Network::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.var.requires_grad() ? 1 : 0;
  return n;
}

LayerGroups Network::layer_groups() const {
  LayerGroups groups;
  groups.count = kGroupCount;
  for (const auto& p : parameters()) groups.group_of.emplace(p.name, p.group);
  return groups;
}

int Network::weight_layer_count() const {
  int n = 1;  // stem
  for (const auto& stage : stages_) {
    for (const auto& blk : stage) n += static_cast<int>(blk.convs.size());
  }
  return n + 1;  // head
}

void Network::replace_head(int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("num_classes must be at least 2");
  std::mt19937_64 rng(seed);
  const std::int64_t d = config_.feature_width();
  config_.num_classes = num_classes;
  head_weight_ = Variable(he_normal({d, num_classes}, d, config_.dtype, rng), true);
  head_bias_ = Variable(Tensor::zeros({num_classes}, config_.dtype), true);
}

std::vector<std::byte> Network::backbone_bytes() const {
  std::vector<std::byte> out;
  for (const auto& p : parameters()) {
    if (p.group != 2) append_bytes(out, p.var.value());
  }
  for (const auto& [name, t] : buffers()) append_bytes(out, *t);
  return out;
}

std::vector<std::byte> Network::state_bytes() const {
  std::vector<std::byte> out;
  for (const auto& p : parameters()) append_bytes(out, p.var.value());
  for (const auto& [name, t] : buffers()) append_bytes(out, *t);
  return out;
}

Network build_resnet(const NetworkConfig& config, std::uint64_t seed) {
  return Network(config, seed);
}

}  // namespace rashnet
