#pragma once

#include <cstdint>
#include <span>
#include <utility>

#include "rashnet/autograd.hpp"
#include "rashnet/tensor.hpp"

namespace rashnet {

/// Output extent of a sliding window: floor((in + 2*pad - window) / stride) + 1.
/// Throws ShapeError when the window does not fit the padded input.
std::int64_t window_output_extent(std::int64_t in, std::int64_t window, std::int64_t stride,
                                  std::int64_t pad);

struct Conv2dOptions {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
};

/// input NCHW, kernel OIHW, optional bias O. Zero padding.
Variable conv2d(const Variable& input, const Variable& kernel, const Variable* bias,
                Conv2dOptions options = {});

/// Direct sliding-window convolution. Slow; the oracle for conv2d.
Tensor conv2d_reference(const Tensor& input, const Tensor& kernel, const Tensor* bias,
                        Conv2dOptions options = {});

struct Pool2dOptions {
  std::int64_t window = 2;
  std::int64_t stride = 2;
  std::int64_t padding = 0;
};

/// Padding acts as -infinity. Gradient goes to the first maximal element.
Variable max_pool2d(const Variable& input, Pool2dOptions options);

/// NCHW -> NC, mean over the spatial extent.
Variable global_avg_pool2d(const Variable& input);

enum class NormMode { train, eval };

struct BatchNormOptions {
  NormMode mode = NormMode::train;
  double eps = 1e-5;
  double momentum = 0.1;
  bool update_running_stats = true;  // train mode only
};

/// Per-channel normalization over N*H*W followed by gamma/beta affine.
/// In train mode with update_running_stats the running buffers are blended
/// toward the batch statistics; running_var receives the unbiased variance.
Variable batch_norm2d(const Variable& input, const Variable& gamma, const Variable& beta,
                      Tensor& running_mean, Tensor& running_var, BatchNormOptions options = {});

/// input N×D, weight D×K, bias K -> N×K.
Variable affine(const Variable& input, const Variable& weight, const Variable& bias);

Variable relu(const Variable& input);

Variable add(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
Variable sum(const Variable& input);

/// Flattens N×C×1×1 (or any N×...) to N×rest.
Variable flatten(const Variable& input);

struct CrossEntropyResult {
  Variable loss;        // scalar, mean over the batch
  Tensor probabilities; // N×K, softmax of the logits
};

/// Softmax with row-max subtraction followed by mean negative log-likelihood.
CrossEntropyResult softmax_cross_entropy(const Variable& logits, std::span<const int> targets);

Tensor softmax(const Tensor& logits);

}  // namespace rashnet
