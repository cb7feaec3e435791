#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "rashnet/autograd.hpp"

namespace rashnet {

/// A named parameter together with its learning-rate group.
struct ParamRef {
  std::string name;
  Variable var;
  int group = 0;
};

struct OptimizerState {
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::map<std::string, Tensor> velocity;  // keyed by parameter name
};

/// v <- momentum*v + (g + wd*w); w <- w - lr[group]*v.
///
/// Only parameters with requires_grad are touched. Afterwards the velocity
/// set equals the trainable-parameter set. A zero rate leaves the weights
/// bit-identical.
void sgd_momentum_step(std::span<const ParamRef> params, OptimizerState& state,
                       std::span<const double> group_lrs);

/// Clears gradients of every parameter.
void zero_grads(std::span<const ParamRef> params);

}  // namespace rashnet
