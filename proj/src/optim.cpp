#include "rashnet/optim.hpp"

#include <set>
#include <stdexcept>

namespace rashnet {

void sgd_momentum_step(std::span<const ParamRef> params, OptimizerState& state,
                       std::span<const double> group_lrs) {
  std::set<std::string> trainable;
  for (const auto& p : params) {
    if (!p.var.requires_grad()) continue;
    if (p.group < 0 || static_cast<std::size_t>(p.group) >= group_lrs.size()) {
      throw std::invalid_argument("sgd_momentum_step: no learning rate for group " +
                                  std::to_string(p.group) + " of " + p.name);
    }
    const double lr = group_lrs[static_cast<std::size_t>(p.group)];
    if (!(lr >= 0)) throw std::invalid_argument("sgd_momentum_step: learning rate must be >= 0");
    if (!p.var.has_grad()) {
      throw std::invalid_argument("sgd_momentum_step: trainable parameter " + p.name +
                                  " has no gradient");
    }
    const Tensor& grad = p.var.grad();
    if (grad.shape() != p.var.shape()) {
      throw ShapeError("sgd_momentum_step: gradient shape mismatch for " + p.name);
    }
    trainable.insert(p.name);
    auto [it, inserted] = state.velocity.try_emplace(p.name, p.var.shape(), p.var.dtype());
    Tensor& v = it->second;
    if (v.shape() != p.var.shape() || v.dtype() != p.var.dtype()) {
      throw ShapeError("sgd_momentum_step: velocity shape mismatch for " + p.name);
    }
    Variable param = p.var;
    dispatch_dtype(v.dtype(), [&]<class T>() {
      auto w = param.mutable_value().data<T>();
      auto g = grad.data<T>();
      auto vel = v.data<T>();
      const T mom = static_cast<T>(state.momentum);
      const T wd = static_cast<T>(state.weight_decay);
      const T rate = static_cast<T>(lr);
      for (std::size_t i = 0; i < w.size(); ++i) {
        T gi = g[i];
        if (state.weight_decay != 0.0) gi += wd * w[i];
        vel[i] = mom * vel[i] + gi;
      }
      if (lr == 0.0) return;
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= rate * vel[i];
    });
  }
  std::erase_if(state.velocity, [&](const auto& kv) { return !trainable.contains(kv.first); });
}

void zero_grads(std::span<const ParamRef> params) {
  for (const auto& p : params) {
    Variable v = p.var;
    v.zero_grad();
  }
}

}  // namespace rashnet
