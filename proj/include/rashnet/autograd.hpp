#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rashnet/tensor.hpp"

namespace rashnet {

class Variable;
struct Node;

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct VariableImpl {
  Tensor value;
  std::optional<Tensor> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> creator;  // null for leaves
};

/// Handle to a tensor that may take part in a recorded computation.
///
/// Copies share state. Leaves with requires_grad accumulate into grad() when
/// backward() runs.
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false);

  const Tensor& value() const { return impl_->value; }
  Tensor& mutable_value() { return impl_->value; }
  const Shape& shape() const { return impl_->value.shape(); }
  DType dtype() const { return impl_->value.dtype(); }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag);

  bool has_grad() const { return impl_->grad.has_value(); }
  const Tensor& grad() const;
  void zero_grad() { impl_->grad.reset(); }

  bool is_leaf() const { return impl_->creator == nullptr; }
  const std::shared_ptr<Node>& creator() const { return impl_->creator; }

  bool defined() const { return impl_ != nullptr; }
  const VariableImpl* id() const { return impl_.get(); }

 private:
  friend Variable make_result(Tensor, std::vector<Variable>, std::string,
                              std::function<std::vector<std::optional<Tensor>>(const Tensor&)>);
  friend void backward(const Variable&);
  std::shared_ptr<VariableImpl> impl_;
};

/// One recorded op. backward_fn maps the output gradient to one optional
/// gradient per input (nullopt where the input needs none).
struct Node {
  std::string op;
  std::vector<Variable> inputs;
  std::function<std::vector<std::optional<Tensor>>(const Tensor&)> backward_fn;
  std::uint64_t sequence = 0;
  bool consumed = false;
};

/// Nodes reachable from an output, in topological (execution) order.
struct Graph {
  std::vector<std::shared_ptr<Node>> nodes;
  std::vector<const VariableImpl*> outputs;

  static Graph collect(const Variable& output);
};

/// Records an op result. When recording is disabled, or no input requires a
/// gradient, the result is a plain leaf and backward_fn is dropped.
Variable make_result(Tensor value, std::vector<Variable> inputs, std::string op,
                     std::function<std::vector<std::optional<Tensor>>(const Tensor&)> backward_fn);

/// Propagates d(loss)/d(x) to every leaf with requires_grad, accumulating
/// into existing grads. Saved activations are released afterwards, so a
/// second call on the same graph throws.
void backward(const Variable& loss);

bool grad_mode_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace rashnet
