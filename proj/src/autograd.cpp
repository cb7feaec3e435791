#include "rashnet/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_map>
#include <unordered_set>

namespace rashnet {

namespace {

std::atomic<std::uint64_t> next_sequence{1};
thread_local bool grad_enabled = true;

}  // namespace

Variable::Variable(Tensor value, bool requires_grad) : impl_(std::make_shared<VariableImpl>()) {
  impl_->value = std::move(value);
  impl_->requires_grad = requires_grad;
}

void Variable::set_requires_grad(bool flag) {
  if (!is_leaf()) throw AutogradError("requires_grad can only be changed on leaf variables");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.reset();
}

const Tensor& Variable::grad() const {
  if (!impl_->grad) throw AutogradError("variable has no gradient");
  return *impl_->grad;
}

Graph Graph::collect(const Variable& output) {
  Graph graph;
  graph.outputs.push_back(output.id());
  if (output.is_leaf()) return graph;

  std::unordered_set<const Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{output.creator()};
  seen.insert(output.creator().get());
  while (!stack.empty()) {
    auto node = std::move(stack.back());
    stack.pop_back();
    for (const auto& in : node->inputs) {
      const auto& c = in.creator();
      if (c && seen.insert(c.get()).second) stack.push_back(c);
    }
    graph.nodes.push_back(std::move(node));
  }
  std::sort(graph.nodes.begin(), graph.nodes.end(),
            [](const auto& a, const auto& b) { return a->sequence < b->sequence; });
  return graph;
}

Variable make_result(Tensor value, std::vector<Variable> inputs, std::string op,
                     std::function<std::vector<std::optional<Tensor>>(const Tensor&)> backward_fn) {
#ifndef NDEBUG
  if (!value.all_finite()) {
    bool inputs_finite = std::all_of(inputs.begin(), inputs.end(),
                                     [](const Variable& v) { return v.value().all_finite(); });
    if (inputs_finite) throw std::runtime_error(op + ": non-finite output from finite inputs");
  }
#endif
  Variable out(std::move(value), false);
  if (!grad_enabled) return out;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Variable& v) { return v.requires_grad(); });
  if (!any) return out;

  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->inputs = std::move(inputs);
  node->backward_fn = std::move(backward_fn);
  node->sequence = next_sequence.fetch_add(1);
  out.impl_->requires_grad = true;
  out.impl_->creator = std::move(node);
  return out;
}

void backward(const Variable& loss) {
  if (loss.value().numel() != 1) {
    throw AutogradError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw AutogradError("backward: loss does not require grad");

  Tensor seed = Tensor::full(loss.shape(), 1.0, loss.dtype());
  if (loss.is_leaf()) {
    auto& g = loss.impl_->grad;
    if (g) {
      accumulate(*g, seed);
    } else {
      g = std::move(seed);
    }
    return;
  }

  Graph graph = Graph::collect(loss);
  for (const auto& node : graph.nodes) {
    if (node->consumed) {
      throw AutogradError("backward: graph already consumed; run a new forward pass first");
    }
  }

  std::unordered_map<const Node*, Tensor> pending;
  pending.emplace(loss.creator().get(), std::move(seed));
  for (auto it = graph.nodes.rbegin(); it != graph.nodes.rend(); ++it) {
    Node& node = **it;
    auto found = pending.find(&node);
    if (found != pending.end()) {
      Tensor grad_out = std::move(found->second);
      pending.erase(found);
      auto grads = node.backward_fn(grad_out);
      for (std::size_t i = 0; i < node.inputs.size() && i < grads.size(); ++i) {
        if (!grads[i]) continue;
        auto& input = node.inputs[i];
        if (!input.requires_grad()) continue;
        if (input.is_leaf()) {
          auto& g = input.impl_->grad;
          if (g) {
            accumulate(*g, *grads[i]);
          } else {
            g = std::move(*grads[i]);
          }
        } else {
          auto [slot, inserted] = pending.try_emplace(input.creator().get(), std::move(*grads[i]));
          if (!inserted) accumulate(slot->second, *grads[i]);
        }
      }
    }
    node.consumed = true;
    node.backward_fn = nullptr;
  }
}

bool grad_mode_enabled() {
  return grad_enabled;
}

NoGradGuard::NoGradGuard() : previous_(grad_enabled) {
  grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
  grad_enabled = previous_;
}

}  // namespace rashnet
