#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sgg/common.hpp"
#include "sgg/parameter.hpp"
#include "sgg/tensor.hpp"

namespace sgg {

struct Var {
  uint32_t i = 0;
};

// Reverse-mode tape. Ops append nodes during the forward pass; backward()
// replays the recorded closures in exact reverse execution order. Gradients
// accumulate additively, so a tensor consumed by several ops receives the
// sum of its branch gradients.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor<T> value, bool needs_grad = false) {
    return push(std::move(value), needs_grad, nullptr);
  }

  // A parameter enters the tape as a leaf sharing the parameter's storage.
  // Repeated use() of the same parameter returns the same node so fan-out
  // gradients accumulate in one place.
  Var use(Parameter<T>& p) {
    auto it = param_vars_.find(&p);
    if (it != param_vars_.end()) return it->second;
    Var v = push(p.value, p.trainable, nullptr);
    param_vars_.emplace(&p, v);
    param_list_.emplace_back(&p, v);
    return v;
  }

  Var make(Tensor<T> value, bool needs_grad, std::function<void(Tape&)> backward) {
#ifndef NDEBUG
    require<NumericError>(value.all_finite(), "non-finite value produced at tape node ",
                          nodes_.size());
#endif
    return push(std::move(value), needs_grad, std::move(backward));
  }

  const Tensor<T>& val(Var v) const { return nodes_[v.i].value; }
  bool needs_grad(Var v) const { return nodes_[v.i].needs_grad; }
  bool has_grad(Var v) const { return nodes_[v.i].grad.defined(); }

  Tensor<T>& grad(Var v) {
    Node& n = nodes_[v.i];
    if (!n.grad.defined()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void add_grad(Var v, const T* g, size_t n) {
    Tensor<T>& dst = grad(v);
    require(dst.size() == n, "gradient size mismatch");
    T* d = dst.data();
    for (size_t i = 0; i < n; ++i) d[i] += g[i];
  }

  // Seeds d(loss)/d(loss) = 1, sweeps the tape backwards, then flushes
  // parameter gradients into their Parameter::grad slots.
  void backward(Var loss) {
    require(val(loss).size() == 1, "backward expects a scalar loss");
    grad(loss)[0] = T(1);
    for (size_t i = loss.i + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.defined()) n.backward(*this);
    }
    for (auto& [p, v] : param_list_) {
      if (!has_grad(v)) continue;
      const Tensor<T>& g = nodes_[v.i].grad;
      for (size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void(Tape&)> backward;
    bool needs_grad = false;
  };

  Var push(Tensor<T> value, bool needs_grad, std::function<void(Tape&)> backward) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(backward), needs_grad});
    return Var{uint32_t(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;
  std::unordered_map<Parameter<T>*, Var> param_vars_;
  std::vector<std::pair<Parameter<T>*, Var>> param_list_;
};

}  // namespace sgg
