#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "radformer/tensor.hpp"

namespace radformer {

// Reverse-mode tape. Every differentiable op executed while a tape is active
// appends one node; backward() replays the nodes in exact reverse execution
// order. A tape is confined to one thread at a time (the active-tape stack is
// thread_local), so independent model instances may run on separate threads.
template <typename T>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<typename Tensor<T>::Impl>;

  class Scope {
   public:
    explicit Scope(Tape* t) { stack().push_back(t); }
    ~Scope() { stack().pop_back(); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
  };

  // Suspends recording (inference subpaths inside a training forward).
  class NoGrad {
   public:
    NoGrad() { stack().push_back(nullptr); }
    ~NoGrad() { stack().pop_back(); }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
  };

  static Tape* active() { return stack().empty() ? nullptr : stack().back(); }

  Scope activate() { return Scope(this); }

  void record(std::function<void()> backward_fn, std::vector<ImplPtr> inputs, ImplPtr output) {
    nodes_.push_back(std::move(backward_fn));
    for (auto& p : inputs) inputs_.push_back(std::move(p));
    outputs_.push_back(std::move(output));
  }

  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape backwards. Repeated calls
  // are idempotent: intermediate gradients are always cleared first, and leaf
  // gradients too unless accumulate is set.
  void backward(const Tensor<T>& loss, bool accumulate = false) {
    if (!loss.defined() || loss.size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar tensor");
    }
    if (!loss.requires_grad()) {
      throw std::invalid_argument("backward: loss is not connected to any recorded operation");
    }
    if (!accumulate) {
      for (auto& p : inputs_) {
        if (!p->grad.empty()) std::fill(p->grad.begin(), p->grad.end(), T(0));
      }
    }
    for (auto& p : outputs_) {
      if (!p->grad.empty()) std::fill(p->grad.begin(), p->grad.end(), T(0));
    }
    auto li = loss.impl();
    if (li->grad.size() != 1) li->grad.assign(1, T(0));
    li->grad[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() {
    nodes_.clear();
    inputs_.clear();
    outputs_.clear();
  }

 private:
  static std::vector<Tape*>& stack() {
    thread_local std::vector<Tape*> s;
    return s;
  }

  std::vector<std::function<void()>> nodes_;
  std::vector<ImplPtr> inputs_;
  std::vector<ImplPtr> outputs_;
};

namespace detail {

// Marks the output differentiable and records the node when a tape is live.
template <typename T>
inline void record_unary(const Tensor<T>& x, Tensor<T>& out, std::function<void()> fn) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape || !x.requires_grad()) return;
  out.set_requires_grad(true);
  tape->record(std::move(fn), {x.impl()}, out.impl());
}

template <typename T>
inline void record_binary(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& out,
                          std::function<void()> fn) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape || (!a.requires_grad() && !b.requires_grad())) return;
  out.set_requires_grad(true);
  tape->record(std::move(fn), {a.impl(), b.impl()}, out.impl());
}

template <typename T>
inline void record_nary(const std::vector<Tensor<T>>& ins, Tensor<T>& out,
                        std::function<void()> fn) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return;
  bool any = false;
  for (const auto& t : ins) any = any || t.requires_grad();
  if (!any) return;
  out.set_requires_grad(true);
  std::vector<typename Tape<T>::ImplPtr> parts;
  parts.reserve(ins.size());
  for (const auto& t : ins) parts.push_back(t.impl());
  tape->record(std::move(fn), std::move(parts), out.impl());
}

}  // namespace detail

}  // namespace radformer
