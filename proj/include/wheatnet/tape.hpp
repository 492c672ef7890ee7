#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "wheatnet/errors.hpp"
#include "wheatnet/tensor.hpp"

namespace wheatnet {

/// Records differentiable operations in execution order and replays them in
/// reverse to accumulate gradients. A disabled tape records nothing, which is
/// how inference runs without keeping intermediates alive.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  Tape() = default;
  explicit Tape(bool enabled) : enabled_(enabled) {}

  static Tape no_grad() { return Tape(false); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// True when an op over these inputs must be recorded.
  bool needs_grad(std::initializer_list<const Tensor*> inputs) const {
    if (!enabled_) return false;
    for (const Tensor* t : inputs) {
      if (t != nullptr && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }
  bool needs_grad(const std::vector<Tensor>& inputs) const {
    if (!enabled_) return false;
    for (const Tensor& t : inputs) {
      if (t.defined() && t.requires_grad()) return true;
    }
    return false;
  }

  /// The backward rule reads output.grad() and accumulates into the
  /// gradient buffers of the inputs that require grad.
  void record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
    if (!enabled_) return;
    if (backward_done_) {
      throw GraphError("tape: cannot record '" + op + "' after backward; call reset() first");
    }
    nodes_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(backward)});
  }

  void backward(Tensor loss) {
    if (backward_done_) throw GraphError("backward: already called on this tape; call reset() first");
    if (!loss.defined() || loss.numel() != 1) {
      throw GraphError("backward: loss must be a scalar, got shape " +
                       (loss.defined() ? loss.shape().str() : std::string("<undefined>")));
    }
    std::size_t last = nodes_.size();
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].output.same_storage(loss)) {
        last = i;
        break;
      }
    }
    if (last == nodes_.size()) {
      throw GraphError("backward: loss was not produced by an operation recorded on this tape");
    }
    backward_done_ = true;
    loss.grad_buffer()[0] += 1.0;
    for (std::size_t i = last + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.output.has_grad()) continue;  // not on a path to the loss
      node.backward();
    }
  }

  /// Drops the recorded graph so the tape can be reused for the next step.
  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  bool enabled_ = true;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

}  // namespace wheatnet
