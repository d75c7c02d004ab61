#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <unordered_map>
#include <vector>

#include "udah/tensor.hpp"

namespace udah::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// View handed to an op's backward rule while the tape is being unwound.
class BackwardContext {
 public:
  const Tensor& out_value() const;
  const Tensor& out_grad() const;
  const Tensor& in_value(std::size_t k) const;
  // Gradient buffer of input k, or nullptr when that input is untracked.
  Tensor* in_grad(std::size_t k);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}
  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Append-only record of operations. Inputs always precede outputs, so a
/// reverse sweep over the node list is a valid topological order.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  // Tracked leaf bound to a model parameter. Binding the same tensor twice
  // returns the same Var.
  Var param(const Tensor& p);

  const Tensor& value(Var v) const { return nodes_[v.id_].value; }
  bool requires_grad(Var v) const { return nodes_[v.id_].requires_grad; }
  // Gradient of a node after backward(); zeros when nothing flowed into it.
  Tensor grad(Var v) const;
  // Gradient accumulated into a bound parameter; zeros when it was never bound.
  Tensor grad_of(const Tensor& p) const;
  bool is_bound(const Tensor& p) const { return params_.contains(&p); }

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse. Leaf
  /// gradients accumulate across calls; interior gradients are reset.
  void backward(Var loss);
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

 private:
  friend class BackwardContext;
  struct Node {
    Tensor value;
    Tensor grad;  // empty until needed
    bool requires_grad = false;
    bool leaf = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  Tensor& grad_buffer(std::size_t id);

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> params_;
};

// ---- forward ops ---------------------------------------------------------
// Every op throws ShapeError naming itself and the offending shapes.

Var matmul(Var a, Var b);
// Elementwise; b may also be a vector broadcast over the rows of a.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_scalar(Var a, double c);
Var scale(Var a, double c);
Var relu(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
// max(a, floor) elementwise; zero gradient where the floor is active.
Var clamp_min(Var a, double floor);
Var sum(Var a);
Var mean(Var a);
// Sum over the last dimension: [..., n] -> [...].
Var row_sum(Var a);
Var row_softmax(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
// Inverted dropout. Identity when !train or rate == 0.
Var dropout(Var x, double rate, bool train, std::mt19937_64& rng);
Var concat(std::span<const Var> parts);
// Columns [begin, end) of the last dimension.
Var slice(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var reshape(Var a, Shape shape);
// sign(a) forward (0 maps to +1); backward passes grad * (1 - tanh(a)^2).
Var sign_ste(Var a);

}  // namespace udah::ad
