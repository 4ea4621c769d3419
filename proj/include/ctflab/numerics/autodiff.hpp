#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ctflab/numerics/tensor.hpp"

namespace ctflab::numerics {

class Tape;

// Gradient of a scalar root with respect to every named parameter on a tape.
using Gradients = std::map<std::string, Tensor>;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
// creation order is a valid topological order for the backward sweep.
//
// A tape constructed with record_gradients = false only evaluates values; it
// is used for pseudo-labelling and ledger accumulation.
class Tape {
 public:
  // Accumulates d(root)/d(parent) into each non-null parent gradient buffer.
  using BackwardFn =
      std::function<void(const Tensor& grad_out, std::span<Tensor* const> parent_grads)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Tensor value);
  Var parameter(const std::string& name, Tensor value);
  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward, const char* op);

  const Tensor& value(Var v) const { return nodes_.at(v.id_).value; }

  // Gradients of a scalar root for every parameter registered on this tape.
  // Parameters with no path to the root receive all-zero gradients.
  Gradients backward(Var root);

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    bool requires_grad = false;
    const char* op = "";
  };
  bool recording_;
  std::deque<Node> nodes_;
  std::map<std::string, std::size_t> params_;
};

// Elementwise and reduction primitives. Binary operations require equal shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);  // throws DomainError on non-positive input
Var sum(Var a);
Var mean(Var a);

// Adds a 1-d bias of length C to every position of a tensor whose last axis is C.
Var add_bias(Var x, Var bias);

// input: H x W x Cin, kernel: kh x kw x Cin x Cout.
// Output extents are floor((H + 2*pad - kh) / stride) + 1 (same for W).
Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t pad);

// Direct forward convolution on plain tensors, shared by the tape op.
Tensor conv2d_forward(const Tensor& input, const Tensor& kernel, std::size_t stride,
                      std::size_t pad);

}  // namespace ctflab::numerics
