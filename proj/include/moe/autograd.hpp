// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "moe/tensor.hpp"

namespace moe {

/// Named tensors in a deterministic (lexicographic) order.
using ParamSet = std::map<std::string, Tensor>;
using GradMap = std::map<std::string, Tensor>;

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode gradient tape. One tape per utterance; tapes are not shared
/// across threads. Parameters are referenced, not copied, so the backing
/// ParamSet must outlive the tape and stay unmodified while it is alive.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  /// Owned leaf that receives a gradient.
  Var variable(Tensor value);
  /// Named leaf referencing external storage. Registering the same name twice
  /// returns the same node. Receives a gradient only when the trainable filter
  /// (if any) accepts the name.
  Var parameter(const std::string& name, const Tensor& value);

  /// Restricts which parameter names receive gradients. Must be set before
  /// parameters are registered.
  void set_trainable(std::function<bool(const std::string&)> filter) { trainable_ = std::move(filter); }

  void backward(Var loss);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient of a node after backward(); zeros if the node was unreachable.
  Tensor grad(Var v) const;
  /// Gradients of every registered trainable parameter (zeros when the
  /// parameter is not on any path to the loss).
  GradMap parameter_grads() const;

  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  Var push(Tensor value, const std::vector<Var>& parents, BackwardFn fn);
  const Tensor& grad_in(std::size_t id) const { return nodes_[id].grad; }
  Tensor& grad_ref(std::size_t id);

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool record_;
  std::deque<Node> nodes_;  // stable references to values across pushes
  std::map<std::string, std::size_t> params_;
  std::function<bool(const std::string&)> trainable_;
};

// Differentiable ops. Every op checks shapes and throws std::invalid_argument on
// mismatch; rank-1 values act as 1×n rows.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// Adds b broadcast over rows (b has cols(a) values) or as a scalar (b has one value).
Var add_broadcast(Var a, Var b);
Var reshape(Var a, Shape shape);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
Var gelu(Var x);
Var tanh(Var x);
Var exp(Var x);
Var square(Var x);
/// sqrt(max(x, 0)); derivative taken as zero where the radicand is not positive.
Var sqrt_clamped(Var x);
Var sum(Var x);
Var mean(Var x);
/// Column means over rows: T×F → 1×F.
Var mean_rows(Var x);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_cols(const std::vector<Var>& parts);
/// Inverted dropout with a fixed Bernoulli mask drawn from rng.
Var dropout(Var x, double rate, std::mt19937_64& rng);
/// Sum of scalars.
Var add_all(const std::vector<Var>& terms);

/// Adds `from` into `into` elementwise (shapes must agree).
void accumulate(Tensor& into, const Tensor& from);
void accumulate(GradMap& into, const GradMap& from);
void scale_grads(GradMap& grads, double s);

}  // namespace moe
