// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/autograd.hpp"

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace moe {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

ConstMap cmap(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<long>(t.rows()), static_cast<long>(t.cols()));
}
Map mmap(Tensor& t) { return Map(t.data().data(), static_cast<long>(t.rows()), static_cast<long>(t.cols())); }

Tape& same_tape(Var a, Var b) {
  require(a.valid() && b.valid(), "op on an invalid Var");
  require(&a.tape() == &b.tape(), "op mixes Vars from different tapes");
  return a.tape();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

// Elementwise unary op with derivative expressed through input and output.
template <typename F, typename D>
Var unary(Var x, F f, D d) {
  Tape& t = x.tape();
  Tensor out = x.value();
  for (auto& v : out.values()) v = f(v);
  const std::size_t ix = x.id();
  return t.push(std::move(out), {x}, [ix, d](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    const Tensor& in = tp.value(ix);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_ref(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d(in[i], y[i]);
  });
}

}  // namespace

const Tensor& Var::value() const {
  require(valid(), "value() on an invalid Var");
  return tape_->value(id_);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(const std::string& name, const Tensor& value) {
  if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
  Node n;
  n.external = &value;
  n.requires_grad = record_ && (!trainable_ || trainable_(name));
  nodes_.push_back(std::move(n));
  params_.emplace(name, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

Tensor& Tape::grad_ref(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(value(id).shape(), 0.0);
  return n.grad;
}

Var Tape::push(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& p : parents) {
      if (nodes_[p.id()].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  require(loss.valid() && &loss.tape() == this, "backward on a Var from another tape");
  const Tensor& lv = value(loss.id());
  require(lv.size() == 1, "backward needs a scalar loss, got " + shape_str(lv.shape()));
  require(record_, "backward on a non-recording tape");
  grad_ref(loss.id()).fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(value(v.id()).shape(), 0.0);
  return n.grad;
}

GradMap Tape::parameter_grads() const {
  GradMap out;
  for (const auto& [name, id] : params_) {
    if (!nodes_[id].requires_grad) continue;
    out.emplace(name, grad(Var(const_cast<Tape*>(this), id)));
  }
  return out;
}

void accumulate(Tensor& into, const Tensor& from) {
  if (into.empty()) {
    into = from;
    return;
  }
  require(into.size() == from.size(), "gradient accumulation size mismatch");
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += from[i];
}

void accumulate(GradMap& into, const GradMap& from) {
  for (const auto& [name, g] : from) accumulate(into[name], g);
}

void scale_grads(GradMap& grads, double s) {
  for (auto& [name, g] : grads)
    for (auto& v : g.values()) v *= s;
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  Tensor out = moe::matmul(a.value(), b.value());
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const auto g = cmap(tp.grad_in(self));
    if (tp.requires_grad(ia)) mmap(tp.grad_ref(ia)).noalias() += g * cmap(tp.value(ib)).transpose();
    if (tp.requires_grad(ib)) mmap(tp.grad_ref(ib)).noalias() += cmap(tp.value(ia)).transpose() * g;
  });
}

Var transpose(Var a) {
  Tensor out = moe::transpose(a.value());
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    mmap(tp.grad_ref(ia)) += cmap(tp.grad_in(self)).transpose();
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    if (tp.requires_grad(ia)) accumulate(tp.grad_ref(ia), g);
    if (tp.requires_grad(ib)) accumulate(tp.grad_ref(ib), g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    if (tp.requires_grad(ia)) accumulate(tp.grad_ref(ia), g);
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_ref(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_ref(ia);
      const Tensor& bv = tp.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_ref(ib);
      const Tensor& av = tp.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {a}, [ia, s](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_broadcast(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t c = av.cols();
  const bool is_scalar = bv.size() == 1;
  if (!is_scalar && bv.size() != c) {
    throw std::invalid_argument("add_broadcast shape mismatch: " + shape_str(av.shape()) + " + " +
                                shape_str(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += is_scalar ? bv[0] : bv[i % c];
  const std::size_t ia = a.id(), ib = b.id();
  return t.push(std::move(out), {a, b}, [ia, ib, c, is_scalar](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    if (tp.requires_grad(ia)) accumulate(tp.grad_ref(ia), g);
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_ref(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[is_scalar ? 0 : i % c] += g[i];
    }
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().push(std::move(out), {a}, [ia](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    Tensor& ga = tp.grad_ref(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = same_tape(x, gain);
  const Tensor& xv = x.value();
  const std::size_t f = xv.cols(), rows = xv.rows();
  require(f > 0, "layer_norm over zero-width features");
  require(gain.value().size() == f && bias.value().size() == f,
          "layer_norm parameter width mismatch: x " + shape_str(xv.shape()) + ", gain " +
              shape_str(gain.value().shape()) + ", bias " + shape_str(bias.value().shape()));
  Tensor xhat(xv.shape());
  std::vector<double> inv(rows);
  Tensor out(xv.shape());
  const Tensor& g = gain.value();
  const Tensor& b = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &xv.data()[r * f];
    double mu = 0.0;
    for (std::size_t j = 0; j < f; ++j) mu += in[j];
    mu /= static_cast<double>(f);
    double var = 0.0;
    for (std::size_t j = 0; j < f; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(f);
    inv[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < f; ++j) {
      const double h = (in[j] - mu) * inv[r];
      xhat[r * f + j] = h;
      out[r * f + j] = h * g[j] + b[j];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.push(std::move(out), {x, gain, bias},
                [ix, ig, ib, f, rows, xhat = std::move(xhat), inv = std::move(inv)](Tape& tp, std::size_t self) {
                  const Tensor& gy = tp.grad_in(self);
                  const Tensor& gv = tp.value(ig);
                  if (tp.requires_grad(ig)) {
                    Tensor& gg = tp.grad_ref(ig);
                    for (std::size_t i = 0; i < gy.size(); ++i) gg[i % f] += gy[i] * xhat[i];
                  }
                  if (tp.requires_grad(ib)) {
                    Tensor& gb = tp.grad_ref(ib);
                    for (std::size_t i = 0; i < gy.size(); ++i) gb[i % f] += gy[i];
                  }
                  if (tp.requires_grad(ix)) {
                    Tensor& gx = tp.grad_ref(ix);
                    const double fn = static_cast<double>(f);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < f; ++j) {
                        const double d = gy[r * f + j] * gv[j];
                        s1 += d;
                        s2 += d * xhat[r * f + j];
                      }
                      for (std::size_t j = 0; j < f; ++j) {
                        const double d = gy[r * f + j] * gv[j];
                        gx[r * f + j] += inv[r] / fn * (fn * d - s1 - xhat[r * f + j] * s2);
                      }
                    }
                  }
                });
}

Var softmax_rows(Var x) {
  Tensor out = x.value().rank() == 1 ? moe::softmax(x.value(), 0) : moe::softmax(x.value(), 1);
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_ref(ix);
    const std::size_t c = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += g[r * c + j] * y[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += y[r * c + j] * (g[r * c + j] - s);
    }
  });
}

Var log_softmax_rows(Var x) {
  Tensor out = moe::log_softmax_rows(x.value());
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.grad_ref(ix);
    const std::size_t c = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += g[r * c + j];
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r * c + j] - std::exp(y[r * c + j]) * s;
    }
  });
}

Var gelu(Var x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v))); },
      [](double v, double) {
        const double u = k * (v + c * v * v * v);
        const double th = std::tanh(u);
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * c * v * v);
      });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var square(Var x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sqrt_clamped(Var x) {
  return unary(
      x, [](double v) { return v > 0.0 ? std::sqrt(v) : 0.0; },
      [](double v, double y) { return (v > 0.0 && y > 0.0) ? 0.5 / y : 0.0; });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  const std::size_t ix = x.id();
  return x.tape().push(Tensor::scalar(s), {x}, [ix](Tape& tp, std::size_t self) {
    const double g = tp.grad_in(self)[0];
    Tensor& gx = tp.grad_ref(ix);
    for (auto& v : gx.values()) v += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  require(rows > 0, "mean_rows over zero rows");
  Tensor out({1, c}, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[r * c + j];
  for (auto& v : out.values()) v /= static_cast<double>(rows);
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix, rows, c](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    Tensor& gx = tp.grad_ref(ix);
    const double inv = 1.0 / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[j] * inv;
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), c = xv.cols();
  require(begin < end && end <= c, "slice_cols range out of bounds for " + shape_str(xv.shape()));
  const std::size_t w = end - begin;
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = xv[r * c + begin + j];
  const std::size_t ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix, rows, c, w, begin](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    Tensor& gx = tp.grad_ref(ix);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < w; ++j) gx[r * c + begin + j] += g[r * w + j];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols of nothing");
  Tape& t = parts.front().tape();
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    require(&p.tape() == &t, "concat_cols mixes tapes");
    require(p.value().rows() == rows, "concat_cols row mismatch");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < widths[k]; ++j) out[r * total + off + j] = pv[r * widths[k] + j];
    off += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return t.push(std::move(out), parts, [ids, widths, rows, total](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.requires_grad(ids[k])) {
        Tensor& gp = tp.grad_ref(ids[k]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j) gp[r * widths[k] + j] += g[r * total + off + j];
      }
      off += widths[k];
    }
  });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0, 1)");
  if (rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(x.value().shape());
  for (auto& m : mask.values()) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  Var m = x.tape().constant(std::move(mask));
  return mul(x, m);
}

Var add_all(const std::vector<Var>& terms) {
  require(!terms.empty(), "add_all of nothing");
  Var acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace moe
