// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace moe {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

struct CtcResult {
  double nll = std::numeric_limits<double>::infinity();
  Tensor grad;  // d nll / d logits
};

CtcResult ctc_forward_backward(const Tensor& logits, const LabelSequence& target, bool want_grad) {
  require(logits.rank() == 2, "ctc_loss expects T×V logits, got " + shape_str(logits.shape()));
  const std::size_t T = logits.rows(), V = logits.cols();
  require(V >= 2, "ctc_loss needs V >= 2");
  const int blank = static_cast<int>(V) - 1;
  for (int tok : target) {
    require(tok >= 0 && tok < blank, "ctc label " + std::to_string(tok) + " outside [0, " + std::to_string(blank) + ")");
  }
  CtcResult res;
  if (!ctc_feasible(T, target)) {
    if (want_grad) res.grad = Tensor(logits.shape(), 0.0);
    return res;
  }
  const Tensor lp = log_softmax_rows(logits);
  const std::size_t S = 2 * target.size() + 1;
  std::vector<int> ext(S, blank);
  for (std::size_t u = 0; u < target.size(); ++u) ext[2 * u + 1] = target[u];
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
  auto A = [&](std::size_t t, std::size_t s) -> double& { return alpha[t * S + s]; };
  auto B = [&](std::size_t t, std::size_t s) -> double& { return beta[t * S + s]; };
  auto emit = [&](std::size_t t, std::size_t s) { return lp(t, static_cast<std::size_t>(ext[s])); };

  A(0, 0) = emit(0, 0);
  if (S > 1) A(0, 1) = emit(0, 1);
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double a = A(t - 1, s);
      if (s >= 1) a = log_add(a, A(t - 1, s - 1));
      if (can_skip(s)) a = log_add(a, A(t - 1, s - 2));
      A(t, s) = a == kNegInf ? kNegInf : a + emit(t, s);
    }
  }
  double logp = A(T - 1, S - 1);
  if (S > 1) logp = log_add(logp, A(T - 1, S - 2));
  res.nll = -logp;
  if (!want_grad) return res;

  B(T - 1, S - 1) = emit(T - 1, S - 1);
  if (S > 1) B(T - 1, S - 2) = emit(T - 1, S - 2);
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      double b = B(t + 1, s);
      if (s + 1 < S) b = log_add(b, B(t + 1, s + 1));
      if (s + 2 < S && can_skip(s + 2)) b = log_add(b, B(t + 1, s + 2));
      B(t, s) = b == kNegInf ? kNegInf : b + emit(t, s);
    }
  }

  res.grad = Tensor(logits.shape(), 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < V; ++k) res.grad(t, k) = std::exp(lp(t, k));
    for (std::size_t s = 0; s < S; ++s) {
      const double ab = A(t, s) + B(t, s);
      if (ab == kNegInf) continue;
      res.grad(t, static_cast<std::size_t>(ext[s])) -= std::exp(ab - emit(t, s) - logp);
    }
  }
  return res;
}

}  // namespace

void LossWeights::validate() const {
  require(alpha >= 0.0 && beta >= 0.0 && gamma >= 0.0, "loss weights must be non-negative");
}

std::size_t ctc_min_frames(const LabelSequence& target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

bool ctc_feasible(std::size_t frames, const LabelSequence& target) { return frames >= ctc_min_frames(target); }

Var ctc_loss(Var logits, const LabelSequence& target) {
  Tape& t = logits.tape();
  CtcResult r = ctc_forward_backward(logits.value(), target, t.recording() && t.requires_grad(logits.id()));
  const std::size_t il = logits.id();
  return t.push(Tensor::scalar(r.nll), {logits}, [il, grad = std::move(r.grad)](Tape& tp, std::size_t self) {
    const double g = tp.grad_in(self)[0];
    Tensor& gl = tp.grad_ref(il);
    for (std::size_t i = 0; i < grad.size(); ++i) gl[i] += g * grad[i];
  });
}

double ctc_loss_value(const Tensor& logits, const LabelSequence& target) {
  return ctc_forward_backward(logits, target, false).nll;
}

Var kl_diversity_loss(const std::vector<Var>& expert_outputs) {
  require(!expert_outputs.empty(), "kl_diversity_loss needs at least one expert");
  Tape& t = expert_outputs.front().tape();
  const Shape& shape = expert_outputs.front().value().shape();
  for (const Var& a : expert_outputs) {
    if (a.value().shape() != shape) {
      throw std::invalid_argument("kl_diversity_loss expert shape mismatch: " + shape_str(shape) + " vs " +
                                  shape_str(a.value().shape()));
    }
  }
  const std::size_t n = expert_outputs.size();
  if (n < 2) return t.constant(Tensor::scalar(0.0));
  // Σ_{i≠j} Σ_f p_i (l_i − l_j) = Σ_i Σ_f p_i (N·l_i − Σ_j l_j)
  std::vector<Var> logp, prob;
  for (const Var& a : expert_outputs) {
    logp.push_back(log_softmax_rows(a));
    prob.push_back(exp(logp.back()));
  }
  Var log_sum = add_all(logp);
  std::vector<Var> terms;
  for (std::size_t i = 0; i < n; ++i) {
    terms.push_back(sum(mul(prob[i], sub(scale(logp[i], static_cast<double>(n)), log_sum))));
  }
  const double frames = static_cast<double>(expert_outputs.front().value().rows());
  return scale(add_all(terms), -1.0 / frames);
}

double kl_diversity_value(const std::vector<Tensor>& expert_outputs) {
  Tape t(false);
  std::vector<Var> vs;
  for (const auto& a : expert_outputs) vs.push_back(t.constant(a));
  return kl_diversity_loss(vs).value().item();
}

double mean_pairwise_divergence(const std::vector<Tensor>& expert_outputs) {
  const std::size_t n = expert_outputs.size();
  if (n < 2) return 0.0;
  return -kl_diversity_value(expert_outputs) / static_cast<double>(n * (n - 1));
}

Var ce_loss(Var logits, int label) {
  const Tensor& z = logits.value();
  require(z.rows() == 1, "ce_loss expects a single row of logits, got " + shape_str(z.shape()));
  const std::size_t k = z.cols();
  require(k >= 2, "ce_loss needs at least two classes");
  require(label >= 0 && static_cast<std::size_t>(label) < k,
          "ce_loss label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
  Tensor lp = log_softmax_rows(z);
  // lse − z_label as log1p over the non-max terms keeps near-certain predictions exact.
  std::size_t top = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (z[j] > z[top]) top = j;
  double rest = 0.0;
  for (std::size_t j = 0; j < k; ++j)
    if (j != top) rest += std::exp(z[j] - z[top]);
  const double loss = z[top] - z[static_cast<std::size_t>(label)] + std::log1p(rest);
  const std::size_t il = logits.id();
  return logits.tape().push(Tensor::scalar(loss), {logits},
                            [il, label, lp = std::move(lp)](Tape& tp, std::size_t self) {
                              const double g = tp.grad_in(self)[0];
                              Tensor& gl = tp.grad_ref(il);
                              for (std::size_t j = 0; j < lp.size(); ++j) {
                                const double target = j == static_cast<std::size_t>(label) ? 1.0 : 0.0;
                                gl[j] += g * (std::exp(lp[j]) - target);
                              }
                            });
}

double ce_loss_value(const Tensor& logits, int label) {
  Tape t(false);
  return ce_loss(t.constant(logits), label).value().item();
}

Var mse_routing_loss(Var predicted, Var target) {
  if (predicted.value().size() != target.value().size()) {
    throw std::invalid_argument("mse_routing_loss length mismatch: " + shape_str(predicted.value().shape()) + " vs " +
                                shape_str(target.value().shape()));
  }
  Var t = target;
  if (target.value().shape() != predicted.value().shape()) t = reshape(target, predicted.value().shape());
  return mean(square(sub(predicted, t)));
}

double mse_routing_value(const Tensor& predicted, const Tensor& target) {
  Tape t(false);
  return mse_routing_loss(t.constant(predicted), t.constant(target)).value().item();
}

double combined_batch_loss(double ctc, double kl, double ce, const LossWeights& w) {
  return ctc + w.alpha * kl + w.beta * ce;
}

double combined_onfly_loss(double ctc, double kl, double ce, double mse, const LossWeights& w) {
  return combined_batch_loss(ctc, kl, ce, w) + w.gamma * mse;
}

Var combined_batch_loss(Var ctc, Var kl, Var ce, const LossWeights& w) {
  return add_all({ctc, scale(kl, w.alpha), scale(ce, w.beta)});
}

Var combined_onfly_loss(Var ctc, Var kl, Var ce, Var mse, const LossWeights& w) {
  return add(combined_batch_loss(ctc, kl, ce, w), scale(mse, w.gamma));
}

}  // namespace moe
