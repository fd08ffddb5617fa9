// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace moe {

double grad_norm(const GradMap& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

void Adam::step(ParamSet& params, const GradMap& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("optimizer: unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw std::invalid_argument("optimizer: gradient shape " + shape_str(g.shape()) + " does not match parameter '" +
                                  name + "' " + shape_str(it->second.shape()));
    }
    if (!g.all_finite()) throw std::invalid_argument("optimizer: non-finite gradient for parameter '" + name + "'");
  }
  double clip = 1.0;
  if (config_.clip_norm > 0.0) {
    const double n = grad_norm(grads);
    if (n > config_.clip_norm) clip = config_.clip_norm / n;
  }
  ++step_;
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [mit, mnew] = m_.try_emplace(name, p.shape(), 0.0);
    auto [vit, vnew] = v_.try_emplace(name, p.shape(), 0.0);
    // Bias correction counts this parameter's own updates, so tensors that only
    // appear in some minibatches still get properly scaled first steps.
    const double t = static_cast<double>(++counts_[name]);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace moe
