// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "moe/autograd.hpp"

namespace moe {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 0.0;
};

/// Adaptive-moment optimizer with per-parameter bias correction. Only parameters
/// present in the gradient map are touched.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Throws std::invalid_argument naming the parameter if a gradient is not
  /// finite or its shape disagrees with the parameter.
  void step(ParamSet& params, const GradMap& grads);

  std::uint64_t steps() const { return step_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  const ParamSet& first_moments() const { return m_; }
  const ParamSet& second_moments() const { return v_; }

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  ParamSet m_;
  ParamSet v_;
  std::map<std::string, std::uint64_t> counts_;
};

double grad_norm(const GradMap& grads);

}  // namespace moe
