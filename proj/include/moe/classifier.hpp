// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "moe/autograd.hpp"

namespace moe {

struct ClassifierConfig {
  std::size_t hidden = 32;  // 0 gives a linear classifier
  std::size_t epochs = 300;
  double lr = 1e-2;
  std::uint64_t seed = 1;
};

/// Feedforward classifier over fixed-size utterance vectors (e.g. pooled
/// features), trained full-batch with Adam on standardized inputs.
class PooledClassifier {
 public:
  static PooledClassifier train(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                                std::size_t classes, const ClassifierConfig& config = {});

  bool trained() const { return classes_ > 0; }
  std::size_t classes() const { return classes_; }
  int predict(const std::vector<double>& x) const;
  double accuracy(const std::vector<std::vector<double>>& x, const std::vector<int>& y) const;

  void save(const std::filesystem::path& path) const;
  static PooledClassifier load(const std::filesystem::path& path);

 private:
  Var logits(Tape& tape, Var x) const;

  std::size_t classes_ = 0;
  std::size_t hidden_ = 0;
  Tensor mean_, scale_;
  ParamSet params_;
};

/// Most frequent label; ties go to the smallest label.
int majority_vote(const std::vector<int>& labels);

}  // namespace moe
