// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "moe/autograd.hpp"

namespace moe {

/// Token ids in [0, V-1); id V-1 is the CTC blank.
using LabelSequence = std::vector<int>;

/// Weights of the auxiliary terms: KL diversity (alpha), classification CE
/// (beta), routing MSE (gamma).
struct LossWeights {
  double alpha = 5.0;
  double beta = 0.1;
  double gamma = 0.5;

  void validate() const;
};

/// Minimum frame count for a CTC alignment of `target`: its length plus one
/// separating blank per adjacent repeat.
std::size_t ctc_min_frames(const LabelSequence& target);
bool ctc_feasible(std::size_t frames, const LabelSequence& target);

/// Negative log-likelihood of `target` under per-frame logits (T×V, blank V-1),
/// summed over all alignments with the forward-backward recursion in log space.
/// An infeasible target yields +inf with zero gradient.
Var ctc_loss(Var logits, const LabelSequence& target);
double ctc_loss_value(const Tensor& logits, const LabelSequence& target);

/// −Σ_{i≠j} KL(softmax(a_i) ‖ softmax(a_j)), softmax over features, KL averaged
/// over frames. Zero for fewer than two experts.
Var kl_diversity_loss(const std::vector<Var>& expert_outputs);
double kl_diversity_value(const std::vector<Tensor>& expert_outputs);
/// Mean over ordered pairs i≠j of the frame-averaged KL; the diversity measure
/// reported by the ablation runs.
double mean_pairwise_divergence(const std::vector<Tensor>& expert_outputs);

/// −log softmax(logits)[label]; requires at least two classes.
Var ce_loss(Var logits, int label);
double ce_loss_value(const Tensor& logits, int label);

/// Mean of squared differences.
Var mse_routing_loss(Var predicted, Var target);
double mse_routing_value(const Tensor& predicted, const Tensor& target);

double combined_batch_loss(double ctc, double kl, double ce, const LossWeights& w = {});
double combined_onfly_loss(double ctc, double kl, double ce, double mse, const LossWeights& w = {});
Var combined_batch_loss(Var ctc, Var kl, Var ce, const LossWeights& w = {});
Var combined_onfly_loss(Var ctc, Var kl, Var ce, Var mse, const LossWeights& w = {});

}  // namespace moe
