// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "moe/model.hpp"

namespace moe {

/// Which hidden stream of the MoE block the router observes.
enum class RouterTap {
  moe_input,    // the FFN output the experts consume
  block_input,  // the stream entering the MoE block
};

enum class Pooling { attentive, average };

struct RouterConfig {
  std::size_t width = 32;      // tap width F
  std::size_t attention = 32;  // attention hidden width A
  std::size_t num_experts = 10;
  RouterTap tap = RouterTap::moe_input;
  Pooling pooling = Pooling::attentive;

  void validate() const;
};

void to_json(nlohmann::json& j, const RouterConfig& c);
void from_json(const nlohmann::json& j, RouterConfig& c);

/// Θ_P: router.ff{1,2}.*, router.ln{1,2}.*, router.att.{w,b,v,c}, router.out.*
struct RouterParams {
  RouterConfig config;
  ParamSet tensors;

  static RouterParams init(const RouterConfig& config, std::uint64_t seed);
  void save(const std::filesystem::path& stem) const;
  static RouterParams load(const std::filesystem::path& stem);
};

/// Weighted mean and standard deviation over frames, and their concatenation.
struct PooledStats {
  Var mean;    // 1×F
  Var stddev;  // 1×F
  Var z;       // 1×2F
};

/// Layer-normalized (no affine) tap of the MoE block feeding the router.
Var router_input(Tape& tape, const MoePrefix& prefix, const RouterConfig& config);

/// Two feedforward + layer-norm stages over frames: T×F → T×F.
Var router_frames(Tape& tape, Var frames, const RouterParams& router);

/// α_t = softmax_t(vᵀ tanh(W h_t + b) + c), returned as 1×T.
Var attention_weights(Tape& tape, Var h, const RouterParams& router);
/// Statistics under arbitrary frame weights (1×T, summing to one).
PooledStats weighted_stats(Var h, Var weights);
PooledStats attentive_pool(Tape& tape, Var h, const RouterParams& router);
PooledStats average_pool(Tape& tape, Var h);

/// Frames of the tap → routing vector of length N (shape [N]).
Var router_forward(Tape& tape, Var tap, const RouterParams& router);

/// Single-utterance prediction in eval mode.
RoutingVector predict_routing(const Tensor& features, const ModelParams& model, const RouterParams& router);

}  // namespace moe
