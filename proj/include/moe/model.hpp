// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "moe/autograd.hpp"

namespace moe {

/// Granularity of the auxiliary classification task and of the domain groups
/// used for expert initialization.
enum class DomainKnowledge { none, severity, severity_gender, speaker };

std::string to_string(DomainKnowledge k);
DomainKnowledge domain_knowledge_from_string(const std::string& s);

struct EncoderConfig {
  std::size_t num_blocks = 4;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t ffn_width = 64;
  std::size_t vocab = 13;  // including the blank, which is id vocab-1
  std::size_t moe_block = 2;  // 1-based
  std::size_t num_experts = 10;
  std::size_t bottleneck = 16;
  double dropout = 0.1;
  /// Class count of the pooled classification head; 0 disables it.
  std::size_t num_classes = 10;
  bool positional_encoding = true;
  /// Apply softmax to routing vectors before combination (untested variant).
  bool softmax_routing = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

/// Speaker- (or utterance-) dependent expert weights r, one per expert.
struct RoutingVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  Tensor tensor() const { return Tensor({values.size()}, values); }
  static RoutingVector from(const Tensor& t) { return {t.values()}; }
  static RoutingVector zeros(std::size_t n) { return {std::vector<double>(n, 0.0)}; }
  static RoutingVector uniform(std::size_t n) { return {std::vector<double>(n, 1.0 / static_cast<double>(n))}; }
  static RoutingVector one_hot(std::size_t n, std::size_t i);
  bool operator==(const RoutingVector&) const = default;
};

/// Backbone Θ, experts Θ_e and heads, addressed by name:
///   blockL.{ln1,attn,ln2,ffn}.*, final_ln.*, expertI.{ln,down,up}.*, ctc.*, cls.*
struct ModelParams {
  EncoderConfig config;
  ParamSet tensors;

  static ModelParams init(const EncoderConfig& config, std::uint64_t seed);

  void save(const std::filesystem::path& stem) const;  // stem.bin + stem.json
  static ModelParams load(const std::filesystem::path& stem);
};

struct ParamCounts {
  std::size_t backbone = 0;
  std::size_t experts = 0;
  std::size_t heads = 0;
  std::size_t total() const { return backbone + experts + heads; }
};
ParamCounts count_params(const ModelParams& model);
/// Number of speaker-dependent parameters in batch mode: one routing vector per speaker.
std::size_t sd_param_count(std::size_t speakers, std::size_t num_experts);

bool is_expert_param(const std::string& name);
bool is_head_param(const std::string& name);
std::string expert_prefix(std::size_t i);

enum class Mode { train, eval };

struct ForwardOptions {
  Mode mode = Mode::eval;
  std::mt19937_64* rng = nullptr;  // required for dropout in train mode
};

/// Routing-independent state at the MoE insertion point of the MoE block.
struct MoePrefix {
  Var residual;                     // stream after the block's attention sub-layer
  Var ffn_out;                      // FFN output, consumed by every expert
  Var block_input;                  // stream entering the MoE block
  std::vector<Var> expert_outputs;  // a_i, each T×F
};

struct EncoderOutput {
  Var hidden;            // final layer-normalized stream, T×F
  Var logits;            // CTC logits, T×V
  Var moe_hidden;        // MoE block output after the residual, T×F
  Var moe_contribution;  // Σ r_i a_i (invalid when routing is absent)
  Var class_logits;      // 1×K (invalid when the head is disabled)
  Var ffn_out;           // FFN output of the MoE block
  std::vector<Var> expert_outputs;
};

/// Runs the blocks before the MoE combination. Experts are evaluated only when
/// `with_experts` is true.
MoePrefix encode_prefix(Tape& tape, Var x, const ModelParams& model, const ForwardOptions& opts,
                        bool with_experts = true);
/// Finishes the forward pass from a prefix. With no routing the MoE contributes
/// nothing, which is exactly the unadapted network.
EncoderOutput encode_suffix(Tape& tape, const MoePrefix& prefix, std::optional<Var> routing, const ModelParams& model,
                            const ForwardOptions& opts);
EncoderOutput encoder_forward(Tape& tape, Var x, const ModelParams& model, std::optional<Var> routing,
                              const ForwardOptions& opts = {});

/// One residual adapter block: LN → down → GELU → up.
Var expert_forward(Tape& tape, Var u, const ModelParams& model, std::size_t expert);
/// h = Σ_i r_i a_i.
Var moe_combine(const std::vector<Var>& expert_outputs, Var routing);
Var ctc_head(Tape& tape, Var hidden, const ModelParams& model);
/// Temporal mean pool, then affine to class logits.
Var classification_head(Tape& tape, Var hidden, const ModelParams& model);

/// Expert i as a standalone adapter with keys ln.g, ln.b, down.w, down.b, up.w, up.b.
ParamSet extract_expert(const ModelParams& model, std::size_t expert);
/// Replaces all experts with copies of the given per-group adapters. The group
/// count has to equal the configured expert count.
void init_experts_from_adaptive_training(ModelParams& model, const std::vector<ParamSet>& adapters);
/// Max-norm projection of expert tensors: each weight column (the incoming
/// vector of one output unit) is rescaled to L2 norm <= cap and vector entries
/// are clamped to [-cap, cap]. The up-projection uses cap c, the layer norm and
/// down-projection kExpertInnerMaxNorm. Keeps expert outputs bounded under the
/// diversity loss.
inline constexpr double kExpertInnerMaxNorm = 2.0;
void constrain_experts(ModelParams& model, double c);

}  // namespace moe
