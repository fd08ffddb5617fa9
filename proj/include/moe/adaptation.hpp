// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Training and adaptation procedures: SI training, adaptive training of group
// adapters, speaker adaptive training, batch test-time adaptation of routing
// vectors, router training and on-the-fly decoding.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moe/classifier.hpp"
#include "moe/corpus.hpp"
#include "moe/decode.hpp"
#include "moe/losses.hpp"
#include "moe/model.hpp"
#include "moe/router.hpp"

namespace moe {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch = 8;  // utterances per optimizer step
  double lr = 1e-3;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// θ_S: one routing vector per training speaker.
using SDParameterSet = std::map<std::string, RoutingVector>;

void save_sd_parameters(const std::filesystem::path& path, const SDParameterSet& theta);
SDParameterSet load_sd_parameters(const std::filesystem::path& path);

/// Class id of a speaker under the given domain knowledge; -1 for none.
int class_label(DomainKnowledge k, const Corpus& corpus, const std::string& speaker);
/// Number of classes (and expert groups) for the domain knowledge; 0 for none.
std::size_t class_count(DomainKnowledge k, const Corpus& corpus);

struct AdaptationReport {
  std::string speaker;
  std::string mode;
  std::size_t utts = 0;
  std::size_t steps = 0;
  double loss0 = 0.0;
  double loss1 = 0.0;
  double seconds = 0.0;
  RoutingVector r;
};

/// Appends `speaker,mode,utts,steps,loss0,loss1,seconds,r...`, writing the
/// header when the file is new.
void append_adaptation_log(const std::filesystem::path& path, const AdaptationReport& report);

/// Speaker-independent model: backbone and CTC head trained with CTC, no MoE.
ModelParams train_si(const Corpus& corpus, const EncoderConfig& config, const TrainConfig& train,
                     std::vector<double>* curve = nullptr);

struct AuditEntry {
  std::size_t step = 0;
  std::size_t group = 0;
  std::vector<std::string> utterances;
};

struct AdaptiveTrainingResult {
  ModelParams model;  // fine-tuned backbone with one expert per group
  std::vector<ParamSet> adapters;
  std::vector<AuditEntry> audit;
  std::vector<double> curve;
};

/// Trains one adapter per domain group (routing fixed to the group's one-hot
/// vector) while fine-tuning the shared backbone.
AdaptiveTrainingResult adaptive_train(const ModelParams& si, const Corpus& corpus, DomainKnowledge grouping,
                                      const TrainConfig& train);

struct SatConfig {
  TrainConfig train;
  LossWeights weights;
  DomainKnowledge knowledge = DomainKnowledge::severity_gender;
  double sd_lr = 1e-2;
  bool train_backbone = true;  // false trains experts, heads stay fixed, and θ_S
  double expert_max_norm = 0.1;  // see constrain_experts; 0 disables
  /// When false the diversity loss sees the FFN output as a constant, so it
  /// shapes the experts only.
  bool kl_into_backbone = false;
};

struct SatResult {
  ModelParams model;
  SDParameterSet theta;
  std::vector<double> curve;
  std::vector<double> ctc_curve;
  double divergence = 0.0;  // final mean pairwise expert divergence on training data
  std::vector<std::vector<std::string>> batch_log;
};

/// Joint optimization of backbone, experts and θ_S with the batch loss. Each
/// minibatch holds one speaker's utterances and uses that speaker's r.
SatResult sat_train(const ModelParams& init, const Corpus& corpus, const SatConfig& config,
                    const std::vector<std::string>& exclude = {}, const SDParameterSet* theta_init = nullptr);

/// Mean over utterances of the mean pairwise expert divergence (eval mode).
double expert_divergence(const ModelParams& model, const std::vector<const Utterance*>& utts);

struct PseudoLabel {
  LabelSequence tokens;
  bool usable = false;  // non-empty and CTC-feasible
};

std::vector<PseudoLabel> generate_pseudo_labels(const ModelParams& model, const std::vector<const Tensor*>& features);

Hypothesis decode_utterance(const ModelParams& model, const Tensor& features,
                            const std::optional<RoutingVector>& routing = std::nullopt);

/// Classifier over pooled features predicting the domain class, trained on the
/// training split. Not defined for speaker-level or absent domain knowledge.
PooledClassifier train_class_predictor(const Corpus& corpus, DomainKnowledge k, const ClassifierConfig& config = {});
/// Speaker-level class by majority vote; nullopt for speaker-level or absent knowledge.
std::optional<int> predict_class_label(const PooledClassifier& classifier, DomainKnowledge k,
                                       const std::vector<const Tensor*>& features);

struct TtaConfig {
  std::size_t steps = 50;
  double lr = 1e-2;
  LossWeights weights;
};

struct TtaResult {
  RoutingVector r;
  AdaptationReport report;
  std::vector<double> objective;  // loss of the iterate before each step, then the final iterate
};

/// Batch-mode test-time adaptation: only r is optimized, from the uniform
/// vector, on the pseudo-labelled utterances. The best iterate is returned.
TtaResult batch_tta(const ModelParams& model, const std::string& speaker, const std::vector<const Tensor*>& features,
                    const std::vector<PseudoLabel>& labels, std::optional<int> class_label, const TtaConfig& config);

enum class RouterLoss { full, mse_only };
std::string to_string(RouterLoss l);
RouterLoss router_loss_from_string(const std::string& s);

struct RouterTrainConfig {
  TrainConfig train;
  LossWeights weights;
  RouterLoss loss = RouterLoss::full;
  DomainKnowledge knowledge = DomainKnowledge::severity_gender;
};

struct RouterTrainResult {
  RouterParams router;
  std::vector<double> curve;
  double final_mse = 0.0;
  double mean_cosine = 0.0;  // predicted vs. target on training utterances
};

/// Trains only the router, regressing each training utterance's predicted r to
/// its speaker's θ_S entry under the on-the-fly loss with the model frozen.
RouterTrainResult train_router(const ModelParams& model, const SDParameterSet& theta, const Corpus& corpus,
                               const RouterConfig& config, const RouterTrainConfig& train,
                               const std::vector<std::string>& exclude = {});

struct OnflyResult {
  Hypothesis hypothesis;
  RoutingVector r;
};

OnflyResult onfly_decode(const ModelParams& model, const RouterParams& router, const Tensor& features);

/// Single-expert model over the SI backbone for the RAB-like baseline.
ModelParams make_rab_model(const ModelParams& si, std::uint64_t seed);

struct RabResult {
  ParamSet expert;  // expert0.* tensors adapted for the speaker
  AdaptationReport report;
};

/// Batch adaptation of the single expert's parameters (r fixed to 1).
RabResult rab_like_tta(const ModelParams& rab_model, const std::string& speaker,
                       const std::vector<const Tensor*>& features, const std::vector<PseudoLabel>& labels,
                       const TtaConfig& config);
ModelParams with_expert(const ModelParams& rab_model, const ParamSet& expert);

}  // namespace moe
