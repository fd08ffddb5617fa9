// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/adaptation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "moe/optim.hpp"
#include "moe/parallel.hpp"

namespace moe {

namespace {

using Clock = std::chrono::steady_clock;
using Filter = std::function<bool(const std::string&)>;
using LossBuilder = std::function<std::pair<Var, double>(std::size_t, Tape&)>;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint64_t v : {a, b, c}) {
    h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct BatchOutcome {
  double loss = 0.0;
  double ctc = 0.0;
  GradMap grads;
};

/// One tape per utterance; gradients are summed in index order and averaged.
BatchOutcome run_batch(std::size_t n, const Filter& trainable, const LossBuilder& build, bool backward = true) {
  std::vector<GradMap> grads(n);
  std::vector<double> loss(n), ctc(n);
  parallel_for(n, [&](std::size_t i) {
    Tape tape(backward);
    tape.set_trainable(trainable);
    auto [l, c] = build(i, tape);
    loss[i] = l.value().item();
    ctc[i] = c;
    if (backward) {
      tape.backward(l);
      grads[i] = tape.parameter_grads();
    }
  });
  BatchOutcome out;
  for (std::size_t i = 0; i < n; ++i) {
    out.loss += loss[i] / static_cast<double>(n);
    out.ctc += ctc[i] / static_cast<double>(n);
    accumulate(out.grads, grads[i]);
  }
  scale_grads(out.grads, 1.0 / static_cast<double>(n));
  return out;
}

std::vector<std::vector<const Utterance*>> chunk(const std::vector<const Utterance*>& utts, std::size_t size) {
  std::vector<std::vector<const Utterance*>> out;
  for (std::size_t i = 0; i < utts.size(); i += size)
    out.emplace_back(utts.begin() + static_cast<std::ptrdiff_t>(i),
                     utts.begin() + static_cast<std::ptrdiff_t>(std::min(utts.size(), i + size)));
  return out;
}

bool is_backbone(const std::string& name) { return !is_expert_param(name) && !is_head_param(name); }

/// Routing-independent forward state of one utterance under a frozen model.
struct CachedPrefix {
  Tensor residual, ffn_out, block_input;
  std::vector<Tensor> experts;
  double kl = 0.0;

  MoePrefix on(Tape& tape) const {
    MoePrefix p;
    p.residual = tape.constant(residual);
    p.ffn_out = tape.constant(ffn_out);
    p.block_input = tape.constant(block_input);
    for (const auto& e : experts) p.expert_outputs.push_back(tape.constant(e));
    return p;
  }
};

CachedPrefix cache_prefix(const ModelParams& model, const Tensor& features, bool with_experts = true) {
  Tape tape(false);
  MoePrefix p = encode_prefix(tape, tape.constant(features), model, {}, with_experts);
  CachedPrefix c{p.residual.value(), p.ffn_out.value(), p.block_input.value(), {}, 0.0};
  for (const Var& e : p.expert_outputs) c.experts.push_back(e.value());
  if (c.experts.size() >= 2) c.kl = kl_diversity_value(c.experts);
  return c;
}

std::vector<CachedPrefix> cache_prefixes(const ModelParams& model, const std::vector<const Tensor*>& features) {
  std::vector<CachedPrefix> out(features.size());
  parallel_for(features.size(), [&](std::size_t i) { out[i] = cache_prefix(model, *features[i]); });
  return out;
}

AdamConfig adam_config(double lr, double clip) {
  AdamConfig c;
  c.lr = lr;
  c.clip_norm = clip;
  return c;
}

std::vector<const Utterance*> training_utterances(const Corpus& corpus, const std::vector<std::string>& exclude) {
  std::vector<const Utterance*> out;
  for (const Utterance* u : corpus.select(Split::train))
    if (std::find(exclude.begin(), exclude.end(), u->speaker) == exclude.end()) out.push_back(u);
  return out;
}

}  // namespace

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{
      {"epochs", c.epochs}, {"batch", c.batch}, {"lr", c.lr}, {"clip_norm", c.clip_norm}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch = j.value("batch", d.batch);
  c.lr = j.value("lr", d.lr);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.seed = j.value("seed", d.seed);
}

void save_sd_parameters(const std::filesystem::path& path, const SDParameterSet& theta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::size_t n = theta.empty() ? 0 : theta.begin()->second.size();
  out << "speaker";
  for (std::size_t i = 1; i <= n; ++i) out << ",r_" << i;
  out << "\n";
  for (const auto& [spk, r] : theta) {
    out << spk;
    for (double v : r.values) out << "," << fmt(v);
    out << "\n";
  }
}

SDParameterSet load_sd_parameters(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing SD parameter file " + path.string());
  SDParameterSet theta;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string spk, cell;
    std::getline(row, spk, ',');
    RoutingVector r;
    while (std::getline(row, cell, ',')) r.values.push_back(std::stod(cell));
    theta[spk] = std::move(r);
  }
  return theta;
}

int class_label(DomainKnowledge k, const Corpus& corpus, const std::string& speaker) {
  const SpeakerProfile& s = corpus.speaker(speaker);
  switch (k) {
    case DomainKnowledge::none:
      return -1;
    case DomainKnowledge::severity:
      return static_cast<int>(severity_index(s.severity));
    case DomainKnowledge::severity_gender:
      return static_cast<int>(2 * severity_index(s.severity) + (s.gender == Gender::M ? 1 : 0));
    case DomainKnowledge::speaker:
      for (std::size_t i = 0; i < corpus.speakers.size(); ++i)
        if (corpus.speakers[i].id == speaker) return static_cast<int>(i);
  }
  return -1;
}

std::size_t class_count(DomainKnowledge k, const Corpus& corpus) {
  switch (k) {
    case DomainKnowledge::none:
      return 0;
    case DomainKnowledge::severity:
      return kSeverities.size();
    case DomainKnowledge::severity_gender:
      return 2 * kSeverities.size();
    case DomainKnowledge::speaker:
      return corpus.speakers.size();
  }
  return 0;
}

void append_adaptation_log(const std::filesystem::path& path, const AdaptationReport& r) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw std::runtime_error("cannot append to " + path.string());
  if (fresh) {
    out << "speaker,mode,utts,steps,loss0,loss1,seconds";
    for (std::size_t i = 1; i <= r.r.size(); ++i) out << ",r_" << i;
    out << "\n";
  }
  out << r.speaker << "," << r.mode << "," << r.utts << "," << r.steps << "," << fmt(r.loss0) << "," << fmt(r.loss1)
      << "," << fmt(r.seconds);
  for (double v : r.r.values) out << "," << fmt(v);
  out << "\n";
}

ModelParams train_si(const Corpus& corpus, const EncoderConfig& config, const TrainConfig& train,
                     std::vector<double>* curve) {
  ModelParams model = ModelParams::init(config, train.seed);
  auto utts = corpus.select(Split::train);
  require(!utts.empty(), "SI training needs training utterances");
  const Filter trainable = [](const std::string& n) { return is_backbone(n) || n.rfind("ctc.", 0) == 0; };
  Adam adam(adam_config(train.lr, train.clip_norm));
  std::mt19937_64 rng(train.seed);
  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    std::shuffle(utts.begin(), utts.end(), rng);
    double total = 0.0;
    for (const auto& batch : chunk(utts, train.batch)) {
      auto out = run_batch(batch.size(), trainable, [&](std::size_t i, Tape& tape) {
        std::mt19937_64 drop(mix_seed(train.seed, epoch, std::hash<std::string>{}(batch[i]->id)));
        auto fwd = encoder_forward(tape, tape.constant(batch[i]->features), model, std::nullopt, {Mode::train, &drop});
        Var l = ctc_loss(fwd.logits, batch[i]->tokens);
        return std::make_pair(l, l.value().item());
      });
      adam.step(model.tensors, out.grads);
      total += out.loss * static_cast<double>(batch.size());
    }
    if (curve) curve->push_back(total / static_cast<double>(utts.size()));
  }
  return model;
}

AdaptiveTrainingResult adaptive_train(const ModelParams& si, const Corpus& corpus, DomainKnowledge grouping,
                                      const TrainConfig& train) {
  const std::size_t groups = class_count(grouping, corpus);
  require(groups >= 1, "adaptive training needs a domain grouping");
  EncoderConfig cfg = si.config;
  cfg.num_experts = groups;
  cfg.num_classes = groups;
  AdaptiveTrainingResult res;
  res.model = ModelParams::init(cfg, mix_seed(train.seed, 17));
  for (const auto& [name, t] : si.tensors)
    if (is_backbone(name) || name.rfind("ctc.", 0) == 0) res.model.tensors.at(name) = t;

  std::vector<std::vector<const Utterance*>> by_group(groups);
  for (const Utterance* u : corpus.select(Split::train))
    by_group[static_cast<std::size_t>(class_label(grouping, corpus, u->speaker))].push_back(u);
  for (std::size_t g = 0; g < groups; ++g)
    require(!by_group[g].empty(), "adaptive training group " + std::to_string(g) + " has zero utterances");

  Adam adam(adam_config(train.lr, train.clip_norm));
  std::mt19937_64 rng(train.seed);
  std::size_t step = 0;
  std::size_t total_utts = 0;
  for (const auto& g : by_group) total_utts += g.size();
  for (std::size_t epoch = 0; epoch < train.epochs; ++epoch) {
    std::vector<std::pair<std::size_t, std::vector<const Utterance*>>> batches;
    for (std::size_t g = 0; g < groups; ++g) {
      std::shuffle(by_group[g].begin(), by_group[g].end(), rng);
      for (auto& b : chunk(by_group[g], train.batch)) batches.emplace_back(g, std::move(b));
    }
    std::shuffle(batches.begin(), batches.end(), rng);
    double total = 0.0;
    for (const auto& [g, batch] : batches) {
      const std::string own = expert_prefix(g);
      const Filter trainable = [&own](const std::string& n) {
        return is_backbone(n) || n.rfind("ctc.", 0) == 0 || n.rfind(own, 0) == 0;
      };
      const Tensor route = RoutingVector::one_hot(groups, g).tensor();
      auto out = run_batch(batch.size(), trainable, [&](std::size_t i, Tape& tape) {
        std::mt19937_64 drop(mix_seed(train.seed, epoch, std::hash<std::string>{}(batch[i]->id)));
        auto fwd = encoder_forward(tape, tape.constant(batch[i]->features), res.model, tape.constant(route),
                                   {Mode::train, &drop});
        Var l = ctc_loss(fwd.logits, batch[i]->tokens);
        return std::make_pair(l, l.value().item());
      });
      adam.step(res.model.tensors, out.grads);
      AuditEntry a{step++, g, {}};
      for (const Utterance* u : batch) a.utterances.push_back(u->id);
      res.audit.push_back(std::move(a));
      total += out.loss * static_cast<double>(batch.size());
    }
    res.curve.push_back(total / static_cast<double>(total_utts));
  }
  for (std::size_t g = 0; g < groups; ++g) res.adapters.push_back(extract_expert(res.model, g));
  return res;
}

SatResult sat_train(const ModelParams& init, const Corpus& corpus, const SatConfig& config,
                    const std::vector<std::string>& exclude, const SDParameterSet* theta_init) {
  config.weights.validate();
  const std::size_t n_exp = init.config.num_experts;
  const std::size_t classes = class_count(config.knowledge, corpus);
  const bool use_ce = classes > 0 && config.weights.beta > 0;
  if (use_ce) {
    require(init.config.num_classes == classes, "model has " + std::to_string(init.config.num_classes) +
                                                    " classes but domain knowledge '" + to_string(config.knowledge) +
                                                    "' needs " + std::to_string(classes));
  }
  SatResult res;
  res.model = init;
  if (config.expert_max_norm > 0) constrain_experts(res.model, config.expert_max_norm);
  auto utts = training_utterances(corpus, exclude);
  require(!utts.empty(), "SAT needs training utterances");

  ParamSet sd;
  std::map<std::string, std::vector<const Utterance*>> by_speaker;
  for (const Utterance* u : utts) by_speaker[u->speaker].push_back(u);
  for (const auto& [spk, list] : by_speaker) {
    RoutingVector r = RoutingVector::uniform(n_exp);
    if (theta_init) {
      auto it = theta_init->find(spk);
      if (it != theta_init->end()) r = it->second;
    }
    require(r.size() == n_exp, "routing vector for speaker " + spk + " has wrong length");
    sd["sd." + spk] = r.tensor();
  }

  const bool backbone = config.train_backbone;
  const Filter trainable = [backbone](const std::string& n) {
    return n.rfind("sd.", 0) == 0 || is_expert_param(n) || backbone;
  };
  Adam adam(adam_config(config.train.lr, config.train.clip_norm));
  Adam sd_adam(adam_config(config.sd_lr, 0.0));
  std::mt19937_64 rng(config.train.seed);
  const LossWeights w = config.weights;
  for (std::size_t epoch = 0; epoch < config.train.epochs; ++epoch) {
    std::vector<std::pair<std::string, std::vector<const Utterance*>>> batches;
    for (auto& [spk, list] : by_speaker) {
      std::shuffle(list.begin(), list.end(), rng);
      for (auto& b : chunk(list, config.train.batch)) batches.emplace_back(spk, std::move(b));
    }
    std::shuffle(batches.begin(), batches.end(), rng);
    double total = 0.0, total_ctc = 0.0;
    for (const auto& [spk, batch] : batches) {
      const std::string key = "sd." + spk;
      const int label = use_ce ? class_label(config.knowledge, corpus, spk) : -1;
      auto out = run_batch(batch.size(), trainable, [&](std::size_t i, Tape& tape) {
        std::mt19937_64 drop(mix_seed(config.train.seed, epoch, std::hash<std::string>{}(batch[i]->id)));
        Var r = tape.parameter(key, sd.at(key));
        auto fwd = encoder_forward(tape, tape.constant(batch[i]->features), res.model, r, {Mode::train, &drop});
        Var ctc = ctc_loss(fwd.logits, batch[i]->tokens);
        std::vector<Var> kl_in = fwd.expert_outputs;
        if (!config.kl_into_backbone) {
          const Var u = tape.constant(fwd.ffn_out.value());
          for (std::size_t e = 0; e < n_exp; ++e) kl_in[e] = expert_forward(tape, u, res.model, e);
        }
        std::vector<Var> terms = {ctc, scale(kl_diversity_loss(kl_in), w.alpha)};
        if (use_ce) terms.push_back(scale(ce_loss(fwd.class_logits, label), w.beta));
        return std::make_pair(add_all(terms), ctc.value().item());
      });
      GradMap model_grads, sd_grads;
      for (auto& [name, g] : out.grads) (name.rfind("sd.", 0) == 0 ? sd_grads : model_grads)[name] = std::move(g);
      adam.step(res.model.tensors, model_grads);
      sd_adam.step(sd, sd_grads);
      if (config.expert_max_norm > 0) constrain_experts(res.model, config.expert_max_norm);
      std::vector<std::string> ids;
      for (const Utterance* u : batch) ids.push_back(u->id);
      res.batch_log.push_back(std::move(ids));
      total += out.loss * static_cast<double>(batch.size());
      total_ctc += out.ctc * static_cast<double>(batch.size());
    }
    res.curve.push_back(total / static_cast<double>(utts.size()));
    res.ctc_curve.push_back(total_ctc / static_cast<double>(utts.size()));
  }
  for (const auto& [key, t] : sd) res.theta[key.substr(3)] = RoutingVector::from(t);
  res.divergence = expert_divergence(res.model, utts);
  return res;
}

double expert_divergence(const ModelParams& model, const std::vector<const Utterance*>& utts) {
  require(!utts.empty(), "expert_divergence needs utterances");
  std::vector<double> d(utts.size());
  parallel_for(utts.size(), [&](std::size_t i) {
    Tape tape(false);
    MoePrefix p = encode_prefix(tape, tape.constant(utts[i]->features), model, {}, true);
    std::vector<Tensor> a;
    for (const Var& e : p.expert_outputs) a.push_back(e.value());
    d[i] = mean_pairwise_divergence(a);
  });
  double s = 0.0;
  for (double v : d) s += v;
  return s / static_cast<double>(d.size());
}

std::vector<PseudoLabel> generate_pseudo_labels(const ModelParams& model, const std::vector<const Tensor*>& features) {
  std::vector<PseudoLabel> out(features.size());
  parallel_for(features.size(), [&](std::size_t i) {
    out[i].tokens = decode_utterance(model, *features[i]).tokens;
    out[i].usable = !out[i].tokens.empty() && ctc_feasible(features[i]->rows(), out[i].tokens);
  });
  return out;
}

Hypothesis decode_utterance(const ModelParams& model, const Tensor& features, const std::optional<RoutingVector>& r) {
  const auto t0 = Clock::now();
  Tape tape(false);
  std::optional<Var> rv;
  if (r) rv = tape.constant(r->tensor());
  Hypothesis h = greedy_ctc_decode(encoder_forward(tape, tape.constant(features), model, rv).logits.value());
  h.decode_seconds = seconds_since(t0);
  return h;
}

PooledClassifier train_class_predictor(const Corpus& corpus, DomainKnowledge k, const ClassifierConfig& config) {
  require(k == DomainKnowledge::severity || k == DomainKnowledge::severity_gender,
          "class prediction is only defined for severity or severity_gender domain knowledge");
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (const Utterance* u : corpus.select(Split::train)) {
    x.push_back(pooled_features(u->features));
    y.push_back(class_label(k, corpus, u->speaker));
  }
  return PooledClassifier::train(x, y, class_count(k, corpus), config);
}

std::optional<int> predict_class_label(const PooledClassifier& classifier, DomainKnowledge k,
                                       const std::vector<const Tensor*>& features) {
  if (k == DomainKnowledge::none || k == DomainKnowledge::speaker) return std::nullopt;
  if (!classifier.trained()) throw std::logic_error("class predictor not trained");
  require(!features.empty(), "predict_class_label needs at least one utterance");
  std::vector<int> votes;
  for (const Tensor* f : features) votes.push_back(classifier.predict(pooled_features(*f)));
  return majority_vote(votes);
}

TtaResult batch_tta(const ModelParams& model, const std::string& speaker, const std::vector<const Tensor*>& features,
                    const std::vector<PseudoLabel>& labels, std::optional<int> cls, const TtaConfig& config) {
  const auto t0 = Clock::now();
  require(features.size() == labels.size(), "batch_tta needs one pseudo-label per utterance");
  std::vector<const Tensor*> used;
  std::vector<const LabelSequence*> targets;
  for (std::size_t i = 0; i < features.size(); ++i)
    if (labels[i].usable) {
      used.push_back(features[i]);
      targets.push_back(&labels[i].tokens);
    }
  if (used.empty()) throw std::invalid_argument("speaker " + speaker + " has no usable pseudo-labelled utterances");
  const bool use_ce = cls.has_value() && model.config.num_classes > 0 && config.weights.beta > 0;
  const auto cache = cache_prefixes(model, used);

  ParamSet rp{{"r", RoutingVector::uniform(model.config.num_experts).tensor()}};
  Adam adam(adam_config(config.lr, 0.0));
  const Filter trainable = [](const std::string& n) { return n == "r"; };
  const LossWeights w = config.weights;
  const LossBuilder build = [&](std::size_t i, Tape& tape) {
    auto fwd = encode_suffix(tape, cache[i].on(tape), tape.parameter("r", rp.at("r")), model, {});
    Var ctc = ctc_loss(fwd.logits, *targets[i]);
    std::vector<Var> terms = {ctc, tape.constant(Tensor::scalar(w.alpha * cache[i].kl))};
    if (use_ce) terms.push_back(scale(ce_loss(fwd.class_logits, *cls), w.beta));
    return std::make_pair(add_all(terms), ctc.value().item());
  };

  TtaResult res;
  Tensor best = rp.at("r");
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t step = 0; step <= config.steps; ++step) {
    const bool last = step == config.steps;
    auto out = run_batch(used.size(), trainable, build, !last);
    res.objective.push_back(out.loss);
    if (out.loss < best_loss) {
      best_loss = out.loss;
      best = rp.at("r");
    }
    if (!last) adam.step(rp, out.grads);
  }
  res.r = RoutingVector::from(best);
  res.report = {speaker, "batch_tta", used.size(), config.steps, res.objective.front(), best_loss,
                seconds_since(t0), res.r};
  return res;
}

std::string to_string(RouterLoss l) { return l == RouterLoss::full ? "full" : "mse_only"; }

RouterLoss router_loss_from_string(const std::string& s) {
  if (s == "full") return RouterLoss::full;
  if (s == "mse_only") return RouterLoss::mse_only;
  throw std::invalid_argument("unknown router_loss '" + s + "' (expected full or mse_only)");
}

RouterTrainResult train_router(const ModelParams& model, const SDParameterSet& theta, const Corpus& corpus,
                               const RouterConfig& config, const RouterTrainConfig& train,
                               const std::vector<std::string>& exclude) {
  train.weights.validate();
  require(config.num_experts == model.config.num_experts, "router expert count differs from the model's");
  require(config.width == model.config.width, "router width differs from the model width");
  auto utts = training_utterances(corpus, exclude);
  require(!utts.empty(), "router training needs training utterances");
  for (const Utterance* u : utts)
    if (!theta.count(u->speaker)) throw std::invalid_argument("missing routing target for training speaker " + u->speaker);

  std::vector<const Tensor*> feats;
  for (const Utterance* u : utts) feats.push_back(&u->features);
  const auto cache = cache_prefixes(model, feats);
  std::map<const Utterance*, std::size_t> index;
  for (std::size_t i = 0; i < utts.size(); ++i) index[utts[i]] = i;

  const std::size_t classes = class_count(train.knowledge, corpus);
  const bool use_ce = classes > 0 && model.config.num_classes == classes && train.weights.beta > 0;
  const LossWeights w = train.weights;
  RouterTrainResult res;
  res.router = RouterParams::init(config, train.train.seed);
  const Filter trainable = [](const std::string& n) { return n.rfind("router.", 0) == 0; };

  auto build_for = [&](const Utterance* u, Tape& tape) {
    const CachedPrefix& c = cache[index.at(u)];
    MoePrefix p = c.on(tape);
    Var r = router_forward(tape, router_input(tape, p, config), res.router);
    Var mse = mse_routing_loss(r, tape.constant(theta.at(u->speaker).tensor()));
    if (train.loss == RouterLoss::mse_only) return std::make_pair(mse, 0.0);
    auto fwd = encode_suffix(tape, p, r, model, {});
    Var ctc = ctc_loss(fwd.logits, u->tokens);
    std::vector<Var> terms = {ctc, tape.constant(Tensor::scalar(w.alpha * c.kl)), scale(mse, w.gamma)};
    if (use_ce) terms.push_back(scale(ce_loss(fwd.class_logits, class_label(train.knowledge, corpus, u->speaker)), w.beta));
    return std::make_pair(add_all(terms), ctc.value().item());
  };

  Adam adam(adam_config(train.train.lr, train.train.clip_norm));
  std::mt19937_64 rng(train.train.seed);
  for (std::size_t epoch = 0; epoch < train.train.epochs; ++epoch) {
    std::shuffle(utts.begin(), utts.end(), rng);
    double total = 0.0;
    for (const auto& batch : chunk(utts, train.train.batch)) {
      auto out = run_batch(batch.size(), trainable, [&](std::size_t i, Tape& tape) { return build_for(batch[i], tape); });
      adam.step(res.router.tensors, out.grads);
      total += out.loss * static_cast<double>(batch.size());
    }
    res.curve.push_back(total / static_cast<double>(utts.size()));
  }

  std::vector<double> mse(utts.size()), cos(utts.size());
  parallel_for(utts.size(), [&](std::size_t i) {
    Tape tape(false);
    const CachedPrefix& c = cache[index.at(utts[i])];
    const Tensor r = router_forward(tape, router_input(tape, c.on(tape), config), res.router).value();
    const Tensor target = theta.at(utts[i]->speaker).tensor();
    mse[i] = mse_routing_value(r, target);
    cos[i] = cosine_similarity(r.data(), target.data());
  });
  for (std::size_t i = 0; i < utts.size(); ++i) {
    res.final_mse += mse[i] / static_cast<double>(utts.size());
    res.mean_cosine += cos[i] / static_cast<double>(utts.size());
  }
  return res;
}

OnflyResult onfly_decode(const ModelParams& model, const RouterParams& router, const Tensor& features) {
  const auto t0 = Clock::now();
  Tape tape(false);
  MoePrefix p = encode_prefix(tape, tape.constant(features), model, {}, true);
  Var r = router_forward(tape, router_input(tape, p, router.config), router);
  OnflyResult res;
  res.hypothesis = greedy_ctc_decode(encode_suffix(tape, p, r, model, {}).logits.value());
  res.r = RoutingVector::from(r.value());
  res.hypothesis.decode_seconds = seconds_since(t0);
  return res;
}

ModelParams make_rab_model(const ModelParams& si, std::uint64_t seed) {
  EncoderConfig cfg = si.config;
  cfg.num_experts = 1;
  cfg.num_classes = 0;
  ModelParams m = ModelParams::init(cfg, seed);
  for (auto& [name, t] : m.tensors)
    if (!is_expert_param(name)) {
      auto it = si.tensors.find(name);
      if (it != si.tensors.end()) t = it->second;
    }
  return m;
}

ModelParams with_expert(const ModelParams& rab_model, const ParamSet& expert) {
  ModelParams m = rab_model;
  for (const auto& [name, t] : expert) {
    auto it = m.tensors.find(name);
    require(it != m.tensors.end() && it->second.shape() == t.shape(), "incompatible expert tensor '" + name + "'");
    it->second = t;
  }
  return m;
}

RabResult rab_like_tta(const ModelParams& rab_model, const std::string& speaker,
                       const std::vector<const Tensor*>& features, const std::vector<PseudoLabel>& labels,
                       const TtaConfig& config) {
  const auto t0 = Clock::now();
  require(rab_model.config.num_experts == 1, "RAB-like adaptation needs a single-expert model");
  require(features.size() == labels.size(), "rab_like_tta needs one pseudo-label per utterance");
  std::vector<const Tensor*> used;
  std::vector<const LabelSequence*> targets;
  for (std::size_t i = 0; i < features.size(); ++i)
    if (labels[i].usable) {
      used.push_back(features[i]);
      targets.push_back(&labels[i].tokens);
    }
  if (used.empty()) throw std::invalid_argument("speaker " + speaker + " has no usable pseudo-labelled utterances");
  std::vector<CachedPrefix> cache(used.size());
  parallel_for(used.size(), [&](std::size_t i) { cache[i] = cache_prefix(rab_model, *used[i], false); });

  ModelParams work = rab_model;
  const Filter trainable = [](const std::string& n) { return is_expert_param(n); };
  const Tensor one = Tensor({1}, 1.0);
  const LossBuilder build = [&](std::size_t i, Tape& tape) {
    MoePrefix p = cache[i].on(tape);
    p.expert_outputs = {expert_forward(tape, p.ffn_out, work, 0)};
    auto fwd = encode_suffix(tape, p, tape.constant(one), work, {});
    Var ctc = ctc_loss(fwd.logits, *targets[i]);
    return std::make_pair(ctc, ctc.value().item());
  };
  Adam adam(adam_config(config.lr, 0.0));
  RabResult res;
  auto snapshot = [&] {
    ParamSet e;
    for (const auto& [name, t] : work.tensors)
      if (is_expert_param(name)) e[name] = t;
    return e;
  };
  double loss0 = 0.0, best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t step = 0; step <= config.steps; ++step) {
    const bool last = step == config.steps;
    auto out = run_batch(used.size(), trainable, build, !last);
    if (step == 0) loss0 = out.loss;
    if (out.loss < best_loss) {
      best_loss = out.loss;
      res.expert = snapshot();
    }
    if (!last) adam.step(work.tensors, out.grads);
  }
  res.report = {speaker, "rab_like", used.size(), config.steps, loss0, best_loss, seconds_since(t0),
                RoutingVector{{1.0}}};
  return res;
}

}  // namespace moe
