// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "moe/checkpoint.hpp"
#include "moe/parallel.hpp"

namespace moe {

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"alpha", w.alpha}, {"beta", w.beta}, {"gamma", w.gamma}};
}
void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.alpha = j.value("alpha", d.alpha);
  w.beta = j.value("beta", d.beta);
  w.gamma = j.value("gamma", d.gamma);
}
void to_json(nlohmann::json& j, const TtaConfig& c) { j = nlohmann::json{{"steps", c.steps}, {"lr", c.lr}}; }
void from_json(const nlohmann::json& j, TtaConfig& c) {
  TtaConfig d;
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
}
void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = nlohmann::json{{"hidden", c.hidden}, {"epochs", c.epochs}, {"lr", c.lr}, {"seed", c.seed}};
}
void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  ClassifierConfig d;
  c.hidden = j.value("hidden", d.hidden);
  c.epochs = j.value("epochs", d.epochs);
  c.lr = j.value("lr", d.lr);
  c.seed = j.value("seed", d.seed);
}

namespace {

using Clock = std::chrono::steady_clock;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string tokens_str(const LabelSequence& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + std::to_string(t[i]);
  return s;
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

std::vector<const Tensor*> features_of(const std::vector<const Utterance*>& utts) {
  std::vector<const Tensor*> f;
  for (const Utterance* u : utts) f.push_back(&u->features);
  return f;
}

std::map<std::string, RoutingVector> read_routing(const std::filesystem::path& p) { return load_sd_parameters(p); }

std::optional<PooledClassifier> load_classifier(const Run& run, const std::string& stage) {
  const DomainKnowledge k = run.config().knowledge;
  if (k != DomainKnowledge::severity && k != DomainKnowledge::severity_gender) return std::nullopt;
  return PooledClassifier::load(run.need("classifier.bin", stage, "sat"));
}

/// Batch-mode adaptation for one speaker: pseudo-labels from the SI model,
/// predicted class label, then TTA of r on the same utterances.
TtaResult adapt_speaker(const Run& run, const ModelParams& si, const ModelParams& sat,
                        const std::optional<PooledClassifier>& classifier, const std::string& speaker,
                        const std::vector<const Tensor*>& feats, std::vector<PseudoLabel>* out_labels = nullptr) {
  auto labels = generate_pseudo_labels(si, feats);
  std::optional<int> cls;
  if (classifier) cls = predict_class_label(*classifier, run.config().knowledge, feats);
  TtaConfig tc = run.config().tta;
  tc.weights = run.config().weights;
  auto r = batch_tta(sat, speaker, feats, labels, cls, tc);
  if (out_labels) *out_labels = std::move(labels);
  return r;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  return out;
}

bool timing_column(const std::string& name) {
  return name.find("seconds") != std::string::npos || name.find("rtf") != std::string::npos;
}

/// CSV content with timing columns removed.
std::string strip_timing(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string line, out;
  std::vector<bool> keep;
  bool header = true;
  while (std::getline(in, line)) {
    auto cells = csv_split(line);
    if (header) {
      for (const auto& c : cells) keep.push_back(!timing_column(c));
      header = false;
    }
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (i >= keep.size() || keep[i]) out += cells[i] + ",";
    out += "\n";
  }
  return out;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

ErrorTable score(const std::vector<const Utterance*>& utts, const std::vector<LabelSequence>& hyps) {
  ErrorTable t;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const ErrorCount e = score_utterance(utts[i]->tokens, hyps[i]);
    t.by_speaker[utts[i]->speaker] += e;
    t.total += e;
  }
  return t;
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"corpus", c.corpus},
                     {"model", c.model},
                     {"router", c.router},
                     {"weights", c.weights},
                     {"knowledge", to_string(c.knowledge)},
                     {"si", c.si},
                     {"adaptive", c.adaptive},
                     {"sat", c.sat},
                     {"sd_lr", c.sd_lr},
                     {"expert_max_norm", c.expert_max_norm},
                     {"router_train", c.router_train},
                     {"router_loss", to_string(c.router_loss)},
                     {"tta", c.tta},
                     {"classifier", c.classifier},
                     {"round_robin",
                      {{"sat", c.round_robin.sat},
                       {"router", c.round_robin.router},
                       {"full_retrain", c.round_robin.full_retrain}}},
                     {"seeds", c.seeds},
                     {"seed", c.seed},
                     {"rtf_repetitions", c.rtf_repetitions},
                     {"k_grid", c.k_grid}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const std::set<std::string> known = {"corpus", "model", "router", "weights", "knowledge", "si",
                                              "adaptive", "sat", "sd_lr", "expert_max_norm", "router_train", "router_loss", "tta",
                                              "classifier", "round_robin", "seeds", "seed", "rtf_repetitions",
                                              "k_grid"};
  for (const auto& [key, v] : j.items())
    if (!known.count(key)) throw std::invalid_argument("unknown experiment config key '" + key + "'");
  ExperimentConfig d;
  c = d;
  if (j.contains("corpus")) c.corpus = j["corpus"].get<CorpusConfig>();
  if (j.contains("model")) c.model = j["model"].get<EncoderConfig>();
  if (j.contains("router")) c.router = j["router"].get<RouterConfig>();
  if (j.contains("weights")) from_json(j["weights"], c.weights);
  if (j.contains("knowledge")) c.knowledge = domain_knowledge_from_string(j["knowledge"].get<std::string>());
  if (j.contains("si")) c.si = j["si"].get<TrainConfig>();
  if (j.contains("adaptive")) c.adaptive = j["adaptive"].get<TrainConfig>();
  if (j.contains("sat")) c.sat = j["sat"].get<TrainConfig>();
  c.sd_lr = j.value("sd_lr", d.sd_lr);
  c.expert_max_norm = j.value("expert_max_norm", d.expert_max_norm);
  if (j.contains("router_train")) c.router_train = j["router_train"].get<TrainConfig>();
  if (j.contains("router_loss")) c.router_loss = router_loss_from_string(j["router_loss"].get<std::string>());
  if (j.contains("tta")) from_json(j["tta"], c.tta);
  if (j.contains("classifier")) from_json(j["classifier"], c.classifier);
  if (j.contains("round_robin")) {
    const auto& rr = j["round_robin"];
    if (rr.contains("sat")) c.round_robin.sat = rr["sat"].get<TrainConfig>();
    if (rr.contains("router")) c.round_robin.router = rr["router"].get<TrainConfig>();
    c.round_robin.full_retrain = rr.value("full_retrain", false);
  }
  c.seeds = j.value("seeds", d.seeds);
  c.seed = j.value("seed", d.seed);
  c.rtf_repetitions = j.value("rtf_repetitions", d.rtf_repetitions);
  c.k_grid = j.value("k_grid", d.k_grid);
}

void ExperimentConfig::finalize() {
  corpus.validate();
  model.vocab = corpus.alphabet + 1;
  model.width = corpus.feature_dim;
  router.width = model.width;
  const std::size_t cells = kSeverities.size() * 2;
  switch (knowledge) {
    case DomainKnowledge::none:
      model.num_classes = 0;
      break;
    case DomainKnowledge::severity:
      model.num_experts = model.num_classes = kSeverities.size();
      break;
    case DomainKnowledge::severity_gender:
      model.num_experts = model.num_classes = cells;
      break;
    case DomainKnowledge::speaker:
      model.num_experts = model.num_classes = cells * corpus.speakers_per_cell;
      break;
  }
  router.num_experts = model.num_experts;
  model.validate();
  router.validate();
  weights.validate();
  require(rtf_repetitions >= 1, "rtf_repetitions must be >= 1");
  require(!seeds.empty(), "seeds must not be empty");
}

ExperimentConfig ExperimentConfig::with_seed(std::uint64_t s) const {
  ExperimentConfig c = *this;
  c.seed = s;
  std::uint64_t k = 0;
  for (TrainConfig* t : {&c.si, &c.adaptive, &c.sat, &c.router_train, &c.round_robin.sat, &c.round_robin.router})
    t->seed = s * 1000 + ++k;
  c.classifier.seed = s * 1000 + ++k;
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  ExperimentConfig c;
  try {
    c = nlohmann::json::parse(in).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("bad config " + path.string() + ": " + e.what());
  }
  c.finalize();
  return c;
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  open_out(path) << nlohmann::json(*this).dump(2) << "\n";
}

MissingArtifact::MissingArtifact(const std::filesystem::path& path, const std::string& stage,
                                 const std::string& producer)
    : std::runtime_error("'" + stage + "' needs " + path.string() + ", which is missing; run '" + producer +
                         "' first") {}

Run::Run(std::filesystem::path dir, ExperimentConfig config) : dir_(std::move(dir)), config_(std::move(config)) {
  config_.finalize();
  std::filesystem::create_directories(dir_);
  config_.save(dir_ / "config.json");
}

Run Run::open(const std::filesystem::path& dir) {
  return Run(dir, ExperimentConfig::load(dir / "config.json"));
}

std::filesystem::path Run::need(const std::string& name, const std::string& stage, const std::string& producer) const {
  const auto p = dir_ / name;
  if (!std::filesystem::exists(p)) throw MissingArtifact(p, stage, producer);
  return p;
}

const Corpus& Run::corpus() const {
  if (!corpus_) corpus_ = load_corpus(need("corpus/manifest.txt", "this stage", "gen-corpus"));
  return *corpus_;
}

void stage_gen_corpus(Run& run) {
  Corpus c = generate_corpus(run.config().corpus, run.config().seed);
  save_corpus(c, run.path("corpus"));
}

void stage_train_si(Run& run) {
  const Corpus& corpus = run.corpus();
  std::vector<double> curve;
  ModelParams si = train_si(corpus, run.config().model, run.config().si, &curve);
  si.save(run.path("si"));
  auto out = open_out(run.path("si_curve.csv"));
  out << "epoch,ctc\n";
  for (std::size_t e = 0; e < curve.size(); ++e) out << e + 1 << "," << fmt(curve[e]) << "\n";
}

void stage_adaptive_train(Run& run) {
  const DomainKnowledge k = run.config().knowledge;
  if (k == DomainKnowledge::none) throw std::invalid_argument("adaptive-train needs domain knowledge; config has none");
  const ModelParams si = ModelParams::load(run.need("si.bin", "adaptive-train", "train-si").replace_extension());
  auto res = adaptive_train(si, run.corpus(), k, run.config().adaptive);
  res.model.save(run.path("adaptive"));
  auto audit = open_out(run.path("adaptive_audit.csv"));
  audit << "step,group,utterance\n";
  for (const auto& a : res.audit)
    for (const auto& u : a.utterances) audit << a.step << "," << a.group << "," << u << "\n";
  auto curve = open_out(run.path("adaptive_curve.csv"));
  curve << "epoch,ctc\n";
  for (std::size_t e = 0; e < res.curve.size(); ++e) curve << e + 1 << "," << fmt(res.curve[e]) << "\n";
}

void stage_sat(Run& run) {
  const auto& cfg = run.config();
  const Corpus& corpus = run.corpus();
  ModelParams init;
  if (cfg.knowledge == DomainKnowledge::none) {
    init = ModelParams::load(run.need("si.bin", "sat", "train-si").replace_extension());
  } else {
    const ModelParams adaptive = ModelParams::load(run.need("adaptive.bin", "sat", "adaptive-train").replace_extension());
    init = adaptive;
    std::vector<ParamSet> adapters;
    for (std::size_t g = 0; g < adaptive.config.num_experts; ++g) adapters.push_back(extract_expert(adaptive, g));
    init_experts_from_adaptive_training(init, adapters);
  }
  SatConfig sc{cfg.sat, cfg.weights, cfg.knowledge, cfg.sd_lr, true, cfg.expert_max_norm};
  SatResult res = sat_train(init, corpus, sc);
  res.model.save(run.path("sat"));
  save_sd_parameters(run.path("theta_s.csv"), res.theta);
  auto curve = open_out(run.path("sat_curve.csv"));
  curve << "epoch,loss,ctc\n";
  for (std::size_t e = 0; e < res.curve.size(); ++e)
    curve << e + 1 << "," << fmt(res.curve[e]) << "," << fmt(res.ctc_curve[e]) << "\n";
  auto batches = open_out(run.path("sat_batches.csv"));
  batches << "step,utterance\n";
  for (std::size_t s = 0; s < res.batch_log.size(); ++s)
    for (const auto& u : res.batch_log[s]) batches << s << "," << u << "\n";
  open_out(run.path("sat_summary.csv")) << "divergence\n" << fmt(res.divergence) << "\n";
  if (cfg.knowledge == DomainKnowledge::severity || cfg.knowledge == DomainKnowledge::severity_gender)
    train_class_predictor(corpus, cfg.knowledge, cfg.classifier).save(run.path("classifier.bin"));
}

void stage_train_router(Run& run) {
  const auto& cfg = run.config();
  const ModelParams sat = ModelParams::load(run.need("sat.bin", "train-router", "sat").replace_extension());
  const SDParameterSet theta = load_sd_parameters(run.need("theta_s.csv", "train-router", "sat"));
  RouterTrainConfig rc{cfg.router_train, cfg.weights, cfg.router_loss, cfg.knowledge};
  auto res = train_router(sat, theta, run.corpus(), cfg.router, rc);
  res.router.save(run.path("router"));
  auto curve = open_out(run.path("router_curve.csv"));
  curve << "epoch,loss\n";
  for (std::size_t e = 0; e < res.curve.size(); ++e) curve << e + 1 << "," << fmt(res.curve[e]) << "\n";
  open_out(run.path("router_summary.csv")) << "final_mse,mean_cosine\n"
                                           << fmt(res.final_mse) << "," << fmt(res.mean_cosine) << "\n";
}

void stage_tta_batch(Run& run) {
  const ModelParams si = ModelParams::load(run.need("si.bin", "tta-batch", "train-si").replace_extension());
  const ModelParams sat = ModelParams::load(run.need("sat.bin", "tta-batch", "sat").replace_extension());
  const auto classifier = load_classifier(run, "tta-batch");
  const Corpus& corpus = run.corpus();
  std::filesystem::remove(run.path("adaptation_log.csv"));
  SDParameterSet routing;
  auto pl = open_out(run.path("pseudo_labels.csv"));
  pl << "utterance,speaker,pseudo_label,usable,errors,ref_tokens\n";
  for (const auto& spk : corpus.test_speakers()) {
    const auto utts = corpus.select(Split::test, spk);
    std::vector<PseudoLabel> labels;
    auto res = adapt_speaker(run, si, sat, classifier, spk, features_of(utts), &labels);
    for (std::size_t i = 0; i < utts.size(); ++i) {
      const ErrorCount e = score_utterance(utts[i]->tokens, labels[i].tokens);
      pl << utts[i]->id << "," << spk << "," << tokens_str(labels[i].tokens) << "," << labels[i].usable << ","
         << e.errors << "," << e.ref_tokens << "\n";
    }
    append_adaptation_log(run.path("adaptation_log.csv"), res.report);
    routing[spk] = res.r;
  }
  save_sd_parameters(run.path("tta_routing.csv"), routing);
}

std::string to_string(DecodeMode m) {
  switch (m) {
    case DecodeMode::si:
      return "si";
    case DecodeMode::batch:
      return "batch";
    case DecodeMode::onfly:
      return "onfly";
    case DecodeMode::rab_like:
      return "rab_like";
  }
  return "?";
}

DecodeMode decode_mode_from_string(const std::string& s) {
  for (DecodeMode m : {DecodeMode::si, DecodeMode::batch, DecodeMode::onfly, DecodeMode::rab_like})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown mode '" + s + "' (expected si, batch, onfly or rab_like)");
}

ErrorTable stage_decode(Run& run, DecodeMode mode) {
  const Corpus& corpus = run.corpus();
  const auto utts = corpus.select(Split::test);
  require(!utts.empty(), "decode needs a non-empty test split");
  std::vector<LabelSequence> hyps(utts.size());
  std::vector<std::string> extra(utts.size());
  const std::string stage = "decode --mode " + to_string(mode);
  switch (mode) {
    case DecodeMode::si: {
      const ModelParams si = ModelParams::load(run.need("si.bin", stage, "train-si").replace_extension());
      parallel_for(utts.size(), [&](std::size_t i) { hyps[i] = decode_utterance(si, utts[i]->features).tokens; });
      break;
    }
    case DecodeMode::batch: {
      const ModelParams sat = ModelParams::load(run.need("sat.bin", stage, "sat").replace_extension());
      const auto routing = read_routing(run.need("tta_routing.csv", stage, "tta-batch"));
      parallel_for(utts.size(), [&](std::size_t i) {
        auto it = routing.find(utts[i]->speaker);
        if (it == routing.end()) throw std::runtime_error("no adapted routing for speaker " + utts[i]->speaker);
        hyps[i] = decode_utterance(sat, utts[i]->features, it->second).tokens;
      });
      break;
    }
    case DecodeMode::onfly: {
      const ModelParams sat = ModelParams::load(run.need("sat.bin", stage, "sat").replace_extension());
      const RouterParams router = RouterParams::load(run.need("router.bin", stage, "train-router").replace_extension());
      parallel_for(utts.size(), [&](std::size_t i) {
        auto res = onfly_decode(sat, router, utts[i]->features);
        hyps[i] = res.hypothesis.tokens;
        for (double v : res.r.values) extra[i] += "," + fmt(v);
      });
      break;
    }
    case DecodeMode::rab_like: {
      const ModelParams si = ModelParams::load(run.need("si.bin", stage, "train-si").replace_extension());
      const ModelParams rab = make_rab_model(si, run.config().seed);
      TtaConfig tc = run.config().tta;
      for (const auto& spk : corpus.test_speakers()) {
        const auto su = corpus.select(Split::test, spk);
        const auto feats = features_of(su);
        auto res = rab_like_tta(rab, spk, feats, generate_pseudo_labels(si, feats), tc);
        const ModelParams adapted = with_expert(rab, res.expert);
        for (std::size_t i = 0; i < utts.size(); ++i)
          if (utts[i]->speaker == spk) hyps[i] = decode_utterance(adapted, utts[i]->features, RoutingVector{{1.0}}).tokens;
      }
      break;
    }
  }
  ErrorTable table = score(utts, hyps);
  auto out = open_out(run.path("decode_" + to_string(mode) + ".csv"));
  out << "utterance,speaker,severity,reference,hypothesis,errors,ref_tokens";
  if (mode == DecodeMode::onfly)
    for (std::size_t i = 1; i <= run.config().model.num_experts; ++i) out << ",r_" << i;
  out << "\n";
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const ErrorCount e = score_utterance(utts[i]->tokens, hyps[i]);
    out << utts[i]->id << "," << utts[i]->speaker << "," << to_string(utts[i]->severity) << ","
        << tokens_str(utts[i]->tokens) << "," << tokens_str(hyps[i]) << "," << e.errors << "," << e.ref_tokens
        << extra[i] << "\n";
  }
  auto sum = open_out(run.path("summary_" + to_string(mode) + ".csv"));
  sum << "speaker,severity,errors,ref_tokens,wer\n";
  for (const auto& [spk, e] : table.by_speaker)
    sum << spk << "," << to_string(corpus.speaker(spk).severity) << "," << e.errors << "," << e.ref_tokens << ","
        << fmt(e.rate()) << "\n";
  sum << "ALL,," << table.total.errors << "," << table.total.ref_tokens << "," << fmt(table.total.rate()) << "\n";
  return table;
}

std::vector<RtfRecord> benchmark_rtf(Run& run, const std::vector<DecodeMode>& modes) {
  const Corpus& corpus = run.corpus();
  const auto utts = corpus.select(Split::test);
  require(!utts.empty(), "benchmark-rtf needs a non-empty test split");
  const ModelParams si = ModelParams::load(run.need("si.bin", "benchmark-rtf", "train-si").replace_extension());
  std::optional<ModelParams> sat;
  std::optional<RouterParams> router;
  std::optional<PooledClassifier> classifier;
  std::optional<ModelParams> rab;
  for (DecodeMode m : modes) {
    if ((m == DecodeMode::batch || m == DecodeMode::onfly) && !sat)
      sat = ModelParams::load(run.need("sat.bin", "benchmark-rtf", "sat").replace_extension());
    if (m == DecodeMode::onfly && !router)
      router = RouterParams::load(run.need("router.bin", "benchmark-rtf", "train-router").replace_extension());
    if (m == DecodeMode::batch) classifier = load_classifier(run, "benchmark-rtf");
    if (m == DecodeMode::rab_like && !rab) rab = make_rab_model(si, run.config().seed);
  }
  double audio = 0.0;
  for (const Utterance* u : utts) audio += u->duration(corpus.config.frame_rate);
  const auto speakers = corpus.test_speakers();

  auto once = [&](DecodeMode m) {
    const auto t0 = Clock::now();
    switch (m) {
      case DecodeMode::si:
        for (const Utterance* u : utts) (void)decode_utterance(si, u->features);
        break;
      case DecodeMode::onfly:
        for (const Utterance* u : utts) (void)onfly_decode(*sat, *router, u->features);
        break;
      case DecodeMode::batch:
        for (const auto& spk : speakers) {
          const auto su = corpus.select(Split::test, spk);
          auto res = adapt_speaker(run, si, *sat, classifier, spk, features_of(su));
          for (const Utterance* u : su) (void)decode_utterance(*sat, u->features, res.r);
        }
        break;
      case DecodeMode::rab_like:
        for (const auto& spk : speakers) {
          const auto su = corpus.select(Split::test, spk);
          const auto feats = features_of(su);
          auto res = rab_like_tta(*rab, spk, feats, generate_pseudo_labels(si, feats), run.config().tta);
          const ModelParams adapted = with_expert(*rab, res.expert);
          for (const Utterance* u : su) (void)decode_utterance(adapted, u->features, RoutingVector{{1.0}});
        }
        break;
    }
    return std::chrono::duration<double>(Clock::now() - t0).count();
  };

  std::vector<RtfRecord> records;
  for (DecodeMode m : modes) {
    (void)once(m);  // warm-up
    std::vector<double> times;
    for (std::size_t r = 0; r < run.config().rtf_repetitions; ++r) times.push_back(once(m));
    records.push_back({m, median(times), audio});
  }
  auto out = open_out(run.path("rtf.csv"));
  out << "mode,wall_seconds,audio_seconds,rtf\n";
  for (const auto& r : records)
    out << to_string(r.mode) << "," << fmt(r.wall_seconds) << "," << fmt(r.audio_seconds) << "," << fmt(r.rtf())
        << "\n";
  return records;
}

std::vector<RoundRobinRow> round_robin(Run& run, const std::vector<std::string>& requested) {
  const auto& cfg = run.config();
  const Corpus& corpus = run.corpus();
  const ModelParams si = ModelParams::load(run.need("si.bin", "round-robin", "train-si").replace_extension());
  const ModelParams sat = ModelParams::load(run.need("sat.bin", "round-robin", "sat").replace_extension());
  const RouterParams router = RouterParams::load(run.need("router.bin", "round-robin", "train-router").replace_extension());
  const SDParameterSet theta = load_sd_parameters(run.need("theta_s.csv", "round-robin", "sat"));

  std::map<std::pair<Severity, Gender>, std::size_t> cell_size;
  for (const auto& s : corpus.speakers) ++cell_size[{s.severity, s.gender}];
  const auto speakers = requested.empty() ? corpus.test_speakers() : requested;
  std::vector<RoundRobinRow> rows;
  for (const auto& spk : speakers) {
    const SpeakerProfile& prof = corpus.speaker(spk);
    if (cell_size[{prof.severity, prof.gender}] < 2)
      throw std::invalid_argument("round-robin needs >= 2 speakers per cell; " + spk + " is alone in its cell");
    SatConfig sc{cfg.round_robin.sat, cfg.weights, cfg.knowledge, cfg.sd_lr, cfg.round_robin.full_retrain,
                 cfg.expert_max_norm};
    SatResult held = sat_train(sat, corpus, sc, {spk}, &theta);
    RouterTrainConfig rc{cfg.round_robin.router, cfg.weights, cfg.router_loss, cfg.knowledge};
    RouterParams rr_router = train_router(held.model, held.theta, corpus, cfg.router, rc, {spk}).router;

    RoundRobinRow row;
    row.speaker = spk;
    row.severity = prof.severity;
    for (const auto& batch : held.batch_log)
      for (const auto& id : batch)
        if (id.rfind(spk + "_", 0) == 0) row.audit_clean = false;
    if (held.theta.count(spk)) row.audit_clean = false;
    const auto utts = corpus.select(Split::test, spk);
    std::vector<ErrorCount> e_si(utts.size()), e_full(utts.size()), e_rr(utts.size());
    parallel_for(utts.size(), [&](std::size_t i) {
      const auto& ref = utts[i]->tokens;
      e_si[i] = score_utterance(ref, decode_utterance(si, utts[i]->features).tokens);
      e_full[i] = score_utterance(ref, onfly_decode(sat, router, utts[i]->features).hypothesis.tokens);
      e_rr[i] = score_utterance(ref, onfly_decode(held.model, rr_router, utts[i]->features).hypothesis.tokens);
    });
    for (std::size_t i = 0; i < utts.size(); ++i) {
      row.si += e_si[i];
      row.onfly_full += e_full[i];
      row.round_robin += e_rr[i];
    }
    rows.push_back(row);
  }
  auto out = open_out(run.path("round_robin.csv"));
  out << "speaker,severity,ref_tokens,si_errors,onfly_full_errors,round_robin_errors,si_wer,onfly_full_wer,"
         "round_robin_wer,audit_clean\n";
  for (const auto& r : rows)
    out << r.speaker << "," << to_string(r.severity) << "," << r.si.ref_tokens << "," << r.si.errors << ","
        << r.onfly_full.errors << "," << r.round_robin.errors << "," << fmt(r.si.rate()) << ","
        << fmt(r.onfly_full.rate()) << "," << fmt(r.round_robin.rate()) << "," << r.audit_clean << "\n";
  return rows;
}

std::vector<std::size_t> default_k_grid(const Run& run) {
  const Corpus& corpus = run.corpus();
  std::size_t avail = std::numeric_limits<std::size_t>::max();
  for (const auto& spk : corpus.test_speakers()) avail = std::min(avail, corpus.select(Split::adapt, spk).size());
  require(avail != std::numeric_limits<std::size_t>::max() && avail > 0, "no adaptation utterances");
  std::vector<std::size_t> ks;
  for (std::size_t k : run.config().k_grid) {
    const std::size_t v = k == 0 ? avail : k;
    if (v <= avail && std::find(ks.begin(), ks.end(), v) == ks.end()) ks.push_back(v);
  }
  std::sort(ks.begin(), ks.end());
  return ks;
}

CurveResult data_quantity_curve(Run& run, const std::vector<std::size_t>& ks) {
  const Corpus& corpus = run.corpus();
  const ModelParams si = ModelParams::load(run.need("si.bin", "curves", "train-si").replace_extension());
  const ModelParams sat = ModelParams::load(run.need("sat.bin", "curves", "sat").replace_extension());
  const RouterParams router = RouterParams::load(run.need("router.bin", "curves", "train-router").replace_extension());
  const auto classifier = load_classifier(run, "curves");
  require(!ks.empty(), "curves needs at least one k");
  TtaConfig tc = run.config().tta;
  tc.weights = run.config().weights;

  const auto speakers = corpus.test_speakers();
  std::map<std::size_t, ErrorCount> errors;
  std::map<std::size_t, double> cosine;
  ErrorCount onfly;
  auto detail = open_out(run.path("curves_speakers.csv"));
  detail << "speaker,k,errors,ref_tokens,cosine\n";
  for (const auto& spk : speakers) {
    const auto adapt = corpus.select(Split::adapt, spk);
    const auto test = corpus.select(Split::test, spk);
    for (std::size_t k : ks)
      if (k == 0 || k > adapt.size())
        throw std::invalid_argument("k=" + std::to_string(k) + " exceeds the " + std::to_string(adapt.size()) +
                                    " adaptation utterances of " + spk);
    const auto feats = features_of(adapt);
    const auto labels = generate_pseudo_labels(si, feats);
    std::optional<int> cls;
    auto tta_on = [&](std::size_t k) {
      std::vector<const Tensor*> f(feats.begin(), feats.begin() + static_cast<std::ptrdiff_t>(k));
      std::vector<PseudoLabel> l(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(k));
      if (classifier) cls = predict_class_label(*classifier, run.config().knowledge, f);
      if (std::none_of(l.begin(), l.end(), [](const PseudoLabel& p) { return p.usable; }))
        return RoutingVector::uniform(sat.config.num_experts);  // nothing to adapt on
      return batch_tta(sat, spk, f, l, cls, tc).r;
    };
    const RoutingVector full = tta_on(adapt.size());
    for (std::size_t k : ks) {
      const RoutingVector rk = k == adapt.size() ? full : tta_on(k);
      ErrorCount e;
      for (const Utterance* u : test) e += score_utterance(u->tokens, decode_utterance(sat, u->features, rk).tokens);
      const double c = cosine_similarity(rk.tensor().data(), full.tensor().data());
      errors[k] += e;
      cosine[k] += c / static_cast<double>(speakers.size());
      detail << spk << "," << k << "," << e.errors << "," << e.ref_tokens << "," << fmt(c) << "\n";
    }
    for (const Utterance* u : test) onfly += score_utterance(u->tokens, onfly_decode(sat, router, u->features).hypothesis.tokens);
  }
  CurveResult res;
  std::vector<double> w, c;
  for (std::size_t k : ks) {
    res.points.push_back({k, errors[k].rate(), cosine[k]});
    w.push_back(errors[k].rate());
    c.push_back(cosine[k]);
  }
  res.onfly_wer = onfly.rate();
  res.pearson = pearson_correlation(w, c);
  auto out = open_out(run.path("curves.csv"));
  out << "k,wer,cosine_similarity,onfly_wer\n";
  for (const auto& p : res.points) out << p.k << "," << fmt(p.wer) << "," << fmt(p.cosine) << "," << fmt(res.onfly_wer) << "\n";
  open_out(run.path("curves_summary.csv")) << "pearson,onfly_wer,batch_wer_k1\n"
                                           << fmt(res.pearson) << "," << fmt(res.onfly_wer) << ","
                                           << fmt(res.points.front().wer) << "\n";
  return res;
}

RoutingSummary routing_similarity(const std::string& setting, const Corpus& corpus,
                                  const std::map<std::string, RoutingVector>& routing) {
  RoutingSummary s{setting, 0.0, 0.0};
  std::size_t n_intra = 0, n_inter = 0;
  for (auto a = routing.begin(); a != routing.end(); ++a)
    for (auto b = std::next(a); b != routing.end(); ++b) {
      const double c = cosine_similarity(a->second.tensor().data(), b->second.tensor().data());
      if (corpus.speaker(a->first).severity == corpus.speaker(b->first).severity) {
        s.intra += c;
        ++n_intra;
      } else {
        s.inter += c;
        ++n_inter;
      }
    }
  if (n_intra) s.intra /= static_cast<double>(n_intra);
  if (n_inter) s.inter /= static_cast<double>(n_inter);
  return s;
}

std::vector<RoutingSummary> export_routing(Run& run) {
  const auto& cfg = run.config();
  const Corpus& corpus = run.corpus();
  const ModelParams si = ModelParams::load(run.need("si.bin", "export-routing", "train-si").replace_extension());
  const ModelParams sat = ModelParams::load(run.need("sat.bin", "export-routing", "sat").replace_extension());
  const RouterParams router =
      RouterParams::load(run.need("router.bin", "export-routing", "train-router").replace_extension());
  const auto batch_dk = read_routing(run.need("tta_routing.csv", "export-routing", "tta-batch"));
  const auto speakers = corpus.test_speakers();

  // Comparison arm without domain knowledge: randomly initialized experts, no CE.
  std::map<std::string, RoutingVector> batch_nodk;
  {
    ModelParams plain;
    if (std::filesystem::exists(run.path("sat_nodk.bin"))) {
      plain = ModelParams::load(run.path("sat_nodk"));
    } else {
      EncoderConfig mc = si.config;
      mc.num_experts = sat.config.num_experts;
      mc.num_classes = 0;
      ModelParams init = ModelParams::init(mc, cfg.seed * 1000 + 77);
      for (auto& [name, t] : init.tensors)
        if (!is_expert_param(name) && si.tensors.count(name)) t = si.tensors.at(name);
      SatConfig sc{cfg.sat, cfg.weights, DomainKnowledge::none, cfg.sd_lr, true, cfg.expert_max_norm};
      plain = sat_train(init, corpus, sc).model;
      plain.save(run.path("sat_nodk"));
    }
    TtaConfig tc = cfg.tta;
    tc.weights = cfg.weights;
    for (const auto& spk : speakers) {
      const auto feats = features_of(corpus.select(Split::test, spk));
      batch_nodk[spk] = batch_tta(plain, spk, feats, generate_pseudo_labels(si, feats), std::nullopt, tc).r;
    }
  }
  std::map<std::string, RoutingVector> onfly_dk;
  for (const auto& spk : speakers) {
    const auto utts = corpus.select(Split::test, spk);
    RoutingVector mean = RoutingVector::zeros(sat.config.num_experts);
    for (const Utterance* u : utts) {
      const auto r = onfly_decode(sat, router, u->features).r;
      for (std::size_t i = 0; i < r.size(); ++i) mean.values[i] += r.values[i] / static_cast<double>(utts.size());
    }
    onfly_dk[spk] = mean;
  }

  std::vector<RoutingSummary> out;
  for (const auto& [name, routing] : std::vector<std::pair<std::string, std::map<std::string, RoutingVector>>>{
           {"batch_nodk", batch_nodk}, {"batch_dk", batch_dk}, {"onfly_dk", onfly_dk}}) {
    auto heat = open_out(run.path("routing_" + name + ".csv"));
    const std::size_t n = routing.empty() ? 0 : routing.begin()->second.size();
    heat << "speaker,severity";
    for (std::size_t i = 1; i <= n; ++i) heat << ",r_" << i;
    heat << "\n";
    for (const auto& [spk, r] : routing) {
      heat << spk << "," << to_string(corpus.speaker(spk).severity);
      for (double v : r.values) heat << "," << fmt(v);
      heat << "\n";
    }
    out.push_back(routing_similarity(name, corpus, routing));
  }
  auto sum = open_out(run.path("routing_summary.csv"));
  sum << "setting,intra_cosine,inter_cosine,gap\n";
  for (const auto& s : out) sum << s.setting << "," << fmt(s.intra) << "," << fmt(s.inter) << "," << fmt(s.gap()) << "\n";
  return out;
}

void run_pipeline(Run& run) {
  if (!std::filesystem::exists(run.path("corpus/manifest.txt"))) stage_gen_corpus(run);
  stage_train_si(run);
  if (run.config().knowledge != DomainKnowledge::none) stage_adaptive_train(run);
  stage_sat(run);
  stage_train_router(run);
  stage_tta_batch(run);
  for (DecodeMode m : {DecodeMode::si, DecodeMode::batch, DecodeMode::onfly}) stage_decode(run, m);
}

std::vector<std::string> compare_runs(const std::filesystem::path& a, const std::filesystem::path& b) {
  std::vector<std::string> diffs;
  std::set<std::string> seen;
  for (const auto& root : {a, b})
    for (const auto& e : std::filesystem::recursive_directory_iterator(root))
      if (e.is_regular_file()) seen.insert(std::filesystem::relative(e.path(), root).generic_string());
  for (const auto& rel : seen) {
    if (rel == "rtf.csv") continue;  // timing only
    const auto pa = a / rel, pb = b / rel;
    if (!std::filesystem::exists(pa) || !std::filesystem::exists(pb)) {
      diffs.push_back(rel + " (missing in one run)");
      continue;
    }
    const bool csv = std::filesystem::path(rel).extension() == ".csv";
    const bool same = csv ? strip_timing(pa) == strip_timing(pb) : file_bytes(pa) == file_bytes(pb);
    if (!same) diffs.push_back(rel);
  }
  return diffs;
}

double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size() && x.size() >= 2, "pearson needs two equal-length series of length >= 2");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace moe
