// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment drivers. Every stage reads and writes artifacts in a run
// directory, so the CLI and the acceptance suite share one code path.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "moe/adaptation.hpp"

namespace moe {

struct RoundRobinConfig {
  TrainConfig sat{4, 8, 1e-3, 5.0, 1005};
  TrainConfig router{10, 16, 3e-3, 5.0, 1006};
  bool full_retrain = false;  // retrain the backbone too
};

struct ExperimentConfig {
  CorpusConfig corpus;
  EncoderConfig model;
  RouterConfig router;
  LossWeights weights;
  DomainKnowledge knowledge = DomainKnowledge::severity_gender;
  // Stage seeds default to with_seed(1).
  TrainConfig si{30, 8, 2e-3, 5.0, 1001};
  TrainConfig adaptive{10, 8, 1e-3, 5.0, 1002};
  TrainConfig sat{15, 8, 1e-3, 5.0, 1003};
  double sd_lr = 1e-2;
  double expert_max_norm = 0.1;
  TrainConfig router_train{20, 16, 3e-3, 5.0, 1004};
  RouterLoss router_loss = RouterLoss::full;
  TtaConfig tta;
  ClassifierConfig classifier{32, 300, 1e-2, 1007};
  RoundRobinConfig round_robin;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::uint64_t seed = 1;  // the seed of this run
  std::size_t rtf_repetitions = 3;
  std::vector<std::size_t> k_grid = {1, 2, 5, 10, 20, 0};  // 0 = all

  /// Derives dependent dimensions (vocabulary, widths, expert and class
  /// counts) from the corpus and domain knowledge, then validates.
  void finalize();
  /// Copy with every stage seed derived from the given run seed.
  ExperimentConfig with_seed(std::uint64_t seed) const;

  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::filesystem::path& path, const std::string& stage, const std::string& producer);
};

/// A run directory plus the configuration it was produced with.
class Run {
 public:
  Run(std::filesystem::path dir, ExperimentConfig config);
  /// Opens an existing run, reading its stored config.json.
  static Run open(const std::filesystem::path& dir);

  const std::filesystem::path& dir() const { return dir_; }
  const ExperimentConfig& config() const { return config_; }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }
  /// Throws MissingArtifact naming the file and the stage that produces it.
  std::filesystem::path need(const std::string& name, const std::string& stage, const std::string& producer) const;

  const Corpus& corpus() const;

 private:
  std::filesystem::path dir_;
  ExperimentConfig config_;
  mutable std::optional<Corpus> corpus_;
};

// Pipeline stages; each writes its artifacts into the run directory.
void stage_gen_corpus(Run& run);
void stage_train_si(Run& run);
void stage_adaptive_train(Run& run);
void stage_sat(Run& run);
void stage_train_router(Run& run);
void stage_tta_batch(Run& run);

enum class DecodeMode { si, batch, onfly, rab_like };
std::string to_string(DecodeMode m);
DecodeMode decode_mode_from_string(const std::string& s);

struct ErrorTable {
  std::map<std::string, ErrorCount> by_speaker;
  ErrorCount total;
};

/// Decodes the test split; writes decode_<mode>.csv.
ErrorTable stage_decode(Run& run, DecodeMode mode);

struct RtfRecord {
  DecodeMode mode = DecodeMode::si;
  double wall_seconds = 0.0;  // median over repetitions
  double audio_seconds = 0.0;
  double rtf() const { return wall_seconds / audio_seconds; }
};

/// Times each mode over the test split after a warm-up; writes rtf.csv.
std::vector<RtfRecord> benchmark_rtf(Run& run, const std::vector<DecodeMode>& modes);

struct RoundRobinRow {
  std::string speaker;
  Severity severity = Severity::Control;
  ErrorCount si, onfly_full, round_robin;
  bool audit_clean = true;
};

/// Leave-one-speaker-out on-the-fly evaluation; writes round_robin.csv.
std::vector<RoundRobinRow> round_robin(Run& run, const std::vector<std::string>& speakers = {});

struct CurvePoint {
  std::size_t k = 0;
  double wer = 0.0;
  double cosine = 0.0;
};

struct CurveResult {
  std::vector<CurvePoint> points;
  double onfly_wer = 0.0;  // per-utterance on-the-fly, one utterance each
  double pearson = 0.0;    // between the wer and cosine columns
};

/// Batch TTA on the first k adaptation utterances of each test speaker, scored
/// on the test block. Throws if a requested k exceeds the available count.
CurveResult data_quantity_curve(Run& run, const std::vector<std::size_t>& ks);
/// The configured grid clipped to the available adaptation utterances.
std::vector<std::size_t> default_k_grid(const Run& run);

struct RoutingSummary {
  std::string setting;
  double intra = 0.0;
  double inter = 0.0;
  double gap() const { return intra - inter; }
};

/// Mean intra- and inter-severity cosine similarity across speakers.
RoutingSummary routing_similarity(const std::string& setting, const Corpus& corpus,
                                  const std::map<std::string, RoutingVector>& routing);

/// Writes routing_<setting>.csv heatmaps and routing_summary.csv for batch
/// without domain knowledge, batch with, and on-the-fly with.
std::vector<RoutingSummary> export_routing(Run& run);

/// Runs every stage needed for the main comparisons.
void run_pipeline(Run& run);

/// Files under two run directories that differ, ignoring timing columns and files.
std::vector<std::string> compare_runs(const std::filesystem::path& a, const std::filesystem::path& b);

double pearson_correlation(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace moe
