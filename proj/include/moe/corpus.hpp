// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic dysarthric-speaker corpus. Words over a small symbol alphabet are
// rendered as feature sequences and distorted per speaker.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "moe/losses.hpp"
#include "moe/tensor.hpp"

namespace moe {

/// Ordered from most to least impaired; Control is unimpaired.
enum class Severity { VL, L, M, H, Control };
enum class Gender { F, M };
enum class Split { train, test, adapt };

inline constexpr std::array<Severity, 5> kSeverities = {Severity::VL, Severity::L, Severity::M, Severity::H,
                                                        Severity::Control};

std::string to_string(Severity s);
std::string to_string(Gender g);
std::string to_string(Split s);
Severity severity_from_string(const std::string& s);
Gender gender_from_string(const std::string& s);
Split split_from_string(const std::string& s);
inline bool is_dysarthric(Severity s) { return s != Severity::Control; }
/// 0..4 in kSeverities order.
std::size_t severity_index(Severity s);

/// Per-severity values indexed in kSeverities order.
using SeverityScale = std::array<double, 5>;

struct CorpusConfig {
  std::size_t speakers_per_cell = 2;
  std::size_t alphabet = 12;
  std::size_t vocab_words = 30;
  std::size_t min_word_len = 3;
  std::size_t max_word_len = 5;
  std::size_t blocks = 4;  // 1 and 3 train, 2 test, 4 adaptation; control speakers train on all
  std::size_t utts_per_block = 20;
  std::size_t feature_dim = 32;
  double frame_rate = 100.0;
  std::size_t frames_per_symbol = 4;
  std::size_t silence_frames = 2;

  SeverityScale noise = {0.7, 0.55, 0.4, 0.25, 0.1};
  SeverityScale blur = {3, 2, 1, 1, 0};  // moving-average half-width in frames
  SeverityScale stretch = {1.5, 1.35, 1.2, 1.1, 1.0};
  double stretch_jitter = 0.05;
  /// Per-severity weight of a substituted symbol blended into each symbol's
  /// prototype; the substitution map is fixed per severity.
  SeverityScale substitution = {0.8, 0.65, 0.5, 0.3, 0.0};
  double offset_norm = 1.0;  // speaker offset vector norm bound
  bool gender_permute = true;
  double gender_bias = 0.6;

  void validate() const;
};

void to_json(nlohmann::json& j, const CorpusConfig& c);
void from_json(const nlohmann::json& j, CorpusConfig& c);

struct SpeakerProfile {
  std::string id;
  Severity severity = Severity::Control;
  Gender gender = Gender::F;
  std::vector<double> offset;
  double stretch = 1.0;
};

struct Utterance {
  std::string id;
  std::string speaker;
  Severity severity = Severity::Control;
  Gender gender = Gender::F;
  Split split = Split::train;
  std::size_t block = 1;
  LabelSequence tokens;
  Tensor features;
  std::string feature_file;  // relative to the manifest directory

  std::size_t frames() const { return features.rows(); }
  double duration(double frame_rate) const { return static_cast<double>(frames()) / frame_rate; }
};

struct Corpus {
  CorpusConfig config;
  std::uint64_t seed = 0;
  std::vector<SpeakerProfile> speakers;
  std::vector<std::vector<int>> words;  // symbol spelling per word
  std::vector<Utterance> utterances;

  /// Label vocabulary including the blank (alphabet + 1).
  std::size_t vocab() const { return config.alphabet + 1; }
  const SpeakerProfile& speaker(const std::string& id) const;
  std::vector<const Utterance*> select(std::optional<Split> split, const std::string& speaker = "") const;
  std::vector<std::string> test_speakers() const;
  std::vector<std::string> speaker_ids() const;
};

/// Symbol prototypes (alphabet × F) and the silence frame, deterministic per seed.
Tensor symbol_prototypes(const CorpusConfig& config, std::uint64_t seed);
Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed);

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes manifest.txt, corpus.json, checksums.txt and feats/*.bin under dir.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Loads a saved corpus, verifying every feature file against its checksum.
Corpus load_corpus(const std::filesystem::path& manifest, std::optional<Split> split = std::nullopt);

/// Manifest line `utt_id|spk_id|severity|gender|split|ref_tokens|feature_file|T`.
std::string manifest_line(const Utterance& u);

/// Mean and standard deviation over time, concatenated (2F).
std::vector<double> pooled_features(const Tensor& features);

}  // namespace moe
