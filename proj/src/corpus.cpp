// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "moe/checkpoint.hpp"

namespace moe {

namespace {

constexpr std::uint64_t kGenderSeed = 0x6e6465726d617073ULL;

template <typename E, std::size_t N>
E parse_enum(const std::string& s, const std::array<const char*, N>& names, const char* what) {
  for (std::size_t i = 0; i < N; ++i)
    if (s == names[i]) return static_cast<E>(i);
  throw std::invalid_argument(std::string("unknown ") + what + " '" + s + "'");
}

constexpr std::array<const char*, 5> kSeverityNames = {"VL", "L", "M", "H", "Control"};
constexpr std::array<const char*, 2> kGenderNames = {"F", "M"};
constexpr std::array<const char*, 3> kSplitNames = {"train", "test", "adapt"};

std::vector<std::vector<int>> make_words(const CorpusConfig& c, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(c.min_word_len, c.max_word_len);
  std::uniform_int_distribution<int> sym(0, static_cast<int>(c.alphabet) - 1);
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> words;
  while (words.size() < c.vocab_words) {
    std::vector<int> w(len(rng));
    for (std::size_t i = 0; i < w.size(); ++i) {
      do w[i] = sym(rng);
      while (i > 0 && w[i] == w[i - 1]);
    }
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  return words;
}

struct GenderTransform {
  std::vector<std::size_t> perm;
  std::vector<double> bias;
};

GenderTransform gender_transform(const CorpusConfig& c) {
  GenderTransform g;
  g.perm.resize(c.feature_dim);
  std::iota(g.perm.begin(), g.perm.end(), 0);
  std::mt19937_64 rng(kGenderSeed);
  if (c.gender_permute) std::shuffle(g.perm.begin(), g.perm.end(), rng);
  g.bias.resize(c.feature_dim);
  std::bernoulli_distribution sign(0.5);
  for (auto& b : g.bias) b = sign(rng) ? c.gender_bias : -c.gender_bias;
  return g;
}

/// Derangement of the alphabet for one severity, from a fixed seed.
std::vector<std::size_t> substitution_map(const CorpusConfig& c, std::size_t severity) {
  std::vector<std::size_t> m(c.alphabet);
  std::iota(m.begin(), m.end(), 0);
  std::mt19937_64 rng(kGenderSeed + 1 + severity);
  std::shuffle(m.begin(), m.end(), rng);
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i] == i) std::swap(m[i], m[(i + 1) % m.size()]);
  return m;
}

Tensor blur(const Tensor& x, std::size_t half) {
  if (half == 0) return x;
  const std::size_t T = x.rows(), F = x.cols();
  Tensor out({T, F}, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t lo = t >= half ? t - half : 0, hi = std::min(T - 1, t + half);
    const double n = static_cast<double>(hi - lo + 1);
    for (std::size_t s = lo; s <= hi; ++s)
      for (std::size_t f = 0; f < F; ++f) out(t, f) += x(s, f) / n;
  }
  return out;
}

Tensor render(const Corpus& corpus, const Tensor& protos, const GenderTransform& gt, const SpeakerProfile& spk,
              const LabelSequence& tokens, std::mt19937_64& rng) {
  const CorpusConfig& c = corpus.config;
  const std::size_t F = c.feature_dim, sil = c.alphabet;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::size_t> frames(c.silence_frames, sil);
  for (int tok : tokens) {
    const double d = static_cast<double>(c.frames_per_symbol) * spk.stretch * (1.0 + c.stretch_jitter * normal(rng));
    const std::size_t dur = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(d)));
    frames.insert(frames.end(), dur, static_cast<std::size_t>(tok));
  }
  frames.insert(frames.end(), c.silence_frames, sil);

  const std::size_t si = severity_index(spk.severity);
  const double lambda = c.substitution[si];
  const auto sub = substitution_map(c, si);
  Tensor x({frames.size(), F});
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const std::size_t k = frames[t];
    for (std::size_t f = 0; f < F; ++f)
      x(t, f) = k == sil ? protos(k, f) : (1.0 - lambda) * protos(k, f) + lambda * protos(sub[k], f);
  }
  x = blur(x, static_cast<std::size_t>(c.blur[si]));
  const double sigma = c.noise[si];
  for (std::size_t t = 0; t < x.rows(); ++t) {
    std::vector<double> row(F);
    for (std::size_t f = 0; f < F; ++f) {
      const double v = spk.gender == Gender::M ? x(t, gt.perm[f]) + gt.bias[f] : x(t, f);
      row[f] = v + spk.offset[f];
    }
    for (std::size_t f = 0; f < F; ++f) x(t, f) = row[f] + (sigma > 0 ? sigma * normal(rng) : 0.0);
  }
  return x;
}

std::string join_tokens(const LabelSequence& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + std::to_string(t[i]);
  return s;
}

LabelSequence parse_tokens(const std::string& s) {
  LabelSequence t;
  std::istringstream in(s);
  int v;
  while (in >> v) t.push_back(v);
  return t;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

std::vector<std::string> split_on(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::string to_string(Severity s) { return kSeverityNames[static_cast<std::size_t>(s)]; }
std::string to_string(Gender g) { return kGenderNames[static_cast<std::size_t>(g)]; }
std::string to_string(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }
Severity severity_from_string(const std::string& s) { return parse_enum<Severity>(s, kSeverityNames, "severity"); }
Gender gender_from_string(const std::string& s) { return parse_enum<Gender>(s, kGenderNames, "gender"); }
Split split_from_string(const std::string& s) { return parse_enum<Split>(s, kSplitNames, "split"); }
std::size_t severity_index(Severity s) { return static_cast<std::size_t>(s); }

void CorpusConfig::validate() const {
  require(speakers_per_cell >= 1, "corpus cells are empty: speakers_per_cell must be >= 1");
  require(vocab_words >= 2, "vocabulary must have at least 2 words");
  require(alphabet >= 2, "alphabet must have at least 2 symbols");
  require(min_word_len >= 1 && min_word_len <= max_word_len, "word length range is empty");
  const double capacity = static_cast<double>(alphabet) * std::pow(static_cast<double>(alphabet - 1),
                                                                    static_cast<double>(max_word_len - 1));
  require(capacity >= static_cast<double>(vocab_words), "alphabet too small for the requested vocabulary");
  require(blocks >= 3 && utts_per_block >= 1, "need at least 3 blocks (train, test, train) of >= 1 utterance");
  require(feature_dim >= 1 && frames_per_symbol >= 1 && frame_rate > 0, "feature geometry must be positive");
  for (std::size_t i = 0; i < 5; ++i)
    require(noise[i] >= 0 && blur[i] >= 0 && stretch[i] > 0 && substitution[i] >= 0 && substitution[i] <= 1,
            "distortion scales must be non-negative and substitution weights in [0, 1]");
  require(offset_norm >= 0 && stretch_jitter >= 0, "offset_norm and stretch_jitter must be non-negative");
}

void to_json(nlohmann::json& j, const CorpusConfig& c) {
  j = nlohmann::json{{"speakers_per_cell", c.speakers_per_cell},
                     {"alphabet", c.alphabet},
                     {"vocab_words", c.vocab_words},
                     {"min_word_len", c.min_word_len},
                     {"max_word_len", c.max_word_len},
                     {"blocks", c.blocks},
                     {"utts_per_block", c.utts_per_block},
                     {"feature_dim", c.feature_dim},
                     {"frame_rate", c.frame_rate},
                     {"frames_per_symbol", c.frames_per_symbol},
                     {"silence_frames", c.silence_frames},
                     {"noise", c.noise},
                     {"blur", c.blur},
                     {"stretch", c.stretch},
                     {"stretch_jitter", c.stretch_jitter},
                     {"substitution", c.substitution},
                     {"offset_norm", c.offset_norm},
                     {"gender_permute", c.gender_permute},
                     {"gender_bias", c.gender_bias}};
}

void from_json(const nlohmann::json& j, CorpusConfig& c) {
  CorpusConfig d;
  c.speakers_per_cell = j.value("speakers_per_cell", d.speakers_per_cell);
  c.alphabet = j.value("alphabet", d.alphabet);
  c.vocab_words = j.value("vocab_words", d.vocab_words);
  c.min_word_len = j.value("min_word_len", d.min_word_len);
  c.max_word_len = j.value("max_word_len", d.max_word_len);
  c.blocks = j.value("blocks", d.blocks);
  c.utts_per_block = j.value("utts_per_block", d.utts_per_block);
  c.feature_dim = j.value("feature_dim", d.feature_dim);
  c.frame_rate = j.value("frame_rate", d.frame_rate);
  c.frames_per_symbol = j.value("frames_per_symbol", d.frames_per_symbol);
  c.silence_frames = j.value("silence_frames", d.silence_frames);
  c.noise = j.value("noise", d.noise);
  c.blur = j.value("blur", d.blur);
  c.stretch = j.value("stretch", d.stretch);
  c.stretch_jitter = j.value("stretch_jitter", d.stretch_jitter);
  c.substitution = j.value("substitution", d.substitution);
  c.offset_norm = j.value("offset_norm", d.offset_norm);
  c.gender_permute = j.value("gender_permute", d.gender_permute);
  c.gender_bias = j.value("gender_bias", d.gender_bias);
}

const SpeakerProfile& Corpus::speaker(const std::string& id) const {
  for (const auto& s : speakers)
    if (s.id == id) return s;
  throw std::invalid_argument("unknown speaker '" + id + "'");
}

std::vector<const Utterance*> Corpus::select(std::optional<Split> split, const std::string& spk) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utterances)
    if ((!split || u.split == *split) && (spk.empty() || u.speaker == spk)) out.push_back(&u);
  return out;
}

std::vector<std::string> Corpus::test_speakers() const {
  std::vector<std::string> out;
  for (const auto& s : speakers)
    if (!select(Split::test, s.id).empty()) out.push_back(s.id);
  return out;
}

std::vector<std::string> Corpus::speaker_ids() const {
  std::vector<std::string> out;
  for (const auto& s : speakers) out.push_back(s.id);
  return out;
}

Tensor symbol_prototypes(const CorpusConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x70726f746fULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor p({config.alphabet + 1, config.feature_dim}, 0.0);  // last row: silence
  for (std::size_t k = 0; k < config.alphabet; ++k)
    for (std::size_t f = 0; f < config.feature_dim; ++f) p(k, f) = normal(rng);
  return p;
}

Corpus generate_corpus(const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  Corpus corpus;
  corpus.config = config;
  corpus.seed = seed;
  std::mt19937_64 rng(seed);
  corpus.words = make_words(config, rng);
  const Tensor protos = symbol_prototypes(config, seed);
  const GenderTransform gt = gender_transform(config);

  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.5, 1.0);
  for (Severity sev : kSeverities)
    for (Gender g : {Gender::F, Gender::M})
      for (std::size_t k = 1; k <= config.speakers_per_cell; ++k) {
        SpeakerProfile s;
        s.id = to_string(sev) + "-" + to_string(g) + std::to_string(k);
        s.severity = sev;
        s.gender = g;
        s.offset.resize(config.feature_dim);
        double norm = 0.0;
        for (auto& v : s.offset) {
          v = normal(rng);
          norm += v * v;
        }
        const double target = config.offset_norm * unit(rng);
        for (auto& v : s.offset) v *= norm > 0 ? target / std::sqrt(norm) : 0.0;
        s.stretch = config.stretch[severity_index(sev)];
        corpus.speakers.push_back(std::move(s));
      }

  std::uniform_int_distribution<std::size_t> pick(0, corpus.words.size() - 1);
  for (const auto& s : corpus.speakers) {
    std::mt19937_64 srng(rng());
    for (std::size_t b = 1; b <= config.blocks; ++b) {
      Split split = Split::train;
      if (is_dysarthric(s.severity)) split = b == 2 ? Split::test : b == 4 ? Split::adapt : Split::train;
      for (std::size_t n = 1; n <= config.utts_per_block; ++n) {
        Utterance u;
        std::ostringstream id;
        id << s.id << "_B" << b << "_" << std::setw(3) << std::setfill('0') << n;
        u.id = id.str();
        u.speaker = s.id;
        u.severity = s.severity;
        u.gender = s.gender;
        u.split = split;
        u.block = b;
        const auto& w = corpus.words[pick(srng)];
        u.tokens.assign(w.begin(), w.end());
        u.features = render(corpus, protos, gt, s, u.tokens, srng);
        u.feature_file = "feats/" + u.id + ".bin";
        corpus.utterances.push_back(std::move(u));
      }
    }
  }
  return corpus;
}

std::string manifest_line(const Utterance& u) {
  return u.id + "|" + u.speaker + "|" + to_string(u.severity) + "|" + to_string(u.gender) + "|" + to_string(u.split) +
         "|" + join_tokens(u.tokens) + "|" + u.feature_file + "|" + std::to_string(u.frames());
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "feats");
  std::ofstream manifest(dir / "manifest.txt", std::ios::binary);
  std::ofstream sums(dir / "checksums.txt", std::ios::binary);
  if (!manifest || !sums) throw CorpusError("cannot write corpus files under " + dir.string());
  for (const auto& u : corpus.utterances) {
    const auto path = dir / u.feature_file;
    save_tensor(path, "features", u.features);
    manifest << manifest_line(u) << "\n";
    sums << hex64(file_fnv1a(path)) << "  " << u.feature_file << "\n";
  }
  manifest.close();

  nlohmann::json meta;
  meta["config"] = corpus.config;
  meta["seed"] = corpus.seed;
  meta["words"] = corpus.words;
  auto& spk = meta["speakers"] = nlohmann::json::array();
  for (const auto& s : corpus.speakers)
    spk.push_back({{"id", s.id},
                   {"severity", to_string(s.severity)},
                   {"gender", to_string(s.gender)},
                   {"stretch", s.stretch},
                   {"offset", s.offset}});
  std::ofstream(dir / "corpus.json", std::ios::binary) << meta.dump(1) << "\n";
  sums << hex64(file_fnv1a(dir / "manifest.txt")) << "  manifest.txt\n";
}

Corpus load_corpus(const std::filesystem::path& manifest, std::optional<Split> split) {
  const auto dir = manifest.parent_path();
  if (!std::filesystem::exists(manifest)) throw CorpusError("missing corpus manifest " + manifest.string());
  std::ifstream meta_in(dir / "corpus.json");
  if (!meta_in) throw CorpusError("missing corpus metadata " + (dir / "corpus.json").string());
  const auto meta = nlohmann::json::parse(meta_in);

  std::map<std::string, std::string> checksums;
  {
    std::ifstream in(dir / "checksums.txt");
    if (!in) throw CorpusError("missing checksum file " + (dir / "checksums.txt").string());
    std::string sum, file;
    while (in >> sum >> file) checksums[file] = sum;
  }
  auto verify = [&](const std::string& rel) {
    const auto path = dir / rel;
    if (!std::filesystem::exists(path)) throw CorpusError("missing feature file " + path.string());
    auto it = checksums.find(rel);
    if (it == checksums.end()) throw CorpusError("no checksum recorded for " + path.string());
    if (hex64(file_fnv1a(path)) != it->second) throw CorpusError("checksum mismatch for " + path.string());
  };
  verify(manifest.filename().string());

  Corpus c;
  c.config = meta.at("config").get<CorpusConfig>();
  c.seed = meta.at("seed").get<std::uint64_t>();
  c.words = meta.at("words").get<std::vector<std::vector<int>>>();
  for (const auto& s : meta.at("speakers")) {
    SpeakerProfile p;
    p.id = s.at("id").get<std::string>();
    p.severity = severity_from_string(s.at("severity").get<std::string>());
    p.gender = gender_from_string(s.at("gender").get<std::string>());
    p.stretch = s.at("stretch").get<double>();
    p.offset = s.at("offset").get<std::vector<double>>();
    c.speakers.push_back(std::move(p));
  }

  std::ifstream in(manifest);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_on(line, '|');
    if (f.size() != 8) {
      throw CorpusError(manifest.string() + ":" + std::to_string(lineno) + ": expected 8 fields, got " +
                        std::to_string(f.size()));
    }
    Utterance u;
    u.id = f[0];
    u.speaker = f[1];
    u.severity = severity_from_string(f[2]);
    u.gender = gender_from_string(f[3]);
    u.split = split_from_string(f[4]);
    if (split && u.split != *split) continue;
    u.tokens = parse_tokens(f[5]);
    u.feature_file = f[6];
    const auto pos = u.id.find("_B");
    u.block = pos == std::string::npos ? 0 : std::stoul(u.id.substr(pos + 2));
    verify(u.feature_file);
    try {
      u.features = load_tensor(dir / u.feature_file, "features");
    } catch (const CheckpointError& e) {
      throw CorpusError("cannot read feature file " + (dir / u.feature_file).string() + ": " + e.what());
    }
    if (u.frames() != std::stoul(f[7]))
      throw CorpusError("frame count mismatch for " + (dir / u.feature_file).string());
    c.utterances.push_back(std::move(u));
  }
  return c;
}

std::vector<double> pooled_features(const Tensor& x) {
  const std::size_t T = x.rows(), F = x.cols();
  std::vector<double> out(2 * F, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f) out[f] += x(t, f) / static_cast<double>(T);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f) {
      const double d = x(t, f) - out[f];
      out[F + f] += d * d / static_cast<double>(T);
    }
  for (std::size_t f = 0; f < F; ++f) out[F + f] = std::sqrt(out[F + f]);
  return out;
}

}  // namespace moe
