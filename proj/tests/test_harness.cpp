// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "moe/harness.hpp"

using namespace moe;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.corpus.speakers_per_cell = 1;
  c.corpus.alphabet = 4;
  c.corpus.vocab_words = 6;
  c.corpus.min_word_len = 2;
  c.corpus.max_word_len = 3;
  c.corpus.utts_per_block = 3;
  c.corpus.feature_dim = 8;
  c.corpus.frames_per_symbol = 3;
  c.model.num_blocks = 2;
  c.model.heads = 2;
  c.model.ffn_width = 16;
  c.model.bottleneck = 4;
  c.model.moe_block = 1;
  c.si = {30, 4, 1e-2, 5.0, 1};
  c.adaptive = {1, 4, 1e-3, 5.0, 1};
  c.sat = {1, 4, 1e-3, 5.0, 1};
  c.router_train = {2, 4, 3e-3, 5.0, 1};
  c.tta.steps = 3;
  c.classifier.epochs = 20;
  c.round_robin.sat = {1, 4, 1e-3, 5.0, 1};
  c.round_robin.router = {1, 4, 3e-3, 5.0, 1};
  c.rtf_repetitions = 1;
  c.k_grid = {1, 2, 0};
  return c.with_seed(4);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("moe_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::size_t data_rows(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) ++n;
  return n - 1;
}

/// The tiny pipeline, built once and shared by the read-only checks.
Run& pipeline() {
  static Run run = [] {
    Run r(scratch("pipeline"), tiny_config());
    run_pipeline(r);
    return r;
  }();
  return run;
}

/// Runs the CLI with arguments, returning the exit status; stderr goes to err.
int cli(const std::string& args, std::string* err = nullptr) {
  const char* exe = std::getenv("MOE_CLI");
  REQUIRE_MESSAGE(exe != nullptr, "MOE_CLI must point at the moe-adapt binary");
  const fs::path log = fs::temp_directory_path() / "moe_harness_cli.err";
  const std::string cmd = std::string(exe) + " " + args + " >/dev/null 2>" + log.string();
  const int status = std::system(cmd.c_str());
  if (err) *err = slurp(log);
  return status;
}

}  // namespace

TEST_CASE("default loss weights and derived dimensions") {
  ExperimentConfig c;
  CHECK(c.weights.alpha == 5.0);
  CHECK(c.weights.beta == 0.1);
  CHECK(c.weights.gamma == 0.5);
  c.finalize();
  CHECK(c.model.vocab == c.corpus.alphabet + 1);
  CHECK(c.model.width == c.corpus.feature_dim);
  CHECK(c.router.width == c.model.width);
  CHECK(c.model.num_experts == 10);
  CHECK(c.router.num_experts == 10);
  c.knowledge = DomainKnowledge::severity;
  c.finalize();
  CHECK(c.model.num_experts == 5);
}

TEST_CASE("config JSON round trip and unknown keys") {
  const fs::path dir = scratch("config");
  fs::create_directories(dir);
  ExperimentConfig c = tiny_config();
  c.weights.alpha = 0.0;
  c.router_loss = RouterLoss::mse_only;
  c.finalize();
  c.save(dir / "a.json");
  const ExperimentConfig back = ExperimentConfig::load(dir / "a.json");
  nlohmann::json ja = c, jb = back;
  CHECK(ja == jb);

  std::ofstream(dir / "bad.json") << R"({"corpus":{}, "learning_rate": 1})";
  CHECK_THROWS_WITH_AS(ExperimentConfig::load(dir / "bad.json"), doctest::Contains("learning_rate"),
                       std::invalid_argument);
}

TEST_CASE("run seed derives distinct reproducible stage seeds") {
  const ExperimentConfig a = ExperimentConfig{}.with_seed(2), b = ExperimentConfig{}.with_seed(2);
  const ExperimentConfig c = ExperimentConfig{}.with_seed(3);
  nlohmann::json ja = a, jb = b, jc = c;
  CHECK(ja == jb);
  CHECK(ja != jc);
  CHECK(a.si.seed != a.sat.seed);
  CHECK(a.seed == 2);
  CHECK(a.si.seed != c.si.seed);
  nlohmann::json plain = ExperimentConfig{}, one = ExperimentConfig{}.with_seed(1);
  CHECK(plain == one);
}

TEST_CASE("pearson correlation") {
  CHECK(pearson_correlation({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson_correlation({1, 2, 3}, {3, 2, 1}) == doctest::Approx(-1.0).epsilon(1e-12));
  // Hand value: x={1,2,3,4}, y={1,3,2,4} gives sxy=4, sxx=syy=5.
  CHECK(pearson_correlation({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(std::isnan(pearson_correlation({1, 1}, {1, 2})));
  CHECK_THROWS(pearson_correlation({1}, {1}));
}

TEST_CASE("a stage without its input names the missing artifact") {
  Run run(scratch("missing"), tiny_config());
  stage_gen_corpus(run);
  CHECK_THROWS_WITH_AS(stage_train_router(run), doctest::Contains("sat.bin"), MissingArtifact);
  CHECK_THROWS_WITH_AS(stage_decode(run, DecodeMode::si), doctest::Contains("train-si"), MissingArtifact);
}

TEST_CASE("pipeline writes per-speaker artifacts") {
  Run& run = pipeline();
  const Corpus& corpus = run.corpus();
  const std::size_t test_speakers = corpus.test_speakers().size();
  CHECK(data_rows(run.path("tta_routing.csv")) == test_speakers);
  std::size_t test_utts = 0;
  for (const auto& spk : corpus.test_speakers()) test_utts += corpus.select(Split::test, spk).size();
  CHECK(data_rows(run.path("pseudo_labels.csv")) == test_utts);
  for (const char* m : {"si", "batch", "onfly"}) {
    CHECK(fs::exists(run.path(std::string("decode_") + m + ".csv")));
    CHECK(fs::exists(run.path(std::string("summary_") + m + ".csv")));
  }
  const ErrorTable t = stage_decode(run, DecodeMode::si);
  CHECK(t.by_speaker.size() == test_speakers);
  ErrorCount sum;
  for (const auto& [spk, e] : t.by_speaker) sum += e;
  CHECK(sum.errors == t.total.errors);
  CHECK(sum.ref_tokens == t.total.ref_tokens);
}

TEST_CASE("routing export has one row per test speaker in each setting") {
  Run& run = pipeline();
  const auto summaries = export_routing(run);
  REQUIRE(summaries.size() == 3);
  const std::size_t n = run.corpus().test_speakers().size();
  for (const auto& s : summaries) {
    CHECK(data_rows(run.path("routing_" + s.setting + ".csv")) == n);
    CHECK(std::isfinite(s.intra));
    CHECK(std::isfinite(s.inter));
  }
  CHECK(data_rows(run.path("routing_summary.csv")) == 3);
}

TEST_CASE("routing similarity on hand-built vectors") {
  const Corpus& corpus = pipeline().corpus();
  std::map<std::string, RoutingVector> routing;
  for (const auto& spk : corpus.test_speakers()) {
    RoutingVector r = RoutingVector::zeros(5);
    r.values[static_cast<std::size_t>(corpus.speaker(spk).severity)] = 1.0;
    routing[spk] = r;
  }
  const auto s = routing_similarity("hand", corpus, routing);
  CHECK(s.intra == doctest::Approx(1.0));
  CHECK(s.inter == doctest::Approx(0.0));
}

TEST_CASE("data-quantity curve grid and limits") {
  Run& run = pipeline();
  const auto ks = default_k_grid(run);
  const std::size_t avail = run.config().corpus.utts_per_block;
  CHECK(ks == std::vector<std::size_t>{1, 2, avail});
  const auto res = data_quantity_curve(run, ks);
  REQUIRE(res.points.size() == ks.size());
  CHECK(res.points.back().cosine == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(data_rows(run.path("curves.csv")) == ks.size());
  CHECK_THROWS_WITH(data_quantity_curve(run, {avail + 1}), doctest::Contains("exceeds"));
}

TEST_CASE("rtf benchmark and round robin outputs") {
  Run& run = pipeline();
  const auto rtf = benchmark_rtf(run, {DecodeMode::si, DecodeMode::onfly});
  REQUIRE(rtf.size() == 2);
  for (const auto& r : rtf) {
    CHECK(r.wall_seconds > 0.0);
    CHECK(r.audio_seconds > 0.0);
  }
  CHECK_THROWS_WITH(round_robin(run), doctest::Contains("alone in its cell"));

  ExperimentConfig two = tiny_config();
  two.corpus.speakers_per_cell = 2;
  Run paired(scratch("round_robin"), two);
  run_pipeline(paired);
  const std::string spk = paired.corpus().test_speakers().front();
  const auto rows = round_robin(paired, {spk});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].speaker == spk);
  CHECK(rows[0].audit_clean);
  CHECK(rows[0].si.ref_tokens == rows[0].round_robin.ref_tokens);
  CHECK(data_rows(paired.path("round_robin.csv")) == 1);
}

TEST_CASE("rerun from the stored config reproduces every non-timing output") {
  const ExperimentConfig stored = ExperimentConfig::load(pipeline().path("config.json"));
  Run a(scratch("rerun_a"), stored), b(scratch("rerun_b"), stored);
  run_pipeline(a);
  run_pipeline(b);
  CHECK(compare_runs(a.dir(), b.dir()).empty());
  CHECK(slurp(a.path("si.bin")) == slurp(pipeline().path("si.bin")));
}

TEST_CASE("compare_runs ignores timing but flags content changes") {
  const fs::path a = scratch("cmp_a"), b = scratch("cmp_b");
  fs::create_directories(a);
  fs::create_directories(b);
  std::ofstream(a / "t.csv") << "mode,wall_seconds,errors\nsi,0.5,3\n";
  std::ofstream(b / "t.csv") << "mode,wall_seconds,errors\nsi,0.9,3\n";
  std::ofstream(a / "rtf.csv") << "x\n1\n";
  std::ofstream(b / "rtf.csv") << "x\n2\n";
  CHECK(compare_runs(a, b).empty());
  std::ofstream(b / "t.csv") << "mode,wall_seconds,errors\nsi,0.9,4\n";
  CHECK(compare_runs(a, b) == std::vector<std::string>{"t.csv"});
  std::ofstream(b / "extra.bin") << "x";
  CHECK(compare_runs(a, b).size() == 2);
}

TEST_CASE("CLI generates identical corpora for one seed") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  tiny_config().save(dir / "tiny.json");
  const std::string cfg = " --config " + (dir / "tiny.json").string();
  REQUIRE(cli("gen-corpus --seed 7 --out " + (dir / "a").string() + cfg) == 0);
  REQUIRE(cli("gen-corpus --seed 7 --out " + (dir / "b").string() + cfg) == 0);
  CHECK(slurp(dir / "a/corpus/manifest.txt") == slurp(dir / "b/corpus/manifest.txt"));
  CHECK(slurp(dir / "a/config.json") == slurp(dir / "b/config.json"));
  REQUIRE(cli("gen-corpus --seed 8 --out " + (dir / "c").string() + cfg) == 0);
  CHECK(slurp(dir / "a/corpus/manifest.txt") != slurp(dir / "c/corpus/manifest.txt"));
}

TEST_CASE("CLI errors exit non-zero with a message") {
  const fs::path dir = scratch("cli_err");
  fs::create_directories(dir);
  tiny_config().save(dir / "tiny.json");
  REQUIRE(cli("gen-corpus --config " + (dir / "tiny.json").string() + " --out " + (dir / "r").string()) == 0);
  std::string err;
  CHECK(cli("train-router --out " + (dir / "r").string(), &err) != 0);
  CHECK(err.find("sat.bin") != std::string::npos);
  CHECK(err.find("'sat'") != std::string::npos);
  CHECK(cli("decode --mode fastest --out " + (dir / "r").string()) != 0);
  CHECK(cli("train-si --bogus-flag --out " + (dir / "r").string()) != 0);
  CHECK(cli("decode --out " + (dir / "missing_run").string(), &err) != 0);
  CHECK(err.find("config.json") != std::string::npos);
}
