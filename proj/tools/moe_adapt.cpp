// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver. Every subcommand works inside one run directory.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "moe/harness.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::optional<std::size_t> steps;
  std::string mode = "onfly";
};

/// Opens the run in --out, creating it from --config (or defaults) when it has
/// no stored config yet. --seed and --steps override the stored values.
moe::Run make_run(const Flags& f, bool create) {
  const std::filesystem::path dir = f.out;
  const bool exists = std::filesystem::exists(dir / "config.json");
  moe::ExperimentConfig cfg;
  if (!f.config.empty()) {
    cfg = moe::ExperimentConfig::load(f.config);
  } else if (exists) {
    cfg = moe::ExperimentConfig::load(dir / "config.json");
  } else if (!create) {
    throw moe::MissingArtifact(dir / "config.json", "this stage", "gen-corpus");
  }
  if (f.seed) cfg = cfg.with_seed(*f.seed);
  if (f.steps) cfg.tta.steps = *f.steps;
  if (exists && (f.config.empty() && !f.seed && !f.steps)) return moe::Run::open(dir);
  return moe::Run(dir, cfg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-experts speaker adaptation on a synthetic dysarthric corpus"};
  app.require_subcommand(1);
  Flags f;

  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", f.config, "experiment config JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "run seed; derives every stage seed");
    sub->add_option("--out", f.out, "run directory")->capture_default_str();
    sub->add_option("--steps", f.steps, "test-time adaptation steps");
    return sub;
  };
  add("gen-corpus", "generate and write the synthetic corpus");
  add("train-si", "train the speaker-independent model");
  add("adaptive-train", "train one adapter per domain group");
  add("sat", "speaker adaptive training of backbone, experts and per-speaker routing");
  add("train-router", "train the on-the-fly router on stored per-speaker routing");
  add("tta-batch", "batch test-time adaptation of routing for each test speaker");
  add("decode", "decode the test split")
      ->add_option("--mode", f.mode, "si, batch, onfly or rab_like")
      ->capture_default_str()
      ->check(CLI::IsMember({"si", "batch", "onfly", "rab_like"}));
  add("benchmark-rtf", "time every decoding mode");
  add("round-robin", "leave-one-speaker-out on-the-fly evaluation");
  add("curves", "batch adaptation error against adaptation utterances");
  add("export-routing", "routing heatmaps and similarity summary");

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    moe::Run run = make_run(f, cmd == "gen-corpus");
    if (cmd == "gen-corpus") {
      moe::stage_gen_corpus(run);
    } else if (cmd == "train-si") {
      moe::stage_train_si(run);
    } else if (cmd == "adaptive-train") {
      moe::stage_adaptive_train(run);
    } else if (cmd == "sat") {
      moe::stage_sat(run);
    } else if (cmd == "train-router") {
      moe::stage_train_router(run);
    } else if (cmd == "tta-batch") {
      moe::stage_tta_batch(run);
    } else if (cmd == "decode") {
      const auto mode = moe::decode_mode_from_string(f.mode);
      const auto table = moe::stage_decode(run, mode);
      std::printf("%s wer %.4f (%zu/%zu)\n", f.mode.c_str(), table.total.rate(), table.total.errors,
                  table.total.ref_tokens);
    } else if (cmd == "benchmark-rtf") {
      using M = moe::DecodeMode;
      for (const auto& r : moe::benchmark_rtf(run, {M::si, M::onfly, M::batch, M::rab_like}))
        std::printf("%s rtf %.5f\n", moe::to_string(r.mode).c_str(), r.rtf());
    } else if (cmd == "round-robin") {
      moe::ErrorCount si, rr;
      for (const auto& row : moe::round_robin(run)) {
        si += row.si;
        rr += row.round_robin;
      }
      std::printf("si wer %.4f round-robin wer %.4f\n", si.rate(), rr.rate());
    } else if (cmd == "curves") {
      const auto res = moe::data_quantity_curve(run, moe::default_k_grid(run));
      for (const auto& p : res.points) std::printf("k %zu wer %.4f cosine %.4f\n", p.k, p.wer, p.cosine);
      std::printf("onfly wer %.4f pearson %.4f\n", res.onfly_wer, res.pearson);
    } else if (cmd == "export-routing") {
      for (const auto& s : moe::export_routing(run))
        std::printf("%s intra %.4f inter %.4f gap %.4f\n", s.setting.c_str(), s.intra, s.inter, s.gap());
    }
  } catch (const std::exception& e) {
    std::cerr << "moe-adapt " << cmd << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
