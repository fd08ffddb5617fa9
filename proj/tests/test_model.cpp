// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <random>

#include "moe/model.hpp"
#include "oracles.hpp"

using namespace moe;

namespace {

EncoderConfig small_config(std::size_t experts = 3) {
  EncoderConfig c;
  c.num_blocks = 3;
  c.width = 8;
  c.heads = 2;
  c.ffn_width = 12;
  c.vocab = 5;
  c.num_experts = experts;
  c.bottleneck = 4;
  c.num_classes = 4;
  return c;
}

// Up-projections start at zero; give them values so experts are non-trivial.
ModelParams live_model(const EncoderConfig& c, std::uint64_t seed) {
  ModelParams m = ModelParams::init(c, seed);
  std::mt19937_64 rng(seed + 1);
  for (std::size_t i = 0; i < c.num_experts; ++i) {
    auto& w = m.tensors.at(expert_prefix(i) + "up.w");
    w = oracle::random_tensor(w.shape(), rng, 0.3);
  }
  return m;
}

Tensor eval_logits(const ModelParams& m, const Tensor& x, std::optional<Tensor> r) {
  Tape tape(false);
  std::optional<Var> rv;
  if (r) rv = tape.constant(*r);
  return encoder_forward(tape, tape.constant(x), m, rv).logits.value();
}

}  // namespace

TEST_CASE("zero routing is the unadapted network") {
  const auto c = small_config();
  ModelParams m = live_model(c, 5);
  std::mt19937_64 rng(1);
  Tensor x = oracle::random_tensor({6, c.width}, rng);
  CHECK(eval_logits(m, x, RoutingVector::zeros(3).tensor()) == eval_logits(m, x, std::nullopt));
}

TEST_CASE("moe contribution equals the explicit weighted sum") {
  const auto c = small_config();
  ModelParams m = live_model(c, 9);
  std::mt19937_64 rng(2);
  Tensor x = oracle::random_tensor({5, c.width}, rng);
  Tensor r = oracle::random_tensor({3}, rng);
  Tape tape(false);
  auto out = encoder_forward(tape, tape.constant(x), m, tape.constant(r));
  const Tensor& h = out.moe_contribution.value();
  double worst = 0.0;
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t f = 0; f < c.width; ++f) {
      double s = 0.0;
      for (std::size_t i = 0; i < 3; ++i) s += r[i] * out.expert_outputs[i].value()(t, f);
      worst = std::max(worst, std::abs(s - h(t, f)));
    }
  CHECK(worst < 1e-12);

  Tape t2(false);
  auto one = encoder_forward(t2, t2.constant(x), m, t2.constant(RoutingVector::one_hot(3, 0).tensor()));
  CHECK(one.moe_contribution.value() == one.expert_outputs[0].value());
}

TEST_CASE("moe_combine examples and linearity") {
  Tape tape;
  Var a1 = tape.constant(Tensor::matrix({{1}})), a2 = tape.constant(Tensor::matrix({{3}}));
  CHECK(moe_combine({a1, a2}, tape.constant(Tensor::vector({2, -1}))).value()[0] == -1.0);
  Var A = tape.constant(Tensor::matrix({{0.3, -2}, {4, 1}}));
  CHECK(moe_combine({A, A}, tape.constant(Tensor::vector({0.5, 0.5}))).value() == A.value());
  CHECK_THROWS_AS(moe_combine({a1, a2}, tape.constant(Tensor::vector({1}))), std::invalid_argument);
  CHECK_THROWS_AS(moe_combine({a1, A}, tape.constant(Tensor::vector({1, 1}))), std::invalid_argument);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tp(false);
    std::vector<Var> experts;
    for (int i = 0; i < 4; ++i) experts.push_back(tp.constant(oracle::random_tensor({3, 5}, rng)));
    Tensor r1 = oracle::random_tensor({4}, rng), r2 = oracle::random_tensor({4}, rng);
    const double al = 1.7, be = -0.4;
    Tensor mix({4});
    for (std::size_t i = 0; i < 4; ++i) mix[i] = al * r1[i] + be * r2[i];
    const Tensor lhs = moe_combine(experts, tp.constant(mix)).value();
    const Tensor o1 = moe_combine(experts, tp.constant(r1)).value();
    const Tensor o2 = moe_combine(experts, tp.constant(r2)).value();
    double worst = 0.0;
    for (std::size_t k = 0; k < lhs.size(); ++k) worst = std::max(worst, std::abs(lhs[k] - (al * o1[k] + be * o2[k])));
    CHECK(worst < 1e-10);
  }
}

TEST_CASE("zero up-projections make the output independent of routing") {
  const auto c = small_config();
  ModelParams m = ModelParams::init(c, 4);  // up-projections zero-initialized
  std::mt19937_64 rng(6);
  Tensor x = oracle::random_tensor({4, c.width}, rng);
  CHECK(eval_logits(m, x, oracle::random_tensor({3}, rng)) == eval_logits(m, x, oracle::random_tensor({3}, rng)));
  Tape tape;
  Var r = tape.variable(oracle::random_tensor({3}, rng));
  auto out = encoder_forward(tape, tape.constant(x), m, r);
  tape.backward(sum(out.logits));
  for (double g : tape.grad(r).values()) CHECK(g == 0.0);
}

TEST_CASE("eval forward is pure and train forward uses dropout") {
  const auto c = small_config();
  ModelParams m = live_model(c, 7);
  std::mt19937_64 rng(8);
  Tensor x = oracle::random_tensor({5, c.width}, rng), r = oracle::random_tensor({3}, rng);
  CHECK(eval_logits(m, x, r) == eval_logits(m, x, r));

  std::mt19937_64 drop(1);
  Tape tape(false);
  auto trained = encoder_forward(tape, tape.constant(x), m, tape.constant(r), {Mode::train, &drop});
  CHECK(trained.logits.value() != eval_logits(m, x, r));
}

TEST_CASE("forward rejects bad shapes") {
  const auto c = small_config();
  ModelParams m = ModelParams::init(c, 1);
  Tape tape(false);
  CHECK_THROWS_AS(encoder_forward(tape, tape.constant(Tensor({3, c.width + 1})), m, std::nullopt),
                  std::invalid_argument);
  CHECK_THROWS_AS(encoder_forward(tape, tape.constant(Tensor({3, c.width})), m, tape.constant(Tensor({2}))),
                  std::invalid_argument);
}

TEST_CASE("ctc head") {
  const auto c = small_config();
  ModelParams m = ModelParams::init(c, 2);
  std::mt19937_64 rng(10);
  {
    ModelParams z = m;
    z.tensors.at("ctc.b").fill(0.0);
    Tape tape(false);
    for (double v : ctc_head(tape, tape.constant(Tensor({3, c.width}, 0.0)), z).value().values()) CHECK(v == 0.0);
  }
  {
    ModelParams z = m;
    z.tensors.at("ctc.w").fill(0.0);
    z.tensors.at("ctc.b") = oracle::random_tensor({c.vocab}, rng);
    Tape tape(false);
    Tensor out = ctc_head(tape, tape.constant(oracle::random_tensor({4, c.width}, rng)), z).value();
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t k = 0; k < c.vocab; ++k) CHECK(out(t, k) == z.tensors.at("ctc.b")[k]);
  }
  Tensor h = oracle::random_tensor({4, c.width}, rng);
  Tape tape(false);
  Tensor out = ctc_head(tape, tape.constant(h), m).value();
  Tensor ref = oracle::triple_loop_matmul(h, m.tensors.at("ctc.w"));
  double worst = 0.0;
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t k = 0; k < c.vocab; ++k)
      worst = std::max(worst, std::abs(out(t, k) - ref(t, k) - m.tensors.at("ctc.b")[k]));
  CHECK(worst < 1e-12);
}

TEST_CASE("classification head") {
  const auto c = small_config();
  ModelParams m = ModelParams::init(c, 3);
  std::mt19937_64 rng(11);
  Tensor frame = oracle::random_tensor({1, c.width}, rng);
  Tensor constant({5, c.width});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t f = 0; f < c.width; ++f) constant(t, f) = frame(0, f);
  Tape tape(false);
  const Tensor single = classification_head(tape, tape.constant(frame), m).value();
  const Tensor repeated = classification_head(tape, tape.constant(constant), m).value();
  CHECK(max_abs_diff(single, repeated) < 1e-12);

  Tensor h = oracle::random_tensor({6, c.width}, rng);
  Tensor pooled({1, c.width}, 0.0);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t f = 0; f < c.width; ++f) pooled(0, f) += h(t, f) / 6.0;
  Tensor ref = oracle::triple_loop_matmul(pooled, m.tensors.at("cls.w"));
  const Tensor got = classification_head(tape, tape.constant(h), m).value();
  CHECK(got.size() == c.num_classes);
  for (std::size_t k = 0; k < c.num_classes; ++k) CHECK(std::abs(got[k] - ref(0, k) - m.tensors.at("cls.b")[k]) < 1e-12);
}

TEST_CASE("parameter counts") {
  CHECK(sd_param_count(16, 10) == 160);
  const auto c = small_config();
  const ParamCounts a = count_params(ModelParams::init(c, 1)), b = count_params(ModelParams::init(c, 2));
  CHECK(a.backbone == b.backbone);
  CHECK(a.experts == b.experts);
  CHECK(a.heads == b.heads);
  // Each expert: LN (2F) + down (F·B + B) + up (B·F + F).
  CHECK(a.experts == c.num_experts * (2 * c.width + c.width * c.bottleneck + c.bottleneck +
                                      c.bottleneck * c.width + c.width));
  CHECK(a.heads == c.width * c.vocab + c.vocab + c.width * c.num_classes + c.num_classes);
}

TEST_CASE("experts initialized from group adapters") {
  for (std::size_t groups : {5u, 10u}) {
    auto c = small_config(groups);
    ModelParams source = live_model(c, 20 + groups);
    ModelParams target = ModelParams::init(c, 99);
    std::vector<ParamSet> adapters;
    for (std::size_t i = 0; i < groups; ++i) adapters.push_back(extract_expert(source, i));
    init_experts_from_adaptive_training(target, adapters);
    CHECK(target.config.num_experts == groups);
    std::mt19937_64 rng(groups);
    Tensor u = oracle::random_tensor({4, c.width}, rng);
    Tape tape(false);
    for (std::size_t i = 0; i < groups; ++i) {
      const Tensor copied = expert_forward(tape, tape.constant(u), target, i).value();
      CHECK(copied == expert_forward(tape, tape.constant(u), source, i).value());
    }
    adapters.pop_back();
    CHECK_THROWS_AS(init_experts_from_adaptive_training(target, adapters), std::invalid_argument);
  }
}

TEST_CASE("config validation and round trip") {
  EncoderConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.moe_block = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.moe_block = c.num_blocks + 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = small_config();
  c.num_experts = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);

  const auto dir = std::filesystem::temp_directory_path() / "moe_model_test";
  std::filesystem::create_directories(dir);
  ModelParams m = live_model(small_config(), 12);
  m.save(dir / "m");
  ModelParams back = ModelParams::load(dir / "m");
  CHECK(back.tensors == m.tensors);
  CHECK(back.config.num_experts == m.config.num_experts);
  std::filesystem::remove_all(dir);
}
