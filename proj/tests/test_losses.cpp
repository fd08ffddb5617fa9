// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <random>

#include "moe/losses.hpp"
#include "oracles.hpp"

using namespace moe;

namespace {

double bernoulli_kl(double p, double q) { return p * std::log(p / q) + (1 - p) * std::log((1 - p) / (1 - q)); }

LabelSequence random_target(std::mt19937_64& rng, std::size_t len, int tokens) {
  std::uniform_int_distribution<int> d(0, tokens - 1);
  LabelSequence t(len);
  for (auto& x : t) x = d(rng);
  return t;
}

}  // namespace

TEST_CASE("ctc single path and enumerated alignments") {
  // V = 2: token 0 and blank 1.
  CHECK(ctc_loss_value(Tensor::matrix({{0, 0}}), {0}) == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  Tensor logits = Tensor::matrix({{0.3, -0.2}, {1.1, 0.4}});
  auto p1 = oracle::softmax_direct({0.3, -0.2}), p2 = oracle::softmax_direct({1.1, 0.4});
  const double expected = -std::log(p1[0] * p2[0] + p1[0] * p2[1] + p1[1] * p2[0]);
  CHECK(std::abs(ctc_loss_value(logits, {0}) - expected) < 1e-13);
}

TEST_CASE("ctc matches brute-force enumeration") {
  std::mt19937_64 rng(2024);
  for (std::size_t V = 2; V <= 4; ++V)
    for (std::size_t T = 1; T <= 6; ++T)
      for (std::size_t U = 1; U <= 3; ++U)
        for (int rep = 0; rep < 2; ++rep) {
          LabelSequence target = random_target(rng, U, static_cast<int>(V) - 1);
          Tensor logits = oracle::random_tensor({T, V}, rng, 2.0);
          const double got = ctc_loss_value(logits, target);
          if (!ctc_feasible(T, target)) {
            CHECK(std::isinf(got));
            continue;
          }
          const double ref = oracle::ctc_brute_force(logits, target);
          CHECK(std::abs(got - ref) / std::abs(ref) < 1e-10);
        }
}

TEST_CASE("ctc infeasible target is +inf with zero gradient") {
  Tape tape;
  Var z = tape.variable(Tensor({2, 3}, 0.5));
  Var loss = ctc_loss(z, {0, 0});  // needs 3 frames
  CHECK(std::isinf(loss.value().item()));
  tape.backward(loss);
  const Tensor g = tape.grad(z);
  for (double v : g.values()) CHECK(v == 0.0);
  CHECK(ctc_min_frames({0, 0}) == 3);
  CHECK(ctc_min_frames({0, 1, 1, 1}) == 6);
  CHECK_THROWS_AS(ctc_loss_value(Tensor({2, 3}), {2}), std::invalid_argument);  // blank used as label
}

TEST_CASE("ctc is sensitive to target order") {
  std::mt19937_64 rng(8);
  Tensor logits = oracle::random_tensor({6, 4}, rng);
  CHECK(ctc_loss_value(logits, {0, 1, 2}) != ctc_loss_value(logits, {2, 1, 0}));
}

TEST_CASE("kl diversity loss") {
  Tensor a = Tensor::matrix({{0.2, -1, 3}, {1, 1, 0}});
  CHECK(kl_diversity_value({a, a, a}) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(kl_diversity_value({a}) == 0.0);

  const double expected = -(bernoulli_kl(0.5, 0.75) + bernoulli_kl(0.75, 0.5));
  const double got = kl_diversity_value({Tensor::matrix({{0, 0}}), Tensor::matrix({{std::log(3.0), 0}})});
  CHECK(std::abs(got - expected) < 1e-14);
  CHECK(got == doctest::Approx(-0.274653).epsilon(1e-5));

  CHECK_THROWS_AS(kl_diversity_value({Tensor({2, 3}), Tensor({3, 3})}), std::invalid_argument);
}

TEST_CASE("kl diversity equals the direct pairwise sum and is never positive") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + trial % 5, T = 1 + trial % 4, F = 2 + trial % 3;
    std::vector<Tensor> experts;
    for (std::size_t i = 0; i < n; ++i) experts.push_back(oracle::random_tensor({T, F}, rng, 1.5));
    const double got = kl_diversity_value(experts);
    CHECK(got <= 0.0);
    CHECK(std::abs(got + oracle::kl_pairs_direct(experts)) < 1e-10);
    // Shift invariance of softmax: experts that only differ by a per-frame constant coincide.
    std::vector<Tensor> shifted;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor s = experts[0];
      for (auto& v : s.values()) v += static_cast<double>(i);
      shifted.push_back(s);
    }
    CHECK(std::abs(kl_diversity_value(shifted)) < 1e-10);
  }
}

TEST_CASE("cross entropy") {
  CHECK(ce_loss_value(Tensor::vector({1, 1, 1, 1, 1}), 2) == doctest::Approx(-std::log(0.2)).epsilon(1e-14));
  CHECK(std::abs(ce_loss_value(Tensor::vector({10, -10}), 0) - std::log1p(std::exp(-20.0))) < 1e-22);
  CHECK(ce_loss_value(Tensor::vector({50, 0, 0}), 0) < 1e-20);
  CHECK_THROWS_AS(ce_loss_value(Tensor::vector({1, 2}), 2), std::invalid_argument);
  CHECK_THROWS_AS(ce_loss_value(Tensor::vector({1}), 0), std::invalid_argument);
}

TEST_CASE("mse routing loss") {
  CHECK(mse_routing_value(Tensor::vector({1, 2}), Tensor::vector({1, 2})) == 0.0);
  CHECK(mse_routing_value(Tensor::vector({1, 0}), Tensor::vector({0, 0})) == 0.5);
  Tensor a = Tensor::vector({0.3, -1, 2}), b = Tensor::vector({1, 1, -0.5});
  CHECK(mse_routing_value(a, b) == mse_routing_value(b, a));
  CHECK_THROWS_AS(mse_routing_value(Tensor::vector({1, 2}), Tensor::vector({1})), std::invalid_argument);
}

TEST_CASE("combined losses") {
  LossWeights w;
  CHECK(w.alpha == 5.0);
  CHECK(w.beta == 0.1);
  CHECK(w.gamma == 0.5);
  CHECK(combined_batch_loss(1.0, -0.2, 2.0) == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(combined_batch_loss(1.3, -0.2, 2.0, {0, 0, 0.5}) == 1.3);
  CHECK(combined_batch_loss(2.0, -0.4, 4.0) == doctest::Approx(2 * combined_batch_loss(1.0, -0.2, 2.0)));
  CHECK(combined_onfly_loss(1.0, -0.2, 2.0, 0.0) == combined_batch_loss(1.0, -0.2, 2.0));
  CHECK(combined_onfly_loss(0, 0, 0, 2) == 1.0);
  CHECK(combined_onfly_loss(0, 0, 0, 0) == 0.0);
  CHECK_THROWS_AS((LossWeights{-1, 0, 0}.validate()), std::invalid_argument);
}

TEST_CASE("every loss passes finite differences on 20 random configurations") {
  std::mt19937_64 rng(123);
  using oracle::gradient_check;
  for (int cfg = 0; cfg < 20; ++cfg) {
    const std::size_t T = 3 + cfg % 4, V = 3 + cfg % 3, F = 2 + cfg % 4, N = 2 + cfg % 3, K = 2 + cfg % 4;
    LabelSequence target = random_target(rng, 1 + cfg % 2, static_cast<int>(V) - 1);
    Tensor logits = oracle::random_tensor({T, V}, rng);
    CAPTURE(cfg);
    CHECK(gradient_check({logits}, [&](Tape&, const std::vector<Var>& v) { return ctc_loss(v[0], target); }) < 1e-4);

    std::vector<Tensor> experts;
    for (std::size_t i = 0; i < N; ++i) experts.push_back(oracle::random_tensor({T, F}, rng));
    CHECK(gradient_check(experts, [](Tape&, const std::vector<Var>& v) { return kl_diversity_loss(v); }) < 1e-4);

    Tensor cls = oracle::random_tensor({1, K}, rng);
    const int label = static_cast<int>(cfg % K);
    CHECK(gradient_check({cls}, [&](Tape&, const std::vector<Var>& v) { return ce_loss(v[0], label); }) < 1e-4);

    Tensor rp = oracle::random_tensor({N}, rng), rt = oracle::random_tensor({N}, rng);
    CHECK(gradient_check({rp, rt}, [](Tape&, const std::vector<Var>& v) { return mse_routing_loss(v[0], v[1]); }) <
          1e-4);

    std::vector<Tensor> all = {logits, cls, rp, rt};
    all.insert(all.end(), experts.begin(), experts.end());
    CHECK(gradient_check(all, [&](Tape&, const std::vector<Var>& v) {
            std::vector<Var> ex(v.begin() + 4, v.end());
            return combined_onfly_loss(ctc_loss(v[0], target), kl_diversity_loss(ex), ce_loss(v[1], label),
                                       mse_routing_loss(v[2], v[3]));
          }) < 1e-4);
  }
}
