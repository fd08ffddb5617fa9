// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <random>

#include "moe/losses.hpp"
#include "moe/router.hpp"
#include "oracles.hpp"

using namespace moe;

namespace {

RouterConfig small_router(std::size_t width = 6, std::size_t experts = 3) {
  RouterConfig c;
  c.width = width;
  c.attention = 4;
  c.num_experts = experts;
  return c;
}

Tensor weights_of(const RouterParams& r, const Tensor& h) {
  Tape tape(false);
  return attention_weights(tape, tape.constant(h), r).value();
}

// Direct evaluation: scores s_t = v·tanh(W h_t + b) + c, then softmax over t.
std::vector<double> attention_direct(const RouterParams& r, const Tensor& h) {
  const Tensor &W = r.tensors.at("router.att.w"), &b = r.tensors.at("router.att.b"), &v = r.tensors.at("router.att.v");
  const double c = r.tensors.at("router.att.c")[0];
  std::vector<double> s(h.rows());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    double acc = c;
    for (std::size_t a = 0; a < W.cols(); ++a) {
      double pre = b[a];
      for (std::size_t f = 0; f < h.cols(); ++f) pre += h(t, f) * W(f, a);
      acc += v[a] * std::tanh(pre);
    }
    s[t] = acc;
  }
  return oracle::softmax_direct(s);
}

Tensor route(const RouterParams& r, const Tensor& frames) {
  Tape tape(false);
  return router_forward(tape, tape.constant(frames), r).value();
}

}  // namespace

TEST_CASE("attention weights") {
  std::mt19937_64 rng(1);
  RouterParams r = RouterParams::init(small_router(), 3);
  Tensor h = oracle::random_tensor({7, 6}, rng);

  const Tensor w = weights_of(r, h);
  CHECK(w.size() == 7);
  double total = 0.0;
  for (double a : w.values()) {
    CHECK(a > 0.0);
    total += a;
  }
  CHECK(std::abs(total - 1.0) < 1e-12);
  const auto ref = attention_direct(r, h);
  for (std::size_t t = 0; t < 7; ++t) CHECK(std::abs(w[t] - ref[t]) < 1e-14);

  CHECK(weights_of(r, oracle::random_tensor({1, 6}, rng)).values() == std::vector<double>{1.0});

  RouterParams flat = r;
  flat.tensors.at("router.att.v").fill(0.0);
  for (double a : weights_of(flat, h).values()) CHECK(std::abs(a - 1.0 / 7.0) < 1e-15);
}

TEST_CASE("weighted statistics") {
  Tape tape(false);
  PooledStats s = weighted_stats(tape.constant(Tensor::matrix({{0}, {2}})), tape.constant(Tensor::matrix({{0.5, 0.5}})));
  CHECK(s.mean.value()[0] == 1.0);
  CHECK(s.stddev.value()[0] == 1.0);
  CHECK(s.z.value().size() == 2);

  Tensor constant({4, 3});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t f = 0; f < 3; ++f) constant(t, f) = 0.1 + static_cast<double>(f);
  PooledStats c = average_pool(tape, tape.constant(constant));
  for (std::size_t f = 0; f < 3; ++f) {
    CHECK(std::abs(c.mean.value()[f] - constant(0, f)) < 1e-15);
    CHECK(c.stddev.value()[f] == 0.0);  // clamped radicand
  }
}

TEST_CASE("uniform attention reduces to average pooling") {
  std::mt19937_64 rng(2);
  RouterParams r = RouterParams::init(small_router(), 5);
  r.tensors.at("router.att.v").fill(0.0);
  Tensor h = oracle::random_tensor({9, 6}, rng);
  Tape tape(false);
  PooledStats a = attentive_pool(tape, tape.constant(h), r);
  PooledStats b = average_pool(tape, tape.constant(h));
  CHECK(max_abs_diff(a.z.value(), b.z.value()) < 1e-13);
  // Plain temporal mean and population std.
  for (std::size_t f = 0; f < 6; ++f) {
    double m = 0, q = 0;
    for (std::size_t t = 0; t < 9; ++t) m += h(t, f) / 9.0;
    for (std::size_t t = 0; t < 9; ++t) q += (h(t, f) - m) * (h(t, f) - m) / 9.0;
    CHECK(std::abs(b.mean.value()[f] - m) < 1e-13);
    CHECK(std::abs(b.stddev.value()[f] - std::sqrt(q)) < 1e-12);
  }
  RouterConfig avg = r.config;
  avg.pooling = Pooling::average;
  RouterParams ra = r;
  ra.config = avg;
  CHECK(max_abs_diff(route(r, h), route(ra, h)) < 1e-12);
}

TEST_CASE("pooling is equivariant under frame permutation") {
  std::mt19937_64 rng(3);
  RouterParams r = RouterParams::init(small_router(), 6);
  Tensor h = oracle::random_tensor({8, 6}, rng);
  std::vector<std::size_t> perm(8);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor hp({8, 6});
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t f = 0; f < 6; ++f) hp(t, f) = h(perm[t], f);

  const Tensor w = weights_of(r, h);
  Tensor wp({1, 8});
  for (std::size_t t = 0; t < 8; ++t) wp[t] = w[perm[t]];
  Tape tape(false);
  PooledStats a = weighted_stats(tape.constant(h), tape.constant(w));
  PooledStats b = weighted_stats(tape.constant(hp), tape.constant(wp));
  CHECK(max_abs_diff(a.z.value(), b.z.value()) < 1e-13);
  // The attention scores are per-frame, so the full pool is permutation-invariant too.
  CHECK(max_abs_diff(attentive_pool(tape, tape.constant(h), r).z.value(),
                     attentive_pool(tape, tape.constant(hp), r).z.value()) < 1e-13);
}

TEST_CASE("router output") {
  std::mt19937_64 rng(4);
  RouterParams r = RouterParams::init(small_router(), 7);
  Tensor x = oracle::random_tensor({5, 6}, rng);
  CHECK(route(r, x).size() == 3);
  CHECK(route(r, x) == route(r, x));

  RouterParams z = r;
  z.tensors.at("router.out.w").fill(0.0);
  z.tensors.at("router.out.b") = Tensor::vector({0.2, -1.0, 3.5}).reshaped({3});
  for (std::size_t k = 0; k < 3; ++k) CHECK(route(z, oracle::random_tensor({4 + k, 6}, rng)).values() ==
                                      z.tensors.at("router.out.b").values());

  Tape tape(false);
  CHECK_THROWS_AS(router_forward(tape, tape.constant(Tensor({3, 5})), r), std::invalid_argument);
  CHECK_THROWS_AS(attention_weights(tape, tape.constant(Tensor({2, 7})), r), std::invalid_argument);
}

TEST_CASE("router output varies smoothly with its input") {
  std::mt19937_64 rng(5);
  RouterParams r = RouterParams::init(small_router(), 8);
  Tensor x = oracle::random_tensor({6, 6}, rng);
  const Tensor base = route(r, x);
  double prev_ratio = -1.0;
  for (double eps : {1e-3, 1e-4, 1e-5}) {
    Tensor xp = x;
    for (auto& v : xp.values()) v += eps;
    const double ratio = max_abs_diff(route(r, xp), base) / eps;
    CHECK(std::isfinite(ratio));
    CHECK(ratio < 1e3);
    if (prev_ratio >= 0) CHECK(std::abs(ratio - prev_ratio) < 0.05 * std::max(1.0, prev_ratio));
    prev_ratio = ratio;
  }
}

TEST_CASE("mse routing gradient matches finite differences for every router tensor") {
  std::mt19937_64 rng(6);
  RouterParams r = RouterParams::init(small_router(), 9);
  // Move away from the symmetric init so every term is exercised.
  for (auto& [name, t] : r.tensors)
    for (auto& v : t.values()) v += 0.2 * std::normal_distribution<double>()(rng);
  Tensor x = oracle::random_tensor({5, 6}, rng, 1.2);
  Tensor target = oracle::random_tensor({3}, rng);

  auto loss_of = [&](const RouterParams& p) {
    Tape tape(false);
    return mse_routing_loss(router_forward(tape, tape.constant(x), p), tape.constant(target)).value().item();
  };
  Tape tape;
  Var loss = mse_routing_loss(router_forward(tape, tape.constant(x), r), tape.constant(target));
  tape.backward(loss);
  const GradMap grads = tape.parameter_grads();
  CHECK(grads.size() == r.tensors.size());

  const double step = 1e-5;
  for (const auto& [name, t] : r.tensors) {
    CAPTURE(name);
    double worst = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      RouterParams up = r, down = r;
      up.tensors.at(name)[i] += step;
      down.tensors.at(name)[i] -= step;
      const double numeric = (loss_of(up) - loss_of(down)) / (2 * step);
      const double analytic = grads.at(name)[i];
      worst = std::max(worst, std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-4}));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("router config round trip") {
  RouterConfig c = small_router();
  c.tap = RouterTap::block_input;
  c.pooling = Pooling::average;
  const RouterConfig back = nlohmann::json(c).get<RouterConfig>();
  CHECK(back.tap == RouterTap::block_input);
  CHECK(back.pooling == Pooling::average);
  CHECK(back.attention == c.attention);
  CHECK_THROWS_AS((nlohmann::json{{"tap", "raw"}}.get<RouterConfig>()), std::invalid_argument);

  const auto dir = std::filesystem::temp_directory_path() / "moe_router_test";
  std::filesystem::create_directories(dir);
  RouterParams r = RouterParams::init(small_router(), 10);
  r.save(dir / "r");
  CHECK(RouterParams::load(dir / "r").tensors == r.tensors);
  std::filesystem::remove_all(dir);
}

TEST_CASE("predict_routing uses the model stream") {
  EncoderConfig ec;
  ec.num_blocks = 2;
  ec.width = 6;
  ec.heads = 2;
  ec.ffn_width = 8;
  ec.vocab = 4;
  ec.num_experts = 3;
  ec.bottleneck = 2;
  ec.num_classes = 0;
  ModelParams m = ModelParams::init(ec, 1);
  RouterParams r = RouterParams::init(small_router(6, 3), 2);
  std::mt19937_64 rng(7);
  Tensor x = oracle::random_tensor({5, 6}, rng);
  const RoutingVector a = predict_routing(x, m, r), b = predict_routing(x, m, r);
  CHECK(a == b);
  CHECK(a.size() == 3);
  RouterParams wrong = RouterParams::init(small_router(6, 4), 2);
  CHECK_THROWS_AS(predict_routing(x, m, wrong), std::invalid_argument);
}
