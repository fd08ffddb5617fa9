// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "moe/decode.hpp"
#include "oracles.hpp"

using namespace moe;

namespace {

// One-hot logits for a frame-level path over V classes.
Tensor path_logits(const std::vector<int>& path, std::size_t V) {
  Tensor t({path.size(), V}, 0.0);
  for (std::size_t i = 0; i < path.size(); ++i) t(i, static_cast<std::size_t>(path[i])) = 5.0;
  return t;
}

}  // namespace

TEST_CASE("greedy decode collapse rule") {
  // a = 0, blank = 2 with V = 3
  CHECK(greedy_ctc_decode(path_logits({0, 0, 2, 0}, 3)).tokens == LabelSequence{0, 0});
  CHECK(greedy_ctc_decode(path_logits({2, 2, 2}, 3)).tokens.empty());
  CHECK(greedy_ctc_decode(path_logits({1, 1, 0, 0, 1}, 3)).tokens == LabelSequence{1, 0, 1});
}

TEST_CASE("greedy decode matches the collapse oracle on random logits") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + trial % 5, V = 2 + trial % 4;
    Tensor logits = oracle::random_tensor({T, V}, rng);
    std::vector<int> argmax(T);
    for (std::size_t t = 0; t < T; ++t) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < V; ++k)
        if (logits(t, k) > logits(t, best)) best = k;
      argmax[t] = static_cast<int>(best);
    }
    const Hypothesis h = greedy_ctc_decode(logits);
    CHECK(h.tokens == oracle::ctc_collapse(argmax, static_cast<int>(V) - 1));
    for (int tok : h.tokens) CHECK(tok != static_cast<int>(V) - 1);
  }
}

TEST_CASE("word error rate") {
  CHECK(word_error_rate({1, 2, 3}, {{1, 2, 3}}) == 0.0);
  CHECK(word_error_rate({0, 1}, {{1}}) == 0.5);
  CHECK_THROWS_AS(word_error_rate({}, {{1}}), std::invalid_argument);
  // Distance is symmetric, the rate is not: the denominator is the reference length.
  const LabelSequence a{1, 2, 3, 4}, b{1, 5};
  CHECK(edit_distance(a, b) == edit_distance(b, a));
  CHECK(word_error_rate(a, {b}) == 3.0 / 4.0);
  CHECK(word_error_rate(b, {a}) == 3.0 / 2.0);

  ErrorCount total;
  total += score_utterance({1, 2}, {1});
  total += score_utterance({1, 2, 3, 4}, {1, 2, 3, 4});
  CHECK(total.errors == 1);
  CHECK(total.ref_tokens == 6);
  CHECK(total.rate() == doctest::Approx(1.0 / 6.0));
}

TEST_CASE("edit distance matches the full-table oracle and obeys the triangle inequality") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> len(0, 6), tok(0, 3);
  auto draw = [&] {
    LabelSequence s(static_cast<std::size_t>(len(rng)));
    for (auto& x : s) x = tok(rng);
    return s;
  };
  for (int trial = 0; trial < 300; ++trial) {
    LabelSequence a = draw(), b = draw(), c = draw();
    CHECK(edit_distance(a, b) == oracle::edit_distance_table(a, b));
    CHECK(edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c));
    CHECK(edit_distance(a, a) == 0);
  }
}
