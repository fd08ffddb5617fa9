// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/decode.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace moe {

Hypothesis greedy_ctc_decode(const Tensor& logits) {
  require(logits.cols() >= 2, "greedy_ctc_decode needs V >= 2");
  const std::size_t T = logits.rows(), V = logits.cols();
  const int blank = static_cast<int>(V) - 1;
  Hypothesis h;
  int prev = -1;
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = &logits.data()[t * V];
    const int best = static_cast<int>(std::max_element(row, row + V) - row);
    if (best != prev && best != blank) h.tokens.push_back(best);
    prev = best;
  }
  return h;
}

std::size_t edit_distance(const LabelSequence& a, const LabelSequence& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

ErrorCount score_utterance(const LabelSequence& ref, const LabelSequence& hyp) {
  if (ref.empty()) throw std::invalid_argument("word_error_rate: empty reference");
  return {edit_distance(ref, hyp), ref.size()};
}

double word_error_rate(const LabelSequence& ref, const Hypothesis& hyp) {
  return score_utterance(ref, hyp.tokens).rate();
}

}  // namespace moe
