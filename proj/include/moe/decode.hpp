// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "moe/losses.hpp"
#include "moe/tensor.hpp"

namespace moe {

struct Hypothesis {
  LabelSequence tokens;
  double decode_seconds = 0.0;
};

/// Best-path decoding: per-frame argmax, collapse repeats, drop blank (V-1).
Hypothesis greedy_ctc_decode(const Tensor& logits);

/// Levenshtein distance with unit substitution/insertion/deletion costs.
std::size_t edit_distance(const LabelSequence& a, const LabelSequence& b);

struct ErrorCount {
  std::size_t errors = 0;
  std::size_t ref_tokens = 0;

  double rate() const { return ref_tokens ? static_cast<double>(errors) / static_cast<double>(ref_tokens) : 0.0; }
  ErrorCount& operator+=(const ErrorCount& o) {
    errors += o.errors;
    ref_tokens += o.ref_tokens;
    return *this;
  }
};

/// Errors against a non-empty reference (throws on an empty one). Tokens play
/// the role of words, so this is reported as WER.
ErrorCount score_utterance(const LabelSequence& ref, const LabelSequence& hyp);
double word_error_rate(const LabelSequence& ref, const Hypothesis& hyp);

}  // namespace moe
