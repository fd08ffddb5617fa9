// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/classifier.hpp"

#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "moe/checkpoint.hpp"
#include "moe/optim.hpp"

namespace moe {

namespace {

Tensor standardize(const std::vector<std::vector<double>>& x, const Tensor& mean, const Tensor& scale) {
  Tensor out({x.size(), mean.size()});
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(x[i].size() == mean.size(), "classifier input has " + std::to_string(x[i].size()) + " dims, expected " +
                                            std::to_string(mean.size()));
    for (std::size_t d = 0; d < mean.size(); ++d) out(i, d) = (x[i][d] - mean[d]) / scale[d];
  }
  return out;
}

}  // namespace

Var PooledClassifier::logits(Tape& tape, Var x) const {
  Var h = x;
  if (hidden_ > 0) {
    h = gelu(add_broadcast(matmul(h, tape.parameter("w1", params_.at("w1"))), tape.parameter("b1", params_.at("b1"))));
  }
  return add_broadcast(matmul(h, tape.parameter("w2", params_.at("w2"))), tape.parameter("b2", params_.at("b2")));
}

PooledClassifier PooledClassifier::train(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                                         std::size_t classes, const ClassifierConfig& config) {
  require(!x.empty() && x.size() == y.size(), "classifier needs matching, non-empty inputs and labels");
  require(classes >= 2, "classifier needs at least two classes");
  const std::size_t n = x.size(), dim = x.front().size();
  PooledClassifier c;
  c.classes_ = classes;
  c.hidden_ = config.hidden;
  c.mean_ = Tensor({dim}, 0.0);
  c.scale_ = Tensor({dim}, 0.0);
  for (const auto& row : x)
    for (std::size_t d = 0; d < dim; ++d) c.mean_[d] += row[d] / static_cast<double>(n);
  for (const auto& row : x)
    for (std::size_t d = 0; d < dim; ++d) c.scale_[d] += (row[d] - c.mean_[d]) * (row[d] - c.mean_[d]) / n;
  for (auto& s : c.scale_.values()) s = std::sqrt(s) + 1e-6;

  std::mt19937_64 rng(config.seed);
  auto normal = [&rng](Shape s, double sd) {
    Tensor t(std::move(s));
    std::normal_distribution<double> d(0.0, sd);
    for (auto& v : t.values()) v = d(rng);
    return t;
  };
  const std::size_t in = config.hidden > 0 ? config.hidden : dim;
  if (config.hidden > 0) {
    c.params_["w1"] = normal({dim, config.hidden}, 1.0 / std::sqrt(static_cast<double>(dim)));
    c.params_["b1"] = Tensor({config.hidden}, 0.0);
  }
  c.params_["w2"] = normal({in, classes}, 1.0 / std::sqrt(static_cast<double>(in)));
  c.params_["b2"] = Tensor({classes}, 0.0);

  const Tensor xs = standardize(x, c.mean_, c.scale_);
  Tensor onehot({n, classes}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    require(y[i] >= 0 && static_cast<std::size_t>(y[i]) < classes, "classifier label out of range");
    onehot(i, static_cast<std::size_t>(y[i])) = -1.0 / static_cast<double>(n);
  }
  AdamConfig ac;
  ac.lr = config.lr;
  Adam adam(ac);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Tape tape;
    Var loss = sum(mul(log_softmax_rows(c.logits(tape, tape.constant(xs))), tape.constant(onehot)));
    tape.backward(loss);
    adam.step(c.params_, tape.parameter_grads());
  }
  return c;
}

int PooledClassifier::predict(const std::vector<double>& x) const {
  if (!trained()) throw std::logic_error("classifier not trained");
  Tape tape(false);
  const Tensor z = logits(tape, tape.constant(standardize({x}, mean_, scale_))).value();
  std::size_t best = 0;
  for (std::size_t k = 1; k < z.size(); ++k)
    if (z[k] > z[best]) best = k;
  return static_cast<int>(best);
}

double PooledClassifier::accuracy(const std::vector<std::vector<double>>& x, const std::vector<int>& y) const {
  require(!x.empty() && x.size() == y.size(), "accuracy needs matching, non-empty inputs and labels");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < x.size(); ++i) hit += predict(x[i]) == y[i];
  return static_cast<double>(hit) / static_cast<double>(x.size());
}

void PooledClassifier::save(const std::filesystem::path& path) const {
  if (!trained()) throw std::logic_error("classifier not trained");
  ParamSet all = params_;
  all["mean"] = mean_;
  all["scale"] = scale_;
  all["meta"] = Tensor::vector({static_cast<double>(classes_), static_cast<double>(hidden_)}).reshaped({2});
  save_params(path, all);
}

PooledClassifier PooledClassifier::load(const std::filesystem::path& path) {
  ParamSet all = load_params(path);
  PooledClassifier c;
  try {
    const Tensor meta = all.at("meta");
    c.classes_ = static_cast<std::size_t>(meta[0]);
    c.hidden_ = static_cast<std::size_t>(meta[1]);
    c.mean_ = all.at("mean");
    c.scale_ = all.at("scale");
  } catch (const std::out_of_range&) {
    throw CheckpointError(path.string() + " is not a classifier checkpoint");
  }
  for (const char* k : {"meta", "mean", "scale"}) all.erase(k);
  c.params_ = std::move(all);
  return c;
}

int majority_vote(const std::vector<int>& labels) {
  require(!labels.empty(), "majority_vote needs at least one label");
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  int best = counts.begin()->first;
  for (const auto& [label, n] : counts)
    if (n > counts[best]) best = label;
  return best;
}

}  // namespace moe
