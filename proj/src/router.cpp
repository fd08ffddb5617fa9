// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/router.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "moe/checkpoint.hpp"

namespace moe {

namespace {

Var rparam(Tape& tape, const RouterParams& router, const std::string& name) {
  auto it = router.tensors.find(name);
  if (it == router.tensors.end()) throw std::invalid_argument("router has no parameter '" + name + "'");
  return tape.parameter(name, it->second);
}

Var raffine(Tape& tape, const RouterParams& router, Var x, const std::string& prefix) {
  return add_broadcast(matmul(x, rparam(tape, router, prefix + ".w")), rparam(tape, router, prefix + ".b"));
}

}  // namespace

void RouterConfig::validate() const {
  require(width >= 1 && attention >= 1 && num_experts >= 1, "router dimensions must be positive");
}

void to_json(nlohmann::json& j, const RouterConfig& c) {
  j = nlohmann::json{{"width", c.width},
                     {"attention", c.attention},
                     {"num_experts", c.num_experts},
                     {"tap", c.tap == RouterTap::moe_input ? "moe_input" : "block_input"},
                     {"pooling", c.pooling == Pooling::attentive ? "attentive" : "average"}};
}

void from_json(const nlohmann::json& j, RouterConfig& c) {
  RouterConfig d;
  c.width = j.value("width", d.width);
  c.attention = j.value("attention", d.attention);
  c.num_experts = j.value("num_experts", d.num_experts);
  const std::string tap = j.value("tap", std::string("moe_input"));
  if (tap != "moe_input" && tap != "block_input") throw std::invalid_argument("unknown router tap '" + tap + "'");
  c.tap = tap == "moe_input" ? RouterTap::moe_input : RouterTap::block_input;
  const std::string pool = j.value("pooling", std::string("attentive"));
  if (pool != "attentive" && pool != "average") throw std::invalid_argument("unknown pooling '" + pool + "'");
  c.pooling = pool == "attentive" ? Pooling::attentive : Pooling::average;
}

RouterParams RouterParams::init(const RouterConfig& config, std::uint64_t seed) {
  config.validate();
  RouterParams r;
  r.config = config;
  std::mt19937_64 rng(seed);
  auto normal = [&rng](Shape shape, double sd) {
    Tensor t(std::move(shape), 0.0);
    std::normal_distribution<double> d(0.0, sd);
    for (auto& v : t.values()) v = d(rng);
    return t;
  };
  const std::size_t f = config.width;
  const double sf = 1.0 / std::sqrt(static_cast<double>(f));
  for (const char* s : {"1", "2"}) {
    const std::string p = std::string("router.ff") + s;
    r.tensors[p + ".w"] = normal({f, f}, sf);
    r.tensors[p + ".b"] = Tensor({f}, 0.0);
    const std::string n = std::string("router.ln") + s;
    r.tensors[n + ".g"] = Tensor({f}, 1.0);
    r.tensors[n + ".b"] = Tensor({f}, 0.0);
  }
  r.tensors["router.att.w"] = normal({f, config.attention}, sf);
  r.tensors["router.att.b"] = Tensor({config.attention}, 0.0);
  r.tensors["router.att.v"] = normal({config.attention, 1}, 1.0 / std::sqrt(static_cast<double>(config.attention)));
  r.tensors["router.att.c"] = Tensor({1}, 0.0);
  r.tensors["router.out.w"] = normal({2 * f, config.num_experts}, 0.1 / std::sqrt(static_cast<double>(2 * f)));
  r.tensors["router.out.b"] = Tensor({config.num_experts}, 1.0 / static_cast<double>(config.num_experts));
  return r;
}

void RouterParams::save(const std::filesystem::path& stem) const {
  save_params(stem.string() + ".bin", tensors);
  std::ofstream out(stem.string() + ".json");
  if (!out) throw std::runtime_error("cannot write " + stem.string() + ".json");
  out << nlohmann::json(config).dump(2) << "\n";
}

RouterParams RouterParams::load(const std::filesystem::path& stem) {
  std::ifstream in(stem.string() + ".json");
  if (!in) throw std::runtime_error("missing router config " + stem.string() + ".json");
  RouterParams r;
  r.config = nlohmann::json::parse(in).get<RouterConfig>();
  r.tensors = load_params(stem.string() + ".bin");
  for (const auto& [name, t] : RouterParams::init(r.config, 0).tensors) {
    auto it = r.tensors.find(name);
    if (it == r.tensors.end() || it->second.shape() != t.shape()) {
      throw std::runtime_error("router checkpoint " + stem.string() + ".bin does not match its config at '" + name +
                               "'");
    }
  }
  return r;
}

Var router_input(Tape& tape, const MoePrefix& prefix, const RouterConfig& config) {
  Var src = config.tap == RouterTap::moe_input ? prefix.ffn_out : prefix.block_input;
  const std::size_t f = src.value().cols();
  require(f == config.width, "router tap width " + std::to_string(f) + " != router width " +
                                 std::to_string(config.width));
  return layer_norm(src, tape.constant(Tensor({f}, 1.0)), tape.constant(Tensor({f}, 0.0)));
}

Var router_frames(Tape& tape, Var frames, const RouterParams& router) {
  require(frames.value().cols() == router.config.width,
          "router frames must be T×" + std::to_string(router.config.width) + ", got " +
              shape_str(frames.value().shape()));
  Var h = frames;
  for (const char* s : {"1", "2"}) {
    h = gelu(raffine(tape, router, h, std::string("router.ff") + s));
    const std::string n = std::string("router.ln") + s;
    h = layer_norm(h, rparam(tape, router, n + ".g"), rparam(tape, router, n + ".b"));
  }
  return h;
}

Var attention_weights(Tape& tape, Var h, const RouterParams& router) {
  require(h.value().rows() >= 1, "attention_weights needs at least one frame");
  Var e = tanh(raffine(tape, router, h, "router.att"));
  Var scores = add_broadcast(matmul(e, rparam(tape, router, "router.att.v")), rparam(tape, router, "router.att.c"));
  return softmax_rows(transpose(scores));
}

PooledStats weighted_stats(Var h, Var weights) {
  PooledStats s;
  s.mean = matmul(weights, h);
  Var second = matmul(weights, square(h));
  s.stddev = sqrt_clamped(sub(second, square(s.mean)));
  s.z = concat_cols({s.mean, s.stddev});
  return s;
}

PooledStats attentive_pool(Tape& tape, Var h, const RouterParams& router) {
  return weighted_stats(h, attention_weights(tape, h, router));
}

PooledStats average_pool(Tape& tape, Var h) {
  const std::size_t T = h.value().rows();
  require(T >= 1, "average_pool needs at least one frame");
  return weighted_stats(h, tape.constant(Tensor({1, T}, 1.0 / static_cast<double>(T))));
}

Var router_forward(Tape& tape, Var tap, const RouterParams& router) {
  Var h = router_frames(tape, tap, router);
  PooledStats s = router.config.pooling == Pooling::attentive ? attentive_pool(tape, h, router) : average_pool(tape, h);
  return reshape(raffine(tape, router, s.z, "router.out"), {router.config.num_experts});
}

RoutingVector predict_routing(const Tensor& features, const ModelParams& model, const RouterParams& router) {
  if (router.config.num_experts != model.config.num_experts) {
    throw std::invalid_argument("router predicts " + std::to_string(router.config.num_experts) +
                                " weights for a model with " + std::to_string(model.config.num_experts) + " experts");
  }
  Tape tape(false);
  MoePrefix p = encode_prefix(tape, tape.constant(features), model, {}, false);
  return RoutingVector::from(router_forward(tape, router_input(tape, p, router.config), router).value());
}

}  // namespace moe
