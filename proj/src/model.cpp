// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "moe/checkpoint.hpp"

namespace moe {

namespace {

std::string blk(std::size_t l, const char* leaf) { return "block" + std::to_string(l) + "." + leaf; }

Var param(Tape& tape, const ModelParams& model, const std::string& name) {
  auto it = model.tensors.find(name);
  if (it == model.tensors.end()) throw std::invalid_argument("model has no parameter '" + name + "'");
  return tape.parameter(name, it->second);
}

Var affine(Tape& tape, const ModelParams& model, Var x, const std::string& prefix) {
  return add_broadcast(matmul(x, param(tape, model, prefix + ".w")), param(tape, model, prefix + ".b"));
}

Var maybe_dropout(Var x, const EncoderConfig& cfg, const ForwardOptions& opts) {
  if (opts.mode != Mode::train || cfg.dropout <= 0.0) return x;
  require(opts.rng != nullptr, "train-mode forward needs an rng for dropout");
  return dropout(x, cfg.dropout, *opts.rng);
}

Var self_attention(Tape& tape, const ModelParams& model, Var x, std::size_t l) {
  const auto& cfg = model.config;
  const std::size_t dh = cfg.width / cfg.heads;
  Var q = affine(tape, model, x, blk(l, "attn.q"));
  Var k = affine(tape, model, x, blk(l, "attn.k"));
  Var v = affine(tape, model, x, blk(l, "attn.v"));
  std::vector<Var> heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Var qh = slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = slice_cols(v, h * dh, (h + 1) * dh);
    Var att = softmax_rows(scale(matmul(qh, transpose(kh)), inv));
    heads.push_back(matmul(att, vh));
  }
  Var cat = cfg.heads == 1 ? heads.front() : concat_cols(heads);
  return affine(tape, model, cat, blk(l, "attn.o"));
}

Var feedforward(Tape& tape, const ModelParams& model, Var x, std::size_t l) {
  return affine(tape, model, gelu(affine(tape, model, x, blk(l, "ffn.1"))), blk(l, "ffn.2"));
}

// Attention sub-layer followed by the FFN of block l; returns (residual, ffn_out).
std::pair<Var, Var> block_front(Tape& tape, const ModelParams& model, Var x, std::size_t l,
                                const ForwardOptions& opts) {
  Var a = layer_norm(x, param(tape, model, blk(l, "ln1.g")), param(tape, model, blk(l, "ln1.b")));
  a = self_attention(tape, model, a, l);
  Var res = add(x, maybe_dropout(a, model.config, opts));
  Var u = layer_norm(res, param(tape, model, blk(l, "ln2.g")), param(tape, model, blk(l, "ln2.b")));
  return {res, feedforward(tape, model, u, l)};
}

Var full_block(Tape& tape, const ModelParams& model, Var x, std::size_t l, const ForwardOptions& opts) {
  auto [res, u] = block_front(tape, model, x, l, opts);
  return add(res, maybe_dropout(u, model.config, opts));
}

Tensor positional_table(std::size_t frames, std::size_t width) {
  Tensor pe({frames, width});
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t j = 0; j < width; ++j) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (j / 2)) / static_cast<double>(width));
      pe(t, j) = (j % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
    }
  }
  return pe;
}

void normal_fill(Tensor& t, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  for (auto& v : t.values()) v = d(rng);
}

void add_linear(ParamSet& p, const std::string& prefix, std::size_t in, std::size_t out, std::mt19937_64& rng,
                bool zero_weight = false) {
  Tensor w({in, out}, 0.0);
  if (!zero_weight) normal_fill(w, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  p[prefix + ".w"] = std::move(w);
  p[prefix + ".b"] = Tensor({out}, 0.0);
}

void add_norm(ParamSet& p, const std::string& prefix, std::size_t width) {
  p[prefix + ".g"] = Tensor({width}, 1.0);
  p[prefix + ".b"] = Tensor({width}, 0.0);
}

}  // namespace

std::string to_string(DomainKnowledge k) {
  switch (k) {
    case DomainKnowledge::none: return "none";
    case DomainKnowledge::severity: return "severity";
    case DomainKnowledge::severity_gender: return "severity_gender";
    case DomainKnowledge::speaker: return "speaker";
  }
  return "none";
}

DomainKnowledge domain_knowledge_from_string(const std::string& s) {
  if (s == "none") return DomainKnowledge::none;
  if (s == "severity") return DomainKnowledge::severity;
  if (s == "severity_gender" || s == "severity-gender") return DomainKnowledge::severity_gender;
  if (s == "speaker") return DomainKnowledge::speaker;
  throw std::invalid_argument("unknown domain knowledge level '" + s + "'");
}

void EncoderConfig::validate() const {
  require(num_blocks >= 1, "num_blocks must be >= 1");
  require(moe_block >= 1 && moe_block <= num_blocks,
          "moe_block " + std::to_string(moe_block) + " outside [1, " + std::to_string(num_blocks) + "]");
  require(num_experts >= 1, "num_experts must be >= 1");
  require(width >= 1 && heads >= 1 && width % heads == 0,
          "width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  require(ffn_width >= 1 && bottleneck >= 1, "ffn_width and bottleneck must be positive");
  require(vocab >= 2, "vocab must include at least one token and the blank");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  require(num_classes != 1, "classification head needs at least two classes");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"num_blocks", c.num_blocks}, {"width", c.width},
                     {"heads", c.heads},           {"ffn_width", c.ffn_width},
                     {"vocab", c.vocab},           {"moe_block", c.moe_block},
                     {"num_experts", c.num_experts}, {"bottleneck", c.bottleneck},
                     {"dropout", c.dropout},       {"num_classes", c.num_classes},
                     {"positional_encoding", c.positional_encoding}, {"softmax_routing", c.softmax_routing}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.num_blocks = j.value("num_blocks", d.num_blocks);
  c.width = j.value("width", d.width);
  c.heads = j.value("heads", d.heads);
  c.ffn_width = j.value("ffn_width", d.ffn_width);
  c.vocab = j.value("vocab", d.vocab);
  c.moe_block = j.value("moe_block", d.moe_block);
  c.num_experts = j.value("num_experts", d.num_experts);
  c.bottleneck = j.value("bottleneck", d.bottleneck);
  c.dropout = j.value("dropout", d.dropout);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.positional_encoding = j.value("positional_encoding", d.positional_encoding);
  c.softmax_routing = j.value("softmax_routing", d.softmax_routing);
}

RoutingVector RoutingVector::one_hot(std::size_t n, std::size_t i) {
  require(i < n, "one_hot index out of range");
  RoutingVector r = zeros(n);
  r.values[i] = 1.0;
  return r;
}

ModelParams ModelParams::init(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams m;
  m.config = config;
  std::mt19937_64 rng(seed);
  const std::size_t f = config.width;
  for (std::size_t l = 1; l <= config.num_blocks; ++l) {
    add_norm(m.tensors, blk(l, "ln1"), f);
    add_linear(m.tensors, blk(l, "attn.q"), f, f, rng);
    add_linear(m.tensors, blk(l, "attn.k"), f, f, rng);
    add_linear(m.tensors, blk(l, "attn.v"), f, f, rng);
    add_linear(m.tensors, blk(l, "attn.o"), f, f, rng);
    add_norm(m.tensors, blk(l, "ln2"), f);
    add_linear(m.tensors, blk(l, "ffn.1"), f, config.ffn_width, rng);
    add_linear(m.tensors, blk(l, "ffn.2"), config.ffn_width, f, rng);
  }
  add_norm(m.tensors, "final_ln", f);
  for (std::size_t i = 0; i < config.num_experts; ++i) {
    const std::string p = expert_prefix(i);
    add_norm(m.tensors, p + "ln", f);
    add_linear(m.tensors, p + "down", f, config.bottleneck, rng);
    add_linear(m.tensors, p + "up", config.bottleneck, f, rng, /*zero_weight=*/true);
  }
  add_linear(m.tensors, "ctc", f, config.vocab, rng);
  if (config.num_classes > 0) add_linear(m.tensors, "cls", f, config.num_classes, rng);
  return m;
}

void ModelParams::save(const std::filesystem::path& stem) const {
  save_params(stem.string() + ".bin", tensors);
  std::ofstream out(stem.string() + ".json");
  if (!out) throw std::runtime_error("cannot write " + stem.string() + ".json");
  out << nlohmann::json(config).dump(2) << "\n";
}

ModelParams ModelParams::load(const std::filesystem::path& stem) {
  std::ifstream in(stem.string() + ".json");
  if (!in) throw std::runtime_error("missing model config " + stem.string() + ".json");
  ModelParams m;
  m.config = nlohmann::json::parse(in).get<EncoderConfig>();
  m.config.validate();
  m.tensors = load_params(stem.string() + ".bin");
  ModelParams ref = ModelParams::init(m.config, 0);
  for (const auto& [name, t] : ref.tensors) {
    auto it = m.tensors.find(name);
    if (it == m.tensors.end() || it->second.shape() != t.shape()) {
      throw std::runtime_error("checkpoint " + stem.string() + ".bin does not match its config at '" + name + "'");
    }
  }
  return m;
}

std::string expert_prefix(std::size_t i) { return "expert" + std::to_string(i) + "."; }

bool is_expert_param(const std::string& name) { return name.rfind("expert", 0) == 0; }
bool is_head_param(const std::string& name) { return name.rfind("ctc.", 0) == 0 || name.rfind("cls.", 0) == 0; }

ParamCounts count_params(const ModelParams& model) {
  ParamCounts c;
  for (const auto& [name, t] : model.tensors) {
    if (is_expert_param(name)) c.experts += t.size();
    else if (is_head_param(name)) c.heads += t.size();
    else c.backbone += t.size();
  }
  return c;
}

std::size_t sd_param_count(std::size_t speakers, std::size_t num_experts) { return speakers * num_experts; }

Var expert_forward(Tape& tape, Var u, const ModelParams& model, std::size_t expert) {
  require(expert < model.config.num_experts, "expert index out of range");
  const std::string p = expert_prefix(expert);
  Var z = layer_norm(u, param(tape, model, p + "ln.g"), param(tape, model, p + "ln.b"));
  return affine(tape, model, gelu(affine(tape, model, z, p + "down")), p + "up");
}

Var moe_combine(const std::vector<Var>& expert_outputs, Var routing) {
  require(!expert_outputs.empty(), "moe_combine needs at least one expert");
  const Tensor& r = routing.value();
  if (r.size() != expert_outputs.size()) {
    throw std::invalid_argument("routing vector has " + std::to_string(r.size()) + " entries for " +
                                std::to_string(expert_outputs.size()) + " experts");
  }
  const Shape& shape = expert_outputs.front().value().shape();
  Tensor out(shape, 0.0);
  for (std::size_t i = 0; i < expert_outputs.size(); ++i) {
    const Tensor& a = expert_outputs[i].value();
    if (a.shape() != shape) {
      throw std::invalid_argument("moe_combine expert shape mismatch: " + shape_str(shape) + " vs " +
                                  shape_str(a.shape()));
    }
    for (std::size_t k = 0; k < a.size(); ++k) out[k] += r[i] * a[k];
  }
  std::vector<Var> parents = expert_outputs;
  parents.push_back(routing);
  std::vector<std::size_t> ids;
  for (const Var& a : expert_outputs) ids.push_back(a.id());
  const std::size_t ir = routing.id();
  return routing.tape().push(std::move(out), parents, [ids, ir](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_in(self);
    const Tensor& rv = tp.value(ir);
    const bool want_r = tp.requires_grad(ir);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Tensor& a = tp.value(ids[i]);
      if (tp.requires_grad(ids[i])) {
        Tensor& ga = tp.grad_ref(ids[i]);
        for (std::size_t k = 0; k < g.size(); ++k) ga[k] += rv[i] * g[k];
      }
      if (want_r) {
        double s = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) s += g[k] * a[k];
        tp.grad_ref(ir)[i] += s;
      }
    }
  });
}

Var ctc_head(Tape& tape, Var hidden, const ModelParams& model) {
  require(hidden.value().cols() == model.config.width, "ctc_head width mismatch: " + shape_str(hidden.value().shape()));
  return affine(tape, model, hidden, "ctc");
}

Var classification_head(Tape& tape, Var hidden, const ModelParams& model) {
  require(model.config.num_classes > 0, "model has no classification head");
  require(hidden.value().rows() >= 1, "classification_head needs at least one frame");
  return affine(tape, model, mean_rows(hidden), "cls");
}

MoePrefix encode_prefix(Tape& tape, Var x, const ModelParams& model, const ForwardOptions& opts, bool with_experts) {
  const auto& cfg = model.config;
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != cfg.width) {
    throw std::invalid_argument("encoder input must be T×" + std::to_string(cfg.width) + ", got " +
                                shape_str(xv.shape()));
  }
  Var h = x;
  if (cfg.positional_encoding) h = add(h, tape.constant(positional_table(xv.rows(), cfg.width)));
  for (std::size_t l = 1; l < cfg.moe_block; ++l) h = full_block(tape, model, h, l, opts);
  MoePrefix p;
  p.block_input = h;
  std::tie(p.residual, p.ffn_out) = block_front(tape, model, h, cfg.moe_block, opts);
  if (with_experts) {
    for (std::size_t i = 0; i < cfg.num_experts; ++i) p.expert_outputs.push_back(expert_forward(tape, p.ffn_out, model, i));
  }
  return p;
}

EncoderOutput encode_suffix(Tape& tape, const MoePrefix& prefix, std::optional<Var> routing, const ModelParams& model,
                            const ForwardOptions& opts) {
  const auto& cfg = model.config;
  EncoderOutput out;
  out.expert_outputs = prefix.expert_outputs;
  out.ffn_out = prefix.ffn_out;
  Var u = prefix.ffn_out;
  if (routing) {
    if (routing->value().size() != cfg.num_experts) {
      throw std::invalid_argument("routing vector length " + std::to_string(routing->value().size()) +
                                  " != num_experts " + std::to_string(cfg.num_experts));
    }
    require(prefix.expert_outputs.size() == cfg.num_experts, "prefix was computed without experts");
    Var r = cfg.softmax_routing ? softmax_rows(*routing) : *routing;
    out.moe_contribution = moe_combine(prefix.expert_outputs, r);
    u = add(u, out.moe_contribution);
  }
  Var h = add(prefix.residual, maybe_dropout(u, cfg, opts));
  out.moe_hidden = h;
  for (std::size_t l = cfg.moe_block + 1; l <= cfg.num_blocks; ++l) h = full_block(tape, model, h, l, opts);
  out.hidden = layer_norm(h, param(tape, model, "final_ln.g"), param(tape, model, "final_ln.b"));
  out.logits = ctc_head(tape, out.hidden, model);
  if (cfg.num_classes > 0) out.class_logits = classification_head(tape, out.moe_hidden, model);
  return out;
}

EncoderOutput encoder_forward(Tape& tape, Var x, const ModelParams& model, std::optional<Var> routing,
                              const ForwardOptions& opts) {
  MoePrefix p = encode_prefix(tape, x, model, opts, routing.has_value());
  return encode_suffix(tape, p, routing, model, opts);
}

ParamSet extract_expert(const ModelParams& model, std::size_t expert) {
  require(expert < model.config.num_experts, "expert index out of range");
  const std::string p = expert_prefix(expert);
  ParamSet out;
  for (const char* leaf : {"ln.g", "ln.b", "down.w", "down.b", "up.w", "up.b"}) out[leaf] = model.tensors.at(p + leaf);
  return out;
}

void constrain_experts(ModelParams& model, double c) {
  require(c > 0.0, "expert max norm must be positive");
  for (auto& [name, t] : model.tensors) {
    if (!is_expert_param(name)) continue;
    const double cap = name.find(".up.") != std::string::npos ? c : kExpertInnerMaxNorm;
    auto& v = t.values();
    if (t.shape().size() == 1) {
      for (double& x : v) x = std::clamp(x, -cap, cap);
      continue;
    }
    const std::size_t rows = t.shape()[0], cols = t.shape()[1];
    for (std::size_t j = 0; j < cols; ++j) {
      double n2 = 0.0;
      for (std::size_t i = 0; i < rows; ++i) n2 += v[i * cols + j] * v[i * cols + j];
      const double n = std::sqrt(n2);
      if (n <= cap) continue;
      for (std::size_t i = 0; i < rows; ++i) v[i * cols + j] *= cap / n;
    }
  }
}

void init_experts_from_adaptive_training(ModelParams& model, const std::vector<ParamSet>& adapters) {
  if (adapters.size() != model.config.num_experts) {
    throw std::invalid_argument("got " + std::to_string(adapters.size()) + " group adapters for " +
                                std::to_string(model.config.num_experts) + " configured experts");
  }
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    const std::string p = expert_prefix(i);
    for (const auto& [leaf, t] : adapters[i]) {
      auto it = model.tensors.find(p + leaf);
      if (it == model.tensors.end() || it->second.shape() != t.shape()) {
        throw std::invalid_argument("adapter " + std::to_string(i) + " has incompatible tensor '" + leaf + "'");
      }
      it->second = t;
    }
  }
}

}  // namespace moe
