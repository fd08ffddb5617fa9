// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace moe {

namespace {

template <typename U>
void put_le(std::vector<unsigned char>& buf, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(std::vector<unsigned char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  bool done() const { return pos_ == bytes_.size(); }

  template <typename U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(&bytes_[pos_]), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("truncated checkpoint: " + path_);
  }

  std::vector<unsigned char> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void save_params(const std::filesystem::path& path, const ParamSet& params) {
  std::vector<unsigned char> buf(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_le<std::uint32_t>(buf, kCheckpointVersion);
  for (const auto& [name, t] : params) {
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(buf, d);
    for (double v : t.values()) put_le<std::uint64_t>(buf, std::bit_cast<std::uint64_t>(v));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CheckpointError("write failed: " + path.string());
}

ParamSet load_params(const std::filesystem::path& path) {
  Reader r(read_all(path), path.string());
  if (r.str(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic)) {
    throw CheckpointError("bad magic in " + path.string());
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  ParamSet out;
  while (!r.done()) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.str(len);
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 8) throw CheckpointError("bad rank for '" + name + "' in " + path.string());
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = std::bit_cast<double>(r.get<std::uint64_t>());
    try {
      out.insert_or_assign(name, Tensor(shape, std::move(values)));
    } catch (const std::invalid_argument& e) {
      throw CheckpointError("bad tensor '" + name + "' in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

void save_tensor(const std::filesystem::path& path, const std::string& name, const Tensor& t) {
  save_params(path, ParamSet{{name, t}});
}

Tensor load_tensor(const std::filesystem::path& path, const std::string& name) {
  ParamSet p = load_params(path);
  auto it = p.find(name);
  if (it == p.end()) throw CheckpointError("tensor '" + name + "' missing from " + path.string());
  return it->second;
}

std::uint64_t file_fnv1a(const std::filesystem::path& path) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char b : read_all(path)) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t params_hash(const ParamSet& params) {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& [name, t] : params) {
    for (char c : name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
    h = tensor_hash(t, h);
  }
  return h;
}

}  // namespace moe
