// Copyright 2026 The moe-adapt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "moe/autograd.hpp"

namespace moe {

/// Binary tensor archive:
///   "MOER1" | version u32 | { name_len u32 | name | rank u32 | dims u64... | f64 values } ...
/// All integers and floats little-endian. Records run to end of file.
inline constexpr char kCheckpointMagic[5] = {'M', 'O', 'E', 'R', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_params(const std::filesystem::path& path, const ParamSet& params);
ParamSet load_params(const std::filesystem::path& path);

/// Single-tensor convenience (feature files).
void save_tensor(const std::filesystem::path& path, const std::string& name, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path, const std::string& name);

std::uint64_t file_fnv1a(const std::filesystem::path& path);
std::uint64_t params_hash(const ParamSet& params);

}  // namespace moe
