// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint of named float64 tensors, all integers little-endian:
//
//   "M2RN" | u32 version | u32 count |
//   count x ( u16 name_len | name | u8 rank | rank x u32 dim | f64 data... )
#pragma once

#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "m2rnn/tensor.hpp"

namespace m2rnn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_checkpoint(std::ostream& os, const NamedTensors& tensors);
NamedTensors read_checkpoint(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

}  // namespace m2rnn
