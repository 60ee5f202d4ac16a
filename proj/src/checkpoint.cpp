// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "m2rnn/errors.hpp"

namespace m2rnn {

namespace {

constexpr std::array<char, 4> kMagic = {'M', '2', 'R', 'N'};

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T)))
    throw IoError(std::string("checkpoint: truncated while reading ") + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void write_checkpoint(std::ostream& os, const NamedTensors& tensors) {
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max())
      throw IoError("checkpoint: tensor name too long: " + name.substr(0, 32) + "...");
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (Index d : t.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.size(); ++i) put<double>(os, t[i]);
  }
  if (!os) throw IoError("checkpoint: write failed");
}

NamedTensors read_checkpoint(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic)
    throw IoError("checkpoint: bad magic (not an M2RN file)");
  const auto version = get<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = get<std::uint32_t>(is, "tensor count");
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint16_t>(is, "name length"), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size())))
      throw IoError("checkpoint: truncated tensor name");
    Shape shape(get<std::uint8_t>(is, "rank"));
    for (Index& d : shape) d = get<std::uint32_t>(is, "dimension");
    Tensor t(shape);
    for (Index j = 0; j < t.size(); ++j) t[j] = get<double>(is, "tensor data");
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  write_checkpoint(os, tensors);
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path.string());
  return read_checkpoint(is);
}

}  // namespace m2rnn
