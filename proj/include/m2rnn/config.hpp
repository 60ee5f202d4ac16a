// SPDX-License-Identifier: Apache-2.0
//
// Flat key = value run configuration. Every key has a default; files and
// overrides may only set known keys.
#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "m2rnn/model.hpp"
#include "m2rnn/tp.hpp"
#include "m2rnn/train.hpp"

namespace m2rnn {

class RunConfig {
 public:
  RunConfig();

  // Lines of `key = value`; '#' starts a comment; blank lines are ignored.
  void parse(std::istream& is, const std::string& source = "<config>");
  void load(const std::filesystem::path& path);
  // "key=value"
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::int64_t> get_int_list(const std::string& key) const;

  // Every key, sorted, in the same syntax parse() accepts.
  void write(std::ostream& os) const;

  static const std::vector<std::string>& known_keys();

 private:
  std::map<std::string, std::string> values_;
};

ModelConfig model_config(const RunConfig& cfg);
TrainConfig train_config(const RunConfig& cfg);

}  // namespace m2rnn
