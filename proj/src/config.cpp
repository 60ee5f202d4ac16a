// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace m2rnn {

namespace {

struct KeyDefault {
  const char* key;
  const char* value;
};

// Defaults are the desk-scale S_3 setup.
constexpr KeyDefault kDefaults[] = {
    // model
    {"model", "m2rnn"},
    {"model_dim", "32"},
    {"embed_std", "1.0"},
    {"heads", "4"},
    {"key_dim", "8"},
    {"value_dim", "8"},
    {"conv_width", "4"},
    {"conv_init", "uniform"},
    {"per_head_norm", "false"},
    {"transition_init", "identity"},
    {"init_std", "0.1"},
    {"alpha_min", "1.0"},
    {"alpha_max", "8.0"},
    {"beta_min", "1.0"},
    {"beta_max", "8.0"},
    {"state_clip", "1.0"},
    {"hidden", "32"},
    {"vector_gain", "1.0"},
    {"diag_heads", "4"},
    {"diag_key_dim", "8"},
    {"diag_value_dim", "8"},
    // task
    {"task", "state"},
    {"group_k", "3"},
    {"corpus", ""},
    {"corpus_bytes", "200000"},
    // training
    {"seed", "0"},
    {"steps", "1000"},
    {"batch", "32"},
    {"seq_len", "32"},
    {"lr", "3e-3"},
    {"warmup", "100"},
    {"lr_floor", "0.1"},
    {"beta1", "0.9"},
    {"beta2", "0.999"},
    {"adam_eps", "1e-8"},
    {"weight_decay", "0.1"},
    {"grad_clip", "1.0"},
    {"log_every", "10"},
    {"eval_count", "256"},
    // evaluation
    {"checkpoint", ""},
    {"eval_lengths", "32,64,96"},
    // tensor parallel check
    {"tp_world", "2"},
    {"tp_scheme", "topology-independent"},
    {"tp_schedule", "threaded"},
    {"tp_batch", "2"},
    {"tp_steps", "6"},
    // gradient check
    {"gc_seeds", "20"},
    {"gc_fd_tol", "1e-4"},
    {"gc_tape_tol", "1e-10"},
    {"gc_corrupt_backward", "false"},
    // benchmark: NxKxV shapes
    {"bench_shapes", "4x16x16,4x32x16,4x16x32,8x16x16"},
    {"bench_batch", "8"},
    {"bench_steps", "64"},
    {"bench_repeats", "5"},
};

constexpr const char* kPositiveKeys[] = {
    "model_dim", "heads", "key_dim", "value_dim", "conv_width", "hidden", "diag_heads",
    "diag_key_dim", "diag_value_dim", "group_k", "corpus_bytes", "batch", "seq_len", "log_every",
    "eval_count", "tp_world", "tp_batch", "tp_steps", "gc_seeds", "bench_batch", "bench_steps",
    "bench_repeats"};

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty())
    throw ConfigError("config: key '" + key + "' expects a number, got '" + text + "'");
  return value;
}

}  // namespace

RunConfig::RunConfig() {
  for (const KeyDefault& d : kDefaults) values_[d.key] = d.value;
}

const std::vector<std::string>& RunConfig::known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const KeyDefault& d : kDefaults) k.emplace_back(d.key);
    std::sort(k.begin(), k.end());
    return k;
  }();
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second = value;
  if (std::find(std::begin(kPositiveKeys), std::end(kPositiveKeys), key) != std::end(kPositiveKeys) &&
      get_int(key) < 1)
    throw ConfigError("config: key '" + key + "' must be positive, got " + value);
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("config: override '" + assignment + "' is not of the form key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::parse(std::istream& is, const std::string& source) {
  std::string line;
  for (int lineno = 1; std::getline(is, line); ++lineno) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    if (line.find('=') == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      apply_override(line);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open " + path.string());
  parse(is, path.string());
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
  return parse_number<std::int64_t>(key, get(key));
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  return parse_number<std::uint64_t>(key, get(key));
}

double RunConfig::get_double(const std::string& key) const {
  return parse_number<double>(key, get(key));
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<std::int64_t> RunConfig::get_int_list(const std::string& key) const {
  std::vector<std::int64_t> out;
  std::istringstream is(get(key));
  for (std::string item; std::getline(is, item, ',');) out.push_back(parse_number<std::int64_t>(key, trim(item)));
  if (out.empty()) throw ConfigError("config: key '" + key + "' needs at least one value");
  return out;
}

void RunConfig::write(std::ostream& os) const {
  for (const auto& [key, value] : values_) os << key << " = " << value << '\n';
}

ModelConfig model_config(const RunConfig& cfg) {
  ModelConfig m;
  m.kind = parse_model_kind(cfg.get("model"));
  m.model_dim = cfg.get_int("model_dim");
  m.embed_std = cfg.get_double("embed_std");
  m.layer.model_dim = m.model_dim;
  m.layer.heads = cfg.get_int("heads");
  m.layer.key_dim = cfg.get_int("key_dim");
  m.layer.value_dim = cfg.get_int("value_dim");
  m.layer.conv_width = cfg.get_int("conv_width");
  m.layer.conv_init = parse_conv_init(cfg.get("conv_init"));
  m.layer.per_head_norm = cfg.get_bool("per_head_norm");
  m.layer.transition_init = parse_transition_init(cfg.get("transition_init"));
  m.layer.init_std = cfg.get_double("init_std");
  m.layer.alpha_range = {cfg.get_double("alpha_min"), cfg.get_double("alpha_max")};
  m.layer.beta_range = {cfg.get_double("beta_min"), cfg.get_double("beta_max")};
  const double clip = cfg.get_double("state_clip");
  m.layer.state_grad_clip = clip > 0.0 ? std::optional<double>(clip) : std::nullopt;
  m.hidden = cfg.get_int("hidden");
  m.vector_gain = cfg.get_double("vector_gain");
  m.diag_heads = cfg.get_int("diag_heads");
  m.diag_key_dim = cfg.get_int("diag_key_dim");
  m.diag_value_dim = cfg.get_int("diag_value_dim");
  m.seed = cfg.get_u64("seed");
  m.validate();
  return m;
}

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig t;
  t.steps = cfg.get_int("steps");
  t.batch = cfg.get_int("batch");
  t.seq_len = cfg.get_int("seq_len");
  t.peak_lr = cfg.get_double("lr");
  t.warmup = cfg.get_int("warmup");
  t.lr_floor = cfg.get_double("lr_floor");
  t.adam = {cfg.get_double("beta1"), cfg.get_double("beta2"), cfg.get_double("adam_eps"),
            cfg.get_double("weight_decay")};
  t.grad_clip = cfg.get_double("grad_clip");
  t.seed = cfg.get_u64("seed");
  t.log_every = cfg.get_int("log_every");
  t.eval_count = cfg.get_int("eval_count");
  t.validate();
  return t;
}

}  // namespace m2rnn
