// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "m2rnn/gradcheck.hpp"

namespace m2rnn {

GroupTable::GroupTable(int k) : k_(k) {
  if (k < 2 || k > 5) throw ConfigError("S_k: k must be in 2..5, got " + std::to_string(k));
  Permutation p(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) p[i] = i;
  do elements_.push_back(p);
  while (std::next_permutation(p.begin(), p.end()));

  const int n = order();
  table_.resize(static_cast<std::size_t>(n) * n);
  Permutation c(static_cast<std::size_t>(k));
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) {
      for (int i = 0; i < k; ++i) c[i] = elements_[a][elements_[b][i]];
      table_[static_cast<std::size_t>(a) * n + b] = index_of(c);
    }
}

int GroupTable::index_of(const Permutation& p) const {
  const auto it = std::lower_bound(elements_.begin(), elements_.end(), p);
  if (it == elements_.end() || *it != p) throw ConfigError("S_k: not a permutation of 0..k-1");
  return static_cast<int>(it - elements_.begin());
}

std::vector<GroupSample> gen_sk_sequences(int k, Index length, Index count, std::uint64_t seed) {
  const GroupTable group(k);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, group.order() - 1);
  std::vector<GroupSample> out(static_cast<std::size_t>(count));
  for (GroupSample& s : out) {
    s.tokens.resize(static_cast<std::size_t>(length));
    s.labels.resize(static_cast<std::size_t>(length));
    int state = group.identity();
    for (Index t = 0; t < length; ++t) {
      s.tokens[t] = pick(rng);
      state = group.compose(state, s.tokens[t]);
      s.labels[t] = state;
    }
  }
  return out;
}

double theorem_reduction_check(const VectorRnnParams& params, Index steps, std::uint64_t seed) {
  const Tensor& w = params.transition;
  if (w.rank() != 2 || w.dim(0) != w.dim(1))
    throw ConfigError("reduction check: transition must be square, got " + shape_str(w.shape()));
  const Index d = w.dim(0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Tensor x({1, steps, d});
  for (double& v : x.values()) v = u(rng);
  const Tensor h = vector_rnn_scan(w, x);
  const Tensor y = m2rnn_forward(m2rnn_from_vector_rnn(w, x, d)).outputs;
  return max_abs_diff(y.reshaped(h.shape()), h);
}

namespace {

constexpr std::array<const char*, 48> kLexicon = {
    "the",   "of",    "and",   "a",     "to",    "in",    "is",    "it",    "that",  "was",
    "for",   "on",    "with",  "as",    "by",    "at",    "from",  "this",  "which", "but",
    "river", "stone", "light", "small", "north", "house", "water", "early", "field", "table",
    "green", "under", "after", "long",  "cold",  "line",  "point", "order", "state", "group",
    "value", "round", "left",  "train", "clear", "quiet", "sound", "open"};

}  // namespace

std::string make_synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  // Zipf-like word weights.
  std::vector<double> weights(kLexicon.size());
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = 1.0 / static_cast<double>(i + 1);
  std::discrete_distribution<std::size_t> word(weights.begin(), weights.end());
  std::uniform_int_distribution<int> letter('a', 'z'), digit('0', '9'), small(1, 3), len(4, 9);

  std::string out;
  out.reserve(bytes + 256);
  auto sentence = [&] {
    const int n = len(rng);
    for (int i = 0; i < n; ++i) {
      std::string w = kLexicon[word(rng)];
      if (i == 0) w[0] = static_cast<char>(w[0] - 'a' + 'A');
      out += w;
      out += i + 1 == n ? ". " : " ";
    }
  };
  while (out.size() < bytes) {
    const int records = small(rng);
    std::vector<std::pair<std::string, std::string>> kv;
    for (int r = 0; r < records; ++r) {
      std::string name;
      do name = {static_cast<char>(letter(rng)), static_cast<char>(letter(rng))};
      while (std::any_of(kv.begin(), kv.end(), [&](const auto& e) { return e.first == name; }));
      std::string value{static_cast<char>(digit(rng)), static_cast<char>(digit(rng)),
                        static_cast<char>(digit(rng))};
      out += "Let " + name + " = " + value + ". ";
      kv.emplace_back(std::move(name), std::move(value));
      for (int s = small(rng); s > 0; --s) sentence();
    }
    std::shuffle(kv.begin(), kv.end(), rng);
    for (const auto& [name, value] : kv) {
      out += "So " + name + " = " + value + ". ";
      if (small(rng) == 1) sentence();
    }
    out.back() = '\n';
  }
  out.resize(bytes);
  return out;
}

}  // namespace m2rnn
