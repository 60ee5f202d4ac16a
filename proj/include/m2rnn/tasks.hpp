// SPDX-License-Identifier: Apache-2.0
//
// Synthetic workloads: word problems over the symmetric group S_k (S_2 is
// parity), the vector-RNN embedding check, and a byte corpus for the
// character-level language model.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2rnn/baselines.hpp"

namespace m2rnn {

using Permutation = std::vector<int>;

// All k! permutations of {0..k-1} in lexicographic order, with the
// composition table table(a, b) = index of a o b, where (a o b)(i) = a(b(i)).
class GroupTable {
 public:
  explicit GroupTable(int k);

  int k() const { return k_; }
  int order() const { return static_cast<int>(elements_.size()); }
  const Permutation& element(int index) const { return elements_.at(index); }
  int index_of(const Permutation& p) const;
  int compose(int a, int b) const { return table_[static_cast<std::size_t>(a) * order() + b]; }
  int identity() const { return 0; }

 private:
  int k_;
  std::vector<Permutation> elements_;
  std::vector<int> table_;
};

inline GroupTable sk_group_table(int k) { return GroupTable(k); }

struct GroupSample {
  std::vector<int> tokens;  // element index applied at each step
  std::vector<int> labels;  // running composition after each step
};

// Tokens uniform over the k! elements; labels[t] = labels[t-1] o tokens[t].
std::vector<GroupSample> gen_sk_sequences(int k, Index length, Index count, std::uint64_t seed);

// Builds the M2RNN inputs that reproduce a vector RNN h_t = tanh(W h_{t-1} + x_t)
// on T random inputs and returns max_t |y_t - h_t|.
double theorem_reduction_check(const VectorRnnParams& params, Index steps, std::uint64_t seed);

// Deterministic English-like text: sentences drawn from a small lexicon, with
// "name = value" records that are recalled later in the same paragraph.
std::string make_synthetic_corpus(std::size_t bytes, std::uint64_t seed);

}  // namespace m2rnn
