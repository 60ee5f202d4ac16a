// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "m2rnn/model.hpp"
#include "m2rnn/optim.hpp"
#include "m2rnn/tasks.hpp"

namespace m2rnn {

struct TrainConfig {
  std::int64_t steps = 1000;
  Index batch = 32;
  // Training sequence length (state tracking) or window length (char LM).
  Index seq_len = 32;
  double peak_lr = 3e-3;
  std::int64_t warmup = 100;
  double lr_floor = 0.1;
  AdamWConfig adam;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  // A train metrics row every log_every steps (and at the last step).
  std::int64_t log_every = 10;
  // Held-out evaluation at the end of training.
  Index eval_count = 256;

  void validate() const;
};

struct MetricRow {
  std::int64_t step = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows);

struct TrainRun {
  SequenceModel model;
  AdamW optimizer;
  std::vector<MetricRow> metrics;
  // Byte value of each class for character models; empty otherwise.
  std::string byte_vocab;
};

// Per-position cross-entropy on fresh S_k sequences of length cfg.seq_len.
// The model's vocab and class count are set to k!.
TrainRun train_state_tracking(ModelConfig model_cfg, int k, const TrainConfig& cfg);

struct LengthAccuracy {
  Index length = 0;
  double final_accuracy = 0.0;  // prediction at the last position
  double mean_accuracy = 0.0;   // over all positions
  double loss = 0.0;            // mean per-position cross-entropy
};

std::vector<LengthAccuracy> evaluate_length_generalization(const SequenceModel& model, int k,
                                                           const std::vector<Index>& lengths,
                                                           Index count, std::uint64_t seed);

void write_length_csv(std::ostream& os, const std::vector<LengthAccuracy>& rows);

// Distinct byte values of the corpus, ascending.
std::string corpus_vocab(const std::string& corpus);

// Next-byte prediction on random windows of the first 90% of the corpus; the
// closing "eval" metrics row is measured on fixed windows of the last 10%.
TrainRun train_char_lm(ModelConfig model_cfg, const std::string& corpus, const TrainConfig& cfg);

struct LmEval {
  double loss = 0.0;
  double accuracy = 0.0;
};

LmEval evaluate_char_lm(const SequenceModel& model, const std::string& vocab,
                        const std::string& text, Index window, Index max_windows);

}  // namespace m2rnn
