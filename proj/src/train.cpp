// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <random>

namespace m2rnn {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent streams for training batches and evaluation sets.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
}

constexpr std::uint64_t kTrainStream = 1, kEvalStream = 2, kLengthStream = 3;

struct Batch {
  std::vector<std::int64_t> tokens, labels;
  Index batch = 0, steps = 0;
};

struct RowStats {
  std::vector<double> loss;  // per-row cross-entropy
  std::vector<bool> correct;
};

RowStats row_stats(const Tensor& logits, const std::vector<std::int64_t>& labels) {
  const Index rows = logits.dim(0), classes = logits.dim(1);
  RowStats out{std::vector<double>(rows), std::vector<bool>(rows)};
  for (Index r = 0; r < rows; ++r) {
    const double* z = logits.data() + r * classes;
    Index best = 0;
    for (Index c = 1; c < classes; ++c)
      if (z[c] > z[best]) best = c;
    double denom = 0.0;
    for (Index c = 0; c < classes; ++c) denom += std::exp(z[c] - z[best]);
    out.loss[r] = std::log(denom) - (z[labels[r]] - z[best]);
    out.correct[r] = best == labels[r];
  }
  return out;
}

double mean_accuracy(const RowStats& s) {
  return static_cast<double>(std::count(s.correct.begin(), s.correct.end(), true)) /
         static_cast<double>(s.correct.size());
}

TrainRun run_training(SequenceModel model, const TrainConfig& cfg,
                      const std::function<Batch(std::int64_t)>& next_batch) {
  TrainRun run;
  run.optimizer = AdamW(model.params(), cfg.adam);
  run.model = std::move(model);
  ParamList& params = run.model.params();

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const double lr = lr_schedule(step, cfg.warmup, cfg.steps, cfg.peak_lr, cfg.lr_floor);
    const Batch b = next_batch(step);
    Tape tape;
    const auto leaves = run.model.add_leaves(tape);
    const Var logits = run.model.forward(tape, leaves, b.tokens, b.batch, b.steps);
    const Var loss = tape.softmax_cross_entropy(logits, b.labels);
    const double loss_value = tape.value(loss)[0];
    if (!std::isfinite(loss_value))
      throw DivergenceError("training diverged at step " + std::to_string(step) + ": loss " +
                            std::to_string(loss_value));
    tape.backward(loss);

    std::vector<Tensor> grads;
    grads.reserve(leaves.size());
    for (Var v : leaves) grads.push_back(tape.grad(v));
    const double norm = clip_grad_norm(grads, cfg.grad_clip);
    if (!std::isfinite(norm))
      throw DivergenceError("training diverged at step " + std::to_string(step) +
                            ": non-finite gradient norm");
    run.optimizer.step(params, grads, lr);
    run.model.project();

    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
      const double acc = mean_accuracy(row_stats(tape.value(logits), b.labels));
      run.metrics.push_back({step, "train", loss_value, acc, lr, norm});
    }
  }
  return run;
}

Batch group_batch(int k, Index length, Index count, std::uint64_t seed) {
  Batch b;
  b.batch = count;
  b.steps = length;
  for (const GroupSample& s : gen_sk_sequences(k, length, count, seed)) {
    b.tokens.insert(b.tokens.end(), s.tokens.begin(), s.tokens.end());
    b.labels.insert(b.labels.end(), s.labels.begin(), s.labels.end());
  }
  return b;
}

constexpr Index kEvalBatch = 128;

}  // namespace

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train: steps must be non-negative");
  if (batch < 1 || seq_len < 1 || log_every < 1 || eval_count < 1)
    throw ConfigError("train: batch, seq_len, log_every and eval_count must be positive");
  if (warmup < 0) throw ConfigError("train: warmup must be non-negative");
  if (!(peak_lr >= 0.0) || !(grad_clip > 0.0)) throw ConfigError("train: bad lr or clip");
  if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) throw ConfigError("train: lr_floor must lie in [0, 1]");
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "step,split,loss,accuracy,lr,grad_norm\n";
  const auto old = os.precision(17);
  for (const MetricRow& r : rows)
    os << r.step << ',' << r.split << ',' << r.loss << ',' << r.accuracy << ',' << r.lr << ','
       << r.grad_norm << '\n';
  os.precision(old);
}

std::vector<LengthAccuracy> evaluate_length_generalization(const SequenceModel& model, int k,
                                                           const std::vector<Index>& lengths,
                                                           Index count, std::uint64_t seed) {
  std::vector<LengthAccuracy> out;
  for (Index length : lengths) {
    if (length < 1) throw ConfigError("eval: lengths must be positive");
    LengthAccuracy acc{length, 0.0, 0.0, 0.0};
    Index final_hits = 0, hits = 0;
    double loss = 0.0;
    for (Index start = 0; start < count; start += kEvalBatch) {
      const Index n = std::min(kEvalBatch, count - start);
      const Batch b = group_batch(k, length, n,
                                  derive_seed(seed, kLengthStream, static_cast<std::uint64_t>(length) << 32 |
                                                                       static_cast<std::uint64_t>(start)));
      const RowStats s = row_stats(model.logits(b.tokens, n, length), b.labels);
      for (Index i = 0; i < n * length; ++i) {
        hits += s.correct[i];
        loss += s.loss[i];
      }
      for (Index i = 0; i < n; ++i) final_hits += s.correct[(i + 1) * length - 1];
    }
    acc.final_accuracy = static_cast<double>(final_hits) / static_cast<double>(count);
    acc.mean_accuracy = static_cast<double>(hits) / static_cast<double>(count * length);
    acc.loss = loss / static_cast<double>(count * length);
    out.push_back(acc);
  }
  return out;
}

void write_length_csv(std::ostream& os, const std::vector<LengthAccuracy>& rows) {
  os << "length,final_accuracy,mean_accuracy,loss\n";
  const auto old = os.precision(17);
  for (const LengthAccuracy& r : rows)
    os << r.length << ',' << r.final_accuracy << ',' << r.mean_accuracy << ',' << r.loss << '\n';
  os.precision(old);
}

TrainRun train_state_tracking(ModelConfig model_cfg, int k, const TrainConfig& cfg) {
  cfg.validate();
  const GroupTable group(k);
  model_cfg.vocab = model_cfg.classes = group.order();
  TrainRun run = run_training(SequenceModel(model_cfg), cfg, [&](std::int64_t step) {
    return group_batch(k, cfg.seq_len, cfg.batch, derive_seed(cfg.seed, kTrainStream, step));
  });
  const auto eval = evaluate_length_generalization(run.model, k, {cfg.seq_len}, cfg.eval_count,
                                                   derive_seed(cfg.seed, kEvalStream, 0));
  run.metrics.push_back({cfg.steps, "eval", eval[0].loss, eval[0].mean_accuracy,
                         lr_schedule(cfg.steps, cfg.warmup, cfg.steps, cfg.peak_lr, cfg.lr_floor), 0.0});
  return run;
}

std::string corpus_vocab(const std::string& corpus) {
  std::array<bool, 256> seen{};
  for (unsigned char c : corpus) seen[c] = true;
  std::string vocab;
  for (int c = 0; c < 256; ++c)
    if (seen[c]) vocab.push_back(static_cast<char>(c));
  return vocab;
}

namespace {

std::vector<std::int64_t> encode(const std::string& vocab, std::string_view text) {
  std::array<std::int64_t, 256> index;
  index.fill(-1);
  for (std::size_t i = 0; i < vocab.size(); ++i) index[static_cast<unsigned char>(vocab[i])] = static_cast<std::int64_t>(i);
  std::vector<std::int64_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) {
    if (index[c] < 0) throw ConfigError("char lm: byte " + std::to_string(c) + " not in vocabulary");
    ids.push_back(index[c]);
  }
  return ids;
}

}  // namespace

LmEval evaluate_char_lm(const SequenceModel& model, const std::string& vocab, const std::string& text,
                        Index window, Index max_windows) {
  const std::vector<std::int64_t> ids = encode(vocab, text);
  const Index n = static_cast<Index>(ids.size());
  if (n < 2) throw ConfigError("char lm: evaluation text needs at least two bytes");
  window = std::min(window, n - 1);
  const Index windows = std::min(max_windows, (n - 1) / window);
  double loss = 0.0;
  Index hits = 0;
  for (Index start = 0; start < windows; start += kEvalBatch) {
    const Index count = std::min(kEvalBatch, windows - start);
    Batch b;
    for (Index w = start; w < start + count; ++w) {
      const auto first = ids.begin() + w * window;
      b.tokens.insert(b.tokens.end(), first, first + window);
      b.labels.insert(b.labels.end(), first + 1, first + window + 1);
    }
    const RowStats s = row_stats(model.logits(b.tokens, count, window), b.labels);
    for (std::size_t i = 0; i < s.loss.size(); ++i) {
      loss += s.loss[i];
      hits += s.correct[i];
    }
  }
  const double total = static_cast<double>(windows * window);
  return {loss / total, static_cast<double>(hits) / total};
}

TrainRun train_char_lm(ModelConfig model_cfg, const std::string& corpus, const TrainConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw ConfigError("char lm: corpus is empty");
  const std::string vocab = corpus_vocab(corpus);
  model_cfg.vocab = model_cfg.classes = static_cast<Index>(vocab.size());

  const std::size_t split = corpus.size() * 9 / 10;
  const std::string_view train_text(corpus.data(), split);
  std::string held = corpus.substr(split);
  if (held.size() < 2) held = corpus;
  const std::vector<std::int64_t> ids = encode(vocab, train_text);
  const Index len = std::min<Index>(cfg.seq_len, static_cast<Index>(ids.size()) - 1);
  if (len < 1) throw ConfigError("char lm: corpus too short for one training window");

  TrainRun run = run_training(SequenceModel(model_cfg), cfg, [&](std::int64_t step) {
    std::mt19937_64 rng(derive_seed(cfg.seed, kTrainStream, step));
    std::uniform_int_distribution<Index> offset(0, static_cast<Index>(ids.size()) - len - 1);
    Batch b;
    b.batch = cfg.batch;
    b.steps = len;
    for (Index i = 0; i < cfg.batch; ++i) {
      const auto first = ids.begin() + offset(rng);
      b.tokens.insert(b.tokens.end(), first, first + len);
      b.labels.insert(b.labels.end(), first + 1, first + len + 1);
    }
    return b;
  });
  run.byte_vocab = vocab;
  const LmEval eval = evaluate_char_lm(run.model, vocab, held, cfg.seq_len, cfg.eval_count);
  run.metrics.push_back({cfg.steps, "eval", eval.loss, eval.accuracy,
                         lr_schedule(cfg.steps, cfg.warmup, cfg.steps, cfg.peak_lr, cfg.lr_floor), 0.0});
  return run;
}

}  // namespace m2rnn
