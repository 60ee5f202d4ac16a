// SPDX-License-Identifier: Apache-2.0
//
// In-process tensor-parallel simulation of the M2RNN block. Shards run as
// workers that only talk through a CollectiveBus; every all-reduce is a
// barrier round whose result is the shard-ascending sum, so all shards see
// the same bits regardless of scheduling.
#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "m2rnn/layer.hpp"

namespace m2rnn {

enum class Schedule {
  kThreaded,    // one free-running thread per shard
  kSequential,  // one shard runs at a time, baton passed in ascending order
};

enum class Direction { kForward, kBackward };

struct CommTag {
  std::int64_t step = 0;
  Direction direction = Direction::kForward;
  std::string op;
};

struct CommRecord {
  std::int64_t step;
  Direction direction;
  std::int64_t round;
  std::string op;
  Index elements;
};

class CollectiveBus {
 public:
  explicit CollectiveBus(int world, Schedule schedule = Schedule::kThreaded);

  int world() const { return world_; }

  // Blocks until every shard has posted to the current round, then returns
  // the sum over shards 0, 1, ..., world-1 (left to right).
  Tensor all_reduce_sum(int shard, const Tensor& payload, const CommTag& tag);

  // Worker lifecycle. begin() waits for the baton under kSequential; retire()
  // marks the shard finished and fails any round it can no longer complete.
  void begin(int shard);
  void retire(int shard);

  const std::vector<CommRecord>& log() const { return log_; }

 private:
  void pass_baton_locked(int from);
  void fail_locked(const std::string& why);
  bool round_blocked_locked() const;

  const int world_;
  const Schedule schedule_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<std::optional<Tensor>> pending_;
  std::vector<bool> retired_;
  int posted_ = 0;
  std::int64_t generation_ = 0;
  Tensor result_;
  CommTag round_tag_;
  int turn_ = 0;
  std::string error_;
  std::vector<CommRecord> log_;
};

// Runs fn(shard) for every shard on its own thread under the bus schedule and
// rethrows the lowest-numbered shard's exception, if any.
void run_shards(CollectiveBus& bus, const std::function<void(int)>& fn);

const char* direction_name(Direction d);
void write_comm_log_csv(std::ostream& os, const std::vector<CommRecord>& log);

// ---------------------------------------------------------------------------
// RMSNorm with features split across shards: one scalar per row is reduced in
// the forward (sum of squares) and one in the backward (sum of w * dy * x).
// ---------------------------------------------------------------------------

struct RmsNormTpResult {
  Tensor y;  // [M, d_local]
  Tensor s;  // [M]
};

RmsNormTpResult rmsnorm_tp_forward(CollectiveBus& bus, int shard, const Tensor& x_local,
                                   const Tensor& w_local, Index global_features, double eps,
                                   std::int64_t step = 0);

RmsNormGrads<double> rmsnorm_tp_backward(CollectiveBus& bus, int shard, const Tensor& x_local,
                                         const Tensor& w_local, const Tensor& s,
                                         const Tensor& dy_local, Index global_features,
                                         std::int64_t step = 0);

// Single-device RMSNorm over rows of x whose squares are summed per shard
// block first and the block sums then added in ascending order, matching the
// bus reduction exactly.
std::pair<Tensor, Tensor> rmsnorm_shard_major(const Tensor& x, const Tensor& w, int world, double eps);

// ---------------------------------------------------------------------------
// Sharding schemes
// ---------------------------------------------------------------------------

enum class TpScheme {
  kTopologyAware,        // each shard owns its own q/k head and a local RMSNorm
  kTopologyIndependent,  // q/k replicated, three extra backward reductions
};

const char* tp_scheme_name(TpScheme scheme);
TpScheme parse_tp_scheme(const std::string& name);

struct ShardRange {
  Index begin, end;
};

struct ShardSpec {
  int world = 1;
  TpScheme scheme = TpScheme::kTopologyIndependent;
  std::vector<ShardRange> heads;     // value heads owned by each shard
  std::vector<ShardRange> features;  // slice of the N*V readout features
};

ShardSpec make_shard_spec(const LayerConfig& cfg, int world, TpScheme scheme);

struct ShardParams {
  LayerConfig cfg;     // heads = local head count
  LayerParams params;  // local slices (q/k copies where replicated)
};

// Each shard gets a copy of the q/k projections and convolutions (so the
// query/key heads grow with the world size), its value heads, and the slice
// of the RMSNorm weight over its features, normalized locally.
std::vector<ShardParams> shard_topology_aware(const LayerParams& params, const LayerConfig& cfg,
                                              int world);

// Same slicing, but the shards jointly implement the unsharded layer: q/k are
// replicated, and the RMSNorm (when not per head) is reduced across shards.
std::vector<ShardParams> shard_topology_independent(const LayerParams& params,
                                                    const LayerConfig& cfg, int world);

// Inverse of the slicing for topology-independent shards: replicated tensors
// are taken from shard 0, partitioned ones concatenated.
LayerParams gather_shards(const std::vector<LayerParams>& shards, const LayerConfig& cfg);

// Parameters counted once per distinct tensor (replicated copies once).
Index distinct_param_count(const std::vector<ShardParams>& shards, TpScheme scheme);
Index full_param_count(const LayerParams& params);

struct TpStepResult {
  std::vector<Tensor> outputs;       // per shard, all identical
  std::vector<LayerParams> grads;    // per shard, local layout
  std::vector<Tensor> input_grads;   // per shard, all identical
  std::vector<CommRecord> log;
};

// One forward + backward of the block for loss sum(o .* d_output) with every
// shard building its own tape.
TpStepResult tp_layer_step(TpScheme scheme, const std::vector<ShardParams>& shards,
                           const Tensor& x, const Tensor& d_output,
                           Schedule schedule = Schedule::kThreaded, std::int64_t step = 0);

struct RoundCounts {
  int forward = 0, backward = 0;
};

// Rounds other than the output-projection reduction (forward) and the input
// gradient reduction (backward).
RoundCounts extra_rounds(const std::vector<CommRecord>& log);
RoundCounts total_rounds(const std::vector<CommRecord>& log);

}  // namespace m2rnn
