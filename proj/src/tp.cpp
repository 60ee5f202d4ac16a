// SPDX-License-Identifier: Apache-2.0
#include "m2rnn/tp.hpp"

#include <algorithm>
#include <exception>
#include <thread>

namespace m2rnn {

CollectiveBus::CollectiveBus(int world, Schedule schedule)
    : world_(world), schedule_(schedule), pending_(world > 0 ? world : 0), retired_(pending_.size()) {
  if (world < 1) throw ConfigError("bus: world size must be at least 1");
}

void CollectiveBus::fail_locked(const std::string& why) {
  if (error_.empty()) error_ = why;
  cv_.notify_all();
}

bool CollectiveBus::round_blocked_locked() const {
  if (posted_ == 0) return false;
  for (int s = 0; s < world_; ++s)
    if (!pending_[s] && !retired_[s]) return false;
  return true;
}

void CollectiveBus::pass_baton_locked(int from) {
  for (int i = 1; i <= world_; ++i) {
    const int next = (from + i) % world_;
    if (!retired_[next]) {
      turn_ = next;
      break;
    }
  }
  cv_.notify_all();
}

void CollectiveBus::begin(int shard) {
  std::unique_lock lock(mutex_);
  if (schedule_ == Schedule::kSequential)
    cv_.wait(lock, [&] { return turn_ == shard || !error_.empty(); });
  if (!error_.empty()) throw ProtocolError(error_);
}

void CollectiveBus::retire(int shard) {
  std::lock_guard lock(mutex_);
  retired_[shard] = true;
  if (round_blocked_locked())
    fail_locked("deadlock: shard " + std::to_string(shard) + " finished while round '" +
                round_tag_.op + "' still waits for it");
  if (schedule_ == Schedule::kSequential && turn_ == shard) pass_baton_locked(shard);
  cv_.notify_all();
}

Tensor CollectiveBus::all_reduce_sum(int shard, const Tensor& payload, const CommTag& tag) {
  std::unique_lock lock(mutex_);
  if (!error_.empty()) throw ProtocolError(error_);
  if (shard < 0 || shard >= world_ || retired_[shard])
    throw ProtocolError("bus: shard " + std::to_string(shard) + " cannot post");
  if (posted_ == 0) {
    round_tag_ = tag;
  } else {
    const auto it = std::find_if(pending_.begin(), pending_.end(),
                                 [](const auto& p) { return p.has_value(); });
    const Tensor& first = **it;
    if (tag.op != round_tag_.op || tag.direction != round_tag_.direction || tag.step != round_tag_.step) {
      fail_locked("bus: shard " + std::to_string(shard) + " posted '" + tag.op +
                  "' into round '" + round_tag_.op + "'");
      throw ProtocolError(error_);
    }
    if (first.shape() != payload.shape()) {
      fail_locked("bus: payload " + shape_str(payload.shape()) + " from shard " +
                  std::to_string(shard) + " disagrees with " + shape_str(first.shape()));
      throw ProtocolError(error_);
    }
  }
  pending_[shard] = payload;
  ++posted_;
  const std::int64_t generation = generation_;

  if (posted_ == world_) {
    Tensor sum = *pending_[0];
    for (int s = 1; s < world_; ++s) sum.array() += pending_[s]->array();
    log_.push_back({tag.step, tag.direction, static_cast<std::int64_t>(log_.size()), tag.op, sum.size()});
    for (auto& p : pending_) p.reset();
    posted_ = 0;
    result_ = std::move(sum);
    ++generation_;
    cv_.notify_all();
    return result_;
  }
  if (round_blocked_locked()) {
    fail_locked("deadlock: round '" + tag.op + "' can never complete");
    throw ProtocolError(error_);
  }
  if (schedule_ == Schedule::kSequential) pass_baton_locked(shard);
  cv_.wait(lock, [&] {
    if (!error_.empty()) return true;
    return generation_ != generation && (schedule_ != Schedule::kSequential || turn_ == shard);
  });
  if (!error_.empty()) throw ProtocolError(error_);
  return result_;
}

void run_shards(CollectiveBus& bus, const std::function<void(int)>& fn) {
  const int world = bus.world();
  std::vector<std::exception_ptr> errors(world);
  std::vector<std::thread> threads;
  threads.reserve(world);
  for (int s = 0; s < world; ++s)
    threads.emplace_back([&, s] {
      try {
        bus.begin(s);
        fn(s);
      } catch (...) {
        errors[s] = std::current_exception();
      }
      bus.retire(s);
    });
  for (auto& t : threads) t.join();
  // A shard's own failure takes precedence over the protocol errors it caused.
  std::exception_ptr first_protocol;
  for (const auto& e : errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const ProtocolError&) {
      if (!first_protocol) first_protocol = e;
    } catch (...) {
      std::rethrow_exception(e);
    }
  }
  if (first_protocol) std::rethrow_exception(first_protocol);
}

const char* direction_name(Direction d) { return d == Direction::kForward ? "forward" : "backward"; }

void write_comm_log_csv(std::ostream& os, const std::vector<CommRecord>& log) {
  os << "step,direction,round,op,elements\n";
  for (const CommRecord& r : log)
    os << r.step << ',' << direction_name(r.direction) << ',' << r.round << ',' << r.op << ','
       << r.elements << '\n';
}

// ---------------------------------------------------------------------------
// RMSNorm across feature shards
// ---------------------------------------------------------------------------

RmsNormTpResult rmsnorm_tp_forward(CollectiveBus& bus, int shard, const Tensor& x_local,
                                   const Tensor& w_local, Index global_features, double eps,
                                   std::int64_t step) {
  if (x_local.rank() != 2 || w_local.size() != x_local.dim(1))
    throw DimensionError("rmsnorm_tp_forward: x " + shape_str(x_local.shape()) + " vs w " +
                         shape_str(w_local.shape()));
  const Index rows = x_local.dim(0), width = x_local.dim(1);
  Tensor partial({rows});
  for (Index r = 0; r < rows; ++r)
    partial[r] = sum_of_squares(std::span<const double>(x_local.data() + r * width, width));
  const Tensor total = bus.all_reduce_sum(shard, partial, {step, Direction::kForward, "rmsnorm_s"});
  RmsNormTpResult out{Tensor(x_local.shape()), Tensor({rows})};
  for (Index r = 0; r < rows; ++r) {
    out.s[r] = rms_inverse(total[r], global_features, eps);
    rmsnorm_apply(std::span<const double>(x_local.data() + r * width, width), w_local.values(),
                  out.s[r], std::span<double>(out.y.data() + r * width, width));
  }
  return out;
}

RmsNormGrads<double> rmsnorm_tp_backward(CollectiveBus& bus, int shard, const Tensor& x_local,
                                         const Tensor& w_local, const Tensor& s,
                                         const Tensor& dy_local, Index global_features,
                                         std::int64_t step) {
  require_shape(dy_local, x_local.shape(), "rmsnorm_tp_backward dy");
  const Index rows = x_local.dim(0), width = x_local.dim(1);
  Tensor partial({rows});
  for (Index r = 0; r < rows; ++r)
    partial[r] = weighted_dot(w_local.values(), std::span<const double>(dy_local.data() + r * width, width),
                              std::span<const double>(x_local.data() + r * width, width));
  const Tensor total = bus.all_reduce_sum(shard, partial, {step, Direction::kBackward, "rmsnorm_r"});
  RmsNormGrads<double> g{Tensor(x_local.shape()), Tensor(w_local.shape())};
  for (Index r = 0; r < rows; ++r)
    rmsnorm_backward_apply(std::span<const double>(x_local.data() + r * width, width),
                           w_local.values(), s[r], total[r], global_features,
                           std::span<const double>(dy_local.data() + r * width, width),
                           std::span<double>(g.dx.data() + r * width, width), g.dw.values());
  return g;
}

std::pair<Tensor, Tensor> rmsnorm_shard_major(const Tensor& x, const Tensor& w, int world, double eps) {
  const Index rows = x.dim(0), width = x.dim(1);
  if (width % world != 0) throw ConfigError("rmsnorm_shard_major: width not divisible by world");
  const Index block = width / world;
  Tensor y(x.shape()), s({rows});
  for (Index r = 0; r < rows; ++r) {
    double total = 0.0;
    for (int b = 0; b < world; ++b) {
      const double part = sum_of_squares(std::span<const double>(x.data() + r * width + b * block, block));
      total = b == 0 ? part : total + part;
    }
    s[r] = rms_inverse(total, width, eps);
    rmsnorm_apply(std::span<const double>(x.data() + r * width, width), w.values(), s[r],
                  std::span<double>(y.data() + r * width, width));
  }
  return {std::move(y), std::move(s)};
}

// ---------------------------------------------------------------------------
// Sharding
// ---------------------------------------------------------------------------

const char* tp_scheme_name(TpScheme scheme) {
  return scheme == TpScheme::kTopologyAware ? "topology-aware" : "topology-independent";
}

TpScheme parse_tp_scheme(const std::string& name) {
  if (name == "topology-aware" || name == "aware") return TpScheme::kTopologyAware;
  if (name == "topology-independent" || name == "independent") return TpScheme::kTopologyIndependent;
  throw ConfigError("unknown TP scheme '" + name + "' (topology-aware|topology-independent)");
}

ShardSpec make_shard_spec(const LayerConfig& cfg, int world, TpScheme scheme) {
  if (world < 1 || cfg.heads % world != 0)
    throw ConfigError("tp: heads (" + std::to_string(cfg.heads) + ") not divisible by world size " +
                      std::to_string(world));
  ShardSpec spec{world, scheme, {}, {}};
  const Index per = cfg.heads / world;
  for (int s = 0; s < world; ++s) {
    spec.heads.push_back({s * per, (s + 1) * per});
    spec.features.push_back({s * per * cfg.value_dim, (s + 1) * per * cfg.value_dim});
  }
  return spec;
}

namespace {

// Columns [c0, c1) of a row-major [R, C] tensor.
Tensor cols(const Tensor& t, Index c0, Index c1) {
  const Index rows = t.dim(0), width = t.dim(1);
  Tensor out({rows, c1 - c0});
  for (Index r = 0; r < rows; ++r)
    for (Index c = c0; c < c1; ++c) out(r, c - c0) = t[r * width + c];
  return out;
}

// Leading-axis slice [i0, i1).
Tensor rows(const Tensor& t, Index i0, Index i1) {
  Shape shape = t.shape();
  const Index per = t.size() / shape[0];
  shape[0] = i1 - i0;
  Tensor out(shape);
  std::copy_n(t.data() + i0 * per, out.size(), out.data());
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  Index width = 0;
  for (const Tensor& p : parts) width += p.dim(1);
  Tensor out({parts.front().dim(0), width});
  Index c0 = 0;
  for (const Tensor& p : parts) {
    for (Index r = 0; r < p.dim(0); ++r)
      for (Index c = 0; c < p.dim(1); ++c) out(r, c0 + c) = p(r, c);
    c0 += p.dim(1);
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  Shape shape = parts.front().shape();
  shape[0] = 0;
  for (const Tensor& p : parts) shape[0] += p.dim(0);
  Tensor out(shape);
  Index off = 0;
  for (const Tensor& p : parts) {
    std::copy_n(p.data(), p.size(), out.data() + off);
    off += p.size();
  }
  return out;
}

std::vector<ShardParams> slice_shards(const LayerParams& p, const LayerConfig& cfg, int world,
                                      TpScheme scheme) {
  const ShardSpec spec = make_shard_spec(cfg, world, scheme);
  std::vector<ShardParams> out;
  for (int s = 0; s < world; ++s) {
    const auto [h0, h1] = spec.heads[s];
    const auto [f0, f1] = spec.features[s];
    ShardParams sp{cfg, {}};
    sp.cfg.heads = h1 - h0;
    LayerParams& l = sp.params;
    l.w_q = p.w_q;
    l.b_q = p.b_q;
    l.w_k = p.w_k;
    l.b_k = p.b_k;
    l.conv_q = p.conv_q;
    l.conv_k = p.conv_k;
    l.w_v = cols(p.w_v, f0, f1);
    l.b_v = rows(p.b_v, f0, f1);
    l.conv_v = cols(p.conv_v, f0, f1);
    l.w_f = cols(p.w_f, h0, h1);
    l.w_g = cols(p.w_g, f0, f1);
    l.transition = rows(p.transition, h0, h1);
    l.residual = rows(p.residual, h0, h1);
    l.norm_weight = rows(p.norm_weight, f0, f1);
    l.w_o = rows(p.w_o, f0, f1);
    l.gate.alpha = rows(p.gate.alpha, h0, h1);
    l.gate.beta = rows(p.gate.beta, h0, h1);
    out.push_back(std::move(sp));
  }
  return out;
}

bool replicated_name(const std::string& name) {
  return name == "w_q" || name == "b_q" || name == "w_k" || name == "b_k" || name == "conv_q" ||
         name == "conv_k";
}

}  // namespace

std::vector<ShardParams> shard_topology_aware(const LayerParams& params, const LayerConfig& cfg,
                                              int world) {
  return slice_shards(params, cfg, world, TpScheme::kTopologyAware);
}

std::vector<ShardParams> shard_topology_independent(const LayerParams& params,
                                                    const LayerConfig& cfg, int world) {
  return slice_shards(params, cfg, world, TpScheme::kTopologyIndependent);
}

LayerParams gather_shards(const std::vector<LayerParams>& shards, const LayerConfig&) {
  auto all = [&](Tensor LayerParams::*field) {
    std::vector<Tensor> parts;
    for (const LayerParams& s : shards) parts.push_back(s.*field);
    return parts;
  };
  auto gate = [&](Tensor ForgetGateParams::*field) {
    std::vector<Tensor> parts;
    for (const LayerParams& s : shards) parts.push_back(s.gate.*field);
    return concat_rows(parts);
  };
  const LayerParams& first = shards.front();
  LayerParams p;
  p.w_q = first.w_q;
  p.b_q = first.b_q;
  p.w_k = first.w_k;
  p.b_k = first.b_k;
  p.conv_q = first.conv_q;
  p.conv_k = first.conv_k;
  p.w_v = concat_cols(all(&LayerParams::w_v));
  p.b_v = concat_rows(all(&LayerParams::b_v));
  p.conv_v = concat_cols(all(&LayerParams::conv_v));
  p.w_f = concat_cols(all(&LayerParams::w_f));
  p.w_g = concat_cols(all(&LayerParams::w_g));
  p.transition = concat_rows(all(&LayerParams::transition));
  p.residual = concat_rows(all(&LayerParams::residual));
  p.norm_weight = concat_rows(all(&LayerParams::norm_weight));
  p.w_o = concat_rows(all(&LayerParams::w_o));
  p.gate.alpha = gate(&ForgetGateParams::alpha);
  p.gate.beta = gate(&ForgetGateParams::beta);
  return p;
}

Index full_param_count(const LayerParams& params) {
  Index n = 0;
  params.visit([&](const char*, const Tensor& t) { n += t.size(); });
  return n;
}

Index distinct_param_count(const std::vector<ShardParams>& shards, TpScheme scheme) {
  Index n = 0;
  for (std::size_t s = 0; s < shards.size(); ++s)
    shards[s].params.visit([&](const char* name, const Tensor& t) {
      if (scheme == TpScheme::kTopologyIndependent && s > 0 && replicated_name(name)) return;
      n += t.size();
    });
  return n;
}

// ---------------------------------------------------------------------------
// Layer step
// ---------------------------------------------------------------------------

namespace {

// Identity forward; all-reduces the gradient in the backward pass.
Var reduce_grad(Tape& tape, Var x, CollectiveBus& bus, int shard, std::int64_t step,
                const char* op) {
  return tape.custom({x}, tape.value(x), [&bus, shard, step, op](const Tensor& g) {
    return std::vector<Tensor>{bus.all_reduce_sum(shard, g, {step, Direction::kBackward, op})};
  });
}

// All-reduces in the forward pass; the gradient passes through unchanged.
Var reduce_value(Tape& tape, Var x, CollectiveBus& bus, int shard, std::int64_t step,
                 const char* op) {
  Tensor sum = bus.all_reduce_sum(shard, tape.value(x), {step, Direction::kForward, op});
  return tape.custom({x}, std::move(sum), [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Var rmsnorm_tp_node(Tape& tape, Var z, Var w, CollectiveBus& bus, int shard, std::int64_t step,
                    Index global_features, double eps) {
  const Tensor& zv = tape.value(z);
  const Tensor& wv = tape.value(w);
  RmsNormTpResult r = rmsnorm_tp_forward(bus, shard, zv, wv, global_features, eps, step);
  auto backward = [&bus, shard, step, global_features, zv, wv, s = std::move(r.s)](const Tensor& g) {
    RmsNormGrads<double> rg = rmsnorm_tp_backward(bus, shard, zv, wv, s, g, global_features, step);
    return std::vector<Tensor>{std::move(rg.dx), std::move(rg.dw)};
  };
  return tape.custom({z, w}, std::move(r.y), std::move(backward));
}

}  // namespace

TpStepResult tp_layer_step(TpScheme scheme, const std::vector<ShardParams>& shards,
                           const Tensor& x, const Tensor& d_output, Schedule schedule,
                           std::int64_t step) {
  const int world = static_cast<int>(shards.size());
  if (world == 0) throw ConfigError("tp_layer_step: no shards");
  CollectiveBus bus(world, schedule);
  TpStepResult result;
  result.outputs.resize(world);
  result.grads.resize(world);
  result.input_grads.resize(world);
  const Index global_features = shards.front().cfg.value_dim * shards.front().cfg.heads * world;

  run_shards(bus, [&](int s) {
    const ShardParams& sp = shards[s];
    Tape tape;
    const LayerVars vars = add_layer_leaves(tape, sp.params);
    const Var xin = tape.leaf(x);

    LayerHooks hooks;
    hooks.branch_input = [&](Tape& t, Var v) { return reduce_grad(t, v, bus, s, step, "dx"); };
    hooks.output = [&](Tape& t, Var v) { return reduce_value(t, v, bus, s, step, "output"); };
    int head_calls = 0;
    if (scheme == TpScheme::kTopologyIndependent) {
      hooks.qk_from_raw_input = true;
      hooks.shared_head = [&](Tape& t, Var v) {
        return reduce_grad(t, v, bus, s, step, head_calls++ == 0 ? "dq" : "dk");
      };
      if (!sp.cfg.per_head_norm)
        hooks.norm = [&](Tape& t, Var z, Var w) {
          return rmsnorm_tp_node(t, z, w, bus, s, step, global_features, sp.cfg.norm_eps);
        };
    }

    const LayerActivations a = apply_layer(tape, vars, sp.cfg, xin, hooks);
    tape.backward(tape.sum(tape.mul(a.output, tape.constant(d_output))));
    result.outputs[s] = tape.value(a.output);
    result.grads[s] = collect_layer_grads(tape, vars);
    result.input_grads[s] = tape.grad(xin);
  });
  result.log = bus.log();
  return result;
}

RoundCounts total_rounds(const std::vector<CommRecord>& log) {
  RoundCounts c;
  for (const CommRecord& r : log) (r.direction == Direction::kForward ? c.forward : c.backward)++;
  return c;
}

RoundCounts extra_rounds(const std::vector<CommRecord>& log) {
  RoundCounts c;
  for (const CommRecord& r : log) {
    if (r.direction == Direction::kForward && r.op != "output") ++c.forward;
    if (r.direction == Direction::kBackward && r.op != "dx") ++c.backward;
  }
  return c;
}

}  // namespace m2rnn
