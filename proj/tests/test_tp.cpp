// SPDX-License-Identifier: Apache-2.0
#include <sstream>

#include "doctest.h"
#include "m2rnn/gradcheck.hpp"
#include "m2rnn/tp.hpp"
#include "test_util.hpp"

using namespace m2rnn;
using namespace m2rnn::testing;

namespace {

LayerConfig tp_config(bool per_head_norm = false) {
  LayerConfig cfg;
  cfg.model_dim = 16;
  cfg.heads = 4;
  cfg.key_dim = 8;
  cfg.value_dim = 4;
  cfg.per_head_norm = per_head_norm;
  return cfg;
}

LayerParams tp_params(const LayerConfig& cfg, std::uint64_t seed) {
  LayerConfig c = cfg;
  c.init_std = 0.3;
  c.transition_init = TransitionInit::kNormal;
  LayerParams p = init_layer_params(c, seed);
  std::mt19937_64 rng(seed + 1);
  p.norm_weight = random_tensor(p.norm_weight.shape(), rng, 0.5, 1.5);
  p.b_v = random_tensor(p.b_v.shape(), rng, -0.3, 0.3);
  return p;
}

std::vector<Tensor> run_all_reduce(const std::vector<Tensor>& payloads, Schedule schedule) {
  CollectiveBus bus(static_cast<int>(payloads.size()), schedule);
  std::vector<Tensor> out(payloads.size());
  run_shards(bus, [&](int s) { out[s] = bus.all_reduce_sum(s, payloads[s], {0, Direction::kForward, "t"}); });
  return out;
}

double params_rel_error(const LayerParams& a, const LayerParams& b) {
  std::vector<const Tensor*> ta, tb;
  a.visit([&](const char*, const Tensor& t) { ta.push_back(&t); });
  b.visit([&](const char*, const Tensor& t) { tb.push_back(&t); });
  double worst = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) worst = std::max(worst, relative_error(*ta[i], *tb[i]));
  return worst;
}

}  // namespace

TEST_SUITE("collective bus") {
  TEST_CASE("two shards") {
    for (Schedule s : {Schedule::kThreaded, Schedule::kSequential}) {
      const auto out = run_all_reduce({Tensor({2}, {1, 2}), Tensor({2}, {3, 4})}, s);
      CHECK(out[0] == Tensor({2}, {4, 6}));
      CHECK(out[1] == Tensor({2}, {4, 6}));
    }
  }

  TEST_CASE("single shard is the identity") {
    std::mt19937_64 rng(1);
    const Tensor p = random_tensor({3, 2}, rng);
    CHECK(run_all_reduce({p}, Schedule::kThreaded)[0] == p);
  }

  TEST_CASE("four shards equal a left-to-right sum bitwise") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor> payloads;
      for (int s = 0; s < 4; ++s) payloads.push_back(random_tensor({7}, rng, -1e3, 1e3));
      Tensor oracle({7});
      for (Index i = 0; i < 7; ++i) {
        double acc = payloads[0][i];
        for (int s = 1; s < 4; ++s) acc += payloads[s][i];
        oracle[i] = acc;
      }
      for (Schedule sch : {Schedule::kThreaded, Schedule::kSequential})
        for (const Tensor& o : run_all_reduce(payloads, sch)) CHECK(o == oracle);
    }
  }

  TEST_CASE("many rounds with both schedules") {
    for (Schedule sch : {Schedule::kThreaded, Schedule::kSequential}) {
      CollectiveBus bus(3, sch);
      std::vector<double> last(3);
      run_shards(bus, [&](int s) {
        Tensor v({1}, {static_cast<double>(s)});
        for (int r = 0; r < 50; ++r) v = bus.all_reduce_sum(s, v, {r, Direction::kForward, "x"});
        last[s] = v[0];
      });
      CHECK(bus.log().size() == 50);
      // Values triple each round after the first sum of 0 + 1 + 2.
      CHECK(last[0] == last[2]);
      CHECK(last[0] == 3.0 * std::pow(3.0, 49));
    }
  }

  TEST_CASE("shape disagreement is a protocol error") {
    CollectiveBus bus(2);
    CHECK_THROWS_AS(run_shards(bus, [&](int s) { bus.all_reduce_sum(s, Tensor({s + 1}), {0, Direction::kForward, "x"}); }),
                    ProtocolError);
  }

  TEST_CASE("mismatched round labels are a protocol error") {
    CollectiveBus bus(2, Schedule::kSequential);
    CHECK_THROWS_AS(run_shards(bus, [&](int s) {
                      bus.all_reduce_sum(s, Tensor({1}), {0, Direction::kForward, s == 0 ? "a" : "b"});
                    }),
                    ProtocolError);
  }

  TEST_CASE("a missing participant is detected instead of hanging") {
    for (Schedule sch : {Schedule::kThreaded, Schedule::kSequential}) {
      CollectiveBus bus(3, sch);
      CHECK_THROWS_AS(run_shards(bus, [&](int s) {
                        if (s != 1) bus.all_reduce_sum(s, Tensor({1}), {0, Direction::kForward, "x"});
                      }),
                      ProtocolError);
    }
  }

  TEST_CASE("a shard's own exception is reported first") {
    CollectiveBus bus(2);
    CHECK_THROWS_AS(run_shards(bus, [&](int s) {
                      if (s == 1) throw DimensionError("boom");
                      bus.all_reduce_sum(s, Tensor({1}), {0, Direction::kForward, "x"});
                    }),
                    DimensionError);
  }

  TEST_CASE("csv log") {
    CollectiveBus bus(2);
    run_shards(bus, [&](int s) {
      bus.all_reduce_sum(s, Tensor({3}), {4, Direction::kForward, "output"});
      bus.all_reduce_sum(s, Tensor({2}), {4, Direction::kBackward, "dx"});
    });
    std::ostringstream os;
    write_comm_log_csv(os, bus.log());
    CHECK(os.str() == "step,direction,round,op,elements\n4,forward,0,output,3\n4,backward,1,dx,2\n");
  }
}

TEST_SUITE("rmsnorm tp") {
  struct Split {
    std::vector<Tensor> x, w, dy;
  };
  Split split(const Tensor& x, const Tensor& w, const Tensor& dy, int world) {
    const Index rows = x.dim(0), width = x.dim(1), block = width / world;
    Split out;
    for (int s = 0; s < world; ++s) {
      Tensor xs({rows, block}), ds({rows, block}), ws({block});
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < block; ++c) {
          xs(r, c) = x(r, s * block + c);
          ds(r, c) = dy(r, s * block + c);
        }
      for (Index c = 0; c < block; ++c) ws[c] = w[s * block + c];
      out.x.push_back(xs);
      out.w.push_back(ws);
      out.dy.push_back(ds);
    }
    return out;
  }

  Tensor join(const std::vector<Tensor>& parts) {
    const Index rows = parts[0].dim(0), block = parts[0].dim(1);
    Tensor out({rows, block * static_cast<Index>(parts.size())});
    for (std::size_t s = 0; s < parts.size(); ++s)
      for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < block; ++c) out(r, s * block + c) = parts[s](r, c);
    return out;
  }

  TEST_CASE("sharded forward and backward match one device") {
    std::mt19937_64 rng(10);
    const Index rows = 6, width = 16;
    for (int world : {1, 2, 4}) {
      CAPTURE(world);
      const Tensor x = random_tensor({rows, width}, rng), w = random_tensor({width}, rng),
                   dy = random_tensor({rows, width}, rng);
      const Split sp = split(x, w, dy, world);
      CollectiveBus bus(world);
      std::vector<Tensor> ys(world), dxs(world), dws(world);
      run_shards(bus, [&](int s) {
        const auto f = rmsnorm_tp_forward(bus, s, sp.x[s], sp.w[s], width, kRmsNormEps);
        const auto g = rmsnorm_tp_backward(bus, s, sp.x[s], sp.w[s], f.s, sp.dy[s], width);
        ys[s] = f.y;
        dxs[s] = g.dx;
        dws[s] = g.dw;
      });
      const auto [y_ref, s_ref] = rmsnorm_rows(x, w, width, kRmsNormEps);
      const auto g_ref = rmsnorm_rows_backward(x, w, s_ref, width, dy);
      const Tensor y = join(ys), dx = join(dxs);
      Tensor dw({width});
      for (int s = 0; s < world; ++s) std::copy_n(dws[s].data(), width / world, dw.data() + s * (width / world));
      if (world == 1) {
        CHECK(y == y_ref);
        CHECK(dx == g_ref.dx);
        CHECK(dw == g_ref.dw);
      }
      CHECK(max_abs_diff(y, y_ref) <= 1e-12);
      CHECK(max_abs_diff(dx, g_ref.dx) <= 1e-12);
      CHECK(max_abs_diff(dw, g_ref.dw) <= 1e-12);
      CHECK(y == rmsnorm_shard_major(x, w, world, kRmsNormEps).first);
      REQUIRE(bus.log().size() == 2);
      CHECK(bus.log()[0].op == "rmsnorm_s");
      CHECK(bus.log()[0].elements == rows);
      CHECK(bus.log()[1].op == "rmsnorm_r");
      CHECK(bus.log()[1].elements == rows);
    }
  }

  TEST_CASE("backward matches finite differences") {
    std::mt19937_64 rng(11);
    const Tensor x = random_tensor({3, 8}, rng), w = random_tensor({8}, rng), dy = random_tensor({3, 8}, rng);
    const Split sp = split(x, w, dy, 2);
    CollectiveBus bus(2);
    std::vector<Tensor> dxs(2);
    run_shards(bus, [&](int s) {
      const auto f = rmsnorm_tp_forward(bus, s, sp.x[s], sp.w[s], 8, kRmsNormEps);
      dxs[s] = rmsnorm_tp_backward(bus, s, sp.x[s], sp.w[s], f.s, sp.dy[s], 8).dx;
    });
    const Tensor fd = finite_difference_grad(
        [&](const Tensor& xx) { return sum(mul(rmsnorm_rows(xx, w, 8, kRmsNormEps).first, dy)); }, x);
    CHECK(relative_error(join(dxs), fd) <= 1e-6);
  }

  TEST_CASE("zero upstream gradient still takes one backward round") {
    std::mt19937_64 rng(12);
    const Tensor x = random_tensor({4, 8}, rng), w = random_tensor({8}, rng);
    const Split sp = split(x, w, Tensor({4, 8}), 2);
    CollectiveBus bus(2);
    std::vector<RmsNormGrads<double>> g(2);
    run_shards(bus, [&](int s) {
      const auto f = rmsnorm_tp_forward(bus, s, sp.x[s], sp.w[s], 8, kRmsNormEps);
      g[s] = rmsnorm_tp_backward(bus, s, sp.x[s], sp.w[s], f.s, sp.dy[s], 8);
    });
    for (const auto& gs : g) {
      CHECK(gs.dx == Tensor({4, 4}));
      CHECK(gs.dw == Tensor({4}));
    }
    CHECK(total_rounds(bus.log()).backward == 1);
  }
}

TEST_SUITE("sharding") {
  TEST_CASE("single shard reproduces the parameters") {
    const LayerConfig cfg = tp_config();
    const LayerParams p = tp_params(cfg, 20);
    for (auto shards : {shard_topology_aware(p, cfg, 1), shard_topology_independent(p, cfg, 1)}) {
      REQUIRE(shards.size() == 1);
      CHECK(params_rel_error(shards[0].params, p) == 0.0);
      CHECK(shards[0].cfg.heads == 4);
    }
  }

  TEST_CASE("value heads split evenly and gather inverts the split") {
    const LayerConfig cfg = tp_config();
    const LayerParams p = tp_params(cfg, 21);
    for (int world : {2, 4}) {
      const auto shards = shard_topology_independent(p, cfg, world);
      std::vector<LayerParams> parts;
      for (const auto& s : shards) {
        CHECK(s.cfg.heads == 4 / world);
        CHECK(s.params.w_q == p.w_q);
        CHECK(s.params.conv_k == p.conv_k);
        CHECK(s.params.w_v.shape() == Shape{16, 16 / world});
        parts.push_back(s.params);
      }
      CHECK(params_rel_error(gather_shards(parts, cfg), p) == 0.0);
    }
  }

  TEST_CASE("parameter counts by scheme") {
    const LayerConfig cfg = tp_config();
    const LayerParams p = tp_params(cfg, 22);
    const Index full = full_param_count(p);
    const Index kd = cfg.key_dim * cfg.model_dim;
    for (int world : {1, 2, 4}) {
      CHECK(distinct_param_count(shard_topology_independent(p, cfg, world), TpScheme::kTopologyIndependent) == full);
      // Projection weights only: q and k grow by one K x d matrix each per extra shard.
      Index aware_proj = 0;
      for (const auto& s : shard_topology_aware(p, cfg, world))
        aware_proj += param_count({HeadPatternKind::kMultiValue, s.cfg.heads, cfg.key_dim, cfg.value_dim, cfg.model_dim});
      const Index base = param_count({HeadPatternKind::kMultiValue, cfg.heads, cfg.key_dim, cfg.value_dim, cfg.model_dim});
      CHECK(aware_proj - base == (world - 1) * 2 * kd);
    }
    // Two shards of four heads: q/k projection parameters double.
    Index qk = 0;
    for (const auto& s : shard_topology_aware(p, cfg, 2)) qk += s.params.w_q.size() + s.params.w_k.size();
    CHECK(qk == 2 * (p.w_q.size() + p.w_k.size()));
  }

  TEST_CASE("indivisible head count is a config error") {
    const LayerConfig cfg = tp_config();
    const LayerParams p = tp_params(cfg, 23);
    CHECK_THROWS_AS(shard_topology_independent(p, cfg, 3), ConfigError);
    CHECK_THROWS_AS(shard_topology_aware(p, cfg, 8), ConfigError);
  }
}

TEST_SUITE("tp layer step") {
  TEST_CASE("topology-independent matches one device") {
    for (bool per_head : {false, true}) {
      const LayerConfig cfg = tp_config(per_head);
      const LayerParams p = tp_params(cfg, 30);
      std::mt19937_64 rng(31);
      const Tensor x = random_tensor({2, 5, 16}, rng), dy = random_tensor({2, 5, 16}, rng);
      const LayerGradients ref = layer_backward(p, cfg, x, dy);
      const Tensor ref_out = layer_forward(p, cfg, x).output;
      for (int world : {1, 2, 4}) {
        CAPTURE(world);
        CAPTURE(per_head);
        const auto r = tp_layer_step(TpScheme::kTopologyIndependent, shard_topology_independent(p, cfg, world), x, dy);
        for (int s = 0; s < world; ++s) {
          CHECK(relative_error(r.outputs[s], ref_out) <= 1e-10);
          CHECK(relative_error(r.input_grads[s], ref.input) <= 1e-10);
          CHECK(r.outputs[s] == r.outputs[0]);
          CHECK(r.input_grads[s] == r.input_grads[0]);
          CHECK(r.grads[s].w_q == r.grads[0].w_q);
          CHECK(r.grads[s].w_k == r.grads[0].w_k);
          CHECK(r.grads[s].conv_q == r.grads[0].conv_q);
          CHECK(r.grads[s].b_k == r.grads[0].b_k);
        }
        CHECK(params_rel_error(gather_shards(r.grads, cfg), ref.params) <= 1e-10);
        const RoundCounts extra = extra_rounds(r.log);
        if (world > 1) {
          CHECK(extra.forward == (per_head ? 0 : 1));
          CHECK(extra.backward == (per_head ? 2 : 3));
          CHECK(total_rounds(r.log).forward == extra.forward + 1);
          CHECK(total_rounds(r.log).backward == extra.backward + 1);
        }
      }
    }
  }

  TEST_CASE("topology-aware adds no rounds and is a sum of plain per-shard blocks") {
    const LayerConfig cfg = tp_config();
    const LayerParams p = tp_params(cfg, 40);
    std::mt19937_64 rng(41);
    const Tensor x = random_tensor({2, 5, 16}, rng), dy = random_tensor({2, 5, 16}, rng);
    for (int world : {1, 2, 4}) {
      const auto shards = shard_topology_aware(p, cfg, world);
      const auto r = tp_layer_step(TpScheme::kTopologyAware, shards, x, dy);
      CHECK(extra_rounds(r.log).forward == 0);
      CHECK(extra_rounds(r.log).backward == 0);
      Tensor expected = layer_forward(shards[0].params, shards[0].cfg, x).output;
      Tensor dx = layer_backward(shards[0].params, shards[0].cfg, x, dy).input;
      for (int s = 1; s < world; ++s) {
        expected.array() += layer_forward(shards[s].params, shards[s].cfg, x).output.array();
        dx.array() += layer_backward(shards[s].params, shards[s].cfg, x, dy).input.array();
      }
      for (int s = 0; s < world; ++s) {
        CHECK(r.outputs[s] == expected);
        CHECK(r.input_grads[s] == dx);
        const LayerGradients local = layer_backward(shards[s].params, shards[s].cfg, x, dy);
        CHECK(params_rel_error(r.grads[s], local.params) == 0.0);
      }
    }
  }

  TEST_CASE("sequential and threaded schedules give identical bits") {
    const LayerConfig cfg = tp_config();
    const LayerParams p = tp_params(cfg, 50);
    std::mt19937_64 rng(51);
    const Tensor x = random_tensor({1, 6, 16}, rng), dy = random_tensor({1, 6, 16}, rng);
    for (TpScheme scheme : {TpScheme::kTopologyAware, TpScheme::kTopologyIndependent}) {
      const auto shards = scheme == TpScheme::kTopologyAware ? shard_topology_aware(p, cfg, 4)
                                                             : shard_topology_independent(p, cfg, 4);
      const auto a = tp_layer_step(scheme, shards, x, dy, Schedule::kThreaded, 3);
      const auto b = tp_layer_step(scheme, shards, x, dy, Schedule::kSequential, 3);
      std::ostringstream la, lb;
      write_comm_log_csv(la, a.log);
      write_comm_log_csv(lb, b.log);
      CHECK(la.str() == lb.str());
      for (int s = 0; s < 4; ++s) {
        CHECK(a.outputs[s] == b.outputs[s]);
        CHECK(params_rel_error(a.grads[s], b.grads[s]) == 0.0);
      }
    }
  }

  TEST_CASE("scheme names") {
    CHECK(parse_tp_scheme("topology-aware") == TpScheme::kTopologyAware);
    CHECK(std::string(tp_scheme_name(TpScheme::kTopologyIndependent)) == "topology-independent");
    CHECK_THROWS_AS(parse_tp_scheme("ring"), ConfigError);
  }
}
