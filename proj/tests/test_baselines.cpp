// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "m2rnn/baselines.hpp"
#include "m2rnn/gradcheck.hpp"
#include "test_util.hpp"

using namespace m2rnn;
using namespace m2rnn::testing;

namespace {

GruWeights<double> random_gru_weights(Index hd, std::mt19937_64& rng) {
  return {random_tensor({hd, hd}, rng, -0.8, 0.8), random_tensor({hd, hd}, rng, -0.8, 0.8),
          random_tensor({hd, hd}, rng, -0.8, 0.8), random_tensor({hd}, rng),
          random_tensor({hd}, rng),                random_tensor({hd}, rng)};
}

DiagLinearInputs<double> random_diag(RecurrenceDims d, std::mt19937_64& rng) {
  const Shape qk{d.batch, d.steps, d.heads, d.key_dim};
  return {random_tensor(qk, rng), random_tensor(qk, rng), random_tensor(qk, rng, 0.05, 0.95),
          random_tensor({d.batch, d.steps, d.heads, d.value_dim}, rng),
          random_tensor({d.batch, d.heads, d.key_dim, d.value_dim}, rng)};
}

// Tape oracles with one leaf per timestep row.

VectorRnnGrads<double> vector_rnn_tape(const Tensor& w, const Tensor& x, const Tensor& dh) {
  const Index batch = x.dim(0), steps = x.dim(1), d = x.dim(2);
  Tape tape;
  const Var wv = tape.leaf(w);
  std::vector<Var> xs;
  for (Index i = 0; i < batch * steps; ++i) xs.push_back(tape.leaf(slice(x, i * d, {d, 1})));
  Var loss = tape.constant(Tensor({1}));
  for (Index b = 0; b < batch; ++b) {
    Var h = tape.constant(Tensor({d, 1}));
    for (Index t = 0; t < steps; ++t) {
      const Index bt = b * steps + t;
      h = tape.tanh(tape.add(tape.matmul(wv, h), xs[bt]));
      loss = tape.add(loss, tape.sum(tape.mul(h, tape.constant(slice(dh, bt * d, {d, 1})))));
    }
  }
  tape.backward(loss);
  VectorRnnGrads<double> g{tape.grad(wv), Tensor(x.shape())};
  for (Index i = 0; i < batch * steps; ++i) paste(g.d_inputs, i * d, tape.grad(xs[i]));
  return g;
}

GruGrads<double> gru_tape(const Tensor& ar, const Tensor& az, const Tensor& an,
                          const GruWeights<double>& w, const Tensor& dh) {
  const Index batch = ar.dim(0), steps = ar.dim(1), hd = ar.dim(2);
  Tape tape;
  const Var ur = tape.leaf(w.u_r), uz = tape.leaf(w.u_z), un = tape.leaf(w.u_n);
  const Var cr = tape.leaf(w.c_r.reshaped({1, hd})), cz = tape.leaf(w.c_z.reshaped({1, hd})),
            cn = tape.leaf(w.c_n.reshaped({1, hd}));
  std::vector<Var> ars, azs, ans;
  for (Index i = 0; i < batch * steps; ++i) {
    ars.push_back(tape.leaf(slice(ar, i * hd, {1, hd})));
    azs.push_back(tape.leaf(slice(az, i * hd, {1, hd})));
    ans.push_back(tape.leaf(slice(an, i * hd, {1, hd})));
  }
  Var loss = tape.constant(Tensor({1}));
  for (Index b = 0; b < batch; ++b) {
    Var h = tape.constant(Tensor({1, hd}));
    for (Index t = 0; t < steps; ++t) {
      const Index bt = b * steps + t;
      const Var r = tape.sigmoid(tape.add(ars[bt], tape.add(tape.matmul(h, ur), cr)));
      const Var z = tape.sigmoid(tape.add(azs[bt], tape.add(tape.matmul(h, uz), cz)));
      const Var n = tape.tanh(tape.add(ans[bt], tape.mul(r, tape.add(tape.matmul(h, un), cn))));
      h = tape.add(tape.mul(tape.affine(z, -1.0, 1.0), n), tape.mul(z, h));
      loss = tape.add(loss, tape.sum(tape.mul(h, tape.constant(slice(dh, bt * hd, {1, hd})))));
    }
  }
  tape.backward(loss);
  GruGrads<double> g{Tensor(ar.shape()), Tensor(ar.shape()), Tensor(ar.shape()),
                     {tape.grad(ur), tape.grad(uz), tape.grad(un), tape.grad(cr).reshaped({hd}),
                      tape.grad(cz).reshaped({hd}), tape.grad(cn).reshaped({hd})}};
  for (Index i = 0; i < batch * steps; ++i) {
    paste(g.d_ar, i * hd, tape.grad(ars[i]));
    paste(g.d_az, i * hd, tape.grad(azs[i]));
    paste(g.d_an, i * hd, tape.grad(ans[i]));
  }
  return g;
}

DiagLinearGrads<double> diag_tape(const DiagLinearInputs<double>& in, const Tensor& dy) {
  const RecurrenceDims d = diag_linear_dims(in);
  const Index kd = d.key_dim, vd = d.value_dim, kv = kd * vd;
  Tape tape;
  std::vector<Var> qs, ks, as, vs, h0s;
  for (Index i = 0; i < d.batch * d.steps * d.heads; ++i) {
    qs.push_back(tape.leaf(slice(in.queries, i * kd, {kd, 1})));
    ks.push_back(tape.leaf(slice(in.keys, i * kd, {kd})));
    as.push_back(tape.leaf(slice(in.decay, i * kd, {kd})));
    vs.push_back(tape.leaf(slice(in.values, i * vd, {vd})));
  }
  for (Index i = 0; i < d.batch * d.heads; ++i) h0s.push_back(tape.leaf(slice(in.initial_state, i * kv, {kd, vd})));
  const Var ones = tape.constant(Tensor::full({vd}, 1.0));
  Var loss = tape.constant(Tensor({1}));
  for (Index b = 0; b < d.batch; ++b)
    for (Index n = 0; n < d.heads; ++n) {
      Var h = h0s[b * d.heads + n];
      for (Index t = 0; t < d.steps; ++t) {
        const Index btn = (b * d.steps + t) * d.heads + n;
        h = tape.add(tape.mul(tape.outer(as[btn], ones), h), tape.outer(ks[btn], vs[btn]));
        const Var y = tape.matmul(tape.transpose(h), qs[btn]);
        loss = tape.add(loss, tape.sum(tape.mul(y, tape.constant(slice(dy, btn * vd, {vd, 1})))));
      }
    }
  tape.backward(loss);
  DiagLinearGrads<double> g{Tensor(in.queries.shape()), Tensor(in.keys.shape()), Tensor(in.decay.shape()),
                            Tensor(in.values.shape()), Tensor(in.initial_state.shape())};
  for (Index i = 0; i < d.batch * d.steps * d.heads; ++i) {
    paste(g.d_queries, i * kd, tape.grad(qs[i]));
    paste(g.d_keys, i * kd, tape.grad(ks[i]));
    paste(g.d_decay, i * kd, tape.grad(as[i]));
    paste(g.d_values, i * vd, tape.grad(vs[i]));
  }
  for (Index i = 0; i < d.batch * d.heads; ++i) paste(g.d_initial_state, i * kv, tape.grad(h0s[i]));
  return g;
}

}  // namespace

TEST_SUITE("vector rnn") {
  TEST_CASE("zero transition is a pointwise tanh") {
    std::mt19937_64 rng(1);
    const Tensor x = random_tensor({2, 5, 4}, rng, -3, 3);
    CHECK(vector_rnn_scan(Tensor({4, 4}), x) == tanh(x));
  }

  TEST_CASE("zero input stays at zero") {
    std::mt19937_64 rng(2);
    CHECK(vector_rnn_scan(random_tensor({4, 4}, rng), Tensor({2, 5, 4})) == Tensor({2, 5, 4}));
  }

  TEST_CASE("shape errors") {
    CHECK_THROWS_AS(vector_rnn_scan(Tensor({3, 3}), Tensor({1, 2, 4})), DimensionError);
  }

  TEST_CASE("backward: finite differences and tape over 20 seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      CAPTURE(seed);
      std::mt19937_64 rng(100 + seed);
      const Tensor w = random_tensor({5, 5}, rng, -0.7, 0.7), x = random_tensor({2, 6, 5}, rng),
                   dh = random_tensor({2, 6, 5}, rng);
      const auto g = vector_rnn_backward(w, vector_rnn_scan(w, x), dh);
      auto loss_w = [&](const Tensor& ww) { return sum(mul(vector_rnn_scan(ww, x), dh)); };
      auto loss_x = [&](const Tensor& xx) { return sum(mul(vector_rnn_scan(w, xx), dh)); };
      CHECK(relative_error(g.d_transition, finite_difference_grad(loss_w, w)) <= 1e-4);
      CHECK(relative_error(g.d_inputs, finite_difference_grad(loss_x, x)) <= 1e-4);
      const auto tg = vector_rnn_tape(w, x, dh);
      CHECK(relative_error(g.d_transition, tg.d_transition) <= 1e-10);
      CHECK(relative_error(g.d_inputs, tg.d_inputs) <= 1e-10);
    }
  }
}

TEST_SUITE("reduction to the matrix recurrence") {
  TEST_CASE("constructed recurrence reproduces vector RNN states") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(200 + seed);
      const Tensor w = random_tensor({8, 8}, rng, -0.6, 0.6), x = random_tensor({1, 64, 8}, rng, -2, 2);
      const Tensor h = vector_rnn_scan(w, x);
      const Tensor y = m2rnn_forward(m2rnn_from_vector_rnn(w, x, 8)).outputs;
      CHECK(max_abs_diff(y.reshaped(h.shape()), h) <= 1e-12);
    }
  }
}

TEST_SUITE("gru") {
  TEST_CASE("saturated update gate freezes the zero state") {
    std::mt19937_64 rng(3);
    GruWeights<double> w = random_gru_weights(4, rng);
    const Tensor ar = random_tensor({2, 7, 4}, rng, -3, 3), an = random_tensor({2, 7, 4}, rng, -3, 3);
    const Tensor az = Tensor::full({2, 7, 4}, 1e3);
    CHECK(gru_scan(ar, az, an, w) == Tensor({2, 7, 4}));
  }

  TEST_CASE("gates keep the state inside [-1, 1]") {
    std::mt19937_64 rng(4);
    const GruWeights<double> w = random_gru_weights(6, rng);
    const Tensor a = random_tensor({1, 200, 6}, rng, -5, 5);
    for (double v : gru_scan(a, a, a, w).values()) CHECK(std::abs(v) <= 1.0);
  }

  TEST_CASE("backward: finite differences and tape over 20 seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      CAPTURE(seed);
      std::mt19937_64 rng(300 + seed);
      const GruWeights<double> w = random_gru_weights(4, rng);
      const Tensor ar = random_tensor({2, 5, 4}, rng), az = random_tensor({2, 5, 4}, rng),
                   an = random_tensor({2, 5, 4}, rng), dh = random_tensor({2, 5, 4}, rng);
      const auto g = gru_backward(ar, az, an, w, gru_scan(ar, az, an, w), dh);
      const auto tg = gru_tape(ar, az, an, w, dh);

      auto check = [&](const Tensor& analytic, const Tensor& taped, auto&& loss, const Tensor& at) {
        CHECK(relative_error(analytic, finite_difference_grad(loss, at)) <= 1e-4);
        CHECK(relative_error(analytic, taped) <= 1e-10);
      };
      check(g.d_ar, tg.d_ar, [&](const Tensor& v) { return sum(mul(gru_scan(v, az, an, w), dh)); }, ar);
      check(g.d_az, tg.d_az, [&](const Tensor& v) { return sum(mul(gru_scan(ar, v, an, w), dh)); }, az);
      check(g.d_an, tg.d_an, [&](const Tensor& v) { return sum(mul(gru_scan(ar, az, v, w), dh)); }, an);
      auto weight_loss = [&](Tensor GruWeights<double>::*field) {
        return [&, field](const Tensor& v) {
          GruWeights<double> ww = w;
          ww.*field = v;
          return sum(mul(gru_scan(ar, az, an, ww), dh));
        };
      };
      for (auto field : {&GruWeights<double>::u_r, &GruWeights<double>::u_z, &GruWeights<double>::u_n,
                         &GruWeights<double>::c_r, &GruWeights<double>::c_z, &GruWeights<double>::c_n})
        check(g.d_weights.*field, tg.d_weights.*field, weight_loss(field), w.*field);
    }
  }
}

TEST_SUITE("diagonal linear rnn") {
  TEST_CASE("zero decay is memoryless") {
    std::mt19937_64 rng(5);
    DiagLinearInputs<double> in = random_diag({2, 4, 2, 3, 5}, rng);
    in.decay = Tensor(in.decay.shape());
    const Tensor y = diag_linear_scan(in);
    for (Index btn = 0; btn < 16; ++btn) {
      double kq = 0.0;
      for (Index i = 0; i < 3; ++i) kq += in.keys[btn * 3 + i] * in.queries[btn * 3 + i];
      for (Index j = 0; j < 5; ++j) CHECK(y[btn * 5 + j] == doctest::Approx(kq * in.values[btn * 5 + j]).epsilon(1e-14));
    }
  }

  TEST_CASE("state propagation is linear in the initial state") {
    std::mt19937_64 rng(6);
    DiagLinearInputs<double> in = random_diag({2, 6, 2, 3, 4}, rng);
    const Tensor h1 = random_tensor(in.initial_state.shape(), rng), h2 = random_tensor(in.initial_state.shape(), rng);
    auto state_term = [&](const Tensor& h0) {
      DiagLinearInputs<double> p = in, z = in;
      p.initial_state = h0;
      z.initial_state = Tensor(h0.shape());
      return add(diag_linear_scan(p), scale(diag_linear_scan(z), -1.0));
    };
    const double alpha = 0.7, beta = -1.9;
    const Tensor lhs = state_term(add(scale(h1, alpha), scale(h2, beta)));
    const Tensor rhs = add(scale(state_term(h1), alpha), scale(state_term(h2), beta));
    CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
  }

  TEST_CASE("backward: finite differences and tape over 20 seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      CAPTURE(seed);
      std::mt19937_64 rng(400 + seed);
      const DiagLinearInputs<double> in = random_diag({2, 5, 2, 3, 4}, rng);
      const Tensor dy = random_tensor({2, 5, 2, 4}, rng);
      Tensor states;
      diag_linear_scan(in, &states);
      const auto g = diag_linear_backward(in, states, dy);
      const auto tg = diag_tape(in, dy);
      auto check = [&](Tensor DiagLinearInputs<double>::*field, const Tensor& analytic, const Tensor& taped) {
        const Tensor fd = finite_difference_grad(
            [&](const Tensor& v) {
              DiagLinearInputs<double> p = in;
              p.*field = v;
              return sum(mul(diag_linear_scan(p), dy));
            },
            in.*field);
        CHECK(relative_error(analytic, fd) <= 1e-4);
        CHECK(relative_error(analytic, taped) <= 1e-10);
      };
      check(&DiagLinearInputs<double>::queries, g.d_queries, tg.d_queries);
      check(&DiagLinearInputs<double>::keys, g.d_keys, tg.d_keys);
      check(&DiagLinearInputs<double>::decay, g.d_decay, tg.d_decay);
      check(&DiagLinearInputs<double>::values, g.d_values, tg.d_values);
      check(&DiagLinearInputs<double>::initial_state, g.d_initial_state, tg.d_initial_state);
    }
  }
}

TEST_SUITE("baseline tape nodes") {
  TEST_CASE("composed gradients match finite differences") {
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({2, 5, 6}, rng), probe6 = random_tensor({2, 5, 6}, rng),
                 probe4 = random_tensor({2, 5, 4}, rng), probe8 = random_tensor({2, 5, 8}, rng);

    SUBCASE("vector rnn") {
      const Tensor w = init_vector_rnn(6, 1.5, 8).transition;
      auto loss = [&](const Tensor& ww, const Tensor& xx, Tape& tape, Var* wv, Var* xv) {
        *wv = tape.leaf(ww);
        *xv = tape.leaf(xx);
        return tape.sum(tape.mul(apply_vector_rnn(tape, *wv, *xv), tape.constant(probe6)));
      };
      Tape tape;
      Var wv, xv;
      tape.backward(loss(w, x, tape, &wv, &xv));
      auto value = [&](const Tensor& ww, const Tensor& xx) {
        Tape t;
        Var a, b;
        return t.value(loss(ww, xx, t, &a, &b))[0];
      };
      CHECK(relative_error(tape.grad(wv), finite_difference_grad([&](const Tensor& v) { return value(v, x); }, w)) <= 1e-6);
      CHECK(relative_error(tape.grad(xv), finite_difference_grad([&](const Tensor& v) { return value(w, v); }, x)) <= 1e-6);
    }

    SUBCASE("gru") {
      GruParams p = init_gru(6, 4, 9);
      std::vector<Tensor*> slots;
      p.visit([&](const char*, Tensor& t) { slots.push_back(&t); });
      auto run = [&](Tape& tape, std::vector<Var>& vars) {
        vars.clear();
        for (Tensor* s : slots) vars.push_back(tape.leaf(*s));
        const GruVars gv{vars[0], vars[1], vars[2], vars[3], vars[4], vars[5],
                         vars[6], vars[7], vars[8], vars[9], vars[10], vars[11]};
        return tape.sum(tape.mul(apply_gru(tape, gv, tape.constant(x)), tape.constant(probe4)));
      };
      Tape tape;
      std::vector<Var> vars;
      tape.backward(run(tape, vars));
      for (std::size_t i = 0; i < slots.size(); ++i) {
        CAPTURE(i);
        const Tensor orig = *slots[i];
        const Tensor fd = finite_difference_grad(
            [&](const Tensor& v) {
              *slots[i] = v;
              Tape t;
              std::vector<Var> vv;
              const double l = t.value(run(t, vv))[0];
              *slots[i] = orig;
              return l;
            },
            orig);
        CHECK(relative_error(tape.grad(vars[i]), fd) <= 1e-6);
      }
    }

    SUBCASE("diagonal linear") {
      DiagLinearParams p = init_diag_linear(6, 2, 3, 4, 10);
      std::vector<Tensor*> slots;
      p.visit([&](const char*, Tensor& t) { slots.push_back(&t); });
      auto run = [&](Tape& tape, std::vector<Var>& vars) {
        vars.clear();
        for (Tensor* s : slots) vars.push_back(tape.leaf(*s));
        const DiagLinearVars dv{vars[0], vars[1], vars[2], vars[3], vars[4]};
        return tape.sum(tape.mul(apply_diag_linear(tape, dv, p, tape.constant(x)), tape.constant(probe8)));
      };
      Tape tape;
      std::vector<Var> vars;
      tape.backward(run(tape, vars));
      for (std::size_t i = 0; i < slots.size(); ++i) {
        CAPTURE(i);
        const Tensor orig = *slots[i];
        const Tensor fd = finite_difference_grad(
            [&](const Tensor& v) {
              *slots[i] = v;
              Tape t;
              std::vector<Var> vv;
              const double l = t.value(run(t, vv))[0];
              *slots[i] = orig;
              return l;
            },
            orig);
        CHECK(relative_error(tape.grad(vars[i]), fd) <= 1e-6);
      }
    }
  }

  TEST_CASE("positive decays from the default init") {
    const DiagLinearParams p = init_diag_linear(6, 2, 3, 4, 11);
    Tape tape;
    const Var x = tape.constant(Tensor({1, 2, 6}));
    const DiagLinearVars v{tape.leaf(p.w_q), tape.leaf(p.w_k), tape.leaf(p.w_a), tape.leaf(p.b_a), tape.leaf(p.w_v)};
    apply_diag_linear(tape, v, p, x);
    CHECK(sigmoid(p.b_a[0]) == doctest::Approx(0.9));
  }
}
