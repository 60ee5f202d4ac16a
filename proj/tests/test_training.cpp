// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "doctest.h"
#include "m2rnn/gradcheck.hpp"
#include "m2rnn/train.hpp"
#include "test_util.hpp"

using namespace m2rnn;
using namespace m2rnn::testing;

namespace {

ModelConfig small_model(ModelKind kind, Index vocab) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.vocab = cfg.classes = vocab;
  cfg.model_dim = 8;
  cfg.layer.heads = 2;
  cfg.layer.key_dim = 4;
  cfg.layer.value_dim = 3;
  cfg.layer.init_std = 0.3;
  cfg.layer.state_grad_clip = std::nullopt;
  cfg.hidden = 5;
  cfg.diag_heads = 2;
  cfg.diag_key_dim = 3;
  cfg.diag_value_dim = 2;
  cfg.seed = 3;
  return cfg;
}

constexpr ModelKind kAllKinds[] = {ModelKind::kM2rnn, ModelKind::kGru, ModelKind::kVectorRnn,
                                   ModelKind::kDiagLinear};

}  // namespace

TEST_SUITE("adamw") {
  TEST_CASE("zero gradients without decay leave parameters alone") {
    std::mt19937_64 rng(1);
    ParamList params{{"a", random_tensor({3, 2}, rng), true}, {"b", random_tensor({4}, rng), false}};
    const ParamList before = params;
    AdamW opt(params, {0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 5; ++i) opt.step(params, {Tensor({3, 2}), Tensor({4})}, 0.1);
    CHECK(params[0].value == before[0].value);
    CHECK(params[1].value == before[1].value);
  }

  TEST_CASE("first step of a scalar moves by the learning rate") {
    ParamList params{{"x", Tensor({1}, {2.0}), true}};
    AdamW opt(params, {0.9, 0.999, 1e-8, 0.0});
    opt.step(params, {Tensor({1}, {1.0})}, 0.1);
    // m_hat = v_hat = 1, so the update is lr / (1 + eps).
    CHECK(params[0].value[0] == doctest::Approx(2.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  }

  TEST_CASE("two steps against a hand recursion") {
    const double b1 = 0.8, b2 = 0.9, eps = 1e-6, wd = 0.05, lr = 0.02;
    const double g1 = 0.7, g2 = -1.3;
    ParamList params{{"x", Tensor({1}, {0.4}), true}};
    AdamW opt(params, {b1, b2, eps, wd});
    opt.step(params, {Tensor({1}, {g1})}, lr);
    opt.step(params, {Tensor({1}, {g2})}, lr);

    double x = 0.4, m = 0, v = 0;
    const double gs[] = {g1, g2};
    for (int t = 1; t <= 2; ++t) {
      m = b1 * m + (1 - b1) * gs[t - 1];
      v = b2 * v + (1 - b2) * gs[t - 1] * gs[t - 1];
      const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
      x = x - lr * wd * x - lr * mh / (std::sqrt(vh) + eps);
    }
    CHECK(params[0].value[0] == doctest::Approx(x).epsilon(1e-14));
    CHECK(opt.steps() == 2);
  }

  TEST_CASE("decay skips flagged parameters") {
    ParamList params{{"w", Tensor::full({3}, 1.0), true}, {"norm_weight", Tensor::full({3}, 1.0), false}};
    AdamW opt(params, {0.9, 0.999, 1e-8, 0.1});
    opt.step(params, {Tensor({3}), Tensor({3})}, 0.5);
    CHECK(params[1].value == Tensor::full({3}, 1.0));
    for (double v : params[0].value.values()) CHECK(v == doctest::Approx(0.95));
  }

  TEST_CASE("model decay flags") {
    const SequenceModel m(small_model(ModelKind::kM2rnn, 6));
    std::set<std::string> skipped;
    for (const NamedParam& p : m.params())
      if (!p.decay) skipped.insert(p.name);
    CHECK(skipped == std::set<std::string>{"mixer.norm_weight", "mixer.gate_alpha", "mixer.gate_beta",
                                           "mixer.residual", "head.b"});
  }

  TEST_CASE("mismatched gradient list") {
    ParamList params{{"x", Tensor({2}), true}};
    AdamW opt(params, {});
    CHECK_THROWS_AS(opt.step(params, {}, 0.1), DimensionError);
    CHECK_THROWS_AS(opt.step(params, {Tensor({3})}, 0.1), DimensionError);
  }
}

TEST_SUITE("schedule and clipping") {
  TEST_CASE("warmup and floor") {
    CHECK(lr_schedule(0, 10, 100, 3e-4) == 0.0);
    CHECK(lr_schedule(5, 10, 100, 3e-4) == doctest::Approx(1.5e-4));
    CHECK(lr_schedule(10, 10, 100, 3e-4) == doctest::Approx(3e-4).epsilon(1e-15));
    CHECK(lr_schedule(100, 10, 100, 3e-4) == doctest::Approx(3e-5).epsilon(1e-15));
    CHECK(lr_schedule(250, 10, 100, 3e-4) == doctest::Approx(3e-5).epsilon(1e-15));
    // Halfway through the decay the cosine term is one half.
    CHECK(lr_schedule(55, 10, 100, 1.0) == doctest::Approx(0.1 + 0.9 * 0.5).epsilon(1e-14));
  }

  TEST_CASE("non-increasing after warmup") {
    for (std::int64_t warmup : {0, 1, 37}) {
      double prev = lr_schedule(warmup, warmup, 500, 1.0);
      for (std::int64_t s = warmup + 1; s <= 600; ++s) {
        const double lr = lr_schedule(s, warmup, 500, 1.0);
        CHECK(lr <= prev);
        CHECK(lr >= 0.1);
        prev = lr;
      }
    }
  }

  TEST_CASE("clipping caps the global norm") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Tensor> g{random_tensor({4, 3}, rng, -5, 5), random_tensor({7}, rng, -5, 5)};
      const double before = global_grad_norm(g);
      const double reported = clip_grad_norm(g, 1.0);
      CHECK(reported == before);
      CHECK(global_grad_norm(g) <= 1.0 + 1e-12);
    }
    std::vector<Tensor> small{Tensor({2}, {0.1, -0.2})};
    const std::vector<Tensor> copy = small;
    clip_grad_norm(small, 1.0);
    CHECK(small[0] == copy[0]);
  }
}

TEST_SUITE("sequence model") {
  TEST_CASE("logit shapes and state sizes") {
    for (ModelKind kind : kAllKinds) {
      CAPTURE(model_kind_name(kind));
      const SequenceModel m(small_model(kind, 6));
      std::vector<std::int64_t> tokens(2 * 5);
      for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<std::int64_t>(i % 6);
      const Tensor z = m.logits(tokens, 2, 5);
      CHECK(z.shape() == Shape{10, 6});
      for (double v : z.values()) CHECK(std::isfinite(v));
      std::set<std::string> names;
      for (const NamedParam& p : m.params()) names.insert(p.name);
      CHECK(names.size() == m.params().size());
    }
    CHECK(SequenceModel(small_model(ModelKind::kM2rnn, 6)).state_size() == 2 * 4 * 3);
    CHECK(SequenceModel(small_model(ModelKind::kGru, 6)).state_size() == 5);
    CHECK(SequenceModel(small_model(ModelKind::kDiagLinear, 6)).state_size() == 2 * 3 * 2);
  }

  TEST_CASE("causal: logits at t ignore later tokens") {
    for (ModelKind kind : kAllKinds) {
      const SequenceModel m(small_model(kind, 6));
      std::vector<std::int64_t> a{1, 2, 3, 4, 5, 0}, b{1, 2, 3, 0, 0, 1};
      const Tensor za = m.logits(a, 1, 6), zb = m.logits(b, 1, 6);
      for (Index t = 0; t < 3; ++t)
        for (Index c = 0; c < 6; ++c) CHECK(za(t, c) == zb(t, c));
    }
  }

  TEST_CASE("loss gradient matches finite differences for every kind") {
    const std::vector<std::int64_t> tokens{0, 3, 1, 2, 5, 4, 2, 2};
    const std::vector<std::int64_t> labels{1, 0, 5, 2, 3, 3, 4, 0};
    for (ModelKind kind : kAllKinds) {
      CAPTURE(model_kind_name(kind));
      SequenceModel m(small_model(kind, 6));
      Tape tape;
      const auto leaves = m.add_leaves(tape);
      const Var loss = tape.softmax_cross_entropy(m.forward(tape, leaves, tokens, 2, 4), labels);
      tape.backward(loss);
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        CAPTURE(m.params()[i].name);
        const Tensor fd = finite_difference_grad(
            [&](const Tensor& p) {
              SequenceModel probe = m;
              probe.params()[i].value = p;
              Tape t2;
              const auto l2 = probe.add_leaves(t2);
              return t2.value(t2.softmax_cross_entropy(probe.forward(t2, l2, tokens, 2, 4), labels))[0];
            },
            m.params()[i].value);
        CHECK(relative_error(tape.grad(leaves[i]), fd) <= 1e-5);
      }
    }
  }

  TEST_CASE("restoring parameters checks names and shapes") {
    const ModelConfig cfg = small_model(ModelKind::kGru, 6);
    const SequenceModel m(cfg);
    const SequenceModel copy(cfg, m.params());
    CHECK(copy.logits({1, 2, 3}, 1, 3) == m.logits({1, 2, 3}, 1, 3));
    ParamList bad = m.params();
    bad[2].value = Tensor({1});
    CHECK_THROWS_AS(SequenceModel(cfg, bad), ConfigError);
    bad = m.params();
    bad.pop_back();
    CHECK_THROWS_AS(SequenceModel(cfg, bad), ConfigError);
  }

  TEST_CASE("projection keeps gate exponents positive") {
    SequenceModel m(small_model(ModelKind::kM2rnn, 6));
    for (NamedParam& p : m.params())
      if (p.name == "mixer.gate_alpha") p.value.array() = -1.0;
    m.project();
    for (const NamedParam& p : m.params())
      if (p.name == "mixer.gate_alpha")
        for (double v : p.value.values()) CHECK(v > 0.0);
  }

  TEST_CASE("kind names") {
    for (ModelKind kind : kAllKinds) CHECK(parse_model_kind(model_kind_name(kind)) == kind);
    CHECK_THROWS_AS(parse_model_kind("lstm"), ConfigError);
  }
}

TEST_SUITE("training loops") {
  TrainConfig quick(std::int64_t steps) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.batch = 8;
    cfg.seq_len = 12;
    cfg.warmup = steps / 10;
    cfg.peak_lr = 1e-2;
    cfg.log_every = 5;
    cfg.eval_count = 64;
    return cfg;
  }

  TEST_CASE("untrained model is at chance") {
    TrainConfig cfg = quick(0);
    cfg.eval_count = 2000;
    const TrainRun run = train_state_tracking(small_model(ModelKind::kM2rnn, 6), 3, cfg);
    REQUIRE(run.metrics.size() == 1);
    CHECK(run.metrics[0].split == "eval");
    CHECK(std::abs(run.metrics[0].accuracy - 1.0 / 6.0) < 0.03);
    const auto lengths = evaluate_length_generalization(run.model, 3, {8, 24}, 1000, 5);
    for (const LengthAccuracy& a : lengths) CHECK(std::abs(a.final_accuracy - 1.0 / 6.0) < 0.05);
  }

  TEST_CASE("metrics stream is reproducible and well formed") {
    for (ModelKind kind : kAllKinds) {
      const TrainRun a = train_state_tracking(small_model(kind, 6), 3, quick(12));
      const TrainRun b = train_state_tracking(small_model(kind, 6), 3, quick(12));
      std::ostringstream ca, cb;
      write_metrics_csv(ca, a.metrics);
      write_metrics_csv(cb, b.metrics);
      CHECK(ca.str() == cb.str());
      REQUIRE(a.metrics.size() == 4);
      CHECK(a.metrics[0].step == 4);
      CHECK(a.metrics[2].step == 11);
      for (std::size_t i = 1; i < a.metrics.size(); ++i) CHECK(a.metrics[i].step > a.metrics[i - 1].step);
      for (const MetricRow& r : a.metrics) CHECK(r.grad_norm >= 0.0);
      CHECK(ca.str().rfind("step,split,loss,accuracy,lr,grad_norm\n4,train,", 0) == 0);
    }
  }

  TEST_CASE("different seeds give different runs") {
    TrainConfig c1 = quick(5), c2 = quick(5);
    c2.seed = 1;
    const auto a = train_state_tracking(small_model(ModelKind::kGru, 6), 3, c1);
    const auto b = train_state_tracking(small_model(ModelKind::kGru, 6), 3, c2);
    CHECK(a.metrics.back().loss != b.metrics.back().loss);
  }

  TEST_CASE("non-finite loss aborts the run") {
    TrainConfig cfg = quick(20);
    cfg.warmup = 0;
    cfg.peak_lr = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(train_state_tracking(small_model(ModelKind::kGru, 6), 3, cfg), DivergenceError);
  }

  TEST_CASE("parity is learned by a small GRU") {
    ModelConfig m = small_model(ModelKind::kGru, 2);
    m.model_dim = 8;
    m.hidden = 8;
    TrainConfig cfg = quick(300);
    cfg.batch = 16;
    cfg.seq_len = 16;
    const TrainRun run = train_state_tracking(m, 2, cfg);
    const auto acc = evaluate_length_generalization(run.model, 2, {16}, 256, 1);
    CHECK(acc[0].final_accuracy >= 0.95);
    CHECK(std::abs(acc[0].mean_accuracy - run.metrics.back().accuracy) < 0.05);
  }

  TEST_CASE("bad configs") {
    TrainConfig cfg = quick(5);
    cfg.batch = 0;
    CHECK_THROWS_AS(train_state_tracking(small_model(ModelKind::kGru, 6), 3, cfg), ConfigError);
    CHECK_THROWS_AS(train_state_tracking(small_model(ModelKind::kGru, 6), 7, quick(5)), ConfigError);
    CHECK_THROWS_AS(train_char_lm(small_model(ModelKind::kGru, 6), "", quick(5)), ConfigError);
  }

  TEST_CASE("char lm: a single repeated byte costs nothing") {
    const TrainRun run = train_char_lm(small_model(ModelKind::kM2rnn, 1), std::string(500, 'z'), quick(3));
    CHECK(run.byte_vocab == "z");
    for (const MetricRow& r : run.metrics) CHECK(r.loss == 0.0);
  }

  TEST_CASE("char lm: loss falls and runs repeat exactly") {
    const std::string corpus = make_synthetic_corpus(100000, 1);
    ModelConfig m = small_model(ModelKind::kM2rnn, 1);
    m.model_dim = 16;
    TrainConfig cfg = quick(200);
    cfg.batch = 8;
    cfg.seq_len = 32;
    cfg.log_every = 10;
    const TrainRun a = train_char_lm(m, corpus, cfg);
    const TrainRun b = train_char_lm(m, corpus, cfg);
    CHECK(corpus_vocab(corpus).size() == a.byte_vocab.size());
    TrainConfig none = cfg;
    none.steps = 0;
    const double initial = train_char_lm(m, corpus, none).metrics.back().loss;
    CHECK(a.metrics.back().split == "eval");
    CHECK(a.metrics.back().loss <= 0.8 * initial);
    std::ostringstream ca, cb;
    write_metrics_csv(ca, a.metrics);
    write_metrics_csv(cb, b.metrics);
    CHECK(ca.str() == cb.str());
  }
}
