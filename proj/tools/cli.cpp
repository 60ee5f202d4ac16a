// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "m2rnn/checkpoint.hpp"
#include "m2rnn/config.hpp"
#include "m2rnn/gradcheck.hpp"
#include "m2rnn/tasks.hpp"
#include "recurrence_oracle.hpp"

namespace m2rnn::cli {

namespace fs = std::filesystem;
using testing::random_tensor;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::vector<std::string> overrides;
};

RunConfig resolve(const CommonOptions& opt) {
  RunConfig cfg;
  if (!opt.config_path.empty()) cfg.load(opt.config_path);
  for (const std::string& o : opt.overrides) cfg.apply_override(o);
  if (opt.seed) cfg.set("seed", std::to_string(*opt.seed));
  return cfg;
}

fs::path prepare_out(const CommonOptions& opt) {
  std::error_code ec;
  fs::create_directories(opt.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + opt.out_dir + ": " + ec.message());
  return opt.out_dir;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  return os;
}

std::string format(const char* fmt, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct CheckLine {
  std::string name;
  double error;
  double tol;
  bool ok() const { return error <= tol; }
};

class GradReport {
 public:
  void add(const std::string& name, double error, double tol) {
    const auto it = std::find_if(lines_.begin(), lines_.end(), [&](const CheckLine& l) { return l.name == name; });
    if (it == lines_.end()) lines_.push_back({name, error, tol});
    else it->error = std::max(it->error, error);
  }
  const std::vector<CheckLine>& lines() const { return lines_; }
  bool ok() const {
    return std::all_of(lines_.begin(), lines_.end(), [](const CheckLine& l) { return l.ok(); });
  }

 private:
  std::vector<CheckLine> lines_;
};

void check_recurrence(GradReport& rep, const RunConfig& cfg) {
  const double fd_tol = cfg.get_double("gc_fd_tol"), tape_tol = cfg.get_double("gc_tape_tol");
  const bool corrupt = cfg.get_bool("gc_corrupt_backward");
  const std::uint64_t base = cfg.get_u64("seed");
  for (std::int64_t i = 0; i < cfg.get_int("gc_seeds"); ++i) {
    const std::uint64_t seed = base + static_cast<std::uint64_t>(i);
    const RecurrenceInputs in = testing::random_recurrence({2, 6, 3, 8, 4}, seed);
    std::mt19937_64 rng(seed ^ 0x5eedULL);
    const Tensor dy = random_tensor({2, 6, 3, 4}, rng);
    RecurrenceGrads got = m2rnn_backward(in, m2rnn_forward_cached(in), dy);
    if (corrupt) got.d_transition[0] += 1e-3 * (1.0 + std::abs(got.d_transition[0]));
    const RecurrenceGrads fd = testing::fd_gradients(in, dy), tape = testing::tape_gradients(in, dy);
    const std::pair<const char*, Tensor RecurrenceGrads::*> fields[] = {
        {"dQ", &RecurrenceGrads::d_queries},    {"dK", &RecurrenceGrads::d_keys},
        {"dV", &RecurrenceGrads::d_values},     {"dW", &RecurrenceGrads::d_transition},
        {"dF", &RecurrenceGrads::d_forget},     {"dH0", &RecurrenceGrads::d_initial_state}};
    for (const auto& [name, field] : fields) {
      rep.add(std::string("recurrence ") + name + " vs fd", relative_error(got.*field, fd.*field), fd_tol);
      rep.add(std::string("recurrence ") + name + " vs tape", relative_error(got.*field, tape.*field), tape_tol);
    }
  }
}

void check_layer(GradReport& rep, const RunConfig& cfg) {
  LayerConfig lc;
  lc.model_dim = 12;
  lc.heads = 2;
  lc.key_dim = 4;
  lc.value_dim = 3;
  lc.init_std = 0.4;
  lc.transition_init = TransitionInit::kNormal;
  lc.state_grad_clip = std::nullopt;
  const std::uint64_t seed = cfg.get_u64("seed");
  const LayerParams p = init_layer_params(lc, seed);
  std::mt19937_64 rng(seed + 1);
  const Tensor x = random_tensor({2, 5, lc.model_dim}, rng), probe = random_tensor({2, 5, lc.model_dim}, rng);
  const LayerGradients g = layer_backward(p, lc, x, probe);
  auto loss = [&](const LayerParams& q, const Tensor& xx) { return sum(mul(layer_forward(q, lc, xx).output, probe)); };
  const double tol = cfg.get_double("gc_fd_tol");
  rep.add("layer dx vs fd", relative_error(g.input, finite_difference_grad([&](const Tensor& xx) { return loss(p, xx); }, x)), tol);
  std::vector<Tensor*> grads;
  LayerParams gp = g.params;
  gp.visit([&](const char*, Tensor& t) { grads.push_back(&t); });
  std::size_t i = 0;
  LayerParams work = p;
  work.visit([&](const char* name, Tensor& t) {
    const Tensor fd = finite_difference_grad(
        [&](const Tensor& v) {
          const Tensor saved = t;
          t = v;
          const double l = loss(work, x);
          t = saved;
          return l;
        },
        Tensor(t));
    rep.add(std::string("layer ") + name + " vs fd", relative_error(*grads[i++], fd), tol);
  });
}

void check_baselines(GradReport& rep, const RunConfig& cfg) {
  const double tol = cfg.get_double("gc_fd_tol");
  std::mt19937_64 rng(cfg.get_u64("seed") + 7);

  const Tensor w = random_tensor({6, 6}, rng, -0.6, 0.6), x = random_tensor({2, 5, 6}, rng),
               dh = random_tensor({2, 5, 6}, rng);
  const auto vg = vector_rnn_backward(w, vector_rnn_scan(w, x), dh);
  rep.add("vector-rnn dW vs fd", relative_error(vg.d_transition, finite_difference_grad(
      [&](const Tensor& ww) { return sum(mul(vector_rnn_scan(ww, x), dh)); }, w)), tol);
  rep.add("vector-rnn dx vs fd", relative_error(vg.d_inputs, finite_difference_grad(
      [&](const Tensor& xx) { return sum(mul(vector_rnn_scan(w, xx), dh)); }, x)), tol);

  const Index hd = 5;
  Tensor ar = random_tensor({2, 4, hd}, rng), az = random_tensor({2, 4, hd}, rng), an = random_tensor({2, 4, hd}, rng);
  GruWeights<double> gw{random_tensor({hd, hd}, rng, -0.8, 0.8), random_tensor({hd, hd}, rng, -0.8, 0.8),
                        random_tensor({hd, hd}, rng, -0.8, 0.8), random_tensor({hd}, rng),
                        random_tensor({hd}, rng),                random_tensor({hd}, rng)};
  const Tensor gdh = random_tensor({2, 4, hd}, rng);
  const auto gg = gru_backward(ar, az, an, gw, gru_scan(ar, az, an, gw), gdh);
  auto gru_loss = [&] { return sum(mul(gru_scan(ar, az, an, gw), gdh)); };
  auto fd_of = [&](Tensor& t) {
    return finite_difference_grad([&](const Tensor& v) { const Tensor saved = t; t = v; const double l = gru_loss(); t = saved; return l; }, Tensor(t));
  };
  rep.add("gru d_ar vs fd", relative_error(gg.d_ar, fd_of(ar)), tol);
  rep.add("gru d_az vs fd", relative_error(gg.d_az, fd_of(az)), tol);
  rep.add("gru d_an vs fd", relative_error(gg.d_an, fd_of(an)), tol);
  rep.add("gru dU vs fd", std::max({relative_error(gg.d_weights.u_r, fd_of(gw.u_r)),
                                    relative_error(gg.d_weights.u_z, fd_of(gw.u_z)),
                                    relative_error(gg.d_weights.u_n, fd_of(gw.u_n))}), tol);
  rep.add("gru dc vs fd", std::max({relative_error(gg.d_weights.c_r, fd_of(gw.c_r)),
                                    relative_error(gg.d_weights.c_z, fd_of(gw.c_z)),
                                    relative_error(gg.d_weights.c_n, fd_of(gw.c_n))}), tol);

  const Shape qk{2, 4, 2, 3};
  DiagLinearInputs<double> din{random_tensor(qk, rng), random_tensor(qk, rng), random_tensor(qk, rng, 0.05, 0.95),
                               random_tensor({2, 4, 2, 3}, rng), random_tensor({2, 2, 3, 3}, rng)};
  const Tensor ddy = random_tensor({2, 4, 2, 3}, rng);
  Tensor states;
  diag_linear_scan(din, &states);
  const auto dg = diag_linear_backward(din, states, ddy);
  const std::pair<const char*, std::pair<Tensor DiagLinearInputs<double>::*, Tensor DiagLinearGrads<double>::*>> diag_fields[] = {
      {"dq", {&DiagLinearInputs<double>::queries, &DiagLinearGrads<double>::d_queries}},
      {"dk", {&DiagLinearInputs<double>::keys, &DiagLinearGrads<double>::d_keys}},
      {"da", {&DiagLinearInputs<double>::decay, &DiagLinearGrads<double>::d_decay}},
      {"dv", {&DiagLinearInputs<double>::values, &DiagLinearGrads<double>::d_values}},
      {"dH0", {&DiagLinearInputs<double>::initial_state, &DiagLinearGrads<double>::d_initial_state}}};
  for (const auto& [name, fields] : diag_fields) {
    const Tensor fd = finite_difference_grad(
        [&](const Tensor& v) {
          DiagLinearInputs<double> p = din;
          p.*(fields.first) = v;
          return sum(mul(diag_linear_scan(p), ddy));
        },
        din.*(fields.first));
    rep.add(std::string("diag-linear ") + name + " vs fd", relative_error(dg.*(fields.second), fd), tol);
  }
}

void check_rmsnorm_tp(GradReport& rep, const RunConfig& cfg) {
  std::mt19937_64 rng(cfg.get_u64("seed") + 11);
  const Index rows = 3, width = 8;
  const Tensor x = random_tensor({rows, width}, rng), w = random_tensor({width}, rng, 0.5, 1.5),
               dy = random_tensor({rows, width}, rng);
  const auto [y_ref, s_ref] = rmsnorm_rows(x, w, width, kRmsNormEps);
  const auto g_ref = rmsnorm_rows_backward(x, w, s_ref, width, dy);
  const double fd_tol = 1e-6;
  rep.add("rmsnorm dx vs fd", relative_error(g_ref.dx, finite_difference_grad(
      [&](const Tensor& xx) { return sum(mul(rmsnorm_rows(xx, w, width, kRmsNormEps).first, dy)); }, x)), fd_tol);
  rep.add("rmsnorm dw vs fd", relative_error(g_ref.dw, finite_difference_grad(
      [&](const Tensor& ww) { return sum(mul(rmsnorm_rows(x, ww, width, kRmsNormEps).first, dy)); }, w)), fd_tol);

  for (int world : {2, 4}) {
    const Index local = width / world;
    Tensor y(x.shape()), dx(x.shape()), dw({width});
    CollectiveBus bus(world);
    run_shards(bus, [&](int s) {
      Tensor xs({rows, local}), dys({rows, local}), ws({local});
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < local; ++j) {
          xs(r, j) = x(r, s * local + j);
          dys(r, j) = dy(r, s * local + j);
        }
      for (Index j = 0; j < local; ++j) ws[j] = w[s * local + j];
      const auto f = rmsnorm_tp_forward(bus, s, xs, ws, width, kRmsNormEps);
      const auto g = rmsnorm_tp_backward(bus, s, xs, ws, f.s, dys, width);
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < local; ++j) {
          y(r, s * local + j) = f.y(r, j);
          dx(r, s * local + j) = g.dx(r, j);
        }
      for (Index j = 0; j < local; ++j) dw[s * local + j] = g.dw[j];
    });
    const std::string tag = "rmsnorm-tp world " + std::to_string(world);
    rep.add(tag + " y vs device", max_abs_diff(y, y_ref), 1e-12);
    rep.add(tag + " dx vs device", max_abs_diff(dx, g_ref.dx), 1e-12);
    rep.add(tag + " dw vs device", max_abs_diff(dw, g_ref.dw), 1e-12);
  }
}

int cmd_gradcheck(const RunConfig& cfg, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  GradReport rep;
  check_recurrence(rep, cfg);
  check_layer(rep, cfg);
  check_baselines(rep, cfg);
  check_rmsnorm_tp(rep, cfg);
  std::ostringstream text;
  for (const CheckLine& l : rep.lines())
    text << format("%-36s %.3e  tol %.0e  %s\n", l.name.c_str(), l.error, l.tol, l.ok() ? "ok" : "FAIL");
  out << text.str();
  open_out(out_dir / "gradcheck.txt") << text.str();
  if (rep.ok()) return kExitOk;
  for (const CheckLine& l : rep.lines())
    if (!l.ok()) err << "gradcheck: " << l.name << " exceeds tolerance\n";
  return kExitVerificationFailed;
}

// ---------------------------------------------------------------------------
// train / eval-lengths
// ---------------------------------------------------------------------------

NamedTensors checkpoint_tensors(const TrainRun& run) {
  NamedTensors t;
  const ParamList& params = run.model.params();
  for (const NamedParam& p : params) t.emplace_back(p.name, p.value);
  const auto& m = run.optimizer.first_moments();
  const auto& v = run.optimizer.second_moments();
  for (std::size_t i = 0; i < m.size(); ++i) t.emplace_back("optim.m." + params[i].name, m[i]);
  for (std::size_t i = 0; i < v.size(); ++i) t.emplace_back("optim.v." + params[i].name, v[i]);
  t.emplace_back("optim.step", Tensor({1}, {static_cast<double>(run.optimizer.steps())}));
  return t;
}

std::string load_corpus(const RunConfig& cfg) {
  const std::string& path = cfg.get("corpus");
  if (path.empty()) return make_synthetic_corpus(static_cast<std::size_t>(cfg.get_int("corpus_bytes")), cfg.get_u64("seed"));
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open corpus " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

int cmd_train(const RunConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  const ModelConfig mc = model_config(cfg);
  const TrainConfig tc = train_config(cfg);
  const std::string& task = cfg.get("task");
  TrainRun run;
  if (task == "state") run = train_state_tracking(mc, static_cast<int>(cfg.get_int("group_k")), tc);
  else if (task == "charlm") run = train_char_lm(mc, load_corpus(cfg), tc);
  else throw ConfigError("config: task must be state or charlm, got '" + task + "'");

  save_checkpoint(out_dir / "checkpoint.m2rn", checkpoint_tensors(run));
  auto metrics = open_out(out_dir / "metrics.csv");
  write_metrics_csv(metrics, run.metrics);
  auto resolved = open_out(out_dir / "config.txt");
  cfg.write(resolved);
  const MetricRow& last = run.metrics.back();
  out << format("%s %s: %lld steps, %lld parameters, state %lld; %s loss %.6f accuracy %.4f\n",
                model_kind_name(mc.kind), task.c_str(), static_cast<long long>(tc.steps),
                static_cast<long long>(run.model.param_count()), static_cast<long long>(run.model.state_size()),
                last.split.c_str(), last.loss, last.accuracy);
  return kExitOk;
}

int cmd_eval_lengths(const RunConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  if (cfg.get("task") != "state") throw ConfigError("eval-lengths: needs task = state");
  const int k = static_cast<int>(cfg.get_int("group_k"));
  ModelConfig mc = model_config(cfg);
  mc.vocab = mc.classes = GroupTable(k).order();
  const fs::path ckpt = cfg.get("checkpoint").empty() ? out_dir / "checkpoint.m2rn" : fs::path(cfg.get("checkpoint"));
  ParamList params;
  for (auto& [name, t] : load_checkpoint(ckpt))
    if (!name.starts_with("optim.")) params.push_back({name, std::move(t), true});
  const SequenceModel model(mc, std::move(params));
  std::vector<Index> lengths;
  for (std::int64_t l : cfg.get_int_list("eval_lengths")) lengths.push_back(l);
  const auto rows = evaluate_length_generalization(model, k, lengths, cfg.get_int("eval_count"), cfg.get_u64("seed"));
  auto csv = open_out(out_dir / "lengths.csv");
  write_length_csv(csv, rows);
  for (const LengthAccuracy& r : rows)
    out << format("length %4lld  final %.4f  mean %.4f  loss %.6f\n", static_cast<long long>(r.length),
                  r.final_accuracy, r.mean_accuracy, r.loss);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// tp-check
// ---------------------------------------------------------------------------

int cmd_tp_check(const RunConfig& cfg, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
  LayerConfig lc = model_config(cfg).layer;
  lc.state_grad_clip = std::nullopt;
  lc.validate();
  const int world = static_cast<int>(cfg.get_int("tp_world"));
  const TpScheme scheme = parse_tp_scheme(cfg.get("tp_scheme"));
  const std::string& sched_name = cfg.get("tp_schedule");
  if (sched_name != "threaded" && sched_name != "sequential")
    throw ConfigError("config: tp_schedule must be threaded or sequential");
  const Schedule schedule = sched_name == "threaded" ? Schedule::kThreaded : Schedule::kSequential;

  const std::uint64_t seed = cfg.get_u64("seed");
  const LayerParams p = init_layer_params(lc, seed);
  std::mt19937_64 rng(seed + 1);
  const Shape xs{cfg.get_int("tp_batch"), cfg.get_int("tp_steps"), lc.model_dim};
  const Tensor x = random_tensor(xs, rng), dy = random_tensor(xs, rng);

  const auto shards = scheme == TpScheme::kTopologyAware ? shard_topology_aware(p, lc, world)
                                                         : shard_topology_independent(p, lc, world);
  const TpStepResult r = tp_layer_step(scheme, shards, x, dy, schedule);

  double deviation = 0.0;
  if (scheme == TpScheme::kTopologyIndependent) {
    const LayerGradients ref = layer_backward(p, lc, x, dy);
    const Tensor ref_out = layer_forward(p, lc, x).output;
    for (int s = 0; s < world; ++s) {
      deviation = std::max({deviation, max_abs_diff(r.outputs[s], ref_out), max_abs_diff(r.input_grads[s], ref.input)});
    }
    std::vector<const Tensor*> a, b;
    const LayerParams gathered = gather_shards(r.grads, lc);
    gathered.visit([&](const char*, const Tensor& t) { a.push_back(&t); });
    ref.params.visit([&](const char*, const Tensor& t) { b.push_back(&t); });
    for (std::size_t i = 0; i < a.size(); ++i) deviation = std::max(deviation, max_abs_diff(*a[i], *b[i]));
  } else {
    Tensor expected = layer_forward(shards[0].params, shards[0].cfg, x).output;
    for (int s = 1; s < world; ++s) expected.array() += layer_forward(shards[s].params, shards[s].cfg, x).output.array();
    for (int s = 0; s < world; ++s) deviation = std::max(deviation, max_abs_diff(r.outputs[s], expected));
  }

  const RoundCounts extra = extra_rounds(r.log);
  RoundCounts expected_extra;
  if (world > 1 && scheme == TpScheme::kTopologyIndependent)
    expected_extra = lc.per_head_norm ? RoundCounts{0, 2} : RoundCounts{1, 3};
  const bool rounds_ok = extra.forward == expected_extra.forward && extra.backward == expected_extra.backward;
  const bool dev_ok = deviation <= 1e-10;

  std::ostringstream report;
  report << format("scheme %s world %d\n", tp_scheme_name(scheme), world)
         << format("max deviation %.3e (tolerance 1e-10) %s\n", deviation, dev_ok ? "ok" : "FAIL")
         << format("extra rounds forward=+%d backward=+%d (expected +%d/+%d) %s\n", extra.forward,
                   extra.backward, expected_extra.forward, expected_extra.backward, rounds_ok ? "ok" : "FAIL");
  out << report.str();
  open_out(out_dir / "tp_report.txt") << report.str();
  auto log = open_out(out_dir / "comm_log.csv");
  write_comm_log_csv(log, r.log);
  if (dev_ok && rounds_ok) return kExitOk;
  err << "tp-check: verification failed\n";
  return kExitVerificationFailed;
}

// ---------------------------------------------------------------------------
// paramcount
// ---------------------------------------------------------------------------

int cmd_paramcount(const RunConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  std::ostringstream csv;
  csv << "pattern,N,K,V,d,w_q,w_k,w_v,w_g,w_f,w_o,total,state\n";
  for (HeadPatternKind kind : {HeadPatternKind::kMultiHead, HeadPatternKind::kMultiQuery,
                               HeadPatternKind::kMultiKey, HeadPatternKind::kMultiValue}) {
    const HeadPattern hp{kind, cfg.get_int("heads"), cfg.get_int("key_dim"), cfg.get_int("value_dim"),
                         cfg.get_int("model_dim")};
    const ProjectionCounts c = projection_counts(hp);
    csv << head_pattern_name(kind) << ',' << hp.heads << ',' << hp.key_dim << ',' << hp.value_dim << ','
        << hp.model_dim << ',' << c.w_q << ',' << c.w_k << ',' << c.w_v << ',' << c.w_g << ',' << c.w_f
        << ',' << c.w_o << ',' << c.total() << ',' << state_size(hp) << '\n';
    out << format("%-12s params %10lld  state %10lld\n", head_pattern_name(kind),
                  static_cast<long long>(c.total()), static_cast<long long>(state_size(hp)));
  }
  open_out(out_dir / "paramcount.csv") << csv.str();
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

RecurrenceDims parse_shape(const std::string& text, Index batch, Index steps) {
  std::array<Index, 3> nkv{};
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    const std::size_t end = i < 2 ? text.find('x', pos) : text.size();
    if (end == std::string::npos) throw ConfigError("bench_shapes: expected NxKxV, got '" + text + "'");
    try {
      nkv[static_cast<std::size_t>(i)] = std::stoll(text.substr(pos, end - pos));
    } catch (const std::exception&) {
      throw ConfigError("bench_shapes: expected NxKxV, got '" + text + "'");
    }
    if (nkv[static_cast<std::size_t>(i)] < 1) throw ConfigError("bench_shapes: dimensions must be positive");
    pos = end + 1;
  }
  return {batch, steps, nkv[0], nkv[1], nkv[2]};
}

double median_seconds(int repeats, const std::function<void()>& fn) {
  std::vector<double> t;
  for (int i = 0; i < repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

int cmd_bench(const RunConfig& cfg, const fs::path& out_dir, std::ostream& out) {
  const Index batch = cfg.get_int("bench_batch"), steps = cfg.get_int("bench_steps");
  const int repeats = static_cast<int>(cfg.get_int("bench_repeats"));
  std::ostringstream csv;
  csv << "N,K,V,B,T,variant,seconds,tokens_per_second\n";
  std::istringstream shapes(cfg.get("bench_shapes"));
  for (std::string shape; std::getline(shapes, shape, ',');) {
    const RecurrenceDims d = parse_shape(shape, batch, steps);
    const RecurrenceInputs in = testing::random_recurrence(d, cfg.get_u64("seed"));
    std::mt19937_64 rng(cfg.get_u64("seed") + 1);
    const Tensor dy = random_tensor({d.batch, d.steps, d.heads, d.value_dim}, rng);
    const double fused = median_seconds(repeats, [&] {
      const Tensor states = m2rnn_forward_cached(in);
      const RecurrenceGrads g = m2rnn_backward(in, states, dy);
      (void)g;
    });
    const double unfused = median_seconds(repeats, [&] {
      const RecurrenceOutputs o = testing::reference_forward(in);
      const RecurrenceGrads g = testing::tape_gradients(in, dy);
      (void)o;
      (void)g;
    });
    const double tokens = static_cast<double>(d.batch * d.steps);
    for (const auto& [name, secs] : {std::pair{"fused", fused}, std::pair{"unfused", unfused}}) {
      csv << d.heads << ',' << d.key_dim << ',' << d.value_dim << ',' << d.batch << ',' << d.steps << ','
          << name << ',' << secs << ',' << tokens / secs << '\n';
    }
    out << format("N=%-3lld K=%-4lld V=%-4lld fused %12.0f tok/s  unfused %12.0f tok/s  speedup %.1fx\n",
                  static_cast<long long>(d.heads), static_cast<long long>(d.key_dim),
                  static_cast<long long>(d.value_dim), tokens / fused, tokens / unfused, unfused / fused);
  }
  open_out(out_dir / "bench.csv") << csv.str();
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"M2RNN reference implementation: verification, training and benchmarks"};
  app.require_subcommand(1, 1);
  CommonOptions opt;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "key = value configuration file");
    sub->add_option("--seed", opt.seed, "overrides the seed key");
    sub->add_option("--out", opt.out_dir, "output directory (created if missing)");
    sub->add_option("--override", opt.overrides, "KEY=VALUE, applied after --config (repeatable)");
    return sub;
  };
  using Handler = std::function<int(const RunConfig&, const fs::path&)>;
  std::vector<std::pair<CLI::App*, Handler>> commands = {
      {add_common(app.add_subcommand("gradcheck", "hand-written gradients vs finite differences and tape")),
       [&](const RunConfig& c, const fs::path& o) { return cmd_gradcheck(c, o, out, err); }},
      {add_common(app.add_subcommand("train", "train a model, write checkpoint and metrics")),
       [&](const RunConfig& c, const fs::path& o) { return cmd_train(c, o, out); }},
      {add_common(app.add_subcommand("eval-lengths", "state-tracking accuracy at several lengths")),
       [&](const RunConfig& c, const fs::path& o) { return cmd_eval_lengths(c, o, out); }},
      {add_common(app.add_subcommand("tp-check", "simulated tensor parallel step vs one device")),
       [&](const RunConfig& c, const fs::path& o) { return cmd_tp_check(c, o, out, err); }},
      {add_common(app.add_subcommand("paramcount", "projection parameters and state size per head pattern")),
       [&](const RunConfig& c, const fs::path& o) { return cmd_paramcount(c, o, out); }},
      {add_common(app.add_subcommand("bench", "fused vs unfused recurrence throughput")),
       [&](const RunConfig& c, const fs::path& o) { return cmd_bench(c, o, out); }},
  };

  std::vector<const char*> argv{"m2rnn"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  try {
    for (const auto& [sub, handler] : commands)
      if (sub->parsed()) {
        const RunConfig cfg = resolve(opt);
        return handler(cfg, prepare_out(opt));
      }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const DivergenceError& e) {
    err << "training diverged: " << e.what() << '\n';
    return kExitVerificationFailed;
  }
  return kExitConfigError;
}

}  // namespace m2rnn::cli
