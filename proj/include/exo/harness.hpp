#pragma once

// Experiment orchestration: flat key = value configuration, desk-scale presets,
// a worker pool over repetitions, learning-curve aggregation and CSV output.

#include "exo/envs.hpp"
#include "exo/io.hpp"
#include "exo/rl.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace exo {

struct ExperimentConfig {
  std::string problem = "p2";
  std::vector<Variant> variants = {Variant::full, Variant::endo_global, Variant::endo_stepwise,
                                   Variant::endo_oracle};
  TrainConfig train;
  DecomposeOptions decomposition;
  std::string output_dir = ".";
  /// 0 picks the hardware thread count.
  int workers = 0;
  int p3_d_exo = 5;
  int p3_d_endo = 5;
  std::uint64_t p3_matrix_seed = 0;
  /// Road network file; empty uses the built-in network.
  std::string traffic_topology;

  void validate() const {
    static const std::vector<std::string> problems = {"p2", "p3", "traffic", "a2", "a3"};
    if (std::find(problems.begin(), problems.end(), problem) == problems.end())
      throw std::invalid_argument("unknown problem '" + problem + "' (expected p2, p3, traffic, a2 or a3)");
    if (variants.empty()) throw std::invalid_argument("no variants selected");
    train.validate();
    decomposition.solver.validate();
    if (!(decomposition.epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
    if (workers < 0) throw std::invalid_argument("workers must be >= 0");
    if (p3_d_exo < 1 || p3_d_endo < 1) throw std::invalid_argument("p3 dimensions must be >= 1");
  }
};

namespace detail {

inline std::string join_variants(const std::vector<Variant>& vs) {
  std::string s;
  for (std::size_t i = 0; i < vs.size(); ++i) s += (i ? "," : "") + to_string(vs[i]);
  return s;
}

inline std::vector<Variant> parse_variant_list(const std::string& s) {
  std::vector<Variant> out;
  for (auto tok : split(s, ',')) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(parse_variant(std::string(tok)));
  }
  return out;
}

}  // namespace detail

/// Every key the configuration understands, in output order.
inline const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "problem", "variants", "gamma", "learning_rate", "beta", "L", "total_steps", "N", "T", "seed",
      "hidden_units", "architecture", "warmup", "metric", "epsilon", "solver_max_iters",
      "solver_restarts", "solver_grad_tol", "solver_step", "solver_fd_step", "solver_seed",
      "output_dir", "workers", "p3_d_exo", "p3_d_endo", "p3_matrix_seed", "traffic_topology"};
  return keys;
}

/// Sets one key; throws std::invalid_argument for unknown keys or bad values.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  const auto num = [&] { return parse_double(value, 0); };
  const auto integer = [&] { return static_cast<int>(parse_int(value, 0)); };
  const auto u64 = [&] {
    const long long v = parse_int(value, 0);
    if (v < 0) throw std::invalid_argument(key + " must be >= 0");
    return static_cast<std::uint64_t>(v);
  };
  try {
    if (key == "problem") c.problem = value;
    else if (key == "variants") c.variants = detail::parse_variant_list(value);
    else if (key == "gamma") c.train.gamma = num();
    else if (key == "learning_rate") c.train.learning_rate = num();
    else if (key == "beta") c.train.beta = num();
    else if (key == "L") c.train.L = integer();
    else if (key == "total_steps") c.train.total_steps = integer();
    else if (key == "N") c.train.N = integer();
    else if (key == "T") c.train.T = integer();
    else if (key == "seed") c.train.seed = u64();
    else if (key == "hidden_units") c.train.hidden_units = integer();
    else if (key == "architecture") {
      if (value == "heads") c.train.architecture = QArchitecture::heads;
      else if (value == "action_input") c.train.architecture = QArchitecture::action_input;
      else throw std::invalid_argument("architecture must be heads or action_input");
    } else if (key == "warmup") {
      if (value == "boltzmann") c.train.warmup = WarmupExploration::boltzmann;
      else if (value == "uniform") c.train.warmup = WarmupExploration::uniform;
      else throw std::invalid_argument("warmup must be boltzmann or uniform");
    } else if (key == "metric") {
      if (value == "endo") c.train.metric = Metric::endo;
      else if (value == "total") c.train.metric = Metric::total;
      else throw std::invalid_argument("metric must be endo or total");
    } else if (key == "epsilon") c.decomposition.epsilon = num();
    else if (key == "solver_max_iters") c.decomposition.solver.max_iters = integer();
    else if (key == "solver_restarts") c.decomposition.solver.restarts = integer();
    else if (key == "solver_grad_tol") c.decomposition.solver.grad_tol = num();
    else if (key == "solver_step") c.decomposition.solver.step_init = num();
    else if (key == "solver_fd_step") c.decomposition.solver.fd_step = num();
    else if (key == "solver_seed") c.decomposition.solver.seed = u64();
    else if (key == "output_dir") c.output_dir = value;
    else if (key == "workers") c.workers = integer();
    else if (key == "p3_d_exo") c.p3_d_exo = integer();
    else if (key == "p3_d_endo") c.p3_d_endo = integer();
    else if (key == "p3_matrix_seed") c.p3_matrix_seed = u64();
    else if (key == "traffic_topology") c.traffic_topology = value;
    else throw std::invalid_argument("unknown key '" + key + "'");
  } catch (const ParseError& e) {
    throw std::invalid_argument(key + ": " + e.what());
  }
}

inline std::string get_config_value(const ExperimentConfig& c, const std::string& key) {
  const auto& s = c.decomposition.solver;
  if (key == "problem") return c.problem;
  if (key == "variants") return detail::join_variants(c.variants);
  if (key == "gamma") return format_double(c.train.gamma);
  if (key == "learning_rate") return format_double(c.train.learning_rate);
  if (key == "beta") return format_double(c.train.beta);
  if (key == "L") return std::to_string(c.train.L);
  if (key == "total_steps") return std::to_string(c.train.total_steps);
  if (key == "N") return std::to_string(c.train.N);
  if (key == "T") return std::to_string(c.train.T);
  if (key == "seed") return std::to_string(c.train.seed);
  if (key == "hidden_units") return std::to_string(c.train.hidden_units);
  if (key == "architecture") return c.train.architecture == QArchitecture::heads ? "heads" : "action_input";
  if (key == "warmup") return c.train.warmup == WarmupExploration::boltzmann ? "boltzmann" : "uniform";
  if (key == "metric") return c.train.metric == Metric::endo ? "endo" : "total";
  if (key == "epsilon") return format_double(c.decomposition.epsilon);
  if (key == "solver_max_iters") return std::to_string(s.max_iters);
  if (key == "solver_restarts") return std::to_string(s.restarts);
  if (key == "solver_grad_tol") return format_double(s.grad_tol);
  if (key == "solver_step") return format_double(s.step_init);
  if (key == "solver_fd_step") return format_double(s.fd_step);
  if (key == "solver_seed") return std::to_string(s.seed);
  if (key == "output_dir") return c.output_dir;
  if (key == "workers") return std::to_string(c.workers);
  if (key == "p3_d_exo") return std::to_string(c.p3_d_exo);
  if (key == "p3_d_endo") return std::to_string(c.p3_d_endo);
  if (key == "p3_matrix_seed") return std::to_string(c.p3_matrix_seed);
  if (key == "traffic_topology") return c.traffic_topology;
  throw std::invalid_argument("unknown key '" + key + "'");
}

/// Desk-scale defaults for a problem id. The output directory defaults to
/// $EXO_OUTPUT_DIR when set.
inline ExperimentConfig preset(const std::string& problem) {
  ExperimentConfig c;
  c.problem = problem;
  if (const char* dir = std::getenv("EXO_OUTPUT_DIR"); dir && *dir) c.output_dir = dir;
  // Decomposition inside learning runs uses a lighter solver than the
  // standalone command; it runs once per repetition and variant.
  c.decomposition.solver.restarts = 2;
  c.decomposition.solver.max_iters = 100;
  auto& t = c.train;
  if (problem == "p2") {
    t.learning_rate = 0.02;
    t.beta = 1.0;
    t.L = 1000;
    t.total_steps = 4000;
    t.N = 20;
    t.T = 250;
  } else if (problem == "p3") {
    // Action effects on Q are about 0.3 here, so beta = 1 is close to a
    // uniform policy and no variant improves within desk-scale budgets.
    t.learning_rate = 0.05;
    t.beta = 0.2;
    t.L = 1000;
    t.total_steps = 10000;
    t.N = 20;
    t.T = 2000;
  } else if (problem == "traffic") {
    c.variants = {Variant::full, Variant::endo_global, Variant::endo_stepwise, Variant::endo_oracle};
    t.architecture = QArchitecture::action_input;
    t.learning_rate = 0.01;
    t.beta = 5.0;
    t.L = 1000;
    t.total_steps = 4000;
    t.N = 20;
    t.T = 400;
  } else if (problem == "a2" || problem == "a3") {
    t.learning_rate = 0.02;
    t.beta = 1.0;
    t.L = 1000;
    t.total_steps = 3000;
    t.N = 20;
    t.T = 250;
  } else {
    throw std::invalid_argument("unknown problem '" + problem + "'");
  }
  return c;
}

/// Parses key = value lines ('#' starts a comment) on top of `base`.
inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::size_t line_no = 0;
  for (auto raw : split(text, '\n')) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    raw = trim(raw);
    if (raw.empty()) continue;
    const auto eq = raw.find('=');
    if (eq == std::string_view::npos) throw ParseError(line_no, "expected key = value");
    const std::string key(trim(raw.substr(0, eq))), value(trim(raw.substr(eq + 1)));
    try {
      set_config_value(base, key, value);
    } catch (const std::invalid_argument& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return base;
}

inline std::string format_config(const ExperimentConfig& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k + " = " + get_config_value(c, k) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Learning curves
// ---------------------------------------------------------------------------

struct CurveRow {
  int step = 0;
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::string variant;
  int n_runs = 0;
};

using LearningCurve = std::vector<CurveRow>;

inline constexpr double kZ95 = 1.959963984540054;

/// One row per block of T steps (the last block may be shorter): mean of the
/// N x T pooled rewards with a normal-approximation 95% interval. `step` is
/// the number of steps completed at the end of the block.
inline LearningCurve aggregate_curve(const std::vector<std::vector<double>>& traces, int T,
                                     const std::string& variant) {
  if (traces.empty()) return {};
  if (T < 1) throw std::invalid_argument("aggregate_curve: T must be >= 1");
  const std::size_t steps = traces.front().size();
  for (const auto& tr : traces)
    if (tr.size() != steps) throw std::invalid_argument("aggregate_curve: traces differ in length");
  LearningCurve curve;
  for (std::size_t b = 0; b < steps; b += static_cast<std::size_t>(T)) {
    const std::size_t e = std::min(steps, b + static_cast<std::size_t>(T));
    double sum = 0.0;
    std::size_t m = 0;
    for (const auto& tr : traces)
      for (std::size_t t = b; t < e; ++t, ++m) sum += tr[t];
    const double mean = sum / static_cast<double>(m);
    double ss = 0.0;
    for (const auto& tr : traces)
      for (std::size_t t = b; t < e; ++t) ss += (tr[t] - mean) * (tr[t] - mean);
    const double sd = m > 1 ? std::sqrt(ss / static_cast<double>(m - 1)) : 0.0;
    const double half = kZ95 * sd / std::sqrt(static_cast<double>(m));
    curve.push_back({static_cast<int>(e), mean, mean - half, mean + half, variant,
                     static_cast<int>(traces.size())});
  }
  return curve;
}

inline std::string format_curves_csv(const std::vector<LearningCurve>& curves, const std::string& header) {
  std::string out;
  for (auto line : split(header, '\n'))
    if (!line.empty()) out += "# " + std::string(line) + "\n";
  out += "step,mean_reward,ci_low,ci_high,variant,n_runs\n";
  for (const auto& c : curves)
    for (const auto& r : c)
      out += std::to_string(r.step) + "," + format_double(r.mean) + "," + format_double(r.ci_low) + "," +
             format_double(r.ci_high) + "," + r.variant + "," + std::to_string(r.n_runs) + "\n";
  return out;
}

inline std::vector<CurveRow> parse_curves_csv(const std::string& text) {
  std::vector<CurveRow> rows;
  std::size_t line_no = 0;
  bool header = false;
  for (auto raw : split(text, '\n')) {
    ++line_no;
    raw = trim(raw);
    if (raw.empty() || raw.front() == '#') continue;
    if (!header) {
      if (raw != "step,mean_reward,ci_low,ci_high,variant,n_runs") throw ParseError(line_no, "bad CSV header");
      header = true;
      continue;
    }
    const auto f = split(raw, ',');
    if (f.size() != 6) throw ParseError(line_no, "expected 6 fields");
    rows.push_back({static_cast<int>(parse_int(f[0], line_no)), parse_double(f[1], line_no),
                    parse_double(f[2], line_no), parse_double(f[3], line_no), std::string(f[4]),
                    static_cast<int>(parse_int(f[5], line_no))});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

struct VariantSummary {
  Variant variant = Variant::full;
  LearningCurve curve;
  int fallbacks = 0;
  std::vector<int> d_x;  // per repetition, endo_global / endo_stepwise only
  std::vector<double> pcc;
};

struct ExperimentResult {
  ExperimentConfig config;
  std::vector<VariantSummary> variants;
  /// (repetition index, message) for failed repetitions.
  std::vector<std::pair<int, std::string>> failures;
  int completed_runs = 0;
  bool ok() const { return failures.empty(); }
};

/// Runs fn(i) for i in [0, n) on `workers` threads; exceptions are captured
/// per index.
template <class Fn>
std::vector<std::optional<std::string>> parallel_for(int n, int workers, Fn&& fn) {
  std::vector<std::optional<std::string>> errors(static_cast<std::size_t>(n));
  if (workers <= 0) workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  workers = std::min(workers, std::max(n, 1));
  std::atomic<int> next{0};
  const auto worker = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (const std::exception& e) {
        errors[static_cast<std::size_t>(i)] = e.what();
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return errors;
}

template <Environment Env>
ExperimentResult run_experiment(const Env& env, const ExperimentConfig& cfg) {
  cfg.validate();
  const int n = cfg.train.N;
  std::vector<std::optional<RepetitionResult>> reps(static_cast<std::size_t>(n));
  const auto errors = parallel_for(n, cfg.workers, [&](int i) {
    reps[static_cast<std::size_t>(i)] =
        run_repetition(env, cfg.variants, cfg.train, cfg.decomposition, cfg.train.seed + static_cast<std::uint64_t>(i));
  });

  ExperimentResult res;
  res.config = cfg;
  for (int i = 0; i < n; ++i)
    if (errors[static_cast<std::size_t>(i)]) res.failures.emplace_back(i, *errors[static_cast<std::size_t>(i)]);
  for (std::size_t v = 0; v < cfg.variants.size(); ++v) {
    VariantSummary s;
    s.variant = cfg.variants[v];
    std::vector<std::vector<double>> traces;
    for (const auto& r : reps) {
      if (!r) continue;
      const VariantRun& run = r->runs[v];
      traces.push_back(run.trace);
      if (run.fallback) ++s.fallbacks;
      if (run.d_x >= 0) {
        s.d_x.push_back(run.d_x);
        s.pcc.push_back(run.pcc);
      }
    }
    s.curve = aggregate_curve(traces, cfg.train.T, to_string(s.variant));
    res.variants.push_back(std::move(s));
  }
  res.completed_runs = n - static_cast<int>(res.failures.size());
  return res;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.problem == "p2") return run_experiment(make_problem2(), cfg);
  if (cfg.problem == "p3") return run_experiment(make_problem3(cfg.p3_d_exo, cfg.p3_d_endo, cfg.p3_matrix_seed), cfg);
  if (cfg.problem == "a2") return run_experiment(make_appendix2(), cfg);
  if (cfg.problem == "a3") return run_experiment(make_appendix3(), cfg);
  const TrafficNetworkEnv env = cfg.traffic_topology.empty()
                                    ? make_traffic()
                                    : make_traffic(read_file(cfg.traffic_topology));
  return run_experiment(env, cfg);
}

/// 1 when a's final interval lies strictly above b's, -1 when strictly
/// below, 0 when they overlap.
inline int compare_final(const LearningCurve& a, const LearningCurve& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("compare_final: empty curve");
  const CurveRow &x = a.back(), &y = b.back();
  if (x.ci_low > y.ci_high) return 1;
  if (x.ci_high < y.ci_low) return -1;
  return 0;
}

inline std::string format_summary(const ExperimentResult& res) {
  std::string out = "# experiment summary\n";
  const std::string config = format_config(res.config);
  for (auto line : split(config, '\n'))
    if (!line.empty()) out += "# " + std::string(line) + "\n";
  out += "status " + std::string(res.ok() ? "ok" : "FAILED") + "\n";
  out += "completed_runs " + std::to_string(res.completed_runs) + "\n";
  for (const auto& [i, msg] : res.failures) {
    std::string flat = msg;
    std::replace(flat.begin(), flat.end(), '\n', ' ');
    out += "failed_run " + std::to_string(i) + " " + flat + "\n";
  }
  for (const auto& v : res.variants) {
    const std::string name = to_string(v.variant);
    if (!v.curve.empty()) {
      const auto& f = v.curve.back();
      out += name + " final_step " + std::to_string(f.step) + " mean " + format_double(f.mean) + " ci " +
             format_double(f.ci_low) + " " + format_double(f.ci_high) + "\n";
    }
    if (!v.d_x.empty()) {
      std::map<int, int> hist;
      for (int d : v.d_x) ++hist[d];
      out += name + " d_x";
      for (const auto& [d, cnt] : hist) out += " " + std::to_string(d) + ":" + std::to_string(cnt);
      double mp = 0.0;
      for (double p : v.pcc) mp += p;
      out += "\n" + name + " mean_pcc_final " + format_double(mp / static_cast<double>(v.pcc.size())) + "\n";
      out += name + " fallbacks " + std::to_string(v.fallbacks) + "\n";
    }
  }
  return out;
}

struct ExperimentFiles {
  std::filesystem::path curves;
  std::filesystem::path summary;
};

/// Writes <problem>_curves.csv and <problem>_summary.txt into output_dir.
inline ExperimentFiles write_experiment(const ExperimentResult& res) {
  const std::filesystem::path dir(res.config.output_dir);
  std::filesystem::create_directories(dir);
  ExperimentFiles files{dir / (res.config.problem + "_curves.csv"), dir / (res.config.problem + "_summary.txt")};
  std::vector<LearningCurve> curves;
  for (const auto& v : res.variants) curves.push_back(v.curve);
  std::string header = format_config(res.config);
  if (!res.ok()) header += "status = FAILED (" + std::to_string(res.failures.size()) + " runs missing)\n";
  write_file_atomic(files.curves, format_curves_csv(curves, header));
  write_file_atomic(files.summary, format_summary(res));
  return files;
}

}  // namespace exo
