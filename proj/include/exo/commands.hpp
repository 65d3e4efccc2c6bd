#pragma once

// Implementations of the command-line subcommands. Each returns the process
// exit code and writes diagnostics to `err`.

#include "exo/decompose.hpp"
#include "exo/envs.hpp"
#include "exo/harness.hpp"
#include "exo/io.hpp"
#include "exo/mdp.hpp"

#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <ostream>
#include <random>
#include <string>
#include <type_traits>

namespace exo {

enum ExitCode : int { kExitOk = 0, kExitError = 1, kExitNoExogenous = 2 };

// ---------------------------------------------------------------------------
// collect
// ---------------------------------------------------------------------------

struct CollectArgs {
  std::string problem = "p2";
  int steps = 20000;
  std::uint64_t seed = 0;
  std::string out;
  /// uniform | zero (the action closest to 0, or the first edge)
  std::string policy = "uniform";
  int p3_d_exo = 5;
  int p3_d_endo = 5;
  std::uint64_t p3_matrix_seed = 0;
  std::string traffic_topology;
};

namespace detail {

template <Environment Env>
CollectionPolicy<Env> named_policy(const std::string& name) {
  if (name == "uniform") return uniform_policy<Env>();
  if (name == "zero") {
    return [](const Env& env, std::mt19937_64&) {
      if constexpr (std::is_same_v<Env, LinearSystemEnv>) {
        int best = 0;
        for (int a = 1; a < env.n_actions(); ++a)
          if (std::abs(env.actions[static_cast<std::size_t>(a)]) < std::abs(env.actions[static_cast<std::size_t>(best)]))
            best = a;
        return best;
      } else {
        return 0;
      }
    };
  }
  throw std::invalid_argument("unknown policy '" + name + "' (expected uniform or zero)");
}

template <Environment Env>
int collect_with(const Env& env, const CollectArgs& a, std::ostream& out) {
  const TransitionDataset ds = collect_transitions(env, named_policy<Env>(a.policy), a.steps, a.seed);
  write_file_atomic(a.out, format_dataset(ds));
  std::string generator = a.problem + " policy=" + a.policy;
  if (a.problem == "p3")
    generator += " d_exo=" + std::to_string(a.p3_d_exo) + " d_endo=" + std::to_string(a.p3_d_endo) +
                 " matrix_seed=" + std::to_string(a.p3_matrix_seed);
  write_file_atomic(a.out + ".meta", format_dataset_meta(ds, generator, a.seed));
  out << "wrote " << ds.size() << " transitions to " << a.out << "\n";
  return kExitOk;
}

}  // namespace detail

inline int cmd_collect(const CollectArgs& a, std::ostream& out, std::ostream& err) {
  try {
    if (a.out.empty()) throw std::invalid_argument("--out is required");
    if (a.problem == "p2") return detail::collect_with(make_problem2(), a, out);
    if (a.problem == "p3") return detail::collect_with(make_problem3(a.p3_d_exo, a.p3_d_endo, a.p3_matrix_seed), a, out);
    if (a.problem == "a2") return detail::collect_with(make_appendix2(), a, out);
    if (a.problem == "a3") return detail::collect_with(make_appendix3(), a, out);
    if (a.problem == "traffic")
      return detail::collect_with(a.traffic_topology.empty() ? make_traffic() : make_traffic(read_file(a.traffic_topology)),
                                  a, out);
    throw std::invalid_argument("unknown problem '" + a.problem + "'");
  } catch (const std::exception& e) {
    err << "collect: " << e.what() << "\n";
    return kExitError;
  }
}

// ---------------------------------------------------------------------------
// decompose
// ---------------------------------------------------------------------------

struct DecomposeArgs {
  std::string dataset;
  std::string algorithm = "global";
  std::string out;
  DecomposeOptions options;
};

inline int cmd_decompose(const DecomposeArgs& a, std::ostream& out, std::ostream& err) {
  TransitionDataset ds;
  try {
    ds = parse_dataset(read_file(a.dataset));
  } catch (const ParseError& e) {
    err << a.dataset << ": " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    err << "decompose: " << e.what() << "\n";
    return kExitError;
  }
  try {
    ExoDecomposition dec;
    if (a.algorithm == "global") dec = global_decompose(ds, a.options);
    else if (a.algorithm == "stepwise") dec = stepwise_decompose(ds, a.options);
    else throw std::invalid_argument("algorithm must be global or stepwise");
    const std::string report = format_report(dec);
    if (a.out.empty()) out << report;
    else write_file_atomic(a.out, report);
    out << "d_x = " << dec.d_x << ", pcc = " << format_double(dec.pcc_final) << "\n";
    return dec.d_x == 0 ? kExitNoExogenous : kExitOk;
  } catch (const std::exception& e) {
    err << "decompose: " << e.what() << "\n";
    return kExitError;
  }
}

// ---------------------------------------------------------------------------
// moments
// ---------------------------------------------------------------------------

struct MomentsArgs {
  std::string mdp;
  std::string policy;
  int horizon = 0;
};

inline std::string format_moments(const ExoEndoTabularMDP& mdp, const ExoEndoMoments& m) {
  const int H = m.H;
  std::string out = "# horizon " + std::to_string(H) + "\n";
  out += "state e x V_full Var_full V_exo Var_exo V_endo Var_endo Cov\n";
  for (int e = 0; e < mdp.n_endo; ++e)
    for (int x = 0; x < mdp.n_exo; ++x) {
      const int s = mdp.state_index(e, x);
      out += std::to_string(s) + " " + std::to_string(e) + " " + std::to_string(x);
      for (double v : {m.V_full(s, H), m.Var_full(s, H), m.V_exo(x, H), m.Var_exo(x, H), m.V_endo(s, H),
                       m.Var_endo(s, H), m.Cov(s, H)})
        out += " " + format_double(v);
      out += "\n";
    }
  const int s0 = mdp.start_state();
  const double var_x = m.Var_exo(mdp.x0, H), cov = m.Cov(s0, H);
  out += "start_state " + std::to_string(s0) + "\n";
  out += "Var[B_x] " + format_double(var_x) + "\n";
  out += "Cov[B_x,B_e] " + format_double(cov) + "\n";
  out += "-2Cov " + format_double(-2.0 * cov) + "\n";
  out += std::string("endo-faster: ") + (covariance_condition(std::max(var_x, 0.0), cov) ? "true" : "false") + "\n";
  return out;
}

inline std::string format_moments(const TabularMDP& mdp, const ReturnMoments& m) {
  std::string out = "# horizon " + std::to_string(m.H) + "\n";
  out += "state V Var\n";
  for (int s = 0; s < mdp.n_states; ++s)
    out += std::to_string(s) + " " + format_double(m.V(s, m.H)) + " " + format_double(m.Var(s, m.H)) + "\n";
  return out;
}

inline int cmd_moments(const MomentsArgs& a, std::ostream& out, std::ostream& err) {
  if (a.horizon < 0) {
    err << "usage: moments --mdp FILE --policy FILE --horizon H (H >= 0)\n";
    return kExitError;
  }
  try {
    const Policy pi = parse_policy(read_file(a.policy));
    TokenStream ts(read_file(a.mdp));
    const std::string kind(ts.next());
    if (kind == "exo_endo_mdp") {
      const ExoEndoTabularMDP mdp = parse_exo_endo_mdp(ts);
      out << format_moments(mdp, exo_endo_moments(mdp, pi, a.horizon));
    } else if (kind == "tabular_mdp") {
      const TabularMDP mdp = parse_tabular_mdp(ts);
      out << format_moments(mdp, return_moments(mdp, pi, a.horizon));
    } else {
      throw ParseError(ts.line(), "expected tabular_mdp or exo_endo_mdp, got '" + kind + "'");
    }
    return kExitOk;
  } catch (const std::exception& e) {
    err << "moments: " << e.what() << "\n";
    return kExitError;
  }
}

// ---------------------------------------------------------------------------
// reproduce
// ---------------------------------------------------------------------------

inline int cmd_reproduce(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  try {
    const ExperimentResult res = run_experiment(cfg);
    const ExperimentFiles files = write_experiment(res);
    out << "wrote " << files.curves.string() << " and " << files.summary.string() << "\n";
    for (const auto& v : res.variants)
      if (!v.curve.empty())
        out << to_string(v.variant) << ": final mean " << format_double(v.curve.back().mean) << "\n";
    if (!res.ok()) {
      for (const auto& [i, msg] : res.failures) err << "run " << i << " failed: " << msg << "\n";
      return kExitError;
    }
    return kExitOk;
  } catch (const std::exception& e) {
    err << "reproduce: " << e.what() << "\n";
    return kExitError;
  }
}

// ---------------------------------------------------------------------------
// discretize-p2
// ---------------------------------------------------------------------------

struct DiscretizeArgs {
  GridSpec grid;
  double gamma = 0.9;
  std::string out_mdp;
  std::string out_policy;
};

inline int cmd_discretize_p2(const DiscretizeArgs& a, std::ostream& out, std::ostream& err) {
  try {
    if (a.out_mdp.empty() || a.out_policy.empty()) throw std::invalid_argument("--out-mdp and --out-policy are required");
    const DiscretizedProblem p = discretize_problem2(a.grid, a.gamma);
    write_file_atomic(a.out_mdp, format_mdp(p.mdp));
    write_file_atomic(a.out_policy, format_policy(p.policy));
    out << "wrote " << p.mdp.n_states() << "-state model; suggested horizon " << horizon_for(a.gamma) << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    err << "discretize-p2: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace exo
