#pragma once

// Finite MDPs with stochastic rewards and fixed-horizon return moments.
//
// Horizon convention: B(s; h) = R(s, pi(s)) + gamma * B(s'; h-1), B(.; 0) = 0.
// Rewards are drawn independently per step with mean m(s,a) and variance
// sigma2(s,a), independent of the successor state.
//
// Tables indexed by horizon are (states x (H+1)) matrices whose column h holds
// the quantity for h steps to go.

#include "exo/io.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace exo {

using Policy = std::vector<int>;

/// Finite MDP: P(s'|s,a), reward mean m(s,a) and variance sigma2(s,a).
struct TabularMDP {
  int n_states = 0;
  int n_actions = 0;
  /// Row s * n_actions + a holds P(. | s, a).
  Eigen::MatrixXd P;
  Eigen::MatrixXd m;       // n_states x n_actions
  Eigen::MatrixXd sigma2;  // n_states x n_actions
  double gamma = 0.9;
  int s0 = 0;

  auto transition(int s, int a) const { return P.row(static_cast<Eigen::Index>(s) * n_actions + a); }

  void validate() const {
    if (n_states <= 0 || n_actions <= 0) throw std::invalid_argument("TabularMDP: empty state or action set");
    if (P.rows() != static_cast<Eigen::Index>(n_states) * n_actions || P.cols() != n_states)
      throw std::invalid_argument("TabularMDP: P has the wrong shape");
    if (m.rows() != n_states || m.cols() != n_actions || sigma2.rows() != n_states ||
        sigma2.cols() != n_actions)
      throw std::invalid_argument("TabularMDP: reward tables have the wrong shape");
    if (!(gamma > 0.0 && gamma < 1.0) && gamma != 0.0)
      throw std::invalid_argument("TabularMDP: gamma must lie in [0, 1)");
    if (s0 < 0 || s0 >= n_states) throw std::invalid_argument("TabularMDP: start state out of range");
    if (!P.allFinite() || !m.allFinite() || !sigma2.allFinite())
      throw std::invalid_argument("TabularMDP: non-finite entries");
    if ((P.array() < 0.0).any()) throw std::invalid_argument("TabularMDP: negative probability");
    for (Eigen::Index r = 0; r < P.rows(); ++r)
      if (std::abs(P.row(r).sum() - 1.0) > 1e-12)
        throw std::invalid_argument("TabularMDP: transition row " + std::to_string(r) +
                                    " does not sum to 1");
    if ((sigma2.array() < 0.0).any()) throw std::invalid_argument("TabularMDP: negative reward variance");
  }

  void validate_policy(const Policy& pi) const {
    if (static_cast<int>(pi.size()) != n_states)
      throw std::invalid_argument("policy must assign an action to every state");
    for (int a : pi)
      if (a < 0 || a >= n_actions) throw std::invalid_argument("policy action out of range");
  }
};

/// MDP over S = E x X whose exogenous part evolves on its own:
///   P(e', x' | e, x, a) = Px(x' | x) Pe(e' | e, x, a),  r = r_x(x) + r_e(e, x, a).
/// Flattened state index: s = e * n_exo + x.
struct ExoEndoTabularMDP {
  int n_exo = 0;
  int n_endo = 0;
  int n_actions = 0;
  Eigen::MatrixXd Px;  // n_exo x n_exo
  Eigen::VectorXd mx;
  Eigen::VectorXd sigma2x;
  /// Row (e * n_exo + x) * n_actions + a holds Pe(. | e, x, a).
  Eigen::MatrixXd Pe;
  /// Row e * n_exo + x, column a.
  Eigen::MatrixXd me;
  Eigen::MatrixXd sigma2e;
  double gamma = 0.9;
  int x0 = 0;
  int e0 = 0;

  int n_states() const { return n_exo * n_endo; }
  int state_index(int e, int x) const { return e * n_exo + x; }
  int start_state() const { return state_index(e0, x0); }
  auto endo_transition(int e, int x, int a) const {
    return Pe.row((static_cast<Eigen::Index>(state_index(e, x))) * n_actions + a);
  }

  void validate() const {
    if (n_exo <= 0 || n_endo <= 0 || n_actions <= 0)
      throw std::invalid_argument("ExoEndoTabularMDP: empty factor");
    const Eigen::Index ns = n_states();
    if (Px.rows() != n_exo || Px.cols() != n_exo || mx.size() != n_exo || sigma2x.size() != n_exo)
      throw std::invalid_argument("ExoEndoTabularMDP: exogenous tables have the wrong shape");
    if (Pe.rows() != ns * n_actions || Pe.cols() != n_endo || me.rows() != ns ||
        me.cols() != n_actions || sigma2e.rows() != ns || sigma2e.cols() != n_actions)
      throw std::invalid_argument("ExoEndoTabularMDP: endogenous tables have the wrong shape");
    if (x0 < 0 || x0 >= n_exo || e0 < 0 || e0 >= n_endo)
      throw std::invalid_argument("ExoEndoTabularMDP: start state out of range");
    const auto stochastic = [](const Eigen::MatrixXd& p, const char* name) {
      if (!p.allFinite() || (p.array() < 0.0).any())
        throw std::invalid_argument(std::string("ExoEndoTabularMDP: bad probabilities in ") + name);
      for (Eigen::Index r = 0; r < p.rows(); ++r)
        if (std::abs(p.row(r).sum() - 1.0) > 1e-12)
          throw std::invalid_argument(std::string("ExoEndoTabularMDP: row of ") + name +
                                      " does not sum to 1");
    };
    stochastic(Px, "Px");
    stochastic(Pe, "Pe");
    if ((sigma2x.array() < 0.0).any() || (sigma2e.array() < 0.0).any())
      throw std::invalid_argument("ExoEndoTabularMDP: negative reward variance");
  }
};

/// The full MDP over E x X.
inline TabularMDP flatten(const ExoEndoTabularMDP& mdp) {
  mdp.validate();
  TabularMDP out;
  out.n_states = mdp.n_states();
  out.n_actions = mdp.n_actions;
  out.gamma = mdp.gamma;
  out.s0 = mdp.start_state();
  out.P = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(out.n_states) * out.n_actions, out.n_states);
  out.m.resize(out.n_states, out.n_actions);
  out.sigma2.resize(out.n_states, out.n_actions);
  for (int e = 0; e < mdp.n_endo; ++e) {
    for (int x = 0; x < mdp.n_exo; ++x) {
      const int s = mdp.state_index(e, x);
      for (int a = 0; a < mdp.n_actions; ++a) {
        const auto pe = mdp.endo_transition(e, x, a);
        auto row = out.P.row(static_cast<Eigen::Index>(s) * out.n_actions + a);
        for (int e2 = 0; e2 < mdp.n_endo; ++e2)
          for (int x2 = 0; x2 < mdp.n_exo; ++x2) row(mdp.state_index(e2, x2)) = pe(e2) * mdp.Px(x, x2);
        out.m(s, a) = mdp.mx(x) + mdp.me(s, a);
        out.sigma2(s, a) = mdp.sigma2x(x) + mdp.sigma2e(s, a);
      }
    }
  }
  return out;
}

/// The endo-MDP: same dynamics over E x X, endogenous reward only.
inline TabularMDP endo_part(const ExoEndoTabularMDP& mdp) {
  TabularMDP out = flatten(mdp);
  out.m = mdp.me;
  out.sigma2 = mdp.sigma2e;
  return out;
}

/// The exo-MRP: one action, X dynamics and exogenous reward.
inline TabularMDP exo_part(const ExoEndoTabularMDP& mdp) {
  mdp.validate();
  TabularMDP out;
  out.n_states = mdp.n_exo;
  out.n_actions = 1;
  out.gamma = mdp.gamma;
  out.s0 = mdp.x0;
  out.P = mdp.Px;
  out.m = mdp.mx;
  out.sigma2 = mdp.sigma2x;
  return out;
}

namespace detail {

inline void require_horizon(int h) {
  if (h < 0) throw std::invalid_argument("horizon must be non-negative");
}

}  // namespace detail

/// Fixed-horizon policy evaluation V(s; h), h = 0..H.
inline Eigen::MatrixXd value_dp(const TabularMDP& mdp, const Policy& pi, int H) {
  mdp.validate();
  mdp.validate_policy(pi);
  detail::require_horizon(H);
  Eigen::MatrixXd V = Eigen::MatrixXd::Zero(mdp.n_states, H + 1);
  for (int h = 1; h <= H; ++h)
    for (int s = 0; s < mdp.n_states; ++s) {
      const int a = pi[s];
      V(s, h) = mdp.m(s, a) + mdp.gamma * mdp.transition(s, a).dot(V.col(h - 1));
    }
  return V;
}

/// Evaluation of a non-stationary policy: policies[h][s] is the action taken
/// with h steps to go (policies[0] is unused).
inline Eigen::MatrixXd value_dp(const TabularMDP& mdp, const std::vector<Policy>& policies, int H) {
  mdp.validate();
  detail::require_horizon(H);
  if (static_cast<int>(policies.size()) < H + 1)
    throw std::invalid_argument("value_dp: need one policy per horizon");
  Eigen::MatrixXd V = Eigen::MatrixXd::Zero(mdp.n_states, H + 1);
  for (int h = 1; h <= H; ++h) {
    mdp.validate_policy(policies[h]);
    for (int s = 0; s < mdp.n_states; ++s) {
      const int a = policies[h][s];
      V(s, h) = mdp.m(s, a) + mdp.gamma * mdp.transition(s, a).dot(V.col(h - 1));
    }
  }
  return V;
}

/// Var[B(s; h)] = sigma2 - V(s;h)^2 + E_s'[gamma^2 Var[B(s';h-1)] + (m + gamma V(s';h-1))^2].
inline Eigen::MatrixXd variance_dp(const TabularMDP& mdp, const Policy& pi, int H) {
  const Eigen::MatrixXd V = value_dp(mdp, pi, H);
  Eigen::MatrixXd Var = Eigen::MatrixXd::Zero(mdp.n_states, H + 1);
  const double g = mdp.gamma;
  for (int h = 1; h <= H; ++h)
    for (int s = 0; s < mdp.n_states; ++s) {
      const int a = pi[s];
      const auto p = mdp.transition(s, a);
      const Eigen::ArrayXd backed = mdp.m(s, a) + g * V.col(h - 1).array();
      const double second = p.dot((g * g * Var.col(h - 1).array() + backed.square()).matrix());
      Var(s, h) = mdp.sigma2(s, a) - V(s, h) * V(s, h) + second;
    }
  return Var;
}

struct ReturnMoments {
  int H = 0;
  Eigen::MatrixXd V;
  Eigen::MatrixXd Var;
  Eigen::MatrixXd Cov;  // exo/endo case only; empty otherwise
};

inline ReturnMoments return_moments(const TabularMDP& mdp, const Policy& pi, int H) {
  return {H, value_dp(mdp, pi, H), variance_dp(mdp, pi, H), Eigen::MatrixXd()};
}

/// Cov[B_x(x; h), B_e(e, x; h)] under a policy over the flattened state space.
///
///   Cov(h) = E_{x',e'}[ gamma^2 Cov(x',e'; h-1)
///                       + (m_x(x) + gamma V_x(x';h-1)) (m_e(e,x,pi) + gamma V_e(e',x';h-1)) ]
///            - V_x(x; h) V_e(e, x; h)
///
/// The gamma^2 factor multiplies only the recursive covariance term; the
/// product of backed-up means enters unscaled.
inline Eigen::MatrixXd covariance_dp(const ExoEndoTabularMDP& mdp, const Policy& pi, int H) {
  mdp.validate();
  detail::require_horizon(H);
  const TabularMDP exo = exo_part(mdp);
  const TabularMDP endo = endo_part(mdp);
  endo.validate_policy(pi);
  const Eigen::MatrixXd Vx = value_dp(exo, Policy(mdp.n_exo, 0), H);
  const Eigen::MatrixXd Ve = value_dp(endo, pi, H);
  const double g = mdp.gamma;
  const int ns = mdp.n_states();
  Eigen::MatrixXd Cov = Eigen::MatrixXd::Zero(ns, H + 1);
  for (int h = 1; h <= H; ++h) {
    for (int e = 0; e < mdp.n_endo; ++e) {
      for (int x = 0; x < mdp.n_exo; ++x) {
        const int s = mdp.state_index(e, x);
        const int a = pi[s];
        const auto pe = mdp.endo_transition(e, x, a);
        double acc = 0.0;
        for (int x2 = 0; x2 < mdp.n_exo; ++x2) {
          const double px = mdp.Px(x, x2);
          if (px == 0.0) continue;
          const double bx = mdp.mx(x) + g * Vx(x2, h - 1);
          for (int e2 = 0; e2 < mdp.n_endo; ++e2) {
            const double p = px * pe(e2);
            if (p == 0.0) continue;
            const int s2 = mdp.state_index(e2, x2);
            const double be = mdp.me(s, a) + g * Ve(s2, h - 1);
            acc += p * (g * g * Cov(s2, h - 1) + bx * be);
          }
        }
        Cov(s, h) = acc - Vx(x, h) * Ve(s, h);
      }
    }
  }
  return Cov;
}

/// All return moments of an exo/endo MDP under one policy.
struct ExoEndoMoments {
  int H = 0;
  Eigen::MatrixXd V_full, Var_full;  // flattened states
  Eigen::MatrixXd V_exo, Var_exo;    // exogenous states
  Eigen::MatrixXd V_endo, Var_endo;  // flattened states
  Eigen::MatrixXd Cov;               // flattened states
};

inline ExoEndoMoments exo_endo_moments(const ExoEndoTabularMDP& mdp, const Policy& pi, int H) {
  ExoEndoMoments out;
  out.H = H;
  const TabularMDP full = flatten(mdp);
  const TabularMDP exo = exo_part(mdp);
  const TabularMDP endo = endo_part(mdp);
  const Policy exo_pi(mdp.n_exo, 0);
  out.V_full = value_dp(full, pi, H);
  out.Var_full = variance_dp(full, pi, H);
  out.V_exo = value_dp(exo, exo_pi, H);
  out.Var_exo = variance_dp(exo, exo_pi, H);
  out.V_endo = value_dp(endo, pi, H);
  out.Var_endo = variance_dp(endo, pi, H);
  out.Cov = covariance_dp(mdp, pi, H);
  return out;
}

/// True when the endo-MDP needs fewer Monte Carlo trials than the full MDP:
/// Var[B_x] > -2 Cov[B_x, B_e] (strict).
inline bool covariance_condition(double var_x, double cov) {
  if (var_x < 0.0) throw std::invalid_argument("covariance_condition: variance must be >= 0");
  return var_x > -2.0 * cov;
}

/// Chebychev sample size N >= Var / (delta eps^2), at least 1. Quotients within
/// 1e-9 (relative) of an integer are taken as that integer so that binary
/// rounding of e.g. 1 / (0.1 * 0.5^2) does not add a spurious trial.
inline std::int64_t chebychev_bound(double variance, double eps, double delta) {
  if (!(variance >= 0.0) || !(eps > 0.0) || !(delta > 0.0 && delta < 1.0))
    throw std::invalid_argument("chebychev_bound: need variance >= 0, eps > 0, 0 < delta < 1");
  const double q = variance / (delta * eps * eps);
  if (!std::isfinite(q) || q > 9.0e18) throw std::overflow_error("chebychev_bound: bound too large");
  const double nearest = std::round(q);
  const double n = std::abs(q - nearest) <= 1e-9 * std::max(1.0, nearest) ? nearest : std::ceil(q);
  return std::max<std::int64_t>(1, static_cast<std::int64_t>(n));
}

/// Finite-horizon optimal control. policy[h][s] is optimal with h steps to go
/// (policy[0] is all zeros); ties go to the lowest action index.
struct OptimalSolution {
  std::vector<Policy> policy;
  Eigen::MatrixXd V;
};

inline OptimalSolution solve_optimal(const TabularMDP& mdp, int H) {
  mdp.validate();
  if (H < 1) throw std::invalid_argument("solve_optimal: horizon must be at least 1");
  OptimalSolution sol;
  sol.V = Eigen::MatrixXd::Zero(mdp.n_states, H + 1);
  sol.policy.assign(H + 1, Policy(mdp.n_states, 0));
  for (int h = 1; h <= H; ++h)
    for (int s = 0; s < mdp.n_states; ++s) {
      double best = -std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int a = 0; a < mdp.n_actions; ++a) {
        const double q = mdp.m(s, a) + mdp.gamma * mdp.transition(s, a).dot(sol.V.col(h - 1));
        if (q > best) {
          best = q;
          arg = a;
        }
      }
      sol.V(s, h) = best;
      sol.policy[h][s] = arg;
    }
  return sol;
}

/// Exo-MRP value, endo-MDP optimal value and full-MDP optimal value. With an
/// additive reward V_full = V_exo + V_end at every state and horizon.
struct ExoEndoValues {
  Eigen::MatrixXd V_exo;   // n_exo x (H+1)
  Eigen::MatrixXd V_end;   // flattened states x (H+1)
  Eigen::MatrixXd V_full;  // flattened states x (H+1)
  std::vector<Policy> endo_policy;
  std::vector<Policy> full_policy;

  /// V_exo lifted to the flattened state space.
  Eigen::MatrixXd exo_on_full(const ExoEndoTabularMDP& mdp) const {
    Eigen::MatrixXd out(mdp.n_states(), V_exo.cols());
    for (int e = 0; e < mdp.n_endo; ++e)
      for (int x = 0; x < mdp.n_exo; ++x) out.row(mdp.state_index(e, x)) = V_exo.row(x);
    return out;
  }
};

inline ExoEndoValues exo_endo_values(const ExoEndoTabularMDP& mdp, int H) {
  if (H < 1) throw std::invalid_argument("exo_endo_values: horizon must be at least 1");
  ExoEndoValues out;
  out.V_exo = value_dp(exo_part(mdp), Policy(mdp.n_exo, 0), H);
  OptimalSolution endo = solve_optimal(endo_part(mdp), H);
  out.V_end = std::move(endo.V);
  out.endo_policy = std::move(endo.policy);
  OptimalSolution full = solve_optimal(flatten(mdp), H);
  out.V_full = std::move(full.V);
  out.full_policy = std::move(full.policy);
  return out;
}

// ---------------------------------------------------------------------------
// Plain-text formats ('#' starts a comment, whitespace separated).
//
//   tabular_mdp <n_states> <n_actions> <gamma> <s0>
//   P        n_states*n_actions rows ordered (s, a), each n_states values
//   m        n_states rows of n_actions values
//   sigma2   n_states rows of n_actions values
//
//   exo_endo_mdp <n_exo> <n_endo> <n_actions> <gamma> <x0> <e0>
//   Px       n_exo rows of n_exo values
//   mx       n_exo values
//   sigma2x  n_exo values
//   Pe       rows ordered (e, x, a), each n_endo values
//   me       rows ordered (e, x), each n_actions values
//   sigma2e  rows ordered (e, x), each n_actions values
//
//   policy <n_states>
//   <n_states action indices>     (flattened index e * n_exo + x for exo/endo)
// ---------------------------------------------------------------------------

namespace detail {

inline void write_matrix(std::string& out, const char* key, const Eigen::MatrixXd& mat) {
  out += key;
  out += "\n";
  for (Eigen::Index r = 0; r < mat.rows(); ++r) out += format_row(mat.row(r)) + "\n";
}

inline Eigen::MatrixXd read_matrix(TokenStream& ts, const char* key, Eigen::Index rows,
                                   Eigen::Index cols) {
  ts.expect(key);
  Eigen::MatrixXd mat(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) mat(r, c) = ts.next_double();
  return mat;
}

inline int read_count(TokenStream& ts, const char* what) {
  const long long v = ts.next_int();
  if (v <= 0 || v > 1'000'000) throw ParseError(ts.line(), std::string("invalid ") + what);
  return static_cast<int>(v);
}

}  // namespace detail

inline std::string format_mdp(const TabularMDP& mdp) {
  std::string out = "tabular_mdp " + std::to_string(mdp.n_states) + " " +
                    std::to_string(mdp.n_actions) + " " + format_double(mdp.gamma) + " " +
                    std::to_string(mdp.s0) + "\n";
  detail::write_matrix(out, "P", mdp.P);
  detail::write_matrix(out, "m", mdp.m);
  detail::write_matrix(out, "sigma2", mdp.sigma2);
  return out;
}

inline std::string format_mdp(const ExoEndoTabularMDP& mdp) {
  std::string out = "exo_endo_mdp " + std::to_string(mdp.n_exo) + " " + std::to_string(mdp.n_endo) +
                    " " + std::to_string(mdp.n_actions) + " " + format_double(mdp.gamma) + " " +
                    std::to_string(mdp.x0) + " " + std::to_string(mdp.e0) + "\n";
  detail::write_matrix(out, "Px", mdp.Px);
  detail::write_matrix(out, "mx", mdp.mx.transpose());
  detail::write_matrix(out, "sigma2x", mdp.sigma2x.transpose());
  detail::write_matrix(out, "Pe", mdp.Pe);
  detail::write_matrix(out, "me", mdp.me);
  detail::write_matrix(out, "sigma2e", mdp.sigma2e);
  return out;
}

inline TabularMDP parse_tabular_mdp(TokenStream& ts) {
  TabularMDP mdp;
  mdp.n_states = detail::read_count(ts, "state count");
  mdp.n_actions = detail::read_count(ts, "action count");
  mdp.gamma = ts.next_double();
  mdp.s0 = static_cast<int>(ts.next_int());
  mdp.P = detail::read_matrix(ts, "P", static_cast<Eigen::Index>(mdp.n_states) * mdp.n_actions, mdp.n_states);
  mdp.m = detail::read_matrix(ts, "m", mdp.n_states, mdp.n_actions);
  mdp.sigma2 = detail::read_matrix(ts, "sigma2", mdp.n_states, mdp.n_actions);
  const auto line = ts.line();
  try {
    mdp.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(line, e.what());
  }
  return mdp;
}

inline ExoEndoTabularMDP parse_exo_endo_mdp(TokenStream& ts) {
  ExoEndoTabularMDP mdp;
  mdp.n_exo = detail::read_count(ts, "exogenous state count");
  mdp.n_endo = detail::read_count(ts, "endogenous state count");
  mdp.n_actions = detail::read_count(ts, "action count");
  mdp.gamma = ts.next_double();
  mdp.x0 = static_cast<int>(ts.next_int());
  mdp.e0 = static_cast<int>(ts.next_int());
  const Eigen::Index ns = static_cast<Eigen::Index>(mdp.n_exo) * mdp.n_endo;
  mdp.Px = detail::read_matrix(ts, "Px", mdp.n_exo, mdp.n_exo);
  mdp.mx = detail::read_matrix(ts, "mx", 1, mdp.n_exo).transpose();
  mdp.sigma2x = detail::read_matrix(ts, "sigma2x", 1, mdp.n_exo).transpose();
  mdp.Pe = detail::read_matrix(ts, "Pe", ns * mdp.n_actions, mdp.n_endo);
  mdp.me = detail::read_matrix(ts, "me", ns, mdp.n_actions);
  mdp.sigma2e = detail::read_matrix(ts, "sigma2e", ns, mdp.n_actions);
  const auto line = ts.line();
  try {
    mdp.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(line, e.what());
  }
  return mdp;
}

inline std::string format_policy(const Policy& pi) {
  std::string out = "policy " + std::to_string(pi.size()) + "\n";
  for (std::size_t i = 0; i < pi.size(); ++i) {
    if (i) out += (i % 20 == 0) ? "\n" : " ";
    out += std::to_string(pi[i]);
  }
  out += "\n";
  return out;
}

inline Policy parse_policy(const std::string& text) {
  TokenStream ts(text);
  ts.expect("policy");
  const int n = detail::read_count(ts, "policy length");
  Policy pi(static_cast<std::size_t>(n));
  for (auto& a : pi) a = static_cast<int>(ts.next_int());
  if (!ts.done()) throw ParseError(ts.line(), "trailing data after policy");
  return pi;
}

}  // namespace exo
