#pragma once

// Exogenous / endogenous state decomposition from transition data.
//
// Both algorithms search for an orthonormal projection W_x such that the
// projected next state S'W_x is (partially) uncorrelated with the endogenous
// remainder S - S W_x W_x' and the action A once S W_x is known:
//
//   PCC(S'W; [S - SWW', A] | SW) < epsilon.
//
// `global_decompose` tries d_x = d, d-1, ..., 1 and returns the first
// projection that passes. `stepwise_decompose` grows the projection one unit
// vector at a time, each drawn from the null space of everything found so far.
//
// Every PCC evaluation is driven from a single joint covariance of the
// stacked columns [S, S', A], so objective cost is independent of n.

#include "exo/io.hpp"
#include "exo/manifold.hpp"
#include "exo/stats.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace exo {

/// Transitions (s, a, r, s') with states centered by a pooled mean.
///
/// S and S_next are centered with the SAME vector (the mean over the union of
/// their rows) so a projection learned on S applies unchanged to S_next.
struct TransitionDataset {
  Eigen::MatrixXd S;       // n x d
  Eigen::MatrixXd A;       // n x c
  Eigen::VectorXd R;       // n
  Eigen::MatrixXd S_next;  // n x d
  Eigen::VectorXd state_mean;
  Eigen::VectorXd action_mean;

  Eigen::Index size() const { return S.rows(); }
  Eigen::Index state_dim() const { return S.cols(); }
  Eigen::Index action_dim() const { return A.cols(); }

  /// Centers raw transition arrays and checks the shape invariants.
  static TransitionDataset from_raw(const Eigen::MatrixXd& s, const Eigen::MatrixXd& a,
                                    const Eigen::VectorXd& r, const Eigen::MatrixXd& s_next) {
    const Eigen::Index n = s.rows(), d = s.cols(), c = a.cols();
    if (a.rows() != n || r.size() != n || s_next.rows() != n || s_next.cols() != d)
      throw std::invalid_argument("TransitionDataset: inconsistent array shapes");
    if (n < d + c + 2)
      throw std::invalid_argument("TransitionDataset: need at least d + c + 2 transitions");
    if (!s.allFinite() || !a.allFinite() || !r.allFinite() || !s_next.allFinite())
      throw std::invalid_argument("TransitionDataset: non-finite entries");

    TransitionDataset ds;
    ds.state_mean = (s.colwise().sum() + s_next.colwise().sum()).transpose() / (2.0 * n);
    ds.action_mean = c > 0 ? Eigen::VectorXd(a.colwise().mean().transpose()) : Eigen::VectorXd(0);
    ds.S = s.rowwise() - ds.state_mean.transpose();
    ds.S_next = s_next.rowwise() - ds.state_mean.transpose();
    ds.A = c > 0 ? Eigen::MatrixXd(a.rowwise() - ds.action_mean.transpose()) : a;
    ds.R = r;
    return ds;
  }

  Eigen::MatrixXd raw_states() const { return S.rowwise() + state_mean.transpose(); }
  Eigen::MatrixXd raw_next_states() const { return S_next.rowwise() + state_mean.transpose(); }
  Eigen::MatrixXd raw_actions() const {
    return A.cols() ? Eigen::MatrixXd(A.rowwise() + action_mean.transpose()) : A;
  }
};

/// Joint covariance of [S, S', A]. Each column is centered at its own mean, so
/// the pooled state centering of the dataset does not leak into the PCC.
class DatasetMoments {
 public:
  explicit DatasetMoments(const TransitionDataset& data) : d_(data.state_dim()), c_(data.action_dim()) {
    const Eigen::Index n = data.size();
    Eigen::MatrixXd joint(n, 2 * d_ + c_);
    joint << data.S, data.S_next, data.A;
    const Eigen::MatrixXd centered = joint.rowwise() - joint.colwise().mean();
    sigma_ = centered.transpose() * centered / static_cast<double>(n);
  }

  Eigen::Index state_dim() const { return d_; }
  Eigen::Index action_dim() const { return c_; }

  auto ss() const { return sigma_.block(0, 0, d_, d_); }
  auto sn_s() const { return sigma_.block(d_, 0, d_, d_); }  // Cov(S', S)
  auto sn_sn() const { return sigma_.block(d_, d_, d_, d_); }
  auto sa() const { return sigma_.block(0, 2 * d_, d_, c_); }
  auto sn_a() const { return sigma_.block(d_, 2 * d_, d_, c_); }
  auto aa() const { return sigma_.block(2 * d_, 2 * d_, c_, c_); }

  /// Moments of X = S'W, Y = [S(I - WW'), A], Z = SW: the full acceptance test.
  BlockMoments acceptance_blocks(const Eigen::MatrixXd& w) const {
    const Eigen::MatrixXd p = Eigen::MatrixXd::Identity(d_, d_) - w * w.transpose();
    const Eigen::Index py = d_ + c_;
    BlockMoments m;
    m.xx = w.transpose() * sn_sn() * w;
    m.xz = w.transpose() * sn_s() * w;
    m.zz = w.transpose() * ss() * w;
    m.xy.resize(w.cols(), py);
    m.xy << w.transpose() * sn_s() * p, w.transpose() * sn_a();
    m.yy.resize(py, py);
    m.yy << p * ss() * p, p * sa(), sa().transpose() * p, aa();
    m.yz.resize(py, w.cols());
    m.yz << p * ss() * w, sa().transpose() * w;
    return m;
  }

  /// Moments of X = S'W, Y = A, Z = SW: the stepwise candidate objective.
  BlockMoments action_blocks(const Eigen::MatrixXd& w) const {
    BlockMoments m;
    m.xx = w.transpose() * sn_sn() * w;
    m.xz = w.transpose() * sn_s() * w;
    m.zz = w.transpose() * ss() * w;
    m.xy = w.transpose() * sn_a();
    m.yy = aa();
    m.yz = sa().transpose() * w;
    return m;
  }

  /// Sample variance of the projected next state, tr(W' Cov(S') W).
  double exo_variance(const Eigen::MatrixXd& w) const {
    return w.cols() ? (w.transpose() * sn_sn() * w).trace() : 0.0;
  }

 private:
  Eigen::Index d_, c_;
  Eigen::MatrixXd sigma_;
};

/// Scale of the eigenvalue floor applied to every covariance block.
inline constexpr double kDecompositionRidge = 1e-6;
/// PCC values within this distance of epsilon are rejected.
inline constexpr double kThresholdGuard = 1e-9;

struct DecomposeOptions {
  double epsilon = 0.05;
  SolverOptions solver;
  /// Stepwise only: stop after this many accepted components.
  std::optional<int> max_components;
  /// Stepwise only: stop once this much wall-clock time has elapsed. Makes the
  /// result timing dependent, so it is off by default.
  std::optional<double> time_budget_seconds;
};

struct ExoDecomposition {
  std::string algorithm;
  double epsilon = 0.0;
  Eigen::MatrixXd W_x;  // d x d_x, possibly d x 0
  int d_x = 0;
  /// Acceptance PCC of W_x (0 for the empty projection).
  double pcc_final = 0.0;
  /// Global: best PCC reached for each tried d_x, in the order tried.
  std::vector<double> dimension_pcc;
  /// Stepwise: acceptance PCC of every candidate component, accepted or not.
  std::vector<double> per_component_pcc;
  std::vector<bool> component_accepted;
  double exo_variance = 0.0;
  Eigen::VectorXd state_mean;
  LinearModel exo_reward_model;

  /// Exogenous coordinates x = W_x'(s - mean) of a raw state.
  Eigen::VectorXd exo_coordinates(const Eigen::Ref<const Eigen::VectorXd>& raw_state) const {
    return W_x.transpose() * (raw_state - state_mean);
  }
  double predicted_exo_reward(const Eigen::Ref<const Eigen::VectorXd>& raw_state) const {
    return exo_reward_model.predict(exo_coordinates(raw_state));
  }
};

/// Acceptance PCC(S'W; [S - SWW', A] | SW) for an arbitrary W.
inline double acceptance_pcc(const DatasetMoments& m, const Eigen::MatrixXd& w) {
  return pcc(m.acceptance_blocks(w), RidgePolicy::scaled(kDecompositionRidge));
}

/// Candidate PCC(S'W; A | SW).
inline double action_pcc(const DatasetMoments& m, const Eigen::MatrixXd& w) {
  return pcc(m.action_blocks(w), RidgePolicy::scaled(kDecompositionRidge));
}

/// Orthonormal basis of the orthogonal complement of span(C), C'C = I.
inline Eigen::MatrixXd null_space_basis(const Eigen::MatrixXd& c) {
  const Eigen::Index d = c.rows(), k = c.cols();
  if (k >= d) throw std::invalid_argument("null_space_basis: C must have fewer columns than rows");
  if (k == 0) return Eigen::MatrixXd::Identity(d, d);
  if (orthonormality_residual(c) >= StiefelPoint::kTolerance)
    throw std::invalid_argument("null_space_basis: C must have orthonormal columns");
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(c);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
  Eigen::MatrixXd n = q.rightCols(d - k);
  // One Gram-Schmidt sweep against C removes the O(eps) leakage left by QR.
  n -= c * (c.transpose() * n);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr2(n);
  Eigen::MatrixXd out = qr2.householderQ() * Eigen::MatrixXd::Identity(d, d - k);
  return out;
}

/// Regress r on x = W_x's (with intercept); the residual is the endogenous reward.
struct RewardSplit {
  LinearModel exo_reward_model;
  Eigen::VectorXd endo_rewards;
};

inline RewardSplit split_reward(const TransitionDataset& data, const Eigen::MatrixXd& w_x) {
  if (w_x.rows() != data.state_dim())
    throw std::invalid_argument("split_reward: W_x has the wrong number of rows");
  const Eigen::MatrixXd x = data.S * w_x;
  RewardSplit out;
  out.exo_reward_model = fit_linear(x, data.R);
  out.endo_rewards = data.R - out.exo_reward_model.predict_all(x);
  return out;
}

namespace detail {

inline void require_epsilon(double eps) {
  if (!(eps > 0.0) || !std::isfinite(eps))
    throw std::invalid_argument("decompose: epsilon must be positive");
}

inline bool passes(double value, double eps) { return value < eps - kThresholdGuard; }

inline void finish(ExoDecomposition& out, const TransitionDataset& data, const DatasetMoments& m) {
  out.d_x = static_cast<int>(out.W_x.cols());
  out.pcc_final = out.d_x > 0 ? acceptance_pcc(m, out.W_x) : 0.0;
  out.exo_variance = m.exo_variance(out.W_x);
  out.state_mean = data.state_mean;
  out.exo_reward_model = split_reward(data, out.W_x).exo_reward_model;
}

}  // namespace detail

/// Global search: for d_x = d down to 1 minimize the acceptance PCC over
/// St(d, d_x) and return the first minimizer below epsilon.
inline ExoDecomposition global_decompose(const TransitionDataset& data, const DecomposeOptions& opts) {
  detail::require_epsilon(opts.epsilon);
  const DatasetMoments moments(data);
  const Eigen::Index d = data.state_dim();

  ExoDecomposition out;
  out.algorithm = "global";
  out.epsilon = opts.epsilon;
  out.W_x = Eigen::MatrixXd(d, 0);
  const Objective f = [&moments](const Eigen::MatrixXd& w) { return acceptance_pcc(moments, w); };
  for (Eigen::Index dx = d; dx >= 1; --dx) {
    SolveReport rep;
    try {
      rep = minimize(f, d, dx, opts.solver);
    } catch (const std::exception& e) {
      throw std::runtime_error("global_decompose: solver failed at d_x = " + std::to_string(dx) +
                               ": " + e.what());
    }
    const double value = f(rep.W_star.matrix());
    out.dimension_pcc.push_back(value);
    if (detail::passes(value, opts.epsilon)) {
      out.W_x = rep.W_star.matrix();
      break;
    }
  }
  detail::finish(out, data, moments);
  return out;
}

/// Stepwise search: one unit vector per round from the null space of all
/// components found so far; a component joins W_x only if the enlarged
/// projection passes the full acceptance test.
inline ExoDecomposition stepwise_decompose(const TransitionDataset& data,
                                           const DecomposeOptions& opts) {
  detail::require_epsilon(opts.epsilon);
  const DatasetMoments moments(data);
  const Eigen::Index d = data.state_dim();
  const auto started = std::chrono::steady_clock::now();

  ExoDecomposition out;
  out.algorithm = "stepwise";
  out.epsilon = opts.epsilon;
  Eigen::MatrixXd wx(d, 0);
  Eigen::MatrixXd cx(d, 0);

  for (Eigen::Index k = 0; k < d; ++k) {
    if (opts.max_components && wx.cols() >= *opts.max_components) break;
    if (opts.time_budget_seconds) {
      const std::chrono::duration<double> spent = std::chrono::steady_clock::now() - started;
      if (spent.count() >= *opts.time_budget_seconds) break;
    }

    const Eigen::MatrixXd basis = null_space_basis(cx);
    const auto with_candidate = [&wx](const Eigen::MatrixXd& w) {
      Eigen::MatrixXd ext(wx.rows(), wx.cols() + 1);
      ext << wx, w;
      return ext;
    };
    const Objective f = [&](const Eigen::MatrixXd& u) {
      return action_pcc(moments, with_candidate(basis * u));
    };

    SolverOptions solver = opts.solver;
    solver.seed = opts.solver.seed + static_cast<std::uint64_t>(k);
    SolveReport rep;
    try {
      rep = minimize(f, d - k, 1, solver);
    } catch (const std::exception& e) {
      throw std::runtime_error("stepwise_decompose: solver failed at component " +
                               std::to_string(k + 1) + ": " + e.what());
    }
    Eigen::VectorXd w = basis * rep.W_star.matrix();
    w.normalize();

    Eigen::MatrixXd grown(d, cx.cols() + 1);
    grown << cx, w;
    cx = std::move(grown);

    const Eigen::MatrixXd candidate = with_candidate(w);
    const double value = acceptance_pcc(moments, candidate);
    out.per_component_pcc.push_back(value);
    const bool accept = detail::passes(value, opts.epsilon);
    out.component_accepted.push_back(accept);
    if (accept) wx = candidate;
  }

  out.W_x = std::move(wx);
  detail::finish(out, data, moments);
  return out;
}

// ---------------------------------------------------------------------------
// Report file
//
//   exo_decomposition v1
//   algorithm <global|stepwise>
//   epsilon <e>
//   d <d>
//   d_x <k>
//   pcc_final <v>
//   exo_variance <v>
//   W_x            followed by d rows of k values (row-major)
//   dimension_pcc <m> v...
//   per_component_pcc <m> v...
//   component_accepted <m> 0|1...
//   state_mean <d values>
//   exo_reward_intercept <v>
//   exo_reward_weights <k values>
//   exo_reward_residual_variance <v>
// ---------------------------------------------------------------------------

inline std::string format_report(const ExoDecomposition& dec) {
  const Eigen::Index d = dec.W_x.rows();
  std::string out = "exo_decomposition v1\n";
  out += "algorithm " + dec.algorithm + "\n";
  out += "epsilon " + format_double(dec.epsilon) + "\n";
  out += "d " + std::to_string(d) + "\n";
  out += "d_x " + std::to_string(dec.d_x) + "\n";
  out += "pcc_final " + format_double(dec.pcc_final) + "\n";
  out += "exo_variance " + format_double(dec.exo_variance) + "\n";
  out += "W_x\n";
  for (Eigen::Index i = 0; i < d; ++i) {
    out += dec.d_x ? format_row(dec.W_x.row(i)) : std::string("-");
    out += "\n";
  }
  const auto list = [&out](const char* key, const std::vector<double>& v) {
    out += key;
    out += " " + std::to_string(v.size());
    for (double x : v) out += " " + format_double(x);
    out += "\n";
  };
  list("dimension_pcc", dec.dimension_pcc);
  list("per_component_pcc", dec.per_component_pcc);
  out += "component_accepted " + std::to_string(dec.component_accepted.size());
  for (bool b : dec.component_accepted) out += b ? " 1" : " 0";
  out += "\n";
  out += "state_mean " + format_row(dec.state_mean.transpose()) + "\n";
  out += "exo_reward_intercept " + format_double(dec.exo_reward_model.intercept) + "\n";
  out += "exo_reward_weights";
  for (Eigen::Index j = 0; j < dec.exo_reward_model.weights.size(); ++j)
    out += " " + format_double(dec.exo_reward_model.weights(j));
  out += "\n";
  out += "exo_reward_residual_variance " + format_double(dec.exo_reward_model.residual_variance) + "\n";
  return out;
}

inline ExoDecomposition parse_report(const std::string& text) {
  TokenStream ts(text);
  ts.expect("exo_decomposition");
  ts.expect("v1");
  ExoDecomposition dec;
  ts.expect("algorithm");
  dec.algorithm = std::string(ts.next());
  ts.expect("epsilon");
  dec.epsilon = ts.next_double();
  ts.expect("d");
  const auto d = ts.next_int();
  ts.expect("d_x");
  dec.d_x = static_cast<int>(ts.next_int());
  if (d < 1 || dec.d_x < 0 || dec.d_x > d) throw ParseError(ts.line(), "invalid dimensions");
  ts.expect("pcc_final");
  dec.pcc_final = ts.next_double();
  ts.expect("exo_variance");
  dec.exo_variance = ts.next_double();
  ts.expect("W_x");
  dec.W_x.resize(d, dec.d_x);
  for (long long i = 0; i < d; ++i) {
    if (dec.d_x == 0) {
      ts.expect("-");
      continue;
    }
    for (int j = 0; j < dec.d_x; ++j) dec.W_x(i, j) = ts.next_double();
  }
  const auto list = [&ts](const char* key) {
    ts.expect(key);
    const auto m = ts.next_int();
    if (m < 0) throw ParseError(ts.line(), "negative list length");
    std::vector<double> v(static_cast<std::size_t>(m));
    for (auto& x : v) x = ts.next_double();
    return v;
  };
  dec.dimension_pcc = list("dimension_pcc");
  dec.per_component_pcc = list("per_component_pcc");
  for (double b : list("component_accepted")) dec.component_accepted.push_back(b != 0.0);
  ts.expect("state_mean");
  dec.state_mean.resize(d);
  for (long long i = 0; i < d; ++i) dec.state_mean(i) = ts.next_double();
  ts.expect("exo_reward_intercept");
  dec.exo_reward_model.intercept = ts.next_double();
  ts.expect("exo_reward_weights");
  dec.exo_reward_model.weights.resize(dec.d_x);
  for (int j = 0; j < dec.d_x; ++j) dec.exo_reward_model.weights(j) = ts.next_double();
  ts.expect("exo_reward_residual_variance");
  dec.exo_reward_model.residual_variance = ts.next_double();
  return dec;
}

}  // namespace exo
