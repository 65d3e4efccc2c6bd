#pragma once

// Simulated environments and transition collection.
//
// LinearSystemEnv keeps a hidden state h = [X; E] (exogenous block first):
//
//   X' = Mx X + noise_x,   E' = Me [E; X; a] + noise_e,   s = M h.
//
// Noise enters the dynamics only, so M^{-1} s recovers the hidden state. Each
// step draws the exogenous noise before the endogenous noise and always the
// same number of variates, so two copies of an environment driven with the
// same seed share their exogenous trajectory whatever actions they take.

#include "exo/decompose.hpp"
#include "exo/io.hpp"
#include "exo/mdp.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace exo {

struct StepOutcome {
  double reward = 0.0;
  double exo_reward = 0.0;
  double endo_reward = 0.0;
};

/// What the learner and the data collector need from an environment.
template <class E>
concept Environment = std::copy_constructible<E> && requires(E env, const E cenv, int a) {
  { cenv.observation() } -> std::convertible_to<Eigen::VectorXd>;
  { cenv.state_dim() } -> std::convertible_to<int>;
  { cenv.n_actions() } -> std::convertible_to<int>;
  { cenv.valid_actions() } -> std::convertible_to<int>;
  { cenv.action_dim() } -> std::convertible_to<int>;
  { cenv.action_features(a) } -> std::convertible_to<Eigen::VectorXd>;
  { env.step(a) } -> std::same_as<StepOutcome>;
};

/// {-1.0, -0.9, ..., 0.9, 1.0}
inline std::vector<double> action_grid() {
  std::vector<double> out;
  for (int i = -10; i <= 10; ++i) out.push_back(i / 10.0);
  return out;
}

using RewardFn = std::function<double(const Eigen::VectorXd&)>;

class LinearSystemEnv {
 public:
  std::string name;
  int d_exo = 0;
  int d_endo = 0;
  Eigen::MatrixXd Mx;       // d_exo x d_exo
  Eigen::MatrixXd Me;       // d_endo x (d_endo + d_exo + 1), columns [E | X | a]
  Eigen::MatrixXd M;        // mixing, acts on [X; E]
  Eigen::VectorXd noise_x;  // standard deviations
  Eigen::VectorXd noise_e;
  RewardFn exo_reward;      // of X
  RewardFn endo_reward;     // of E
  std::vector<double> actions;
  Eigen::VectorXd start;    // hidden [X; E]
  /// Multiplies every noise draw; 0 gives the noiseless map.
  double noise_scale = 1.0;

  void reset(std::uint64_t seed) {
    rng_.seed(seed);
    hidden_ = start;
  }

  int state_dim() const { return d_exo + d_endo; }
  int n_actions() const { return static_cast<int>(actions.size()); }
  int valid_actions() const { return n_actions(); }
  int action_dim() const { return 1; }
  Eigen::VectorXd action_features(int a) const { return Eigen::VectorXd::Constant(1, actions.at(a)); }

  const Eigen::VectorXd& hidden() const { return hidden_; }
  Eigen::VectorXd hidden_exo() const { return hidden_.head(d_exo); }
  Eigen::VectorXd hidden_endo() const { return hidden_.tail(d_endo); }
  void set_hidden(const Eigen::VectorXd& h) {
    if (h.size() != state_dim()) throw std::invalid_argument("set_hidden: wrong dimension");
    hidden_ = h;
  }

  Eigen::VectorXd observe(const Eigen::VectorXd& hidden) const { return M * hidden; }
  Eigen::VectorXd observation() const { return observe(hidden_); }

  /// Hidden state of the next step for given noise vectors.
  Eigen::VectorXd transition(const Eigen::VectorXd& h, double action, const Eigen::VectorXd& eps_x,
                             const Eigen::VectorXd& eps_e) const {
    const Eigen::VectorXd x = h.head(d_exo), e = h.tail(d_endo);
    Eigen::VectorXd input(d_endo + d_exo + 1);
    input << e, x, action;
    Eigen::VectorXd next(state_dim());
    next << Mx * x + eps_x, Me * input + eps_e;
    return next;
  }

  StepOutcome step(int a) {
    if (a < 0 || a >= n_actions()) throw std::out_of_range("LinearSystemEnv::step: bad action");
    StepOutcome out;
    out.exo_reward = exo_reward(hidden_exo());
    out.endo_reward = endo_reward(hidden_endo());
    out.reward = out.exo_reward + out.endo_reward;
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd ex(d_exo), ee(d_endo);
    for (int i = 0; i < d_exo; ++i) ex(i) = noise_scale * noise_x(i) * normal(rng_);
    for (int i = 0; i < d_endo; ++i) ee(i) = noise_scale * noise_e(i) * normal(rng_);
    hidden_ = transition(hidden_, actions[a], ex, ee);
    if (!hidden_.allFinite()) throw std::runtime_error(name + ": state became non-finite");
    return out;
  }

  /// Dynamics of the hidden state with zero action and no noise.
  Eigen::MatrixXd closed_loop_matrix() const {
    const int d = state_dim();
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d, d);
    a.topLeftCorner(d_exo, d_exo) = Mx;
    a.block(d_exo, 0, d_endo, d_exo) = Me.block(0, d_endo, d_endo, d_exo);
    a.bottomRightCorner(d_endo, d_endo) = Me.leftCols(d_endo);
    return a;
  }

  void validate() const {
    const int d = state_dim();
    if (d_exo < 0 || d_endo < 0 || d == 0) throw std::invalid_argument(name + ": empty state");
    if (Mx.rows() != d_exo || Mx.cols() != d_exo || Me.rows() != d_endo ||
        Me.cols() != d_endo + d_exo + 1 || M.rows() != d || M.cols() != d ||
        noise_x.size() != d_exo || noise_e.size() != d_endo || start.size() != d)
      throw std::invalid_argument(name + ": inconsistent dimensions");
    if (actions.empty()) throw std::invalid_argument(name + ": empty action set");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
    const auto& sv = svd.singularValues();
    if (sv(sv.size() - 1) <= 0.0 || sv(0) / sv(sv.size() - 1) >= 1e6)
      throw std::invalid_argument(name + ": mixing matrix is (nearly) singular");
  }

 private:
  Eigen::VectorXd hidden_;
  std::mt19937_64 rng_{0};
};

inline double spectral_radius(const Eigen::MatrixXd& a) {
  if (a.size() == 0) return 0.0;
  return a.eigenvalues().cwiseAbs().maxCoeff();
}

/// 2-d system with anti-correlated exogenous and endogenous rewards.
inline LinearSystemEnv make_problem2() {
  LinearSystemEnv env;
  env.name = "p2";
  env.d_exo = 1;
  env.d_endo = 1;
  env.Mx = Eigen::MatrixXd::Constant(1, 1, 0.9);
  env.Me.resize(1, 3);
  env.Me << 0.9, 0.1, 1.0;  // E, X, a
  env.M.resize(2, 2);
  env.M << 0.4, 0.6, 0.7, 0.3;
  env.noise_x = Eigen::VectorXd::Constant(1, 0.4);  // variance 0.16
  env.noise_e = Eigen::VectorXd::Constant(1, 0.2);  // variance 0.04
  env.exo_reward = [](const Eigen::VectorXd& x) { return std::exp(-std::abs(x(0) + 3.0) / 5.0); };
  env.endo_reward = [](const Eigen::VectorXd& e) { return std::exp(-std::abs(e(0) - 3.0) / 5.0); };
  env.actions = action_grid();
  env.start = Eigen::VectorXd::Zero(2);
  env.validate();
  env.reset(0);
  return env;
}

namespace detail {

// Rows are redrawn when |sum| is below this many standard deviations of the
// sum; dividing by a small sum blows the entries up and the system diverges.
inline constexpr double kMinRowSumSds = 1.0;

template <class Rng>
Eigen::MatrixXd row_normalized_gaussian(Eigen::Index rows, Eigen::Index cols, double target, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double sum = 0.0;
    do {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
      sum = m.row(i).sum();
    } while (std::abs(sum) < kMinRowSumSds * std::sqrt(static_cast<double>(cols)));
    m.row(i) *= target / sum;
  }
  return m;
}

}  // namespace detail

/// Random high-dimensional linear system. Every row of Mx, Me and M is
/// Gaussian, rescaled to sum to 0.99; draws whose zero-action dynamics are
/// unstable or whose mixing matrix is ill-conditioned are rejected and redrawn
/// from the same generator.
inline LinearSystemEnv make_problem3(int d_exo = 15, int d_endo = 15, std::uint64_t seed = 0) {
  if (d_exo < 1 || d_endo < 1) throw std::invalid_argument("make_problem3: dimensions must be >= 1");
  std::mt19937_64 rng(seed);
  LinearSystemEnv env;
  env.name = "p3";
  env.d_exo = d_exo;
  env.d_endo = d_endo;
  const int d = d_exo + d_endo;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 10000) throw std::runtime_error("make_problem3: could not draw a stable system");
    env.Mx = detail::row_normalized_gaussian(d_exo, d_exo, 0.99, rng);
    env.Me = detail::row_normalized_gaussian(d_endo, d_endo + d_exo + 1, 0.99, rng);
    // Observation is M [E; X]; store it acting on [X; E].
    const Eigen::MatrixXd m_ex = detail::row_normalized_gaussian(d, d, 0.99, rng);
    env.M.resize(d, d);
    env.M << m_ex.rightCols(d_exo), m_ex.leftCols(d_endo);
    if (spectral_radius(env.Mx) >= 1.0) continue;
    if (spectral_radius(env.Me.leftCols(d_endo)) >= 1.0) continue;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(env.M);
    const auto& sv = svd.singularValues();
    if (sv(d - 1) <= 0.0 || sv(0) / sv(d - 1) >= 1e6) continue;
    break;
  }
  env.noise_x = Eigen::VectorXd::Constant(d_exo, 0.3);   // variance 0.09
  env.noise_e = Eigen::VectorXd::Constant(d_endo, 0.2);  // variance 0.04
  env.exo_reward = [](const Eigen::VectorXd& x) { return -3.0 * x.mean(); };
  env.endo_reward = [](const Eigen::VectorXd& e) { return std::exp(-std::abs(e.mean() - 1.0)); };
  env.actions = action_grid();
  env.start = Eigen::VectorXd::Zero(d);
  env.validate();
  env.reset(seed);
  return env;
}

/// 3-d system with two exogenous dimensions.
inline LinearSystemEnv make_appendix2() {
  LinearSystemEnv env;
  env.name = "a2";
  env.d_exo = 2;
  env.d_endo = 1;
  env.Mx.resize(2, 2);
  env.Mx << 0.9, 0.0, 0.0, 0.7;
  env.Me.resize(1, 4);
  env.Me << 0.4, 0.1, 0.1, 1.0;  // E, X1, X2, a
  env.M.resize(3, 3);
  env.M << 0.3, 0.6, 0.7,  //
      0.3, -0.7, 0.2,      //
      0.6, 0.3, 0.2;
  env.noise_x.resize(2);
  env.noise_x << 0.4, 0.2;  // variances 0.16, 0.04
  env.noise_e = Eigen::VectorXd::Constant(1, 0.2);
  env.exo_reward = [](const Eigen::VectorXd& x) { return -x(0) - x(1); };
  env.endo_reward = [](const Eigen::VectorXd& e) { return std::exp(-std::abs(e(0) - 3.0) / 4.0); };
  env.actions = action_grid();
  env.start = Eigen::VectorXd::Zero(3);
  env.validate();
  env.reset(0);
  return env;
}

/// 5-d system with three exogenous dimensions.
inline LinearSystemEnv make_appendix3() {
  LinearSystemEnv env;
  env.name = "a3";
  env.d_exo = 3;
  env.d_endo = 2;
  env.Mx.resize(3, 3);
  env.Mx << 3.0 / 5, 9.0 / 50, 3.0 / 10,  //
      7.0 / 30, 7.0 / 15, 7.0 / 50,         //
      8.0 / 50, 7.0 / 30, 8.0 / 15;
  env.Me.resize(2, 6);  // E1, E2, X1, X2, X3, a
  env.Me << 13.0 / 20, 13.0 / 40, 0.1, 0.1, 0.0, 1.0,  //
      13.0 / 40, 13.0 / 20, 0.0, 0.1, 0.1, 1.0;
  // Published mixing acts on [X3, X2, X1, E2, E1]; permute to [X1, X2, X3, E1, E2].
  Eigen::MatrixXd published(5, 5);
  published << 0.3, 0.3, 0.6, 0.2, -0.4,  //
      0.6, -0.7, 0.3, 0.5, -0.3,          //
      0.7, 0.2, 0.2, -0.8, 0.6,           //
      0.4, -0.2, -0.1, -0.2, 0.9,         //
      0.9, 0.3, -0.2, 0.7, -0.2;
  env.M.resize(5, 5);
  const int order[5] = {2, 1, 0, 4, 3};  // canonical column -> published column
  for (int j = 0; j < 5; ++j) env.M.col(j) = published.col(order[j]);
  env.noise_x.resize(3);
  env.noise_x << 0.4, 0.2, 0.3;  // variances 0.16, 0.04, 0.09
  env.noise_e = Eigen::VectorXd::Constant(2, 0.2);
  env.exo_reward = [](const Eigen::VectorXd& x) { return -1.4 * x(0) - 1.7 * x(1) - 1.8 * x(2); };
  env.endo_reward = [](const Eigen::VectorXd& e) {
    return std::exp(-std::abs(e(0) + 1.5 * e(1) - 1.0) / 5.0);
  };
  env.actions = action_grid();
  env.start = Eigen::VectorXd::Zero(5);
  env.validate();
  env.reset(0);
  return env;
}

// ---------------------------------------------------------------------------
// Route planning with exogenous traffic.
// ---------------------------------------------------------------------------

struct TrafficEdge {
  int from = 0;
  int to = 0;
  double cost = 1.0;
};

/// Road network: node count, start, goal and directed edges. Ordinary edges
/// must point to a higher node index; the goal has a single return edge to
/// the start.
struct TrafficTopology {
  int n_nodes = 0;
  int start = 0;
  int goal = 0;
  std::vector<TrafficEdge> edges;

  std::vector<std::vector<TrafficEdge>> outbound() const {
    std::vector<std::vector<TrafficEdge>> out(static_cast<std::size_t>(n_nodes));
    for (const auto& e : edges) out[static_cast<std::size_t>(e.from)].push_back(e);
    return out;
  }

  void validate() const {
    if (n_nodes < 2 || start < 0 || start >= n_nodes || goal < 0 || goal >= n_nodes || start == goal)
      throw std::invalid_argument("traffic topology: bad node ids");
    for (const auto& e : edges) {
      if (e.from < 0 || e.from >= n_nodes || e.to < 0 || e.to >= n_nodes || !(e.cost > 0.0))
        throw std::invalid_argument("traffic topology: bad edge");
      const bool ret = e.from == goal && e.to == start;
      if (!ret && e.to <= e.from) throw std::invalid_argument("traffic topology: edges must move rightward");
      if (!ret && e.from == goal) throw std::invalid_argument("traffic topology: goal may only return to start");
    }
    const auto out = outbound();
    for (int v = 0; v < n_nodes; ++v)
      if (out[static_cast<std::size_t>(v)].empty())
        throw std::invalid_argument("traffic topology: node " + std::to_string(v) + " has no outbound edge");
    if (out[static_cast<std::size_t>(goal)].size() != 1)
      throw std::invalid_argument("traffic topology: goal needs exactly one (return) edge");
  }
};

/// Default 9-node network s0..s7, sg (node 8). The format is
///   nodes <n> / start <id> / goal <id> / edge <from> <to> <cost> ...
inline constexpr const char* kDefaultTrafficTopology = R"(# default road network: s0..s7 are nodes 0..7, sg is node 8
nodes 9
start 0
goal 8
edge 0 1 1
edge 0 2 2
edge 0 4 3
edge 1 3 2
edge 1 5 4
edge 2 3 1
edge 2 6 3
edge 3 5 2
edge 3 6 1
edge 4 6 4
edge 4 7 2
edge 5 7 1
edge 5 8 3
edge 6 7 2
edge 6 8 4
edge 7 8 1
edge 8 0 1
)";

inline TrafficTopology parse_traffic_topology(const std::string& text) {
  TokenStream ts(text);
  TrafficTopology topo;
  bool have_nodes = false;
  while (!ts.done()) {
    const std::string key(ts.next());
    if (key == "nodes") {
      topo.n_nodes = static_cast<int>(ts.next_int());
      have_nodes = true;
    } else if (key == "start") {
      topo.start = static_cast<int>(ts.next_int());
    } else if (key == "goal") {
      topo.goal = static_cast<int>(ts.next_int());
    } else if (key == "edge") {
      TrafficEdge e;
      e.from = static_cast<int>(ts.next_int());
      e.to = static_cast<int>(ts.next_int());
      e.cost = ts.next_double();
      topo.edges.push_back(e);
    } else {
      throw ParseError(ts.line(), "unknown traffic key '" + key + "'");
    }
  }
  if (!have_nodes) throw ParseError(ts.line(), "missing 'nodes'");
  try {
    topo.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(ts.line(), e.what());
  }
  return topo;
}

/// Car on a road network; exogenous traffic X_{t+1} = 0.9 X_t + N(0, 1).
/// Reward of moving along edge u -> v is 1/cost(u -> v) + X_t. The
/// observation is a one-hot node code followed by X_t.
class TrafficNetworkEnv {
 public:
  TrafficNetworkEnv() : TrafficNetworkEnv(parse_traffic_topology(kDefaultTrafficTopology)) {}
  explicit TrafficNetworkEnv(TrafficTopology topo) : topo_(std::move(topo)) {
    topo_.validate();
    out_ = topo_.outbound();
    max_degree_ = 0;
    for (const auto& o : out_) max_degree_ = std::max(max_degree_, static_cast<int>(o.size()));
    node_ = topo_.start;
  }

  double traffic_decay = 0.9;
  double traffic_noise = 1.0;
  double noise_scale = 1.0;

  void reset(std::uint64_t seed) {
    rng_.seed(seed);
    node_ = topo_.start;
    traffic_ = 0.0;
  }

  const TrafficTopology& topology() const { return topo_; }
  int node() const { return node_; }
  double traffic() const { return traffic_; }
  void set_state(int node, double traffic) {
    if (node < 0 || node >= topo_.n_nodes) throw std::out_of_range("TrafficNetworkEnv: bad node");
    node_ = node;
    traffic_ = traffic;
  }

  int state_dim() const { return topo_.n_nodes + 1; }
  int n_actions() const { return max_degree_; }
  int valid_actions() const { return static_cast<int>(out_[static_cast<std::size_t>(node_)].size()); }
  int action_dim() const { return max_degree_; }
  Eigen::VectorXd action_features(int a) const {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(max_degree_);
    f(a) = 1.0;
    return f;
  }
  const TrafficEdge& edge(int a) const { return out_.at(static_cast<std::size_t>(node_)).at(static_cast<std::size_t>(a)); }

  Eigen::VectorXd observation() const {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(state_dim());
    s(node_) = 1.0;
    s(topo_.n_nodes) = traffic_;
    return s;
  }

  StepOutcome step(int a) {
    if (a < 0 || a >= valid_actions()) throw std::out_of_range("TrafficNetworkEnv::step: bad action");
    const TrafficEdge& e = edge(a);
    StepOutcome out;
    out.endo_reward = 1.0 / e.cost;
    out.exo_reward = traffic_;
    out.reward = out.endo_reward + out.exo_reward;
    std::normal_distribution<double> normal(0.0, 1.0);
    traffic_ = traffic_decay * traffic_ + noise_scale * traffic_noise * normal(rng_);
    node_ = e.to;
    return out;
  }

 private:
  TrafficTopology topo_;
  std::vector<std::vector<TrafficEdge>> out_;
  int max_degree_ = 0;
  int node_ = 0;
  double traffic_ = 0.0;
  std::mt19937_64 rng_{0};
};

inline TrafficNetworkEnv make_traffic() { return TrafficNetworkEnv(); }
inline TrafficNetworkEnv make_traffic(const std::string& topology_text) {
  return TrafficNetworkEnv(parse_traffic_topology(topology_text));
}

static_assert(Environment<LinearSystemEnv>);
static_assert(Environment<TrafficNetworkEnv>);

// ---------------------------------------------------------------------------
// Transition collection
// ---------------------------------------------------------------------------

/// Chooses an action index in [0, env.valid_actions()) from an observation.
template <class Env>
using CollectionPolicy = std::function<int(const Env&, std::mt19937_64&)>;

template <Environment Env>
CollectionPolicy<Env> uniform_policy() {
  return [](const Env& env, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pick(0, env.valid_actions() - 1);
    return pick(rng);
  };
}

/// Rolls `env` forward for n_steps from its current state. The environment is
/// reset with `seed`; the policy draws from its own generator seeded with
/// seed ^ kPolicyStream.
inline constexpr std::uint64_t kPolicyStream = 0x9e3779b97f4a7c15ULL;

template <Environment Env>
TransitionDataset collect_transitions(Env env, const CollectionPolicy<Env>& policy, int n_steps,
                                      std::uint64_t seed) {
  const int d = env.state_dim(), c = env.action_dim();
  if (n_steps < d + c + 2) throw std::invalid_argument("collect_transitions: need at least d + c + 2 steps");
  env.reset(seed);
  std::mt19937_64 policy_rng(seed ^ kPolicyStream);
  Eigen::MatrixXd s(n_steps, d), a(n_steps, c), sn(n_steps, d);
  Eigen::VectorXd r(n_steps);
  for (int t = 0; t < n_steps; ++t) {
    const Eigen::VectorXd obs = env.observation();
    if (!obs.allFinite()) throw std::runtime_error("collect_transitions: non-finite state at step " + std::to_string(t));
    const int act = policy(env, policy_rng);
    s.row(t) = obs.transpose();
    a.row(t) = env.action_features(act).transpose();
    try {
      r(t) = env.step(act).reward;
    } catch (const std::runtime_error& e) {
      throw std::runtime_error("collect_transitions: at step " + std::to_string(t) + ": " + e.what());
    }
    const Eigen::VectorXd next = env.observation();
    if (!next.allFinite())
      throw std::runtime_error("collect_transitions: non-finite state at step " + std::to_string(t + 1));
    sn.row(t) = next.transpose();
  }
  return TransitionDataset::from_raw(s, a, r, sn);
}

// ---------------------------------------------------------------------------
// Dataset file: comma separated, header row, raw (uncentered) values.
//   s0,..,s{d-1},a0,..,a{c-1},r,sn0,..,sn{d-1}
// Sidecar <path>.meta holds the seed, the generator and the centering means.
// ---------------------------------------------------------------------------

inline std::string dataset_header(int d, int c) {
  std::string h;
  for (int i = 0; i < d; ++i) h += "s" + std::to_string(i) + ",";
  for (int i = 0; i < c; ++i) h += "a" + std::to_string(i) + ",";
  h += "r";
  for (int i = 0; i < d; ++i) h += ",sn" + std::to_string(i);
  return h;
}

inline std::string format_dataset(const TransitionDataset& ds) {
  const int d = static_cast<int>(ds.state_dim()), c = static_cast<int>(ds.action_dim());
  const Eigen::MatrixXd s = ds.raw_states(), a = ds.raw_actions(), sn = ds.raw_next_states();
  std::string out = dataset_header(d, c) + "\n";
  for (Eigen::Index t = 0; t < ds.size(); ++t) {
    out += format_row(s.row(t), ',');
    if (c) out += "," + format_row(a.row(t), ',');
    out += "," + format_double(ds.R(t)) + ",";
    out += format_row(sn.row(t), ',');
    out += "\n";
  }
  return out;
}

inline TransitionDataset parse_dataset(const std::string& text) {
  std::size_t line_no = 0, pos = 0;
  int d = -1, c = -1;
  std::vector<std::vector<double>> rows;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string_view raw = trim(std::string_view(text).substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (raw.empty() || raw.front() == '#') {
      if (end == text.size()) break;
      continue;
    }
    const auto cells = split(raw, ',');
    if (d < 0) {
      int ns = 0, na = 0, nn = 0, nr = 0;
      for (const auto& cell : cells) {
        if (cell == "r") ++nr;
        else if (cell.starts_with("sn")) ++nn;
        else if (cell.starts_with("s")) ++ns;
        else if (cell.starts_with("a")) ++na;
        else throw ParseError(line_no, "unknown column '" + std::string(cell) + "'");
      }
      if (nr != 1 || ns == 0 || ns != nn) throw ParseError(line_no, "header must be s*,a*,r,sn*");
      d = ns;
      c = na;
      if (dataset_header(d, c) != std::string(raw)) throw ParseError(line_no, "columns out of order");
    } else {
      if (static_cast<int>(cells.size()) != 2 * d + c + 1)
        throw ParseError(line_no, "expected " + std::to_string(2 * d + c + 1) + " fields, got " +
                                      std::to_string(cells.size()));
      std::vector<double> v;
      v.reserve(cells.size());
      for (const auto& cell : cells) {
        const double x = parse_double(cell, line_no);
        if (!std::isfinite(x)) throw ParseError(line_no, "non-finite value");
        v.push_back(x);
      }
      rows.push_back(std::move(v));
    }
    if (end == text.size()) break;
  }
  if (d < 0) throw ParseError(line_no, "missing header");
  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd s(n, d), a(n, c), sn(n, d);
  Eigen::VectorXd r(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const auto& v = rows[static_cast<std::size_t>(t)];
    for (int i = 0; i < d; ++i) s(t, i) = v[static_cast<std::size_t>(i)];
    for (int i = 0; i < c; ++i) a(t, i) = v[static_cast<std::size_t>(d + i)];
    r(t) = v[static_cast<std::size_t>(d + c)];
    for (int i = 0; i < d; ++i) sn(t, i) = v[static_cast<std::size_t>(d + c + 1 + i)];
  }
  try {
    return TransitionDataset::from_raw(s, a, r, sn);
  } catch (const std::invalid_argument& e) {
    throw ParseError(line_no, e.what());
  }
}

inline std::string format_dataset_meta(const TransitionDataset& ds, const std::string& generator,
                                       std::uint64_t seed) {
  std::string out = "generator " + generator + "\n";
  out += "seed " + std::to_string(seed) + "\n";
  out += "n " + std::to_string(ds.size()) + "\n";
  out += "state_mean " + format_row(ds.state_mean.transpose()) + "\n";
  out += "action_mean " + format_row(ds.action_mean.transpose()) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Tabular approximation of the 2-d anti-correlated system.
// ---------------------------------------------------------------------------

struct GridSpec {
  int n_exo = 21;
  double x_min = -4.0, x_max = 4.0;
  int n_endo = 21;
  double e_min = -2.0, e_max = 6.0;
};

struct DiscretizedProblem {
  ExoEndoTabularMDP mdp;
  Policy policy;  // drive E towards 3
  Eigen::VectorXd x_centers, e_centers;
};

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

/// Probability mass of N(mean, sd^2) in each cell of a grid of centers; the
/// outer cells extend to +-infinity.
inline Eigen::RowVectorXd gaussian_cell_masses(const Eigen::VectorXd& centers, double mean, double sd) {
  const Eigen::Index n = centers.size();
  Eigen::RowVectorXd p(n);
  double lo_cdf = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double hi_cdf = i + 1 < n ? normal_cdf((0.5 * (centers(i) + centers(i + 1)) - mean) / sd) : 1.0;
    p(i) = std::max(0.0, hi_cdf - lo_cdf);
    lo_cdf = hi_cdf;
  }
  return p / p.sum();
}

inline Eigen::Index nearest(const Eigen::VectorXd& centers, double v) {
  Eigen::Index best = 0;
  (centers.array() - v).abs().minCoeff(&best);
  return best;
}

}  // namespace detail

/// Quantizes X and E of the 2-d anti-correlated system onto uniform grids.
/// Transition masses are Gaussian CDF differences between cell midpoints;
/// rewards are deterministic. The attached policy picks the action whose
/// expected next E is closest to 3. The start cell is the one nearest (0, 0).
inline DiscretizedProblem discretize_problem2(const GridSpec& grid = {}, double gamma = 0.9) {
  if (grid.n_exo < 2 || grid.n_endo < 2 || !(grid.x_max > grid.x_min) || !(grid.e_max > grid.e_min))
    throw std::invalid_argument("discretize_problem2: bad grid");
  const LinearSystemEnv env = make_problem2();
  const double ax = env.Mx(0, 0), ae = env.Me(0, 0), bx = env.Me(0, 1), ba = env.Me(0, 2);
  const double sx = env.noise_x(0), se = env.noise_e(0);

  DiscretizedProblem out;
  out.x_centers = Eigen::VectorXd::LinSpaced(grid.n_exo, grid.x_min, grid.x_max);
  out.e_centers = Eigen::VectorXd::LinSpaced(grid.n_endo, grid.e_min, grid.e_max);
  ExoEndoTabularMDP& mdp = out.mdp;
  mdp.n_exo = grid.n_exo;
  mdp.n_endo = grid.n_endo;
  mdp.n_actions = env.n_actions();
  mdp.gamma = gamma;
  mdp.Px.resize(grid.n_exo, grid.n_exo);
  mdp.mx.resize(grid.n_exo);
  for (int x = 0; x < grid.n_exo; ++x) {
    const double xv = out.x_centers(x);
    mdp.Px.row(x) = detail::gaussian_cell_masses(out.x_centers, ax * xv, sx);
    mdp.mx(x) = env.exo_reward(Eigen::VectorXd::Constant(1, xv));
  }
  mdp.sigma2x = Eigen::VectorXd::Zero(grid.n_exo);
  const int ns = mdp.n_states();
  mdp.Pe.resize(static_cast<Eigen::Index>(ns) * mdp.n_actions, grid.n_endo);
  mdp.me.resize(ns, mdp.n_actions);
  mdp.sigma2e = Eigen::MatrixXd::Zero(ns, mdp.n_actions);
  out.policy.assign(static_cast<std::size_t>(ns), 0);
  for (int e = 0; e < grid.n_endo; ++e) {
    const double ev = out.e_centers(e);
    const double re = env.endo_reward(Eigen::VectorXd::Constant(1, ev));
    for (int x = 0; x < grid.n_exo; ++x) {
      const int s = mdp.state_index(e, x);
      const double xv = out.x_centers(x);
      double best = std::numeric_limits<double>::infinity();
      for (int a = 0; a < mdp.n_actions; ++a) {
        const double mean = ae * ev + bx * xv + ba * env.actions[static_cast<std::size_t>(a)];
        mdp.Pe.row(static_cast<Eigen::Index>(s) * mdp.n_actions + a) =
            detail::gaussian_cell_masses(out.e_centers, mean, se);
        mdp.me(s, a) = re;
        const double miss = std::abs(mean - 3.0);
        if (miss < best) {
          best = miss;
          out.policy[static_cast<std::size_t>(s)] = a;
        }
      }
    }
  }
  mdp.x0 = static_cast<int>(detail::nearest(out.x_centers, 0.0));
  mdp.e0 = static_cast<int>(detail::nearest(out.e_centers, 0.0));
  mdp.validate();
  return out;
}

/// Smallest H with gamma^H < tol.
inline int horizon_for(double gamma, double tol = 0.01) {
  if (!(gamma > 0.0 && gamma < 1.0) || !(tol > 0.0 && tol < 1.0))
    throw std::invalid_argument("horizon_for: need 0 < gamma, tol < 1");
  int h = 0;
  double g = 1.0;
  while (g >= tol) {
    g *= gamma;
    ++h;
  }
  return h;
}

}  // namespace exo
