#pragma once

// Online Q-learning with a one-hidden-layer tanh network and Boltzmann
// exploration, plus the reward-switch protocol: every learner trains on the
// full reward for the first L steps while a transition database is recorded;
// the endogenous variants then switch to an estimated (or, for the oracle,
// the true) endogenous reward.
//
// The warm-up is simulated once per repetition. At step L the environment,
// network and exploration generator are copied into each variant, so all
// variants share the warm-up trajectory and, because environment noise draws
// do not depend on actions, the exogenous trajectory afterwards as well.

#include "exo/decompose.hpp"
#include "exo/envs.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace exo {

// ---------------------------------------------------------------------------
// Exploration
// ---------------------------------------------------------------------------

/// p(a) proportional to exp(q_a / beta), computed after subtracting max q.
inline Eigen::VectorXd boltzmann_probabilities(const Eigen::VectorXd& q, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw std::invalid_argument("boltzmann: beta must be positive");
  if (q.size() == 0) throw std::invalid_argument("boltzmann: no actions");
  if (!q.allFinite()) throw std::invalid_argument("boltzmann: non-finite Q values");
  Eigen::VectorXd p = ((q.array() - q.maxCoeff()) / beta).exp().matrix();
  return p / p.sum();
}

template <class Rng>
int boltzmann_sample(const Eigen::VectorXd& q, double beta, Rng& rng) {
  const Eigen::VectorXd p = boltzmann_probabilities(q, beta);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double u = unif(rng);
  double acc = 0.0;
  for (Eigen::Index a = 0; a + 1 < p.size(); ++a) {
    acc += p(a);
    if (u < acc) return static_cast<int>(a);
  }
  return static_cast<int>(p.size() - 1);
}

// ---------------------------------------------------------------------------
// Q network
// ---------------------------------------------------------------------------

/// heads: state in, one linear output per action.
/// action_input: [state; action index] in, a single output.
enum class QArchitecture { heads, action_input };

class QNetwork {
 public:
  QNetwork() = default;

  /// Weights uniform in +-1/sqrt(fan_in).
  template <class Rng>
  QNetwork(int state_dim, int n_actions, QArchitecture arch, int hidden_units, Rng& rng)
      : arch_(arch), state_dim_(state_dim), n_actions_(n_actions) {
    if (state_dim < 1 || n_actions < 1 || hidden_units < 1)
      throw std::invalid_argument("QNetwork: dimensions must be positive");
    const int in = input_dim(), out = arch == QArchitecture::heads ? n_actions : 1;
    const auto fill = [&rng](Eigen::Index r, Eigen::Index c, int fan_in) {
      const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-b, b);
      Eigen::MatrixXd m(r, c);
      for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = u(rng);
      return m;
    };
    W1_ = fill(hidden_units, in, in);
    b1_ = fill(hidden_units, 1, in).col(0);
    W2_ = fill(out, hidden_units, hidden_units);
    b2_ = fill(out, 1, hidden_units).col(0);
  }

  QArchitecture architecture() const { return arch_; }
  int state_dim() const { return state_dim_; }
  int n_actions() const { return n_actions_; }
  int hidden_units() const { return static_cast<int>(W1_.rows()); }
  int input_dim() const { return state_dim_ + (arch_ == QArchitecture::action_input ? 1 : 0); }
  Eigen::Index n_parameters() const { return W1_.size() + b1_.size() + W2_.size() + b2_.size(); }

  /// Q(s, a) for a = 0 .. n_valid-1.
  Eigen::VectorXd q_values(const Eigen::VectorXd& s, int n_valid) const {
    check_state(s);
    if (n_valid < 1 || n_valid > n_actions_) throw std::out_of_range("QNetwork: bad action count");
    if (arch_ == QArchitecture::heads) {
      const Eigen::VectorXd h = (W1_ * s + b1_).array().tanh().matrix();
      return (W2_ * h + b2_).head(n_valid);
    }
    Eigen::VectorXd q(n_valid);
    for (int a = 0; a < n_valid; ++a) q(a) = q_value(s, a);
    return q;
  }

  double q_value(const Eigen::VectorXd& s, int a) const {
    check_state(s);
    check_action(a);
    const Eigen::VectorXd h = hidden(s, a);
    return arch_ == QArchitecture::heads ? W2_.row(a).dot(h) + b2_(a) : W2_.row(0).dot(h) + b2_(0);
  }

  /// dQ(s, a)/dtheta in the layout of parameters().
  Eigen::VectorXd gradient(const Eigen::VectorXd& s, int a) const {
    check_state(s);
    check_action(a);
    const Eigen::VectorXd x = input(s, a);
    const Eigen::VectorXd h = (W1_ * x + b1_).array().tanh().matrix();
    const int head = arch_ == QArchitecture::heads ? a : 0;
    const Eigen::VectorXd dz = (1.0 - h.array().square()).matrix().cwiseProduct(W2_.row(head).transpose());

    Eigen::VectorXd g = Eigen::VectorXd::Zero(n_parameters());
    Eigen::Index o = 0;
    Eigen::Map<Eigen::MatrixXd>(g.data() + o, W1_.rows(), W1_.cols()) = dz * x.transpose();
    o += W1_.size();
    g.segment(o, b1_.size()) = dz;
    o += b1_.size();
    Eigen::Map<Eigen::MatrixXd> gw2(g.data() + o, W2_.rows(), W2_.cols());
    gw2.row(head) = h.transpose();
    o += W2_.size();
    g(o + head) = 1.0;
    return g;
  }

  Eigen::VectorXd parameters() const {
    Eigen::VectorXd p(n_parameters());
    p << Eigen::Map<const Eigen::VectorXd>(W1_.data(), W1_.size()), b1_,
        Eigen::Map<const Eigen::VectorXd>(W2_.data(), W2_.size()), b2_;
    return p;
  }

  void set_parameters(const Eigen::VectorXd& p) {
    if (p.size() != n_parameters()) throw std::invalid_argument("QNetwork: wrong parameter count");
    Eigen::Index o = 0;
    W1_ = Eigen::Map<const Eigen::MatrixXd>(p.data() + o, W1_.rows(), W1_.cols());
    o += W1_.size();
    b1_ = p.segment(o, b1_.size());
    o += b1_.size();
    W2_ = Eigen::Map<const Eigen::MatrixXd>(p.data() + o, W2_.rows(), W2_.cols());
    o += W2_.size();
    b2_ = p.segment(o, b2_.size());
  }

  bool finite() const { return W1_.allFinite() && b1_.allFinite() && W2_.allFinite() && b2_.allFinite(); }

 private:
  Eigen::VectorXd input(const Eigen::VectorXd& s, int a) const {
    if (arch_ == QArchitecture::heads) return s;
    Eigen::VectorXd x(state_dim_ + 1);
    x << s, static_cast<double>(a);
    return x;
  }
  Eigen::VectorXd hidden(const Eigen::VectorXd& s, int a) const {
    return (W1_ * input(s, a) + b1_).array().tanh().matrix();
  }
  void check_state(const Eigen::VectorXd& s) const {
    if (s.size() != state_dim_) throw std::invalid_argument("QNetwork: state has the wrong dimension");
  }
  void check_action(int a) const {
    if (a < 0 || a >= n_actions_) throw std::out_of_range("QNetwork: action out of range");
  }

  QArchitecture arch_ = QArchitecture::heads;
  int state_dim_ = 0;
  int n_actions_ = 0;
  Eigen::MatrixXd W1_;
  Eigen::VectorXd b1_;
  Eigen::MatrixXd W2_;
  Eigen::VectorXd b2_;
};

struct Transition {
  Eigen::VectorXd s;
  int a = 0;
  double r = 0.0;
  Eigen::VectorXd s_next;
  /// Actions available in s_next.
  int n_valid_next = 0;
};

struct TdResult {
  double q = 0.0;
  double target = 0.0;
  double td_error = 0.0;  // q - target
};

/// One SGD step on 0.5 (Q(s,a) - [r + gamma max_a' Q(s',a')])^2 with the
/// target held fixed.
inline TdResult q_update(QNetwork& net, const Transition& tr, double alpha, double gamma) {
  if (!tr.s.allFinite() || !tr.s_next.allFinite() || !std::isfinite(tr.r))
    throw std::invalid_argument("q_update: non-finite transition");
  TdResult out;
  out.q = net.q_value(tr.s, tr.a);
  out.target = tr.r + gamma * net.q_values(tr.s_next, tr.n_valid_next).maxCoeff();
  out.td_error = out.q - out.target;
  if (!std::isfinite(out.td_error)) {
    std::ostringstream os;
    os.precision(17);
    os << "q_update: non-finite TD error (q = " << out.q << ", target = " << out.target << ")\n"
       << "s = " << tr.s.transpose() << "\na = " << tr.a << ", r = " << tr.r
       << "\ns' = " << tr.s_next.transpose();
    throw std::runtime_error(os.str());
  }
  if (alpha != 0.0) {
    net.set_parameters(net.parameters() - alpha * out.td_error * net.gradient(tr.s, tr.a));
    if (!net.finite()) throw std::runtime_error("q_update: parameters became non-finite");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Learner protocol
// ---------------------------------------------------------------------------

enum class Variant { full, endo_global, endo_stepwise, endo_oracle };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::endo_global: return "endo_global";
    case Variant::endo_stepwise: return "endo_stepwise";
    case Variant::endo_oracle: return "endo_oracle";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::full, Variant::endo_global, Variant::endo_stepwise, Variant::endo_oracle})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

/// Action selection during the first L steps.
enum class WarmupExploration { boltzmann, uniform };
/// Quantity recorded per step for the learning curves.
enum class Metric { endo, total };

struct TrainConfig {
  double gamma = 0.9;
  double learning_rate = 0.02;
  double beta = 1.0;
  int L = 1000;
  int total_steps = 3000;
  int N = 20;
  int T = 100;
  std::uint64_t seed = 0;
  int hidden_units = 20;
  QArchitecture architecture = QArchitecture::heads;
  WarmupExploration warmup = WarmupExploration::boltzmann;
  Metric metric = Metric::endo;

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("TrainConfig: gamma must lie in (0, 1)");
    if (!(learning_rate > 0.0) || !(beta > 0.0))
      throw std::invalid_argument("TrainConfig: learning_rate and beta must be positive");
    if (!(L > 0 && L < total_steps)) throw std::invalid_argument("TrainConfig: need 0 < L < total_steps");
    if (N < 1 || T < 1 || hidden_units < 1) throw std::invalid_argument("TrainConfig: N, T, hidden_units must be >= 1");
  }
};

/// Result of one variant in one repetition.
struct VariantRun {
  Variant variant = Variant::full;
  /// Metric per step, total_steps entries.
  std::vector<double> trace;
  /// Reward the learner was trained on and the action it took, per step.
  std::vector<double> train_reward;
  std::vector<int> actions;
  /// The decomposition found no exogenous subspace; the run kept the full reward.
  bool fallback = false;
  int d_x = -1;
  double pcc = std::numeric_limits<double>::quiet_NaN();
};

struct RepetitionResult {
  std::uint64_t seed = 0;
  std::vector<VariantRun> runs;
};

namespace detail {

inline constexpr std::uint64_t kNetStream = 0x5851f42d4c957f2dULL;
inline constexpr std::uint64_t kActionStream = 0x14057b7ef767814fULL;

template <Environment Env>
struct LearnerState {
  Env env;
  QNetwork net;
  std::mt19937_64 rng;
};

/// Training reward for an endogenous learner given the observed reward.
using RewardMap = std::function<double(const Eigen::VectorXd& s, const StepOutcome&)>;

template <Environment Env>
int choose(const LearnerState<Env>& st, const Eigen::VectorXd& s, const TrainConfig& cfg, bool warmup,
           std::mt19937_64& rng) {
  const int k = st.env.valid_actions();
  if (warmup && cfg.warmup == WarmupExploration::uniform) {
    std::uniform_int_distribution<int> pick(0, k - 1);
    return pick(rng);
  }
  return boltzmann_sample(st.net.q_values(s, k), cfg.beta, rng);
}

template <Environment Env>
void train_steps(LearnerState<Env>& st, int from, int to, const TrainConfig& cfg, bool warmup,
                 const RewardMap& reward, VariantRun& run, std::vector<Transition>* log) {
  for (int t = from; t < to; ++t) {
    Transition tr;
    tr.s = st.env.observation();
    tr.a = choose(st, tr.s, cfg, warmup, st.rng);
    const StepOutcome out = st.env.step(tr.a);
    tr.s_next = st.env.observation();
    tr.n_valid_next = st.env.valid_actions();
    tr.r = reward ? reward(tr.s, out) : out.reward;
    const auto i = static_cast<std::size_t>(t);
    run.trace[i] = cfg.metric == Metric::endo ? out.endo_reward : out.reward;
    run.train_reward[i] = tr.r;
    run.actions[i] = tr.a;
    q_update(st.net, tr, cfg.learning_rate, cfg.gamma);
    if (log) {
      tr.r = out.reward;
      log->push_back(std::move(tr));
    }
  }
}

template <Environment Env>
TransitionDataset to_dataset(const Env& env, const std::vector<Transition>& log) {
  const Eigen::Index n = static_cast<Eigen::Index>(log.size());
  const int d = env.state_dim(), c = env.action_dim();
  Eigen::MatrixXd s(n, d), a(n, c), sn(n, d);
  Eigen::VectorXd r(n);
  for (Eigen::Index t = 0; t < n; ++t) {
    const Transition& tr = log[static_cast<std::size_t>(t)];
    s.row(t) = tr.s.transpose();
    a.row(t) = env.action_features(tr.a).transpose();
    r(t) = tr.r;
    sn.row(t) = tr.s_next.transpose();
  }
  return TransitionDataset::from_raw(s, a, r, sn);
}

}  // namespace detail

/// Runs every requested variant for one seed. All variants share the warm-up.
template <Environment Env>
RepetitionResult run_repetition(const Env& prototype, const std::vector<Variant>& variants,
                                const TrainConfig& cfg, const DecomposeOptions& dopts, std::uint64_t seed) {
  cfg.validate();
  if (variants.empty()) throw std::invalid_argument("run_repetition: no variants");

  std::mt19937_64 net_rng(seed ^ detail::kNetStream);
  detail::LearnerState<Env> st{prototype,
                               QNetwork(prototype.state_dim(), prototype.n_actions(), cfg.architecture,
                                        cfg.hidden_units, net_rng),
                               std::mt19937_64(seed ^ detail::kActionStream)};
  st.env.reset(seed);

  const auto n = static_cast<std::size_t>(cfg.total_steps);
  VariantRun warm;
  warm.trace.assign(n, 0.0);
  warm.train_reward.assign(n, 0.0);
  warm.actions.assign(n, 0);
  std::vector<Transition> log;
  log.reserve(static_cast<std::size_t>(cfg.L));
  detail::train_steps(st, 0, cfg.L, cfg, true, {}, warm, &log);

  std::optional<TransitionDataset> data;
  const auto dataset = [&]() -> const TransitionDataset& {
    if (!data) data = detail::to_dataset(st.env, log);
    return *data;
  };

  RepetitionResult result;
  result.seed = seed;
  for (Variant v : variants) {
    VariantRun run = warm;
    run.variant = v;
    detail::RewardMap reward;
    if (v == Variant::endo_oracle) {
      reward = [](const Eigen::VectorXd&, const StepOutcome& o) { return o.endo_reward; };
    } else if (v == Variant::endo_global || v == Variant::endo_stepwise) {
      const ExoDecomposition dec =
          v == Variant::endo_global ? global_decompose(dataset(), dopts) : stepwise_decompose(dataset(), dopts);
      run.d_x = dec.d_x;
      run.pcc = dec.pcc_final;
      if (dec.d_x == 0) {
        run.fallback = true;
      } else {
        reward = [dec](const Eigen::VectorXd& s, const StepOutcome& o) {
          return o.reward - dec.predicted_exo_reward(s);
        };
      }
    }
    detail::LearnerState<Env> branch = st;
    detail::train_steps(branch, cfg.L, cfg.total_steps, cfg, false, reward, run, nullptr);
    result.runs.push_back(std::move(run));
  }
  return result;
}

/// Single-variant convenience wrapper around run_repetition.
template <Environment Env>
VariantRun run_learner(const Env& prototype, Variant variant, const TrainConfig& cfg,
                       const DecomposeOptions& dopts, std::uint64_t seed) {
  return std::move(run_repetition(prototype, {variant}, cfg, dopts, seed).runs.front());
}

}  // namespace exo
