#include "exo/rl.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace exo;

namespace {

QNetwork random_net(int d, int k, QArchitecture arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return QNetwork(d, k, arch, 20, rng);
}

Eigen::VectorXd random_state(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  Eigen::VectorXd s(d);
  for (int i = 0; i < d; ++i) s(i) = z(rng);
  return s;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.L = 200;
  cfg.total_steps = 400;
  cfg.N = 1;
  cfg.T = 50;
  return cfg;
}

DecomposeOptions tiny_decompose() {
  DecomposeOptions o;
  o.solver.restarts = 1;
  o.solver.max_iters = 50;
  return o;
}

/// Replays the recorded actions on a fresh copy of the environment and
/// returns the hidden state before every step.
std::vector<Eigen::VectorXd> replay_hidden(LinearSystemEnv env, const std::vector<int>& actions, std::uint64_t seed) {
  env.reset(seed);
  std::vector<Eigen::VectorXd> out;
  for (int a : actions) {
    out.push_back(env.hidden());
    env.step(a);
  }
  return out;
}

}  // namespace

TEST(Boltzmann, EqualValuesAreUniform) {
  for (double beta : {0.1, 1.0, 7.0}) {
    const Eigen::VectorXd p = boltzmann_probabilities(Eigen::Vector2d(1.0, 1.0), beta);
    EXPECT_EQ(p(0), 0.5);
    EXPECT_EQ(p(1), 0.5);
  }
}

TEST(Boltzmann, DirectEvaluation) {
  const Eigen::VectorXd p = boltzmann_probabilities(Eigen::Vector2d(10.0, 0.0), 1.0);
  EXPECT_NEAR(p(0), std::exp(10.0) / (std::exp(10.0) + 1.0), 1e-15);
  EXPECT_NEAR(p(0), 0.9999546, 1e-7);
}

TEST(Boltzmann, ShiftInvariantAndNormalized) {
  const Eigen::Vector3d q(0.3, -1.2, 2.0);
  const Eigen::VectorXd base = boltzmann_probabilities(q, 0.7);
  for (double k : {-5.0, 0.0, 5.0}) {
    const Eigen::VectorXd p = boltzmann_probabilities((q.array() + k).matrix(), 0.7);
    EXPECT_LT((p - base).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
  }
}

TEST(Boltzmann, HugeValuesDoNotOverflow) {
  const Eigen::VectorXd p = boltzmann_probabilities(Eigen::Vector2d(1e4, 0.0), 1.0);
  EXPECT_TRUE(p.allFinite());
  EXPECT_EQ(p(0), 1.0);
}

TEST(Boltzmann, RejectsBadInput) {
  EXPECT_THROW(boltzmann_probabilities(Eigen::Vector2d(1, 2), 0.0), std::invalid_argument);
  EXPECT_THROW(boltzmann_probabilities(Eigen::Vector2d(1, NAN), 1.0), std::invalid_argument);
}

TEST(Boltzmann, SampleFrequenciesMatchProbabilities) {
  const Eigen::Vector3d q(1.0, 0.0, -1.0);
  const Eigen::VectorXd p = boltzmann_probabilities(q, 1.0);
  std::mt19937_64 rng(4);
  const int n = 100000;
  Eigen::Vector3d count = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) count(boltzmann_sample(q, 1.0, rng)) += 1.0;
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(count(a) / n, p(a), 4.0 * std::sqrt(p(a) * (1 - p(a)) / n));
}

TEST(QUpdate, ZeroLearningRateKeepsParameters) {
  QNetwork net = random_net(3, 4, QArchitecture::heads, 1);
  const Eigen::VectorXd before = net.parameters();
  std::mt19937_64 rng(2);
  const Transition tr{random_state(3, rng), 2, 0.5, random_state(3, rng), 4};
  q_update(net, tr, 0.0, 0.9);
  EXPECT_EQ(net.parameters(), before);
}

TEST(QUpdate, SmallStepReducesTdError) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (QArchitecture arch : {QArchitecture::heads, QArchitecture::action_input}) {
      QNetwork net = random_net(4, 5, arch, seed);
      std::mt19937_64 rng(seed + 1000);
      const Transition tr{random_state(4, rng), static_cast<int>(seed % 5), 1.0, random_state(4, rng), 5};
      const TdResult step = q_update(net, tr, 1e-4, 0.9);
      const double before = step.td_error, after = net.q_value(tr.s, tr.a) - step.target;
      EXPECT_LT(after * after, before * before) << "seed " << seed;
    }
  }
}

TEST(QUpdate, NonFiniteTransitionRejected) {
  QNetwork net = random_net(2, 2, QArchitecture::heads, 3);
  const Transition tr{Eigen::Vector2d(NAN, 0.0), 0, 0.0, Eigen::Vector2d::Zero(), 2};
  EXPECT_THROW(q_update(net, tr, 0.1, 0.9), std::invalid_argument);
}

TEST(QNetwork, GradientMatchesCentralDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    for (QArchitecture arch : {QArchitecture::heads, QArchitecture::action_input}) {
      QNetwork net = random_net(3, 4, arch, seed);
      std::mt19937_64 rng(seed + 50);
      const Eigen::VectorXd s = random_state(3, rng);
      const int a = static_cast<int>(seed % 4);
      const Eigen::VectorXd g = net.gradient(s, a), theta = net.parameters();
      Eigen::VectorXd fd(theta.size());
      const double h = 1e-6;
      for (Eigen::Index i = 0; i < theta.size(); ++i) {
        Eigen::VectorXd t = theta;
        t(i) += h;
        net.set_parameters(t);
        const double up = net.q_value(s, a);
        t(i) -= 2 * h;
        net.set_parameters(t);
        fd(i) = (up - net.q_value(s, a)) / (2 * h);
      }
      net.set_parameters(theta);
      EXPECT_LT((fd - g).norm() / g.norm(), 1e-4);
    }
  }
}

TEST(QNetwork, InitializationBounds) {
  const QNetwork net = random_net(9, 3, QArchitecture::heads, 5);
  EXPECT_EQ(net.n_parameters(), 20 * 9 + 20 + 3 * 20 + 3);
  EXPECT_LE(net.parameters().head(200).cwiseAbs().maxCoeff(), 1.0 / 3.0);
  EXPECT_EQ(random_net(9, 3, QArchitecture::heads, 5).parameters(), net.parameters());
}

TEST(QNetwork, HeadsTruncateToValidActions) {
  const QNetwork net = random_net(2, 4, QArchitecture::heads, 6);
  const Eigen::Vector2d s(0.1, 0.2);
  EXPECT_EQ(net.q_values(s, 2), net.q_values(s, 4).head(2));
  EXPECT_THROW(net.q_values(s, 5), std::out_of_range);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.gamma = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.L = c.total_steps;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.beta = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Variant, NamesRoundTrip) {
  for (Variant v : {Variant::full, Variant::endo_global, Variant::endo_stepwise, Variant::endo_oracle})
    EXPECT_EQ(parse_variant(to_string(v)), v);
  EXPECT_THROW(parse_variant("endo"), std::invalid_argument);
}

TEST(RunLearner, FullTrainsOnRawReward) {
  const LinearSystemEnv env = make_problem2();
  const TrainConfig cfg = tiny_config();
  const VariantRun run = run_learner(env, Variant::full, cfg, tiny_decompose(), 3);
  const auto hidden = replay_hidden(env, run.actions, 3);
  for (std::size_t t = 0; t < hidden.size(); ++t) {
    const double raw = env.exo_reward(hidden[t].head(1)) + env.endo_reward(hidden[t].tail(1));
    ASSERT_EQ(run.train_reward[t], raw) << "step " << t;
  }
}

TEST(RunLearner, OracleTrainsOnEndogenousReward) {
  const LinearSystemEnv env = make_problem2();
  const TrainConfig cfg = tiny_config();
  const VariantRun run = run_learner(env, Variant::endo_oracle, cfg, tiny_decompose(), 4);
  const auto hidden = replay_hidden(env, run.actions, 4);
  for (std::size_t t = static_cast<std::size_t>(cfg.L); t < hidden.size(); ++t)
    ASSERT_EQ(run.train_reward[t], std::exp(-std::abs(hidden[t](1) - 3.0) / 5.0)) << "step " << t;
}

TEST(RunLearner, SameSeedSameCurves) {
  const LinearSystemEnv env = make_problem2();
  const auto a = run_repetition(env, {Variant::full, Variant::endo_global}, tiny_config(), tiny_decompose(), 8);
  const auto b = run_repetition(env, {Variant::full, Variant::endo_global}, tiny_config(), tiny_decompose(), 8);
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    EXPECT_EQ(a.runs[i].trace, b.runs[i].trace);
    EXPECT_EQ(a.runs[i].train_reward, b.runs[i].train_reward);
  }
}

TEST(RunLearner, WarmupCoincidesAcrossVariants) {
  const TrainConfig cfg = tiny_config();
  const auto rep = run_repetition(make_appendix2(), {Variant::full, Variant::endo_global, Variant::endo_stepwise,
                                                     Variant::endo_oracle},
                                  cfg, tiny_decompose(), 5);
  const auto L = static_cast<std::ptrdiff_t>(cfg.L);
  for (const VariantRun& run : rep.runs) {
    ASSERT_EQ(run.trace.size(), static_cast<std::size_t>(cfg.total_steps));
    EXPECT_TRUE(std::equal(run.actions.begin(), run.actions.begin() + L, rep.runs[0].actions.begin()));
    EXPECT_TRUE(std::equal(run.trace.begin(), run.trace.begin() + L, rep.runs[0].trace.begin()));
  }
  // A separately run single variant reproduces the shared warm-up.
  const VariantRun solo = run_learner(make_appendix2(), Variant::endo_oracle, cfg, tiny_decompose(), 5);
  EXPECT_EQ(solo.trace, rep.runs[3].trace);
}

TEST(RunLearner, DecompositionDiagnosticsRecorded) {
  const auto rep =
      run_repetition(make_appendix2(), {Variant::endo_global, Variant::full}, tiny_config(), tiny_decompose(), 6);
  EXPECT_GE(rep.runs[0].d_x, 0);
  EXPECT_EQ(rep.runs[0].fallback, rep.runs[0].d_x == 0);
  EXPECT_EQ(rep.runs[1].d_x, -1);
}

TEST(RunLearner, NoExogenousSubspaceFallsBackToFullReward) {
  // No sample PCC is this small, so nothing is accepted as exogenous.
  DecomposeOptions o = tiny_decompose();
  o.epsilon = 1e-12;
  const TrainConfig cfg = tiny_config();
  const auto rep = run_repetition(make_problem2(), {Variant::full, Variant::endo_stepwise}, cfg, o, 7);
  EXPECT_TRUE(rep.runs[1].fallback);
  EXPECT_EQ(rep.runs[1].d_x, 0);
  EXPECT_EQ(rep.runs[1].train_reward, rep.runs[0].train_reward);
}

TEST(RunLearner, TrafficWithActionInput) {
  TrainConfig cfg = tiny_config();
  cfg.architecture = QArchitecture::action_input;
  cfg.beta = 5.0;
  cfg.learning_rate = 0.01;
  const VariantRun run = run_learner(make_traffic(), Variant::endo_oracle, cfg, tiny_decompose(), 1);
  for (std::size_t t = static_cast<std::size_t>(cfg.L); t < run.trace.size(); ++t) {
    EXPECT_EQ(run.train_reward[t], run.trace[t]);
    EXPECT_GE(run.trace[t], 0.25);
  }
}
