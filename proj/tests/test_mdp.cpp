#include "exo/mdp.hpp"
#include "support/oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace exo;

namespace {

TabularMDP single_state(double m, double sigma2, double gamma) {
  TabularMDP mdp;
  mdp.n_states = 1;
  mdp.n_actions = 1;
  mdp.P = Eigen::MatrixXd::Ones(1, 1);
  mdp.m = Eigen::MatrixXd::Constant(1, 1, m);
  mdp.sigma2 = Eigen::MatrixXd::Constant(1, 1, sigma2);
  mdp.gamma = gamma;
  return mdp;
}

/// Two states; action 1 in state 0 pays 1 and stays, everything else pays 0.
TabularMDP rewarding_chain() {
  TabularMDP mdp;
  mdp.n_states = 2;
  mdp.n_actions = 2;
  mdp.P.resize(4, 2);
  mdp.P << 0, 1,  // s0 a0 -> s1
      1, 0,       // s0 a1 -> s0
      1, 0,       // s1 a0 -> s0
      0, 1;       // s1 a1 -> s1
  mdp.m = Eigen::MatrixXd::Zero(2, 2);
  mdp.m(0, 1) = 1.0;
  mdp.sigma2 = Eigen::MatrixXd::Zero(2, 2);
  mdp.gamma = 0.9;
  return mdp;
}

/// Exo and endo chains that ignore each other.
ExoEndoTabularMDP decoupled(std::mt19937_64& rng) {
  ExoEndoTabularMDP mdp = oracle::random_exo_endo(rng, 3, 3, 2);
  mdp.n_exo = 3;
  mdp.n_endo = 3;
  mdp.n_actions = 2;
  mdp.Px = oracle::random_stochastic(3, 3, rng);
  mdp.mx = Eigen::Vector3d(0.5, -1.0, 2.0);
  mdp.sigma2x = Eigen::Vector3d(0.1, 0.2, 0.0);
  const Eigen::MatrixXd pe = oracle::random_stochastic(3 * 2, 3, rng);  // rows (e, a)
  const Eigen::MatrixXd me = Eigen::MatrixXd::Random(3, 2);
  mdp.Pe.resize(9 * 2, 3);
  mdp.me.resize(9, 2);
  mdp.sigma2e = Eigen::MatrixXd::Constant(9, 2, 0.05);
  for (int e = 0; e < 3; ++e)
    for (int x = 0; x < 3; ++x)
      for (int a = 0; a < 2; ++a) {
        mdp.Pe.row((e * 3 + x) * 2 + a) = pe.row(e * 2 + a);
        mdp.me(e * 3 + x, a) = me(e, a);
      }
  mdp.x0 = mdp.e0 = 0;
  mdp.validate();
  return mdp;
}

}  // namespace

TEST(ValueDp, ZeroHorizon) {
  std::mt19937_64 rng(1);
  const TabularMDP mdp = oracle::random_tabular(rng);
  const auto pi = oracle::random_policy(mdp.n_states, mdp.n_actions, rng);
  EXPECT_EQ(value_dp(mdp, pi, 0).norm(), 0.0);
  EXPECT_EQ(variance_dp(mdp, pi, 0).norm(), 0.0);
}

TEST(ValueDp, GeometricSum) {
  const TabularMDP mdp = single_state(2.0, 0.0, 0.8);
  EXPECT_NEAR(value_dp(mdp, Policy{0}, 2)(0, 2), 2.0 * (1.0 + 0.8), 1e-15);
}

TEST(ValueDp, ZeroDiscountGivesImmediateReward) {
  std::mt19937_64 rng(2);
  TabularMDP mdp = oracle::random_tabular(rng);
  mdp.gamma = 0.0;
  const auto pi = oracle::random_policy(mdp.n_states, mdp.n_actions, rng);
  const auto V = value_dp(mdp, pi, 3);
  const auto Var = variance_dp(mdp, pi, 3);
  for (int s = 0; s < mdp.n_states; ++s) {
    EXPECT_EQ(V(s, 3), mdp.m(s, pi[s]));
    EXPECT_NEAR(Var(s, 3), mdp.sigma2(s, pi[s]), 1e-15);
  }
}

TEST(ValueDp, RejectsNegativeHorizonAndBadPolicy) {
  const TabularMDP mdp = single_state(1.0, 0.0, 0.5);
  EXPECT_THROW(value_dp(mdp, Policy{0}, -1), std::invalid_argument);
  EXPECT_THROW(value_dp(mdp, Policy{1}, 1), std::invalid_argument);
  EXPECT_THROW(value_dp(mdp, Policy{0, 0}, 1), std::invalid_argument);
}

TEST(VarianceDp, OneStepIsRewardVariance) {
  std::mt19937_64 rng(3);
  const TabularMDP mdp = oracle::random_tabular(rng);
  const auto pi = oracle::random_policy(mdp.n_states, mdp.n_actions, rng);
  const auto Var = variance_dp(mdp, pi, 1);
  for (int s = 0; s < mdp.n_states; ++s) EXPECT_NEAR(Var(s, 1), mdp.sigma2(s, pi[s]), 1e-12);
}

TEST(VarianceDp, NeverNegative) {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 30; ++rep) {
    const TabularMDP mdp = oracle::random_tabular(rng);
    const auto pi = oracle::random_policy(mdp.n_states, mdp.n_actions, rng);
    EXPECT_GE(variance_dp(mdp, pi, 8).minCoeff(), -1e-10);
  }
}

TEST(MomentDp, MatchesMonteCarloRollouts) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 3; ++rep) {
    const TabularMDP mdp = oracle::random_tabular(rng, 5, 2);
    const auto pi = oracle::random_policy(mdp.n_states, mdp.n_actions, rng);
    const int H = 6;
    const auto rets = oracle::rollout_returns(mdp, pi, 0, H, 200000, rng);
    const auto mean = oracle::mean_of(rets), var = oracle::variance_of(rets);
    EXPECT_TRUE(mean.within(value_dp(mdp, pi, H)(0, H))) << mean.value << " vs " << value_dp(mdp, pi, H)(0, H);
    EXPECT_TRUE(var.within(variance_dp(mdp, pi, H)(0, H))) << var.value << " vs " << variance_dp(mdp, pi, H)(0, H);
  }
}

TEST(CovarianceDp, ZeroHorizon) {
  std::mt19937_64 rng(6);
  const auto mdp = oracle::random_exo_endo(rng);
  const auto pi = oracle::random_policy(mdp.n_states(), mdp.n_actions, rng);
  EXPECT_EQ(covariance_dp(mdp, pi, 0).norm(), 0.0);
}

TEST(CovarianceDp, DecoupledChainsAreUncorrelated) {
  std::mt19937_64 rng(7);
  const auto mdp = decoupled(rng);
  // A policy that ignores x keeps the endogenous chain independent of x.
  Policy pi(9);
  for (int e = 0; e < 3; ++e)
    for (int x = 0; x < 3; ++x) pi[e * 3 + x] = e % 2;
  EXPECT_LT(covariance_dp(mdp, pi, 12).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(CovarianceDp, MatchesMonteCarloRollouts) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 3; ++rep) {
    const auto mdp = oracle::random_exo_endo(rng);
    const auto pi = oracle::random_policy(mdp.n_states(), mdp.n_actions, rng);
    const int H = 6;
    const auto split = oracle::rollout_split(mdp, pi, mdp.x0, mdp.e0, H, 200000, rng);
    const auto cov = oracle::covariance_of(split.exo, split.endo);
    const double dp = covariance_dp(mdp, pi, H)(mdp.start_state(), H);
    EXPECT_TRUE(cov.within(dp)) << cov.value << " +- " << cov.se << " vs " << dp;
  }
}

TEST(CovarianceDp, FullVarianceDecomposes) {
  // Var[B] = Var[B_x] + Var[B_e] + 2 Cov[B_x, B_e].
  std::mt19937_64 rng(9);
  for (int rep = 0; rep < 10; ++rep) {
    const auto mdp = oracle::random_exo_endo(rng);
    const auto pi = oracle::random_policy(mdp.n_states(), mdp.n_actions, rng);
    const auto m = exo_endo_moments(mdp, pi, 7);
    for (int e = 0; e < mdp.n_endo; ++e)
      for (int x = 0; x < mdp.n_exo; ++x) {
        const int s = mdp.state_index(e, x);
        EXPECT_NEAR(m.Var_full(s, 7), m.Var_exo(x, 7) + m.Var_endo(s, 7) + 2.0 * m.Cov(s, 7), 1e-10);
        EXPECT_NEAR(m.V_full(s, 7), m.V_exo(x, 7) + m.V_endo(s, 7), 1e-10);
      }
  }
}

TEST(CovarianceCondition, Cases) {
  EXPECT_FALSE(covariance_condition(0.235, -0.194));
  EXPECT_TRUE(covariance_condition(1.0, 0.0));
  EXPECT_FALSE(covariance_condition(0.0, 0.0));
  EXPECT_THROW(covariance_condition(-1.0, 0.0), std::invalid_argument);
}

TEST(ChebychevBound, Cases) {
  EXPECT_EQ(chebychev_bound(1.0, 0.5, 0.1), 40);
  EXPECT_EQ(chebychev_bound(0.0, 0.3, 0.2), 1);
  EXPECT_EQ(chebychev_bound(4.0, 1.0, 0.04), 100);
  EXPECT_EQ(chebychev_bound(1.0, 1.0, 0.3), 4);
  EXPECT_THROW(chebychev_bound(1.0, 0.0, 0.1), std::invalid_argument);
  EXPECT_THROW(chebychev_bound(1.0, 0.5, 1.0), std::invalid_argument);
}

TEST(SolveOptimal, SingleActionIsPolicyEvaluation) {
  std::mt19937_64 rng(10);
  const TabularMDP mdp = oracle::random_tabular(rng, 5, 1);
  const auto sol = solve_optimal(mdp, 6);
  EXPECT_LT((sol.V - value_dp(mdp, Policy(mdp.n_states, 0), 6)).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(SolveOptimal, PicksRewardingAction) {
  const auto sol = solve_optimal(rewarding_chain(), 5);
  for (int h = 1; h <= 5; ++h) EXPECT_EQ(sol.policy[h][0], 1);
}

TEST(SolveOptimal, TiesGoToLowestAction) {
  TabularMDP mdp = single_state(0.0, 0.0, 0.5);
  mdp.n_actions = 3;
  mdp.P = Eigen::MatrixXd::Ones(3, 1);
  mdp.m = Eigen::MatrixXd::Zero(1, 3);
  mdp.sigma2 = Eigen::MatrixXd::Zero(1, 3);
  EXPECT_EQ(solve_optimal(mdp, 2).policy[2][0], 0);
}

TEST(SolveOptimal, MatchesExhaustiveEnumeration) {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 3; ++rep) {
    TabularMDP mdp = oracle::random_tabular(rng, 3, 2);
    mdp.n_states = 3;
    mdp.n_actions = 2;
    mdp.P = oracle::random_stochastic(6, 3, rng);
    mdp.m = Eigen::MatrixXd::Random(3, 2);
    mdp.sigma2 = Eigen::MatrixXd::Zero(3, 2);
    const int H = 4;
    EXPECT_NEAR(solve_optimal(mdp, H).V(0, H), oracle::brute_force_optimal(mdp, 0, H), 1e-10);
  }
}

TEST(ExoEndoValues, ZeroExogenousReward) {
  std::mt19937_64 rng(12);
  auto mdp = oracle::random_exo_endo(rng);
  mdp.mx.setZero();
  mdp.sigma2x.setZero();
  const auto v = exo_endo_values(mdp, 6);
  EXPECT_EQ(v.V_exo.norm(), 0.0);
  EXPECT_LT((v.V_full - v.V_end).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ExoEndoValues, OneStep) {
  std::mt19937_64 rng(13);
  const auto mdp = oracle::random_exo_endo(rng);
  const auto v = exo_endo_values(mdp, 1);
  for (int e = 0; e < mdp.n_endo; ++e)
    for (int x = 0; x < mdp.n_exo; ++x) {
      EXPECT_EQ(v.V_exo(x, 1), mdp.mx(x));
      EXPECT_EQ(v.V_end(mdp.state_index(e, x), 1), mdp.me.row(mdp.state_index(e, x)).maxCoeff());
    }
}

TEST(ExoEndoValues, AdditivityAndPolicyTransfer) {
  std::mt19937_64 rng(14);
  for (int rep = 0; rep < 20; ++rep) {
    const auto mdp = oracle::random_exo_endo(rng, 3, 4, 2);
    const int H = 10;
    const auto v = exo_endo_values(mdp, H);
    EXPECT_LT((v.V_full - v.exo_on_full(mdp) - v.V_end).cwiseAbs().maxCoeff(), 1e-10);
    const auto transfer = value_dp(flatten(mdp), v.endo_policy, H);
    EXPECT_LT((transfer - v.V_full).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Flatten, FactorizedTransitions) {
  std::mt19937_64 rng(15);
  const auto mdp = oracle::random_exo_endo(rng);
  const TabularMDP full = flatten(mdp);
  const int s = mdp.state_index(mdp.n_endo - 1, mdp.n_exo - 1), a = mdp.n_actions - 1;
  for (int e2 = 0; e2 < mdp.n_endo; ++e2)
    for (int x2 = 0; x2 < mdp.n_exo; ++x2)
      EXPECT_DOUBLE_EQ(full.transition(s, a)(mdp.state_index(e2, x2)),
                       mdp.Px(mdp.n_exo - 1, x2) * mdp.endo_transition(mdp.n_endo - 1, mdp.n_exo - 1, a)(e2));
}

TEST(TextFormat, TabularRoundTrip) {
  std::mt19937_64 rng(16);
  const TabularMDP mdp = oracle::random_tabular(rng);
  TokenStream ts(format_mdp(mdp));
  ts.expect("tabular_mdp");
  const TabularMDP back = parse_tabular_mdp(ts);
  EXPECT_EQ(back.P, mdp.P);
  EXPECT_EQ(back.m, mdp.m);
  EXPECT_EQ(back.sigma2, mdp.sigma2);
  EXPECT_EQ(back.gamma, mdp.gamma);
}

TEST(TextFormat, ExoEndoRoundTrip) {
  std::mt19937_64 rng(17);
  const auto mdp = oracle::random_exo_endo(rng);
  TokenStream ts(format_mdp(mdp));
  ts.expect("exo_endo_mdp");
  const auto back = parse_exo_endo_mdp(ts);
  EXPECT_EQ(format_mdp(back), format_mdp(mdp));
}

TEST(TextFormat, PolicyRoundTripAndErrors) {
  const Policy pi{0, 2, 1, 1, 0};
  EXPECT_EQ(parse_policy(format_policy(pi)), pi);
  EXPECT_THROW(parse_policy("policy 3\n0 1\n"), ParseError);
  EXPECT_THROW(parse_policy("policy 2\n0 1 2\n"), ParseError);
}

TEST(TextFormat, RowsThatDoNotSumToOneAreRejected) {
  TokenStream ts("2 1 0.9 0\nP\n0.5 0.4\n1 0\nm\n0\n0\nsigma2\n0\n0\n");
  EXPECT_THROW(parse_tabular_mdp(ts), ParseError);
}
