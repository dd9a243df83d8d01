#include "test_util.hpp"

#include <sstream>

using namespace astc;
using astc::testing::vec;

namespace {

SynthSpec default_spec(std::uint64_t seed = 1) { return make_spec(SynthConfig{}, seed); }

/// Two states, two actions. Action 0 in state 0 discharges with certainty;
/// everything else stays put.
SynthSpec two_state_chain() {
  SynthSpec sp;
  sp.K = 2;
  sp.d_obs = 1;
  sp.n_actions = 2;
  sp.means = {vec({0}), vec({1})};
  sp.covs = {Mat::Identity(1, 1), Mat::Identity(1, 1)};
  sp.shifts = {0, 0};
  Mat t0(2, 4), t1(2, 4);
  t0 << 0, 0, 1, 0, 0, 1, 0, 0;
  t1 << 1, 0, 0, 0, 0, 1, 0, 0;
  sp.T = {t0, t1};
  sp.initial = vec({0.5, 0.5});
  sp.gamma = 0.99;
  return sp;
}

}  // namespace

TEST(SynthSpec, RowsAreStochastic) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto sp = default_spec(seed);
    ASSERT_EQ(sp.T.size(), 6u);
    for (const auto& t : sp.T)
      for (int s = 0; s < sp.K; ++s) {
        EXPECT_NEAR(t.row(s).sum(), 1.0, 1e-12);
        EXPECT_GE(t.row(s).minCoeff(), 0.0);
      }
  }
}

TEST(SynthSpec, TemperatureLimits) {
  SynthConfig cold;
  cold.temperature = 1e-3;
  auto c = make_spec(cold, 1);
  SynthConfig hot;
  hot.temperature = 1e6;
  auto h = make_spec(hot, 1);
  for (int a = 0; a < 6; ++a)
    for (int s = 0; s < 5; ++s) {
      int dest = std::clamp(s + c.shifts[static_cast<std::size_t>(a)], 0, 4);
      double cont = 1.0 - c.T[static_cast<std::size_t>(a)](s, 5) - c.T[static_cast<std::size_t>(a)](s, 6);
      EXPECT_NEAR(c.T[static_cast<std::size_t>(a)](s, dest), cont, 1e-12);
      Vec row = h.T[static_cast<std::size_t>(a)].row(s).head(5).transpose();
      EXPECT_LT((row.array() - row.mean()).abs().maxCoeff(), 1e-5);
    }
}

TEST(SynthSpec, StayActionHasZeroShiftAndCentroidsAreDistinct) {
  auto sp = default_spec();
  EXPECT_EQ(sp.shifts, (std::vector<int>{-2, -1, 0, 1, 2, 3}));
  for (int i = 0; i < sp.K; ++i)
    for (int j = i + 1; j < sp.K; ++j) EXPECT_GT((sp.means[i] - sp.means[j]).norm(), 1.0);
  SynthConfig bad;
  bad.K_true = 1;
  EXPECT_THROW(make_spec(bad, 1), ConfigError);
  bad = SynthConfig{};
  bad.p_terminal = 0.5;
  EXPECT_THROW(make_spec(bad, 1), ConfigError);
}

TEST(SolveMdp, CertainDischargeIsWorthTen) {
  auto o = solve_mdp(two_state_chain());
  EXPECT_NEAR(o.q_table(0, 0), 10.0, 1e-9);
  EXPECT_EQ(o.pi_star[0], 0);
  EXPECT_NEAR(o.q_table(0, 1), 0.99 * 10.0, 1e-9);
  EXPECT_NEAR(o.q_table(1, 0), 0.0, 1e-9);
  EXPECT_LT(o.bellman_residual, 1e-9);
}

TEST(SolveMdp, IdenticalActionsTieToLowest) {
  auto sp = default_spec();
  for (auto& t : sp.T) t = sp.T[0];
  auto o = solve_mdp(sp);
  for (int s = 0; s < sp.K; ++s) {
    EXPECT_EQ(o.pi_star[static_cast<std::size_t>(s)], 0);
    for (int a = 1; a < sp.n_actions; ++a) EXPECT_EQ(o.q_table(s, a), o.q_table(s, 0));
  }
}

TEST(SolveMdp, DefaultBenchmarkPolicyAndResidual) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto o = solve_mdp(default_spec(seed));
    EXPECT_EQ(o.pi_star, (std::vector<int>{4, 3, 2, 1, 0}));
    EXPECT_LT(o.bellman_residual, 1e-9);
    for (int s = 0; s < 5; ++s) EXPECT_NEAR(o.value[s], o.q_table.row(s).maxCoeff(), 1e-9);
  }
}

TEST(Generate, GreedyLimitFollowsOptimalPolicy) {
  auto sp = default_spec();
  auto o = solve_mdp(sp);
  auto data = generate(sp, o, 200, 0.0, 60, 5);
  for (const auto& ep : data.dataset.episodes) {
    const auto& tr = data.truth.at(ep.id);
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      EXPECT_EQ(ep.steps[t].action[0], o.pi_star[static_cast<std::size_t>(tr.states[t])]);
      EXPECT_EQ(tr.taken_prob[t], 1.0);
    }
  }
  validate_dataset(data.dataset);
}

TEST(Generate, UniformLimitFrequencies) {
  auto sp = default_spec();
  auto o = solve_mdp(sp);
  std::vector<double> counts(6, 0.0);
  double n = 0;
  long long first = 0;
  while (n < 1e5) {
    auto data = generate(sp, o, 2000, 1.0, 60, 6, first);
    first += 2000;
    for (const auto& ep : data.dataset.episodes)
      for (const auto& s : ep.steps) {
        counts[static_cast<std::size_t>(s.action[0])] += 1;
        n += 1;
      }
  }
  for (double c : counts) EXPECT_NEAR(c / n, 1.0 / 6, 0.02 / 6);
}

TEST(Generate, EpsilonMatchRateAndPmfs) {
  auto sp = default_spec();
  auto o = solve_mdp(sp);
  auto data = generate(sp, o, 5000, 0.3, 60, 7);
  double match = 0, n = 0;
  for (const auto& ep : data.dataset.episodes) {
    const auto& tr = data.truth.at(ep.id);
    ASSERT_EQ(tr.states.size(), ep.steps.size());
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      int a = static_cast<int>(ep.steps[t].action[0]);
      EXPECT_NEAR(tr.behavior_pmf[t].sum(), 1.0, 1e-12);
      EXPECT_GE(tr.taken_prob[t], 0.3 / 6 - 1e-15);
      EXPECT_EQ(tr.taken_prob[t], tr.behavior_pmf[t][a]);
      match += a == o.pi_star[static_cast<std::size_t>(tr.states[t])];
      n += 1;
    }
  }
  EXPECT_NEAR(match / n, 0.7 + 0.3 / 6, 0.01);
  EXPECT_LT((behavior_pmf(2, 6, 0.3) - vec({0.05, 0.05, 0.75, 0.05, 0.05, 0.05})).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Generate, TruncationIsFlagged) {
  SynthConfig cfg;
  cfg.p_terminal = 0.01;
  auto sp = make_spec(cfg, 1);
  auto data = generate(sp, solve_mdp(sp), 50, 0.3, 5, 8);
  int truncated = 0;
  for (const auto& ep : data.dataset.episodes) {
    EXPECT_LE(ep.steps.size(), 5u);
    if (data.truth.at(ep.id).truncated) {
      ++truncated;
      EXPECT_EQ(ep.steps.size(), 5u);
      EXPECT_EQ(ep.outcome(), Outcome::none);
      EXPECT_TRUE(ep.last().is_terminal);
    }
  }
  EXPECT_GT(truncated, 30);
}

TEST(Generate, DeterministicAndReloadable) {
  auto sp = default_spec();
  auto o = solve_mdp(sp);
  auto a = generate(sp, o, 100, 0.3, 60, 9, 10);
  auto b = generate(sp, o, 100, 0.3, 60, 9, 10);
  EXPECT_EQ(a.dataset, b.dataset);
  EXPECT_EQ(a.dataset.episodes.front().id, 10);
  std::stringstream buf;
  write_dataset(a.dataset, buf);
  EXPECT_EQ(parse_dataset(buf), a.dataset);
}

TEST(Truth, JsonRoundTrip) {
  auto sp = default_spec();
  auto o = solve_mdp(sp);
  auto data = generate(sp, o, 20, 0.3, 60, 10);
  TruthFile t{sp, o, 0.3, data.truth};
  auto back = TruthFile::from_json(nlohmann::json::parse(t.to_json().dump()));
  EXPECT_EQ(back.to_json().dump(), t.to_json().dump());
  EXPECT_EQ(back.oracle.pi_star, o.pi_star);
  EXPECT_EQ(back.spec.T[3], sp.T[3]);
  EXPECT_EQ(back.oracle.value, o.q_table.rowwise().maxCoeff());
  EXPECT_EQ(back.taken_probs().at(5), data.truth.at(5).taken_prob);
}

TEST(Generate, FittedModelRecoversTransitions) {
  auto sp = default_spec(3);
  auto o = solve_mdp(sp);
  auto data = generate(sp, o, 5000, 0.3, 60, 11);
  auto obs = data.dataset.all_observations();
  GmmConfig gc;
  gc.n_init = 1;
  auto gmm = fit_em(obs, sp.K, 12, gc);
  // Fitted component order is arbitrary: map each true state to the nearest fitted mean.
  std::vector<int> comp(static_cast<std::size_t>(sp.K));
  for (int s = 0; s < sp.K; ++s) {
    double best = 1e300;
    for (int k = 0; k < gmm.K(); ++k) {
      double d = (gmm.means()[static_cast<std::size_t>(k)] - sp.means[static_cast<std::size_t>(s)]).norm();
      if (d < best) {
        best = d;
        comp[static_cast<std::size_t>(s)] = k;
      }
    }
  }
  auto bins = fit_action_bins(data.dataset, 6, false);
  ASSERT_EQ(bins.n_joint(), 6);
  auto model = fit_transitions(data.dataset, gmm, bins, {});
  double worst = 0;
  for (int a = 0; a < 6; ++a)
    for (int s = 0; s < sp.K; ++s) {
      const Mat& fit = model.T[static_cast<std::size_t>(a)];
      const Mat& tru = sp.T[static_cast<std::size_t>(a)];
      int ks = comp[static_cast<std::size_t>(s)];
      double tv = std::abs(fit(ks, sp.K) - tru(s, sp.K)) + std::abs(fit(ks, sp.K + 1) - tru(s, sp.K + 1));
      for (int s2 = 0; s2 < sp.K; ++s2) tv += std::abs(fit(ks, comp[static_cast<std::size_t>(s2)]) - tru(s, s2));
      worst = std::max(worst, 0.5 * tv);
    }
  EXPECT_LT(worst, 0.1);
}
