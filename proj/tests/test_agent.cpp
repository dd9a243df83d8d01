#include "test_util.hpp"

using namespace astc;
using astc::testing::make_episode;
using astc::testing::random_simplex;
using astc::testing::vec;

namespace {

ActorParams random_actor(Rng& rng, int K, int d) {
  ActorParams p;
  p.u = Mat(K, d);
  for (int i = 0; i < K * d; ++i) p.u(i / d, i % d) = standard_normal(rng);
  p.sigma = 0.2 + uniform01(rng);
  return p;
}

/// Two well-separated 1-D states, sticky transitions, a handful of episodes with
/// continuous doses in [0, 1].
struct Fixture {
  GmmModel gmm;
  Dataset ds;
  ActionBinning bins;
  PomdpModel model;
};

Fixture make_fixture(std::uint64_t seed, int n_episodes = 12) {
  Fixture f;
  f.gmm = GmmModel(vec({0.5, 0.5}), {vec({0}), vec({3})}, {Mat::Constant(1, 1, 0.5), Mat::Constant(1, 1, 0.5)});
  f.ds.d_obs = 1;
  f.ds.d_act = 1;
  Rng rng(seed);
  for (long long id = 0; id < n_episodes; ++id) {
    int len = 1 + static_cast<int>(uniform_index(rng, 5));
    std::vector<Vec> obs;
    std::vector<double> acts;
    int s = static_cast<int>(uniform_index(rng, 2));
    for (int t = 0; t < len; ++t) {
      obs.push_back(f.gmm.sample(s, rng));
      acts.push_back(uniform01(rng));
      if (uniform01(rng) < 0.3) s = 1 - s;
    }
    f.ds.episodes.push_back(make_episode(id, obs, acts, s == 0 ? Outcome::discharge : Outcome::death));
  }
  f.bins = fit_action_bins(f.ds, 3, false);
  TransitionFitConfig tc;
  tc.gamma = 0.9;
  f.model = fit_transitions(f.ds, f.gmm, f.bins, tc);
  f.model.C = build_observation_channel(f.gmm, 2000, 1);
  f.model.validate();
  return f;
}

/// Behavior density floored everywhere; with rho_max = 1 every ratio is exactly 1.
BehaviorPolicy flat_behavior(const Dataset& ds) {
  std::map<long long, std::vector<double>> probs;
  for (const auto& ep : ds.episodes) probs[ep.id] = std::vector<double>(ep.steps.size(), 1.0);
  return BehaviorPolicy::known_discrete(probs, 1e12);
}

}  // namespace

TEST(Actor, DensityAtMeanAndScore) {
  ActorParams p;
  p.u = Mat::Constant(1, 1, 0.0);
  p.sigma = 1.0;
  EXPECT_NEAR(actor_density(p, vec({1}), vec({0})), 1.0 / std::sqrt(2 * M_PI), 1e-15);
  EXPECT_NEAR(actor_density(p, vec({1}), vec({0})), 0.3989, 1e-4);
  EXPECT_NEAR(actor_score(p, vec({1}), vec({2}))(0, 0), 2.0, 1e-15);

  Rng rng(1);
  auto q = random_actor(rng, 3, 2);
  Vec b = random_simplex(rng, 3);
  EXPECT_EQ(actor_score(q, b, q.mean(b)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Actor, ScoreMatchesFiniteDifferences) {
  Rng rng(2);
  const double h = 1e-5;
  for (int trial = 0; trial < 100; ++trial) {
    int K = 1 + static_cast<int>(uniform_index(rng, 4));
    int d = 1 + static_cast<int>(uniform_index(rng, 3));
    auto p = random_actor(rng, K, d);
    Vec b = random_simplex(rng, K);
    Vec a = p.mean(b);
    for (int i = 0; i < d; ++i) a[i] += p.sigma * standard_normal(rng);
    Mat g = actor_score(p, b, a);
    for (int k = 0; k < K; ++k)
      for (int j = 0; j < d; ++j) {
        auto plus = p, minus = p;
        plus.u(k, j) += h;
        minus.u(k, j) -= h;
        double fd = (actor_log_density(plus, b, a) - actor_log_density(minus, b, a)) / (2 * h);
        EXPECT_NEAR(g(k, j), fd, 1e-6);
      }
  }
}

TEST(Actor, MonteCarloScoreMeanVanishes) {
  Rng rng(3);
  auto p = random_actor(rng, 3, 2);
  Vec b = random_simplex(rng, 3);
  Mat sum = Mat::Zero(3, 2);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    Vec a = p.mean(b);
    for (int j = 0; j < 2; ++j) a[j] += p.sigma * standard_normal(rng);
    sum += actor_score(p, b, a);
  }
  EXPECT_LT((sum / n).norm(), 3e-2);
}

TEST(ImportanceRatio, DivisionAndClip) {
  EXPECT_DOUBLE_EQ(importance_ratio(0.2, 0.1), 2.0);
  EXPECT_EQ(importance_ratio(5.0, 0.1), 10.0);
  EXPECT_EQ(importance_ratio(5.0, 0.1, 5.0), 5.0);
  EXPECT_EQ(importance_ratio(0.0, 0.1), 0.0);
  EXPECT_EQ(importance_ratio(1e-7, 0.0), 0.1);
}

TEST(ImportanceRatio, IdenticalGaussiansGiveOne) {
  Rng rng(4);
  auto p = random_actor(rng, 3, 2);
  auto behavior = BehaviorPolicy::fitted_gaussian(p.u, Vec::Constant(2, p.sigma * p.sigma));
  for (int i = 0; i < 50; ++i) {
    Vec b = random_simplex(rng, 3);
    Vec a = p.mean(b) + 0.3 * vec({standard_normal(rng), standard_normal(rng)});
    EXPECT_NEAR(importance_ratio(p, behavior, 0, 0, b, a), 1.0, 1e-12);
  }
}

TEST(Behavior, KnownDiscreteUsesCellVolume) {
  auto bins = fit_action_bins(
      [] {
        Dataset ds;
        ds.d_obs = 1;
        ds.d_act = 1;
        ds.episodes.push_back(make_episode(0, std::vector<Vec>(6, vec({0})), {0, 1, 2, 3, 4, 5}, Outcome::death));
        return ds;
      }(),
      6, false);
  double vol = BehaviorPolicy::grid_cell_volume(bins, ActionScale::from_binning(bins));
  EXPECT_NEAR(vol, 0.2, 1e-15);
  auto pol = BehaviorPolicy::known_discrete({{7, {0.5, 0.05}}}, vol);
  EXPECT_NEAR(pol.density(7, 0, vec({1}), vec({0})), 2.5, 1e-12);
  EXPECT_NEAR(pol.density(7, 1, vec({1}), vec({0})), 0.25, 1e-12);
  EXPECT_THROW(pol.density(8, 0, vec({1}), vec({0})), DataError);
  EXPECT_THROW(pol.density(7, 2, vec({1}), vec({0})), DataError);
}

TEST(Behavior, FittedGaussianRecoversPerStateMeans) {
  GmmModel gmm(vec({0.5, 0.5}), {vec({0}), vec({10})}, {Mat::Constant(1, 1, 0.01), Mat::Constant(1, 1, 0.01)});
  PomdpModel m;
  m.K = 2;
  m.n_actions = 1;
  Mat t(2, 4);
  t << 0.9, 0.05, 0.03, 0.02, 0.05, 0.9, 0.03, 0.02;
  m.T = {t};
  m.R = {Vec::Zero(2)};
  m.C = Mat::Identity(2, 2);
  m.state_prior = vec({0.5, 0.5});
  Dataset ds;
  ds.d_obs = 1;
  ds.d_act = 1;
  Rng rng(5);
  std::vector<double> unit_by_state[2];
  for (long long id = 0; id < 200; ++id) {
    int s = static_cast<int>(id % 2);
    double a = (s == 0 ? 1.0 : 3.0) + 0.1 * standard_normal(rng);
    ds.episodes.push_back(make_episode(id, {gmm.sample(s, rng)}, {a}, Outcome::discharge));
  }
  auto bins = fit_action_bins(ds, 2, false);
  auto scale = ActionScale::from_binning(bins);
  for (const auto& ep : ds.episodes) {
    int s = gmm.map_component(ep.steps[0].obs);
    unit_by_state[s].push_back(scale.to_unit(ep.steps[0].action)[0]);
  }
  auto pol = fit_behavior(ds, m, gmm, bins, scale);
  double var = 0;
  for (int s = 0; s < 2; ++s) {
    double mean = 0;
    for (double x : unit_by_state[s]) mean += x / unit_by_state[s].size();
    EXPECT_NEAR(pol.coef()(s, 0), mean, 1e-9);
    for (double x : unit_by_state[s]) var += (x - mean) * (x - mean) / 200.0;
  }
  EXPECT_NEAR(pol.variance()[0], var, 1e-9);
  auto back = BehaviorPolicy::from_doc(TextDoc::parse(pol.to_doc().str(), "behavior"));
  EXPECT_EQ(back.coef(), pol.coef());
}

TEST(Critic, UpdateRules) {
  CriticParams c;
  c.w = BoundWeights::uniform(2, 0, 0);
  critic_update(c, vec({1, 0}), 1.0, 1.0);
  EXPECT_NEAR(c.w.lower[0], 0.1, 1e-15);
  EXPECT_EQ(c.w.lower[1], 0.0);
  EXPECT_NEAR(c.w.upper[0], 0.1, 1e-15);

  CriticParams z;
  z.w = {vec({1, 2}), vec({3, 4})};
  Vec b = vec({0.25, 0.75});
  critic_update(z, b, z.w.lower.dot(b), z.w.upper.dot(b));
  EXPECT_EQ(z.w.lower, vec({1, 2}));
  EXPECT_EQ(z.w.upper, vec({3, 4}));
}

TEST(Critic, ErrorNeverIncreasesAndConverges) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    CriticParams c;
    c.w = {Vec::Zero(3), Vec::Zero(3)};
    Vec b = random_simplex(rng, 3);
    double target = standard_normal(rng) * 5;
    double prev = std::abs(target - c.w.lower.dot(b));
    for (int i = 0; i < 200; ++i) {
      critic_update(c, b, target, target + 1);
      double err = std::abs(target - c.w.lower.dot(b));
      EXPECT_LE(err, prev + 1e-15);
      prev = err;
    }
    EXPECT_LT(prev, 1e-3 * (1 + std::abs(target)));
  }
}

TEST(Trace, RecursionCases) {
  ActorParams p;
  p.u = Mat::Zero(2, 1);
  TraceState tr;
  tr.e = Mat::Zero(2, 1);
  tr.lambda = 0.8;
  tr.alpha = 0.5;
  Mat g1 = vec({1, 2}), g2 = vec({-3, 0.5});
  actor_update(p, tr, 0.0, 1.0, g1, 0.9);
  actor_update(p, tr, 0.0, 1.0, g2, 0.9);
  EXPECT_LT((tr.e - (0.72 * g1 + g2)).norm(), 1e-15);

  actor_update(p, tr, 1.0, 0.0, g1, 0.9);
  EXPECT_EQ(tr.e.norm(), 0.0);
  EXPECT_EQ(p.u.norm(), 0.0);

  tr.lambda = 0.0;
  tr.e = vec({5, 5});
  actor_update(p, tr, 2.0, 1.0, g2, 0.9);
  EXPECT_EQ(tr.e, g2);
  EXPECT_LT((p.u - 0.5 * 2.0 * g2).norm(), 1e-15);

  Mat before = p.u;
  EXPECT_FALSE(actor_update(p, tr, NAN, 1.0, g1, 0.9));
  EXPECT_EQ(p.u, before);
}

TEST(Trace, LinearInScores) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    ActorParams p1, p2;
    p1.u = p2.u = Mat::Zero(3, 2);
    TraceState t1, t2;
    t1.e = t2.e = Mat::Zero(3, 2);
    double c = standard_normal(rng);
    for (int s = 0; s < 6; ++s) {
      Mat g = Mat::Random(3, 2);
      double rho = uniform01(rng) * 2;
      actor_update(p1, t1, 0.3, rho, g, 0.95);
      actor_update(p2, t2, 0.3, rho, c * g, 0.95);
      EXPECT_LT((t2.e - c * t1.e).cwiseAbs().maxCoeff(), 1e-12);
    }
  }
}

TEST(TdError, Cases) {
  EXPECT_EQ(td_error(10, 123, 8, 0.99, true), 2.0);
  EXPECT_NEAR(td_error(0, 5, 4.95, 0.99, false), 0.0, 1e-15);
  Rng rng(8);
  for (int i = 0; i < 20; ++i) {
    double r = standard_normal(rng), v1 = standard_normal(rng), v0 = standard_normal(rng), g = uniform01(rng);
    EXPECT_EQ(td_error(r, v1, v0, g, false), r + g * v1 - v0);
  }
}

TEST(Agent, SafeBoundsAndInit) {
  Rng rng(9);
  auto m = astc::testing::random_pomdp(rng, 3, 2, 0.5, 2.0);
  auto t = safe_initial_bounds(m, true);
  EXPECT_EQ(t.lower, Vec::Constant(3, -10));
  EXPECT_EQ(t.upper, Vec::Constant(3, 10));
  auto g = safe_initial_bounds(m, false);
  EXPECT_EQ(g.lower, Vec::Zero(3));
  double rmax = std::max(m.R[0].maxCoeff(), m.R[1].maxCoeff());
  EXPECT_NEAR(g.upper[0], rmax / (1 - m.gamma), 1e-12);
}

TEST(Agent, CheckpointRoundTrip) {
  auto f = make_fixture(1);
  AgentConfig cfg;
  auto a = init_agent(f.model, f.bins, cfg);
  a.actor.u(1, 0) = 0.123456789012345;
  a.config_hash = "h1";
  auto back = AgentState::from_doc(TextDoc::parse(a.to_doc().str(), "checkpoint"));
  EXPECT_EQ(back.to_doc().str(), a.to_doc().str());
  EXPECT_EQ(back.actor.u, a.actor.u);
}

TEST(Agent, FixedCriticMatchesVanillaPolicyGradient) {
  auto f = make_fixture(11, 20);
  AgentConfig cfg;
  cfg.alpha = 0.002;
  cfg.lambda = 0.0;
  cfg.sigma = 0.7;
  cfg.rho_max = 1.0;
  cfg.project_mean = false;
  cfg.shuffle = false;
  auto agent = init_agent(f.model, f.bins, cfg);
  agent.critic.w = {vec({-3, 1}), vec({2, 6})};
  SearchBudget zero;
  zero.max_expansions = 0;
  auto behavior = flat_behavior(f.ds);

  // Oracle: u <- u + alpha * (r + gamma v' - v) * d/du log N(a; u^T b, sigma^2), in data order.
  Mat u = agent.actor.u;
  const Mat u0 = u;
  const Vec wmid = 0.5 * (agent.critic.w.lower + agent.critic.w.upper);
  const double s2 = cfg.sigma * cfg.sigma;
  for (const auto& ep : f.ds.episodes) {
    auto beliefs = replay_beliefs(ep, f.model, f.gmm, f.bins);
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const Vec& b = beliefs[t];
      double v = wmid.dot(b);
      double vnext = ep.steps[t].is_terminal ? 0.0 : wmid.dot(beliefs[t + 1]);
      double delta = ep.steps[t].reward + f.model.gamma * vnext - v;
      Vec a = agent.scale.to_unit(ep.steps[t].action);
      Mat grad(u.rows(), u.cols());
      for (Eigen::Index k = 0; k < u.rows(); ++k)
        for (Eigen::Index j = 0; j < u.cols(); ++j) grad(k, j) = b[k] * (a[j] - u.col(j).dot(b)) / s2;
      u += cfg.alpha * delta * grad;
    }
  }

  auto m = train_epoch(f.ds, f.model, f.gmm, f.bins, agent, zero, cfg, behavior);
  EXPECT_EQ(m.skipped_episodes, 0u);
  EXPECT_EQ(m.actor_updates, f.ds.n_steps());
  EXPECT_DOUBLE_EQ(m.mean_rho, 1.0);
  EXPECT_LT((agent.actor.u - u).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(agent.critic.w.lower, vec({-3, 1}));
  EXPECT_GT((agent.actor.u - u0).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Agent, SingleStepEpisodeGetsOneOfEach) {
  auto f = make_fixture(2);
  Dataset one;
  one.d_obs = 1;
  one.d_act = 1;
  one.episodes.push_back(make_episode(5, {vec({0.1})}, {0.5}, Outcome::discharge));
  AgentConfig cfg;
  auto agent = init_agent(f.model, f.bins, cfg);
  auto m = train_epoch(one, f.model, f.gmm, f.bins, agent, SearchBudget{}, cfg, flat_behavior(one));
  EXPECT_EQ(m.steps, 1u);
  EXPECT_EQ(m.actor_updates, 1u);
  Belief b = condition_on_observation(f.model, f.gmm, initial_belief(f.model), vec({0.1}));
  EXPECT_NEAR(agent.critic.m_lower, 0.99 + 0.01 * b.squaredNorm(), 1e-15);
  EXPECT_EQ(agent.epochs_done, 1);
}

TEST(Agent, TruncatedEpisodeHasNoFinalActorUpdate) {
  auto f = make_fixture(3);
  Dataset one;
  one.d_obs = 1;
  one.d_act = 1;
  one.episodes.push_back(make_episode(5, {vec({0.1}), vec({2.9})}, {0.5, 0.2}, Outcome::none));
  AgentConfig cfg;
  auto agent = init_agent(f.model, f.bins, cfg);
  auto m = train_epoch(one, f.model, f.gmm, f.bins, agent, SearchBudget{}, cfg, flat_behavior(one));
  EXPECT_EQ(m.actor_updates, 1u);
}

TEST(Agent, EpochIsBitReproducible) {
  auto f = make_fixture(4, 30);
  AgentConfig cfg;
  cfg.alpha = 0.01;
  cfg.seed = 99;
  auto a1 = init_agent(f.model, f.bins, cfg);
  auto a2 = a1;
  auto behavior = flat_behavior(f.ds);
  for (int e = 0; e < 2; ++e) {
    train_epoch(f.ds, f.model, f.gmm, f.bins, a1, SearchBudget{}, cfg, behavior);
    train_epoch(f.ds, f.model, f.gmm, f.bins, a2, SearchBudget{}, cfg, behavior);
  }
  EXPECT_EQ(a1.to_doc().str(), a2.to_doc().str());
  EXPECT_NE(a1.actor.u, init_agent(f.model, f.bins, cfg).actor.u);
}

TEST(Agent, ProjectionKeepsMeanInRange) {
  auto f = make_fixture(5, 40);
  AgentConfig cfg;
  cfg.alpha = 5.0;
  auto agent = init_agent(f.model, f.bins, cfg);
  train_epoch(f.ds, f.model, f.gmm, f.bins, agent, SearchBudget{}, cfg, flat_behavior(f.ds));
  EXPECT_GE(agent.actor.u.minCoeff(), 0.0);
  EXPECT_LE(agent.actor.u.maxCoeff(), 1.0);
}

TEST(Agent, ProposalModes) {
  auto f = make_fixture(6);
  AgentConfig cfg;
  auto agent = init_agent(f.model, f.bins, cfg);
  agent.scale = ActionScale::identity(1);
  agent.actor.u.setZero();
  Vec b = vec({0.3, 0.7});
  SearchBudget budget;
  EXPECT_EQ(propose_action(agent, f.model, f.bins, b, ProposalMode::mean, budget), Vec::Zero(1));

  agent.actor.u = vec({0.2, 0.6});
  agent.actor.sigma = 1e-9;
  Rng rng(1);
  Vec s = propose_action(agent, f.model, f.bins, b, ProposalMode::sample, budget, &rng);
  EXPECT_NEAR(s[0], 0.06 + 0.42, 1e-8);
  EXPECT_THROW(propose_action(agent, f.model, f.bins, b, ProposalMode::sample, budget), ConfigError);

  Vec tree = propose_action(agent, f.model, f.bins, b, ProposalMode::tree, budget);
  auto res = search(f.model, agent.critic.w, b, budget);
  EXPECT_EQ(tree, f.bins.representative(res.best_root_action_bin));
  EXPECT_THROW(parse_proposal_mode("greedy"), ConfigError);
}
