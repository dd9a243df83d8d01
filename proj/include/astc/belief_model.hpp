#pragma once

#include "astc/common.hpp"
#include "astc/episode_store.hpp"
#include "astc/gmm.hpp"
#include "astc/text_io.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace astc {

/// Probability vector over the K continuation (non-terminal) latent states.
using Belief = Vec;

/// Stick-breaking prior that ranks destination states by centroid distance.
struct GemPrior {
  double c1 = 0.0;     // discount, 0 <= c1 < 1
  double c2 = 1.0;     // concentration, c2 > -c1
  double kappa = 1.0;  // total pseudo-count mass

  void validate() const {
    if (!(c1 >= 0.0 && c1 < 1.0)) throw ConfigError("gem: c1 must lie in [0,1)");
    if (!(c2 > -c1)) throw ConfigError("gem: c2 must exceed -c1");
    if (!(kappa > 0.0)) throw ConfigError("gem: kappa must be positive");
  }
};

/// Expected stick-breaking proportions: V_k is the mean of Beta(1-c1, c2+k*c1),
/// p_k = V_k * prod_{j<k}(1-V_j), and the stick left after K-1 breaks goes to p_K.
inline Vec gem_proportions(double c1, double c2, int K) {
  if (K < 1) throw ConfigError("gem: K must be >= 1");
  if (!(c1 >= 0.0 && c1 < 1.0) || !(c2 > -c1)) throw ConfigError("gem: invalid (c1, c2)");
  Vec p(K);
  double remaining = 1.0;
  for (int k = 1; k < K; ++k) {
    double a = 1.0 - c1;
    double b = c2 + k * c1;
    double v = a / (a + b);
    p[k - 1] = remaining * v;
    remaining *= 1.0 - v;
  }
  p[K - 1] = remaining;
  return p;
}

/// Prior transition row out of state s: GEM mass over continuation states ranked
/// by centroid distance (s first, ties by index), p_term per terminal column,
/// renormalized. Length K+2 (K continuation states, discharge, death).
inline Vec transition_prior(const std::vector<Vec>& centroids, int s, const GemPrior& gem, double p_term) {
  const int K = static_cast<int>(centroids.size());
  if (s < 0 || s >= K) throw ConfigError("transition_prior: state out of range");
  if (p_term < 0.0) throw ConfigError("transition_prior: p_term must be >= 0");
  std::vector<int> order(static_cast<std::size_t>(K));
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> dist(static_cast<std::size_t>(K));
  for (int j = 0; j < K; ++j) dist[static_cast<std::size_t>(j)] = (centroids[static_cast<std::size_t>(j)] - centroids[static_cast<std::size_t>(s)]).norm();
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (a == s || b == s) return a == s && b != s;
    return dist[static_cast<std::size_t>(a)] < dist[static_cast<std::size_t>(b)];
  });
  Vec mass = gem_proportions(gem.c1, gem.c2, K);
  Vec row = Vec::Zero(K + 2);
  for (int rank = 0; rank < K; ++rank) row[order[static_cast<std::size_t>(rank)]] = mass[rank];
  row[K] = p_term;
  row[K + 1] = p_term;
  return row / row.sum();
}

/// Dirichlet-MAP style smoothing of one count row toward a prior row.
inline Vec map_row(const Vec& counts, const Vec& prior, double kappa) {
  return (counts + kappa * prior) / (counts.sum() + kappa);
}

/// Discrete planning model built on the mixture's latent states.
struct PomdpModel {
  int K = 0;
  int n_actions = 0;
  /// Per action, K x (K+2) row-stochastic: continuation states, then discharge, death.
  std::vector<Mat> T;
  /// Per action, expected immediate reward R(s, a).
  std::vector<Vec> R;
  /// K x n_cells, C(s', k) = P(observation cell k | continuation state s').
  Mat C;
  Vec state_prior;
  double gamma = 0.99;
  double r_discharge = 10.0;
  double r_death = -10.0;
  /// Hash of the configuration that produced the model.
  std::string config_hash;

  int n_cells() const { return static_cast<int>(C.cols()); }
  int discharge_col() const { return K; }
  int death_col() const { return K + 1; }

  void validate() const {
    if (K < 1 || n_actions < 1) throw ConfigError("pomdp: empty model");
    if (static_cast<int>(T.size()) != n_actions || static_cast<int>(R.size()) != n_actions)
      throw ConfigError("pomdp: per-action tables missing");
    for (int a = 0; a < n_actions; ++a) {
      const auto& t = T[static_cast<std::size_t>(a)];
      if (t.rows() != K || t.cols() != K + 2) throw ConfigError("pomdp: transition table has wrong shape");
      for (int s = 0; s < K; ++s)
        if (!is_simplex(t.row(s).transpose())) throw ConfigError("pomdp: transition row not stochastic");
      if (R[static_cast<std::size_t>(a)].size() != K || !R[static_cast<std::size_t>(a)].allFinite())
        throw ConfigError("pomdp: reward table invalid");
    }
    if (C.rows() != K || C.cols() < 1) throw ConfigError("pomdp: observation channel has wrong shape");
    for (int s = 0; s < K; ++s)
      if (!is_simplex(C.row(s).transpose())) throw ConfigError("pomdp: observation channel row not stochastic");
    if (!is_simplex(state_prior) || state_prior.size() != K) throw ConfigError("pomdp: invalid state prior");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("pomdp: gamma must lie in [0,1)");
  }

  TextDoc to_doc() const {
    TextDoc doc("pomdp");
    doc.put("config_hash", config_hash.empty() ? "-" : config_hash);
    doc.put_int("K", K);
    doc.put_int("n_actions", n_actions);
    doc.put_double("gamma", gamma);
    doc.put_double("r_discharge", r_discharge);
    doc.put_double("r_death", r_death);
    doc.put_vec("state_prior", state_prior);
    doc.put_mat("C", C);
    for (int a = 0; a < n_actions; ++a) {
      doc.put_mat("T_" + std::to_string(a), T[static_cast<std::size_t>(a)]);
      doc.put_vec("R_" + std::to_string(a), R[static_cast<std::size_t>(a)]);
    }
    return doc;
  }

  static PomdpModel from_doc(const TextDoc& doc) {
    PomdpModel m;
    m.config_hash = doc.raw("config_hash");
    if (m.config_hash == "-") m.config_hash.clear();
    m.K = static_cast<int>(doc.get_int("K"));
    m.n_actions = static_cast<int>(doc.get_int("n_actions"));
    m.gamma = doc.get_double("gamma");
    m.r_discharge = doc.get_double("r_discharge");
    m.r_death = doc.get_double("r_death");
    m.state_prior = doc.get_vec("state_prior");
    m.C = doc.get_mat("C");
    for (int a = 0; a < m.n_actions; ++a) {
      m.T.push_back(doc.get_mat("T_" + std::to_string(a)));
      m.R.push_back(doc.get_vec("R_" + std::to_string(a)));
    }
    m.validate();
    return m;
  }

  void save(const std::string& path) const { to_doc().save(path); }
  static PomdpModel load(const std::string& path) { return from_doc(TextDoc::load(path, "pomdp")); }
};

enum class RewardMode { medical, general };

struct TransitionFitConfig {
  GemPrior gem;
  double p_term = 0.01;
  bool soft_counts = true;
  RewardMode reward_mode = RewardMode::medical;
  double gamma = 0.99;
  double r_discharge = 10.0;
  double r_death = -10.0;
};

/// Soft transition counts per action, K x (K+2).
inline std::vector<Mat> transition_counts(const Dataset& ds, const GmmModel& gmm, const ActionBinning& bins,
                                          bool soft) {
  const int K = gmm.K();
  std::vector<Mat> N(static_cast<std::size_t>(bins.n_joint()), Mat::Zero(K, K + 2));
  auto state_probs = [&](const Vec& o) -> Vec {
    if (soft) return gmm.posterior(o);
    Vec p = Vec::Zero(K);
    p[gmm.map_component(o)] = 1.0;
    return p;
  };
  for (const auto& ep : ds.episodes) {
    Vec cur = state_probs(ep.steps[0].obs);
    for (std::size_t t = 0; t < ep.steps.size(); ++t) {
      const auto& step = ep.steps[t];
      auto& n = N[static_cast<std::size_t>(bins.bin_of(step.action))];
      if (step.is_terminal) {
        if (step.outcome == Outcome::discharge) n.col(K) += cur;
        if (step.outcome == Outcome::death) n.col(K + 1) += cur;
        break;
      }
      Vec next = state_probs(ep.steps[t + 1].obs);
      n.leftCols(K) += cur * next.transpose();
      cur = std::move(next);
    }
  }
  return N;
}

/// MAP transition tables with GEM-shaped pseudo-counts plus the reward table.
/// The observation channel is left empty; see build_observation_channel.
inline PomdpModel fit_transitions(const Dataset& ds, const GmmModel& gmm, const ActionBinning& bins,
                                  const TransitionFitConfig& cfg = {}) {
  cfg.gem.validate();
  if (!(cfg.gamma >= 0.0 && cfg.gamma < 1.0)) throw ConfigError("gamma must lie in [0,1)");
  const int K = gmm.K();
  PomdpModel m;
  m.K = K;
  m.n_actions = bins.n_joint();
  m.gamma = cfg.gamma;
  m.r_discharge = cfg.r_discharge;
  m.r_death = cfg.r_death;
  m.state_prior = gmm.weights();

  Mat prior(K, K + 2);
  for (int s = 0; s < K; ++s) prior.row(s) = transition_prior(gmm.means(), s, cfg.gem, cfg.p_term).transpose();

  auto N = transition_counts(ds, gmm, bins, cfg.soft_counts);
  for (int a = 0; a < m.n_actions; ++a) {
    const Mat& n = N[static_cast<std::size_t>(a)];
    if (n.sum() == 0.0) log::warn("action bin " + std::to_string(a) + " has no transitions; rows equal the prior");
    Mat t(K, K + 2);
    for (int s = 0; s < K; ++s) t.row(s) = map_row(n.row(s).transpose(), prior.row(s).transpose(), cfg.gem.kappa).transpose();
    m.T.push_back(std::move(t));
  }

  if (cfg.reward_mode == RewardMode::medical) {
    for (int a = 0; a < m.n_actions; ++a) {
      const Mat& t = m.T[static_cast<std::size_t>(a)];
      m.R.push_back(cfg.r_discharge * t.col(K) + cfg.r_death * t.col(K + 1));
    }
  } else {
    std::vector<Vec> num(static_cast<std::size_t>(m.n_actions), Vec::Zero(K));
    std::vector<Vec> den(static_cast<std::size_t>(m.n_actions), Vec::Zero(K));
    for (const auto& ep : ds.episodes)
      for (const auto& step : ep.steps) {
        auto a = static_cast<std::size_t>(bins.bin_of(step.action));
        Vec p = gmm.posterior(step.obs);
        num[a] += step.reward * p;
        den[a] += p;
      }
    for (int a = 0; a < m.n_actions; ++a) {
      Vec r(K);
      for (int s = 0; s < K; ++s) {
        double d = den[static_cast<std::size_t>(a)][s];
        r[s] = d > 0.0 ? num[static_cast<std::size_t>(a)][s] / d : 0.0;
      }
      m.R.push_back(r);
    }
  }
  return m;
}

/// Monte Carlo confusion table between latent states and MAP-component cells.
inline Mat build_observation_channel(const GmmModel& gmm, int m_samples, std::uint64_t seed) {
  if (m_samples < 1) throw ConfigError("observation channel: m_samples must be >= 1");
  const int K = gmm.K();
  Mat C = Mat::Zero(K, K);
  for (int s = 0; s < K; ++s) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(s)));
    for (int i = 0; i < m_samples; ++i) C(s, gmm.map_component(gmm.sample(s, rng))) += 1.0;
    C.row(s) /= C.row(s).sum();
  }
  return C;
}

inline Belief initial_belief(const PomdpModel& model) { return model.state_prior; }

/// Continuation-state prediction sum_s T(s, s') b(s) (not normalized).
inline Vec propagate(const PomdpModel& model, const Belief& b, int a) {
  return model.T[static_cast<std::size_t>(a)].leftCols(model.K).transpose() * b;
}

inline double expected_reward(const PomdpModel& model, const Belief& b, int a) {
  return model.R[static_cast<std::size_t>(a)].dot(b);
}

struct TerminalProbs {
  double discharge = 0.0;
  double death = 0.0;
};

inline TerminalProbs terminal_probs(const PomdpModel& model, const Belief& b, int a) {
  const Mat& t = model.T[static_cast<std::size_t>(a)];
  return {t.col(model.K).dot(b), t.col(model.K + 1).dot(b)};
}

struct BeliefStep {
  Belief belief;
  /// For a cell update: joint probability of continuing and observing the cell.
  /// For an exact update: probability of continuing.
  double prob = 0.0;
};

/// Discrete-cell belief update. prob = 0 means the branch is impossible and the
/// returned belief is empty.
inline BeliefStep belief_update_cell(const PomdpModel& model, const Belief& b, int a, int cell) {
  if (cell < 0 || cell >= model.n_cells()) throw ConfigError("belief_update_cell: cell out of range");
  Vec un = model.C.col(cell).cwiseProduct(propagate(model, b, a));
  double p = un.sum();
  if (!(p > 0.0)) return {Vec(), 0.0};
  return {un / p, p};
}

/// Conditions a belief on a continuous observation: b'(s) ∝ b(s) P(s|o) / P(s).
inline Belief condition_on_observation(const PomdpModel& model, const GmmModel& gmm, const Belief& b,
                                       const Vec& o) {
  Vec post = gmm.posterior(o);
  Vec un = b.cwiseProduct(post).cwiseQuotient(model.state_prior);
  double z = un.sum();
  if (!(z >= 1e-300) || !std::isfinite(z)) {
    log::warn("belief update: observation conflicts with the model; using the observation posterior");
    return post;
  }
  return un / z;
}

/// Belief update on a real observation vector using the mixture posterior.
inline BeliefStep belief_update_exact(const PomdpModel& model, const GmmModel& gmm, const Belief& b, int a,
                                      const Vec& o) {
  if (!o.allFinite()) throw DataError("belief update: non-finite observation");
  Vec pred = propagate(model, b, a);
  auto term = terminal_probs(model, b, a);
  double p_continue = b.sum() - term.discharge - term.death;
  Vec un = pred.cwiseProduct(gmm.posterior(o)).cwiseQuotient(model.state_prior);
  double z = un.sum();
  if (!(z >= 1e-300) || !std::isfinite(z)) {
    log::warn("belief update: observation conflicts with the model; using the observation posterior");
    return {gmm.posterior(o), p_continue};
  }
  return {un / z, p_continue};
}

}  // namespace astc
