#pragma once

#include "astc/agent.hpp"
#include "astc/belief_model.hpp"
#include "astc/common.hpp"
#include "astc/episode_store.hpp"
#include "astc/gmm.hpp"
#include "astc/synth_env.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

namespace astc {

/// Discounted return from the first step. With terminal-only rewards this is
/// gamma^(T-1) * r_(T-1).
inline double discounted_return(const Episode& ep, double gamma) {
  double g = 0.0, disc = 1.0;
  for (const auto& s : ep.steps) {
    g += disc * s.reward;
    disc *= gamma;
  }
  return g;
}

/// Rank-based split into three groups (0 = lowest values). Ties are broken by
/// position, so group sizes never differ by more than one.
inline std::vector<int> tercile_groups(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<int> group(n);
  for (std::size_t r = 0; r < n; ++r) group[order[r]] = static_cast<int>(3 * r / n);
  return group;
}

struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
};

/// Equal-width histogram over [lo, hi]; the top edge is inclusive.
inline Histogram histogram(const std::vector<double>& values, int n_bins, double lo, double hi) {
  if (n_bins < 1) throw ConfigError("histogram needs at least one bin");
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  Histogram h;
  for (int i = 0; i <= n_bins; ++i) h.edges.push_back(lo + (hi - lo) * i / n_bins);
  h.counts.assign(static_cast<std::size_t>(n_bins), 0);
  for (double v : values) {
    if (v < lo || v > hi) continue;
    auto b = static_cast<int>((v - lo) / (hi - lo) * n_bins);
    h.counts[static_cast<std::size_t>(std::min(b, n_bins - 1))] += 1;
  }
  return h;
}

/// Means of `n_resamples` with-replacement resamples.
inline std::vector<double> bootstrap_means(const std::vector<double>& values, int n_resamples, Rng& rng) {
  std::vector<double> out;
  if (values.empty()) return out;
  out.reserve(static_cast<std::size_t>(n_resamples));
  for (int r = 0; r < n_resamples; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[uniform_index(rng, values.size())];
    out.push_back(s / static_cast<double>(values.size()));
  }
  return out;
}

/// Empirical quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  double pos = q * static_cast<double>(v.size() - 1);
  auto i = static_cast<std::size_t>(pos);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - static_cast<double>(i)) * (v[i + 1] - v[i]);
}

struct EpisodeEval {
  long long id = 0;
  Outcome outcome = Outcome::none;
  std::size_t length = 0;
  double ret = 0.0;
  Vec mean_abs_dev;
  std::vector<Vec> proposed;
};

struct TercileRow {
  int dim = 0;
  int group = 0;
  std::size_t n = 0;
  double dev_lo = 0.0;
  double dev_hi = 0.0;
  double mean_return = 0.0;
  double survival_rate = 0.0;
  Histogram returns;
};

struct BootstrapRow {
  int dim = 0;
  std::string group;  // survivors, non_survivors, overall
  std::vector<double> means;
};

struct TraceRow {
  long long episode = 0;
  std::size_t t = 0;
  int true_state = 0;
  int pi_star = 0;
  double behavior_action = 0.0;
  double proposed_action = 0.0;
  int proposed_bin = 0;
};

struct SyntheticScores {
  double match_proposed = 0.0;
  double match_behavior = 0.0;
  std::size_t steps = 0;
  std::vector<TraceRow> traces;
};

struct EvalReport {
  std::vector<EpisodeEval> episodes;
  std::vector<TercileRow> terciles;
  std::vector<BootstrapRow> bootstrap;
  std::optional<SyntheticScores> synthetic;
};

struct EvalConfig {
  ProposalMode mode = ProposalMode::mean;
  int hist_bins = 20;
  int bootstrap = 1000;
  int trace_episodes = 5;
  std::uint64_t seed = 0;
};

/// Replays each episode's beliefs with its recorded actions and compares the
/// agent's proposed action with the recorded one at every step.
inline std::vector<EpisodeEval> evaluate_episodes(const Dataset& ds, const PomdpModel& model, const GmmModel& gmm,
                                                  const ActionBinning& bins, const AgentState& agent,
                                                  const SearchBudget& budget, const EvalConfig& cfg) {
  std::vector<EpisodeEval> out;
  for (const auto& ep : ds.episodes) {
    EpisodeEval e;
    e.id = ep.id;
    e.outcome = ep.outcome();
    e.length = ep.steps.size();
    e.ret = discounted_return(ep, model.gamma);
    e.mean_abs_dev = Vec::Zero(ds.d_act);
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(ep.id)));
    auto beliefs = replay_beliefs(ep, model, gmm, bins);
    for (std::size_t t = 0; t < beliefs.size(); ++t) {
      Vec a = propose_action(agent, model, bins, beliefs[t], cfg.mode, budget, &rng);
      e.mean_abs_dev += (a - ep.steps[t].action).cwiseAbs();
      e.proposed.push_back(std::move(a));
    }
    e.mean_abs_dev /= static_cast<double>(beliefs.size());
    out.push_back(std::move(e));
  }
  return out;
}

inline EvalReport build_report(std::vector<EpisodeEval> episodes, int d_act, const EvalConfig& cfg) {
  EvalReport rep;
  rep.episodes = std::move(episodes);
  const auto& eps = rep.episodes;
  double rlo = 1e300, rhi = -1e300;
  for (const auto& e : eps) {
    rlo = std::min(rlo, e.ret);
    rhi = std::max(rhi, e.ret);
  }

  for (int d = 0; d < d_act; ++d) {
    std::vector<double> dev;
    for (const auto& e : eps) dev.push_back(e.mean_abs_dev[d]);
    auto group = tercile_groups(dev);
    for (int g = 0; g < 3; ++g) {
      TercileRow row;
      row.dim = d;
      row.group = g;
      row.dev_lo = 1e300;
      row.dev_hi = -1e300;
      std::vector<double> rets;
      std::size_t survived = 0;
      for (std::size_t i = 0; i < eps.size(); ++i) {
        if (group[i] != g) continue;
        rets.push_back(eps[i].ret);
        row.dev_lo = std::min(row.dev_lo, dev[i]);
        row.dev_hi = std::max(row.dev_hi, dev[i]);
        if (eps[i].outcome == Outcome::discharge) ++survived;
      }
      row.n = rets.size();
      if (row.n) {
        row.mean_return = std::accumulate(rets.begin(), rets.end(), 0.0) / static_cast<double>(row.n);
        row.survival_rate = static_cast<double>(survived) / static_cast<double>(row.n);
      } else {
        row.dev_lo = row.dev_hi = 0.0;
      }
      row.returns = histogram(rets, cfg.hist_bins, rlo, rhi);
      rep.terciles.push_back(std::move(row));
    }

    Rng rng(derive_seed(cfg.seed, 0xb007 + static_cast<std::uint64_t>(d)));
    std::vector<double> surv, dead;
    for (std::size_t i = 0; i < eps.size(); ++i) {
      if (eps[i].outcome == Outcome::discharge) surv.push_back(dev[i]);
      if (eps[i].outcome == Outcome::death) dead.push_back(dev[i]);
    }
    rep.bootstrap.push_back({d, "survivors", bootstrap_means(surv, cfg.bootstrap, rng)});
    rep.bootstrap.push_back({d, "non_survivors", bootstrap_means(dead, cfg.bootstrap, rng)});
    rep.bootstrap.push_back({d, "overall", bootstrap_means(dev, cfg.bootstrap, rng)});
  }
  return rep;
}

/// Agreement of proposed and recorded actions with pi* at the true latent state.
inline SyntheticScores synthetic_scores(const Dataset& ds, const std::vector<EpisodeEval>& evals,
                                        const TruthFile& truth, const ActionBinning& bins, int trace_episodes) {
  SyntheticScores sc;
  std::size_t hit_p = 0, hit_b = 0;
  for (std::size_t i = 0; i < ds.episodes.size(); ++i) {
    const auto& ep = ds.episodes[i];
    auto it = truth.episodes.find(ep.id);
    if (it == truth.episodes.end()) throw DataError("truth file has no episode " + std::to_string(ep.id));
    const auto& tr = it->second;
    for (std::size_t t = 0; t < evals[i].proposed.size(); ++t) {
      int s = tr.states[t];
      int star = truth.oracle.pi_star[static_cast<std::size_t>(s)];
      int star_bin = bins.bin_of(Vec::Constant(1, star));
      int prop_bin = bins.nearest_bin(evals[i].proposed[t]);
      if (prop_bin == star_bin) ++hit_p;
      if (static_cast<int>(std::lround(ep.steps[t].action[0])) == star) ++hit_b;
      ++sc.steps;
      if (static_cast<int>(i) < trace_episodes)
        sc.traces.push_back({ep.id, t, s, star, ep.steps[t].action[0], evals[i].proposed[t][0], prop_bin});
    }
  }
  if (sc.steps) {
    sc.match_proposed = static_cast<double>(hit_p) / static_cast<double>(sc.steps);
    sc.match_behavior = static_cast<double>(hit_b) / static_cast<double>(sc.steps);
  }
  return sc;
}

}  // namespace astc
