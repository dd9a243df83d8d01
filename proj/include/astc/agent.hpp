#pragma once

#include "astc/belief_model.hpp"
#include "astc/bounded_tree.hpp"
#include "astc/common.hpp"
#include "astc/episode_store.hpp"
#include "astc/gmm.hpp"
#include "astc/text_io.hpp"

#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace astc {

/// Affine map between recorded dose units and the unit scale the actor works in.
struct ActionScale {
  Vec offset;
  Vec scale;

  static ActionScale from_binning(const ActionBinning& bins) {
    ActionScale s{bins.range_min, bins.range_max - bins.range_min};
    for (Eigen::Index i = 0; i < s.scale.size(); ++i)
      if (!(s.scale[i] > 0.0)) s.scale[i] = 1.0;
    return s;
  }
  static ActionScale identity(int d) { return {Vec::Zero(d), Vec::Ones(d)}; }

  Vec to_unit(const Vec& a) const { return (a - offset).cwiseQuotient(scale); }
  Vec from_unit(const Vec& x) const { return x.cwiseProduct(scale) + offset; }
};

/// Gaussian actor pi(a | b) = N(u^T b, sigma^2 I).
struct ActorParams {
  Mat u;  // K x d_act
  double sigma = 0.1;

  Vec mean(const Belief& b) const { return u.transpose() * b; }
};

inline double actor_log_density(const ActorParams& actor, const Belief& b, const Vec& a) {
  Vec diff = a - actor.mean(b);
  const double s2 = actor.sigma * actor.sigma;
  return -0.5 * diff.squaredNorm() / s2 -
         static_cast<double>(a.size()) * (std::log(actor.sigma) + 0.5 * std::log(2.0 * M_PI));
}

inline double actor_density(const ActorParams& actor, const Belief& b, const Vec& a) {
  return std::exp(actor_log_density(actor, b, a));
}

/// grad_u pi / pi = b (a - u^T b)^T / sigma^2.
inline Mat actor_score(const ActorParams& actor, const Belief& b, const Vec& a) {
  return b * (a - actor.mean(b)).transpose() / (actor.sigma * actor.sigma);
}

/// Behavior-policy density pi_b(a_t | b_t) on the unit action scale.
///
/// Known-discrete mode looks up the recorded probability of the taken action per
/// (episode id, step) and spreads it uniformly over the action's grid cell of
/// volume `cell_volume`, so it is comparable with the actor's density. Fitted
/// mode evaluates a per-dimension linear-Gaussian model of the unit-scaled
/// action on the belief.
class BehaviorPolicy {
 public:
  static constexpr double kFloor = 1e-6;

  static BehaviorPolicy known_discrete(std::map<long long, std::vector<double>> taken_probs, double cell_volume = 1.0) {
    if (!(cell_volume > 0.0)) throw ConfigError("behavior policy: cell volume must be positive");
    BehaviorPolicy p;
    p.known_ = std::move(taken_probs);
    p.cell_volume_ = cell_volume;
    return p;
  }

  /// Volume of one grid cell of a binning on the unit action scale.
  static double grid_cell_volume(const ActionBinning& bins, const ActionScale& scale) {
    double v = 1.0;
    for (int d = 0; d < bins.d_act(); ++d) {
      const auto& r = bins.representatives[static_cast<std::size_t>(d)];
      if (r.size() > 1) v *= (r.back() - r.front()) / static_cast<double>(r.size() - 1) / scale.scale[d];
    }
    return v;
  }

  static BehaviorPolicy fitted_gaussian(Mat coef, Vec variance) {
    BehaviorPolicy p;
    p.coef_ = std::move(coef);
    p.var_ = std::move(variance);
    return p;
  }

  bool is_known_discrete() const { return !known_.empty(); }
  const Mat& coef() const { return coef_; }
  const Vec& variance() const { return var_; }

  /// Density at the unit-scaled action, floored at kFloor.
  double density(long long episode_id, std::size_t t, const Belief& b, const Vec& a_unit) const {
    double d = 0.0;
    if (is_known_discrete()) {
      auto it = known_.find(episode_id);
      if (it == known_.end() || t >= it->second.size())
        throw DataError("behavior policy: no recorded probability for episode " + std::to_string(episode_id));
      d = it->second[t] / cell_volume_;
    } else {
      Vec mu = coef_.transpose() * b;
      double log_d = 0.0;
      for (Eigen::Index i = 0; i < a_unit.size(); ++i) {
        double diff = a_unit[i] - mu[i];
        log_d += -0.5 * diff * diff / var_[i] - 0.5 * std::log(2.0 * M_PI * var_[i]);
      }
      d = std::exp(log_d);
    }
    return std::max(d, kFloor);
  }

  TextDoc to_doc() const {
    TextDoc doc("behavior");
    doc.put_mat("coef", coef_);
    doc.put_vec("variance", var_);
    return doc;
  }
  static BehaviorPolicy from_doc(const TextDoc& doc) { return fitted_gaussian(doc.get_mat("coef"), doc.get_vec("variance")); }

 private:
  std::map<long long, std::vector<double>> known_;
  double cell_volume_ = 1.0;
  Mat coef_;
  Vec var_;
};

inline double importance_ratio(double target_density, double behavior_density, double rho_max = 10.0) {
  double r = target_density / std::max(behavior_density, BehaviorPolicy::kFloor);
  return std::clamp(r, 0.0, rho_max);
}

inline double importance_ratio(const ActorParams& actor, const BehaviorPolicy& behavior, long long episode_id,
                               std::size_t t, const Belief& b, const Vec& a_unit, double rho_max = 10.0) {
  return importance_ratio(actor_density(actor, b, a_unit), behavior.density(episode_id, t, b, a_unit), rho_max);
}

/// Linear bound critics with running-mean step-size state.
struct CriticParams {
  BoundWeights w;
  double m_lower = 1.0;
  double m_upper = 1.0;
};

/// Semi-gradient regression of each bound toward the matching root bound, with
/// step size 0.1 / E[|b|^2] tracked by an exponential running mean.
inline void critic_update(CriticParams& critic, const Belief& b, double root_lower, double root_upper) {
  const double nb = b.squaredNorm();
  critic.m_lower = 0.99 * critic.m_lower + 0.01 * nb;
  critic.m_upper = 0.99 * critic.m_upper + 0.01 * nb;
  if (critic.m_lower < 1e-12 || critic.m_upper < 1e-12) {
    log::warn("critic: running belief norm vanished; update skipped");
    return;
  }
  const double beta_l = 0.1 / critic.m_lower;
  const double beta_u = 0.1 / critic.m_upper;
  const double err_l = root_lower - critic.w.lower.dot(b);
  const double err_u = root_upper - critic.w.upper.dot(b);
  critic.w.lower += beta_l * err_l * b;
  critic.w.upper += beta_u * err_u * b;
}

struct TraceState {
  Mat e;  // K x d_act
  double lambda = 0.8;
  double alpha = 0.01;

  void reset() { e.setZero(); }
};

/// e <- rho (gamma lambda e + score);  u <- u + alpha delta e.
/// Returns false (and leaves everything unchanged) for a non-finite delta.
inline bool actor_update(ActorParams& actor, TraceState& trace, double delta, double rho, const Mat& score,
                         double gamma) {
  if (!std::isfinite(delta)) {
    log::warn("actor: non-finite TD error; step skipped");
    return false;
  }
  trace.e = rho * (gamma * trace.lambda * trace.e + score);
  actor.u += trace.alpha * delta * trace.e;
  return true;
}

inline double td_error(double reward, double value_next, double value_curr, double gamma, bool terminal) {
  return reward + gamma * (terminal ? 0.0 : value_next) - value_curr;
}

struct AgentConfig {
  double alpha = 4e-5;
  double lambda = 0.3;
  double sigma = 0.15;
  double rho_max = 5.0;
  /// Initial actor mean on the unit action scale.
  double actor_init = 0.5;
  /// Keep every entry of u inside the recorded action range [0, 1] after each update.
  bool project_mean = true;
  std::uint64_t seed = 0;
  bool shuffle = true;
};

struct AgentState {
  ActorParams actor;
  CriticParams critic;
  TraceState trace;
  ActionScale scale;
  int epochs_done = 0;
  std::string config_hash;
  std::string model_config_hash;

  TextDoc to_doc() const {
    TextDoc doc("checkpoint");
    doc.put("config_hash", config_hash.empty() ? "-" : config_hash);
    doc.put("model_config_hash", model_config_hash.empty() ? "-" : model_config_hash);
    doc.put_int("epochs_done", epochs_done);
    doc.put_double("sigma", actor.sigma);
    doc.put_mat("u", actor.u);
    doc.put_vec("w_lower", critic.w.lower);
    doc.put_vec("w_upper", critic.w.upper);
    doc.put_double("m_lower", critic.m_lower);
    doc.put_double("m_upper", critic.m_upper);
    doc.put_double("alpha", trace.alpha);
    doc.put_double("lambda", trace.lambda);
    doc.put_vec("action_offset", scale.offset);
    doc.put_vec("action_scale", scale.scale);
    return doc;
  }

  static AgentState from_doc(const TextDoc& doc) {
    AgentState s;
    s.config_hash = doc.raw("config_hash");
    s.model_config_hash = doc.raw("model_config_hash");
    if (s.config_hash == "-") s.config_hash.clear();
    if (s.model_config_hash == "-") s.model_config_hash.clear();
    s.epochs_done = static_cast<int>(doc.get_int("epochs_done"));
    s.actor.sigma = doc.get_double("sigma");
    s.actor.u = doc.get_mat("u");
    s.critic.w.lower = doc.get_vec("w_lower");
    s.critic.w.upper = doc.get_vec("w_upper");
    s.critic.m_lower = doc.get_double("m_lower");
    s.critic.m_upper = doc.get_double("m_upper");
    s.trace.alpha = doc.get_double("alpha");
    s.trace.lambda = doc.get_double("lambda");
    s.trace.e = Mat::Zero(s.actor.u.rows(), s.actor.u.cols());
    s.scale.offset = doc.get_vec("action_offset");
    s.scale.scale = doc.get_vec("action_scale");
    if (!(s.actor.sigma > 0.0)) throw DataError("checkpoint: sigma must be positive");
    return s;
  }

  void save(const std::string& path) const { to_doc().save(path); }
  static AgentState load(const std::string& path) { return from_doc(TextDoc::load(path, "checkpoint")); }
};

/// Value bounds valid for every belief. With terminal-only rewards the return is a
/// single discounted terminal reward; otherwise the geometric-series bounds apply.
inline BoundWeights safe_initial_bounds(const PomdpModel& model, bool terminal_only_rewards) {
  if (terminal_only_rewards) {
    double lo = std::min({0.0, model.r_death, model.r_discharge});
    double hi = std::max({0.0, model.r_death, model.r_discharge});
    return BoundWeights::uniform(model.K, lo, hi);
  }
  double rmin = 0.0, rmax = 0.0;
  for (const auto& r : model.R) {
    rmin = std::min(rmin, r.minCoeff());
    rmax = std::max(rmax, r.maxCoeff());
  }
  return BoundWeights::uniform(model.K, rmin / (1.0 - model.gamma), rmax / (1.0 - model.gamma));
}

inline AgentState init_agent(const PomdpModel& model, const ActionBinning& bins, const AgentConfig& cfg,
                             bool terminal_only_rewards = true) {
  if (!(cfg.sigma > 0.0)) throw ConfigError("agent: sigma must be positive");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw ConfigError("agent: lambda must lie in [0,1]");
  AgentState s;
  s.scale = ActionScale::from_binning(bins);
  s.actor.u = Mat::Constant(model.K, bins.d_act(), cfg.actor_init);
  s.actor.sigma = cfg.sigma;
  s.critic.w = safe_initial_bounds(model, terminal_only_rewards);
  s.trace.e = Mat::Zero(model.K, bins.d_act());
  s.trace.lambda = cfg.lambda;
  s.trace.alpha = cfg.alpha;
  return s;
}

/// Belief trajectory of an episode replayed with its recorded actions:
/// entry t is the belief before acting at step t.
inline std::vector<Belief> replay_beliefs(const Episode& ep, const PomdpModel& model, const GmmModel& gmm,
                                          const ActionBinning& bins) {
  std::vector<Belief> out;
  out.reserve(ep.steps.size());
  Belief b = condition_on_observation(model, gmm, initial_belief(model), ep.steps[0].obs);
  for (std::size_t t = 0; t < ep.steps.size(); ++t) {
    out.push_back(b);
    if (ep.steps[t].is_terminal) break;
    b = belief_update_exact(model, gmm, b, bins.bin_of(ep.steps[t].action), ep.steps[t + 1].obs).belief;
  }
  return out;
}

/// Least-squares linear-Gaussian fit of the unit-scaled recorded actions on beliefs.
inline BehaviorPolicy fit_behavior(const Dataset& ds, const PomdpModel& model, const GmmModel& gmm,
                                   const ActionBinning& bins, const ActionScale& scale) {
  std::vector<Belief> B;
  std::vector<Vec> A;
  for (const auto& ep : ds.episodes) {
    auto beliefs = replay_beliefs(ep, model, gmm, bins);
    for (std::size_t t = 0; t < beliefs.size(); ++t) {
      B.push_back(beliefs[t]);
      A.push_back(scale.to_unit(ep.steps[t].action));
    }
  }
  if (B.empty()) throw DataError("behavior fit: no steps");
  const auto n = static_cast<Eigen::Index>(B.size());
  Mat X(n, model.K), Y(n, ds.d_act);
  for (Eigen::Index i = 0; i < n; ++i) {
    X.row(i) = B[static_cast<std::size_t>(i)].transpose();
    Y.row(i) = A[static_cast<std::size_t>(i)].transpose();
  }
  Mat coef = X.completeOrthogonalDecomposition().solve(Y);
  Mat resid = Y - X * coef;
  Vec var = resid.colwise().squaredNorm().transpose() / static_cast<double>(n);
  var = var.cwiseMax(1e-6);
  return BehaviorPolicy::fitted_gaussian(std::move(coef), std::move(var));
}

struct EpochMetrics {
  int epoch = 0;
  double mean_abs_delta = 0.0;
  double mean_root_gap = 0.0;
  double mean_rho = 0.0;
  std::size_t steps = 0;
  std::size_t actor_updates = 0;
  std::size_t skipped_episodes = 0;
};

namespace detail {

struct PendingActorStep {
  double reward = 0.0;
  double value = 0.0;
  double rho = 0.0;
  Mat score;
};

}  // namespace detail

/// One pass over the dataset. Per step: search from the current belief, regress
/// the critics toward the root bounds, then apply the actor update of the
/// previous step (its TD error needs this step's tree value). Terminal steps
/// update immediately with a zero next value; truncated episodes (terminal
/// without outcome) have no final actor update.
inline EpochMetrics train_epoch(const Dataset& ds, const PomdpModel& model, const GmmModel& gmm,
                                const ActionBinning& bins, AgentState& agent, const SearchBudget& budget,
                                const AgentConfig& cfg, const BehaviorPolicy& behavior) {
  EpochMetrics m;
  m.epoch = agent.epochs_done + 1;
  std::vector<std::size_t> order(ds.episodes.size());
  std::iota(order.begin(), order.end(), 0);
  if (cfg.shuffle) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(agent.epochs_done)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  }
  double sum_delta = 0.0, sum_gap = 0.0, sum_rho = 0.0;

  for (std::size_t idx : order) {
    const Episode& ep = ds.episodes[idx];
    // Work on copies so a failing episode leaves the agent untouched.
    ActorParams actor = agent.actor;
    CriticParams critic = agent.critic;
    TraceState trace = agent.trace;
    trace.reset();
    double ep_delta = 0.0, ep_gap = 0.0, ep_rho = 0.0;
    std::size_t ep_updates = 0;
    try {
      Belief b = condition_on_observation(model, gmm, initial_belief(model), ep.steps[0].obs);
      std::optional<detail::PendingActorStep> pending;
      for (std::size_t t = 0; t < ep.steps.size(); ++t) {
        const auto& step = ep.steps[t];
        auto res = search(model, critic.w, b, budget);
        ep_gap += res.root_upper - res.root_lower;
        critic_update(critic, b, res.root_lower, res.root_upper);

        if (pending) {
          double delta = td_error(pending->reward, res.root_value, pending->value, model.gamma, false);
          if (actor_update(actor, trace, delta, pending->rho, pending->score, model.gamma)) {
            ep_delta += std::abs(delta);
            ++ep_updates;
            if (cfg.project_mean) actor.u = actor.u.cwiseMax(0.0).cwiseMin(1.0);
          }
          pending.reset();
        }

        Vec a_unit = agent.scale.to_unit(step.action);
        double rho = importance_ratio(actor, behavior, ep.id, t, b, a_unit, cfg.rho_max);
        ep_rho += rho;
        detail::PendingActorStep cur{step.reward, res.root_value, rho, actor_score(actor, b, a_unit)};

        if (step.is_terminal) {
          if (step.outcome != Outcome::none) {
            double delta = td_error(cur.reward, 0.0, cur.value, model.gamma, true);
            if (actor_update(actor, trace, delta, cur.rho, cur.score, model.gamma)) {
              ep_delta += std::abs(delta);
              ++ep_updates;
              if (cfg.project_mean) actor.u = actor.u.cwiseMax(0.0).cwiseMin(1.0);
            }
          }
          break;
        }
        pending = std::move(cur);
        b = belief_update_exact(model, gmm, b, bins.bin_of(step.action), ep.steps[t + 1].obs).belief;
        if (!is_simplex(b, 1e-6)) throw DataError("belief left the simplex");
      }
    } catch (const Error& e) {
      log::warn("training: episode " + std::to_string(ep.id) + " skipped (" + e.what() + ")");
      ++m.skipped_episodes;
      continue;
    }
    agent.actor = std::move(actor);
    agent.critic = std::move(critic);
    agent.trace = std::move(trace);
    m.steps += ep.steps.size();
    m.actor_updates += ep_updates;
    sum_delta += ep_delta;
    sum_gap += ep_gap;
    sum_rho += ep_rho;
  }
  if (m.actor_updates) m.mean_abs_delta = sum_delta / static_cast<double>(m.actor_updates);
  if (m.steps) {
    m.mean_root_gap = sum_gap / static_cast<double>(m.steps);
    m.mean_rho = sum_rho / static_cast<double>(m.steps);
  }
  agent.epochs_done += 1;
  return m;
}

enum class ProposalMode { mean, sample, tree };

inline ProposalMode parse_proposal_mode(const std::string& s) {
  if (s == "mean") return ProposalMode::mean;
  if (s == "sample") return ProposalMode::sample;
  if (s == "tree") return ProposalMode::tree;
  throw ConfigError("unknown action mode '" + s + "'");
}

/// Proposed action in recorded dose units.
inline Vec propose_action(const AgentState& agent, const PomdpModel& model, const ActionBinning& bins,
                          const Belief& b, ProposalMode mode, const SearchBudget& budget, Rng* rng = nullptr) {
  switch (mode) {
    case ProposalMode::mean:
      return agent.scale.from_unit(agent.actor.mean(b));
    case ProposalMode::sample: {
      if (!rng) throw ConfigError("sample mode needs a random generator");
      Vec x = agent.actor.mean(b);
      for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += agent.actor.sigma * standard_normal(*rng);
      return agent.scale.from_unit(x);
    }
    case ProposalMode::tree:
    default: {
      auto res = search(model, agent.critic.w, b, budget);
      return bins.representative(res.best_root_action_bin);
    }
  }
}

}  // namespace astc
