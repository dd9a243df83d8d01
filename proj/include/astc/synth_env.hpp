#pragma once

#include "astc/common.hpp"
#include "astc/episode_store.hpp"

#include <json.hpp>

#include <cmath>
#include <map>
#include <vector>

namespace astc {

struct SynthConfig {
  int K_true = 5;
  int d_obs = 2;
  int n_actions = 6;
  /// Distance between neighbouring emission centroids along the first axis.
  double separation = 4.0;
  double emission_sd = 0.5;
  double temperature = 0.5;
  /// Base per-step terminal probability.
  double p_terminal = 0.15;
  /// Multiplier applied by the stay action to the dominant terminal outcome.
  double boost = 1.0;
  /// Relative increase of the death probability per step a shift would carry
  /// the state past either end of the line.
  double overshoot = 0.5;
  double gamma = 0.99;
  double r_discharge = 10.0;
  double r_death = -10.0;

  void validate() const {
    if (K_true < 2) throw ConfigError("synth: K_true must be at least 2");
    if (d_obs < 1 || n_actions < 1) throw ConfigError("synth: d_obs and n_actions must be positive");
    if (!(temperature > 0.0)) throw ConfigError("synth: temperature must be positive");
    if (!(emission_sd > 0.0)) throw ConfigError("synth: emission_sd must be positive");
    if (!(boost >= 0.0 && overshoot >= 0.0)) throw ConfigError("synth: boost and overshoot must be non-negative");
    double worst = p_terminal * std::max(boost, 1.0) * (1.0 + overshoot * n_actions);
    if (!(p_terminal >= 0.0 && worst <= 1.0)) throw ConfigError("synth: terminal probabilities exceed 1");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw ConfigError("synth: gamma must lie in [0,1)");
  }
};

/// Ground-truth latent MDP with Gaussian emissions. States sit at integer
/// positions 0..K-1; action a moves the intended destination by shift[a].
struct SynthSpec {
  int K = 0;
  int d_obs = 0;
  int n_actions = 0;
  std::vector<Vec> means;
  std::vector<Mat> covs;
  std::vector<int> shifts;
  /// Per action, K x (K+2): continuation states, then discharge, death.
  std::vector<Mat> T;
  Vec initial;
  double gamma = 0.99;
  double r_discharge = 10.0;
  double r_death = -10.0;
  double temperature = 0.5;
  std::uint64_t seed = 0;

  double reward(int s, int a) const {
    const Mat& t = T[static_cast<std::size_t>(a)];
    return r_discharge * t(s, K) + r_death * t(s, K + 1);
  }
};

/// How favourable a state is: 1 at the central state, falling linearly to 0 at the edges.
inline double synth_goodness(int s, int K) {
  double mid = 0.5 * (K - 1);
  return 1.0 - std::abs(s - mid) / mid;
}

inline SynthSpec make_spec(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SynthSpec sp;
  sp.K = cfg.K_true;
  sp.d_obs = cfg.d_obs;
  sp.n_actions = cfg.n_actions;
  sp.gamma = cfg.gamma;
  sp.r_discharge = cfg.r_discharge;
  sp.r_death = cfg.r_death;
  sp.temperature = cfg.temperature;
  sp.seed = seed;
  sp.initial = Vec::Constant(sp.K, 1.0 / sp.K);

  Rng rng(derive_seed(seed, 0x5e1f));
  for (int s = 0; s < sp.K; ++s) {
    Vec m = Vec::Zero(sp.d_obs);
    m[0] = s * cfg.separation;
    for (int d = 1; d < sp.d_obs; ++d) m[d] = 0.25 * cfg.separation * standard_normal(rng);
    sp.means.push_back(m);
    sp.covs.push_back(Mat::Identity(sp.d_obs, sp.d_obs) * cfg.emission_sd * cfg.emission_sd);
  }

  const int stay = (sp.n_actions - 1) / 2;
  for (int a = 0; a < sp.n_actions; ++a) sp.shifts.push_back(a - stay);

  for (int a = 0; a < sp.n_actions; ++a) {
    Mat t = Mat::Zero(sp.K, sp.K + 2);
    for (int s = 0; s < sp.K; ++s) {
      double g = synth_goodness(s, sp.K);
      double p_dis = cfg.p_terminal * g;
      double p_death = cfg.p_terminal * (1.0 - g);
      if (a == stay) {
        if (g >= 0.5) p_dis *= cfg.boost;
        else p_death *= cfg.boost;
      }
      int target = s + sp.shifts[static_cast<std::size_t>(a)];
      int dest = std::clamp(target, 0, sp.K - 1);
      p_death *= 1.0 + cfg.overshoot * std::abs(target - dest);
      Vec w(sp.K);
      for (int s2 = 0; s2 < sp.K; ++s2) w[s2] = -std::abs(s2 - dest) / cfg.temperature;
      w = (w.array() - w.maxCoeff()).exp();
      w /= w.sum();
      t.row(s).head(sp.K) = (1.0 - p_dis - p_death) * w.transpose();
      t(s, sp.K) = p_dis;
      t(s, sp.K + 1) = p_death;
    }
    sp.T.push_back(std::move(t));
  }
  return sp;
}

struct OraclePolicy {
  Mat q_table;  // K x n_actions
  std::vector<int> pi_star;
  Vec value;
  double bellman_residual = 0.0;
  int iterations = 0;
};

/// Value iteration on the latent MDP; ties in the greedy policy go to the lowest action.
inline OraclePolicy solve_mdp(const SynthSpec& sp, double tol = 1e-10, int max_iter = 100000) {
  OraclePolicy o;
  Vec v = Vec::Zero(sp.K);
  Mat q(sp.K, sp.n_actions);
  auto backup = [&](const Vec& val) {
    for (int a = 0; a < sp.n_actions; ++a) {
      const Mat& t = sp.T[static_cast<std::size_t>(a)];
      for (int s = 0; s < sp.K; ++s) q(s, a) = sp.reward(s, a) + sp.gamma * t.row(s).head(sp.K).dot(val);
    }
  };
  for (o.iterations = 1; o.iterations <= max_iter; ++o.iterations) {
    backup(v);
    Vec nv = q.rowwise().maxCoeff();
    double diff = (nv - v).cwiseAbs().maxCoeff();
    v = nv;
    if (diff < tol) break;
  }
  backup(v);
  o.q_table = q;
  o.value = v;
  o.bellman_residual = (q.rowwise().maxCoeff() - v).cwiseAbs().maxCoeff();
  for (int s = 0; s < sp.K; ++s) o.pi_star.push_back(static_cast<int>(argmax_lowest(q.row(s).transpose())));
  return o;
}

/// Ground truth recorded alongside a generated dataset.
struct SynthTruth {
  std::vector<int> states;
  std::vector<Vec> behavior_pmf;
  std::vector<double> taken_prob;
  bool truncated = false;
};

struct SynthData {
  Dataset dataset;
  std::map<long long, SynthTruth> truth;
};

inline Vec behavior_pmf(int pi_star_action, int n_actions, double epsilon) {
  Vec p = Vec::Constant(n_actions, epsilon / n_actions);
  p[pi_star_action] += 1.0 - epsilon;
  return p;
}

/// Emits epsilon-greedy episodes around pi*. Episode ids start at `first_id`;
/// each episode draws from its own stream derived from (seed, id).
inline SynthData generate(const SynthSpec& sp, const OraclePolicy& oracle, int n_episodes, double epsilon,
                          int max_len, std::uint64_t seed, long long first_id = 0) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("synth: epsilon must lie in [0,1]");
  if (max_len < 1) throw ConfigError("synth: max_len must be positive");
  SynthData out;
  out.dataset.d_obs = sp.d_obs;
  out.dataset.d_act = 1;
  std::vector<Eigen::LLT<Mat>> chol;
  for (const auto& c : sp.covs) chol.emplace_back(c);

  for (int i = 0; i < n_episodes; ++i) {
    long long id = first_id + i;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(id)));
    Episode ep;
    ep.id = id;
    SynthTruth truth;
    int s = static_cast<int>(sample_discrete(rng, sp.initial));
    for (int t = 0; t < max_len; ++t) {
      Vec z(sp.d_obs);
      for (int d = 0; d < sp.d_obs; ++d) z[d] = standard_normal(rng);
      EpisodeStep step;
      step.obs = sp.means[static_cast<std::size_t>(s)] + chol[static_cast<std::size_t>(s)].matrixL() * z;

      int a = uniform01(rng) < epsilon ? static_cast<int>(uniform_index(rng, static_cast<std::size_t>(sp.n_actions)))
                                       : oracle.pi_star[static_cast<std::size_t>(s)];
      Vec pmf = behavior_pmf(oracle.pi_star[static_cast<std::size_t>(s)], sp.n_actions, epsilon);
      step.action = Vec::Constant(1, a);
      truth.states.push_back(s);
      truth.taken_prob.push_back(pmf[a]);
      truth.behavior_pmf.push_back(std::move(pmf));

      int next = static_cast<int>(sample_discrete(rng, sp.T[static_cast<std::size_t>(a)].row(s).transpose()));
      if (next == sp.K) {
        step.reward = sp.r_discharge;
        step.is_terminal = true;
        step.outcome = Outcome::discharge;
      } else if (next == sp.K + 1) {
        step.reward = sp.r_death;
        step.is_terminal = true;
        step.outcome = Outcome::death;
      } else if (t == max_len - 1) {
        step.is_terminal = true;
        truth.truncated = true;
      }
      ep.steps.push_back(std::move(step));
      if (ep.steps.back().is_terminal) break;
      s = next;
    }
    out.dataset.episodes.push_back(std::move(ep));
    out.truth.emplace(id, std::move(truth));
  }
  return out;
}

namespace detail {

inline nlohmann::json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline nlohmann::json mat_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(vec_json(m.row(r).transpose()));
  return rows;
}

inline Vec json_vec(const nlohmann::json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline Mat json_mat(const nlohmann::json& j) {
  if (j.empty()) return Mat();
  Mat m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
  for (std::size_t r = 0; r < j.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = json_vec(j[r]).transpose();
  return m;
}

}  // namespace detail

inline nlohmann::json spec_to_json(const SynthSpec& sp) {
  nlohmann::json j;
  j["K"] = sp.K;
  j["d_obs"] = sp.d_obs;
  j["n_actions"] = sp.n_actions;
  j["gamma"] = sp.gamma;
  j["r_discharge"] = sp.r_discharge;
  j["r_death"] = sp.r_death;
  j["temperature"] = sp.temperature;
  j["seed"] = sp.seed;
  j["shifts"] = sp.shifts;
  j["initial"] = detail::vec_json(sp.initial);
  for (int s = 0; s < sp.K; ++s) {
    j["means"].push_back(detail::vec_json(sp.means[static_cast<std::size_t>(s)]));
    j["covs"].push_back(detail::mat_json(sp.covs[static_cast<std::size_t>(s)]));
  }
  for (const auto& t : sp.T) j["T"].push_back(detail::mat_json(t));
  return j;
}

inline SynthSpec spec_from_json(const nlohmann::json& j) {
  SynthSpec sp;
  sp.K = j.at("K").get<int>();
  sp.d_obs = j.at("d_obs").get<int>();
  sp.n_actions = j.at("n_actions").get<int>();
  sp.gamma = j.at("gamma").get<double>();
  sp.r_discharge = j.at("r_discharge").get<double>();
  sp.r_death = j.at("r_death").get<double>();
  sp.temperature = j.at("temperature").get<double>();
  sp.seed = j.at("seed").get<std::uint64_t>();
  sp.shifts = j.at("shifts").get<std::vector<int>>();
  sp.initial = detail::json_vec(j.at("initial"));
  for (const auto& m : j.at("means")) sp.means.push_back(detail::json_vec(m));
  for (const auto& c : j.at("covs")) sp.covs.push_back(detail::json_mat(c));
  for (const auto& t : j.at("T")) sp.T.push_back(detail::json_mat(t));
  return sp;
}

/// Sidecar ground truth: generator spec, oracle policy and per-step truth.
struct TruthFile {
  SynthSpec spec;
  OraclePolicy oracle;
  double epsilon = 0.0;
  std::map<long long, SynthTruth> episodes;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["spec"] = spec_to_json(spec);
    j["q_table"] = detail::mat_json(oracle.q_table);
    j["pi_star"] = oracle.pi_star;
    j["epsilon"] = epsilon;
    j["episodes"] = nlohmann::json::array();
    for (const auto& [id, tr] : episodes) {
      nlohmann::json e;
      e["id"] = id;
      e["states"] = tr.states;
      nlohmann::json pm = nlohmann::json::array();
      for (const auto& p : tr.behavior_pmf) pm.push_back(detail::vec_json(p));
      e["behavior_pmf"] = std::move(pm);
      e["taken_prob"] = tr.taken_prob;
      e["truncated"] = tr.truncated;
      j["episodes"].push_back(std::move(e));
    }
    return j;
  }

  static TruthFile from_json(const nlohmann::json& j) {
    TruthFile f;
    f.spec = spec_from_json(j.at("spec"));
    f.oracle.q_table = detail::json_mat(j.at("q_table"));
    f.oracle.pi_star = j.at("pi_star").get<std::vector<int>>();
    if (f.oracle.q_table.size()) f.oracle.value = f.oracle.q_table.rowwise().maxCoeff();
    f.epsilon = j.at("epsilon").get<double>();
    for (const auto& e : j.at("episodes")) {
      SynthTruth tr;
      tr.states = e.at("states").get<std::vector<int>>();
      for (const auto& p : e.at("behavior_pmf")) tr.behavior_pmf.push_back(detail::json_vec(p));
      tr.taken_prob = e.at("taken_prob").get<std::vector<double>>();
      tr.truncated = e.at("truncated").get<bool>();
      f.episodes.emplace(e.at("id").get<long long>(), std::move(tr));
    }
    return f;
  }

  std::map<long long, std::vector<double>> taken_probs() const {
    std::map<long long, std::vector<double>> out;
    for (const auto& [id, tr] : episodes) out.emplace(id, tr.taken_prob);
    return out;
  }
};

}  // namespace astc
