#pragma once

#include "astc/agent.hpp"
#include "astc/belief_model.hpp"
#include "astc/bounded_tree.hpp"
#include "astc/common.hpp"
#include "astc/episode_store.hpp"
#include "astc/gmm.hpp"
#include "astc/synth_env.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace astc {

enum class RunMode { synthetic, medical };

/// Flat sectioned key-value configuration. Every key has a default; unknown
/// sections or keys are rejected.
class RunConfig {
 public:
  using Table = std::map<std::string, std::map<std::string, std::string>>;

  RunConfig() : values_(defaults()) {}

  static const Table& defaults() {
    static const Table t = {
        {"run", {{"seed", "1"}, {"mode", "synthetic"}, {"out_dir", "out"}, {"log_level", "warn"}}},
        {"data",
         {{"train", ""},
          {"test", ""},
          {"truth", ""},
          {"split_ratio", "0.8"},
          {"normalize", "true"},
          {"n_bins", "6"},
          {"zero_bin", "false"},
          {"terminal_only_rewards", "true"}}},
        {"gmm",
         {{"k", "0"},
          {"k_min", "1"},
          {"k_max", "8"},
          {"folds", "5"},
          {"n_init", "5"},
          {"cv_n_init", "2"},
          {"max_iter", "500"},
          {"tol", "1e-6"},
          {"cov_floor", "1e-6"},
          {"covariance", "full"}}},
        {"model",
         {{"c1", "0"},
          {"c2", "1"},
          {"kappa", "1"},
          {"p_term", "0.01"},
          {"soft_counts", "true"},
          {"reward_mode", "medical"},
          {"gamma", "0.99"},
          {"r_discharge", "10"},
          {"r_death", "-10"},
          {"channel_samples", "2000"}}},
        {"tree", {{"max_expansions", "50"}, {"eps_gap", "1e-3"}, {"eps_gap_delta", "0"}, {"p_min", "1e-4"}}},
        {"agent",
         {{"epochs", "3"},
          {"alpha", "4e-5"},
          {"lambda", "0.3"},
          {"sigma", "0.15"},
          {"rho_max", "5"},
          {"actor_init", "0.5"},
          {"shuffle", "true"},
          {"project_mean", "true"},
          {"checkpoint", ""}}},
        {"eval",
         {{"action_mode", "mean"}, {"hist_bins", "20"}, {"bootstrap", "1000"}, {"svg", "true"}, {"trace_episodes", "5"}}},
        {"synth",
         {{"k_true", "5"},
          {"d_obs", "2"},
          {"n_actions", "6"},
          {"separation", "4"},
          {"emission_sd", "0.5"},
          {"temperature", "0.5"},
          {"p_terminal", "0.15"},
          {"boost", "1"},
          {"overshoot", "0.5"},
          {"epsilon", "0.3"},
          {"n_train", "2000"},
          {"n_test", "200"},
          {"max_len", "60"},
          {"spec_seed", "-1"}}},
    };
    return t;
  }

  static RunConfig parse(std::istream& in, const std::string& source = "<config>") {
    boost::property_tree::ptree pt;
    try {
      boost::property_tree::ini_parser::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
      throw ConfigError(source + ": " + e.what());
    }
    RunConfig cfg;
    for (const auto& [section, body] : pt) {
      if (body.empty()) throw ConfigError(source + ": key '" + section + "' outside any section");
      for (const auto& [key, node] : body) {
        if (!node.empty()) throw ConfigError(source + ": nested key '" + section + "." + key + "'");
        cfg.set(section, key, node.get_value<std::string>());
      }
    }
    return cfg;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse(in, path);
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    auto s = values_.find(section);
    if (s == values_.end()) throw ConfigError("unknown config section [" + section + "]");
    auto k = s->second.find(key);
    if (k == s->second.end()) throw ConfigError("unknown config key '" + section + "." + key + "'");
    k->second = std::string(trim(value));
  }

  /// Applies "section.key=value".
  void set_override(const std::string& assignment) {
    auto eq = assignment.find('=');
    auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ConfigError("override must look like section.key=value, got '" + assignment + "'");
    set(assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1), assignment.substr(eq + 1));
  }

  const std::string& get(const std::string& section, const std::string& key) const {
    auto s = values_.find(section);
    if (s == values_.end() || !s->second.count(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
    return s->second.at(key);
  }

  double get_double(const std::string& section, const std::string& key) const {
    try {
      return parse_double(get(section, key));
    } catch (const Error&) {
      throw ConfigError(section + "." + key + ": expected a number, got '" + get(section, key) + "'");
    }
  }

  int get_int(const std::string& section, const std::string& key) const {
    try {
      return static_cast<int>(parse_int(get(section, key)));
    } catch (const Error&) {
      throw ConfigError(section + "." + key + ": expected an integer, got '" + get(section, key) + "'");
    }
  }

  bool get_bool(const std::string& section, const std::string& key) const {
    const auto& v = get(section, key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(section + "." + key + ": expected true/false, got '" + v + "'");
  }

  const Table& values() const { return values_; }

  RunMode mode() const {
    const auto& m = get("run", "mode");
    if (m == "synthetic") return RunMode::synthetic;
    if (m == "medical") return RunMode::medical;
    throw ConfigError("run.mode must be synthetic or medical, got '" + m + "'");
  }

  std::uint64_t seed() const {
    long long s = parse_int(get("run", "seed"));
    if (s < 0) throw ConfigError("run.seed must be non-negative");
    return static_cast<std::uint64_t>(s);
  }

  /// Independent seed stream for one pipeline stage.
  std::uint64_t stage_seed(std::uint64_t stage) const { return derive_seed(seed(), stage); }

  std::string out_dir() const { return get("run", "out_dir"); }

  std::string out_path(const std::string& name) const { return (std::filesystem::path(out_dir()) / name).string(); }

  /// Configured path, or a file of the given name in the output directory.
  std::string path_or(const std::string& section, const std::string& key, const std::string& fallback) const {
    const auto& v = get(section, key);
    return v.empty() ? out_path(fallback) : v;
  }

  /// key=value lines of the given sections, sorted, without output locations.
  std::string canonical(const std::vector<std::string>& sections) const {
    std::ostringstream out;
    for (const auto& s : sections)
      for (const auto& [k, v] : values_.at(s)) {
        if (s == "run" && (k == "out_dir" || k == "log_level")) continue;
        if (s == "agent" && (k == "epochs" || k == "checkpoint")) continue;
        out << s << '.' << k << '=' << v << '\n';
      }
    return out.str();
  }

  /// Hash of everything that shapes the fitted models.
  std::string fit_hash() const { return hex64(fnv1a(canonical({"run", "data", "synth", "gmm", "model"}))); }
  /// Hash of everything that shapes a training run, epoch count excluded.
  std::string train_hash() const {
    return hex64(fnv1a(canonical({"run", "data", "synth", "gmm", "model", "tree", "agent"})));
  }
  std::string eval_hash() const {
    return hex64(fnv1a(canonical({"run", "data", "synth", "gmm", "model", "tree", "agent", "eval"})));
  }

  // Typed views for each module.

  SchemaConfig schema_config() const {
    SchemaConfig s;
    s.terminal_only_rewards = get_bool("data", "terminal_only_rewards");
    return s;
  }

  std::vector<int> n_bins() const {
    std::vector<int> out;
    for (auto part : split_view(get("data", "n_bins"), ',')) out.push_back(static_cast<int>(parse_int(trim(part))));
    if (out.empty()) throw ConfigError("data.n_bins is empty");
    return out;
  }

  GmmConfig gmm_config() const {
    GmmConfig g;
    g.tol_ll = get_double("gmm", "tol");
    g.max_iter = get_int("gmm", "max_iter");
    g.n_init = get_int("gmm", "n_init");
    g.cov_floor = get_double("gmm", "cov_floor");
    const auto& c = get("gmm", "covariance");
    if (c == "full") g.covariance = CovarianceType::full;
    else if (c == "diagonal") g.covariance = CovarianceType::diagonal;
    else throw ConfigError("gmm.covariance must be full or diagonal");
    return g;
  }

  BicConfig bic_config() const {
    BicConfig b;
    b.folds = get_int("gmm", "folds");
    b.gmm = gmm_config();
    b.gmm.n_init = get_int("gmm", "cv_n_init");
    b.seed = stage_seed(31);
    return b;
  }

  TransitionFitConfig transition_config() const {
    TransitionFitConfig t;
    t.gem.c1 = get_double("model", "c1");
    t.gem.c2 = get_double("model", "c2");
    t.gem.kappa = get_double("model", "kappa");
    t.p_term = get_double("model", "p_term");
    t.soft_counts = get_bool("model", "soft_counts");
    const auto& r = get("model", "reward_mode");
    if (r == "medical") t.reward_mode = RewardMode::medical;
    else if (r == "general") t.reward_mode = RewardMode::general;
    else throw ConfigError("model.reward_mode must be medical or general");
    t.gamma = get_double("model", "gamma");
    t.r_discharge = get_double("model", "r_discharge");
    t.r_death = get_double("model", "r_death");
    return t;
  }

  SearchBudget search_budget() const {
    SearchBudget b;
    b.max_expansions = get_int("tree", "max_expansions");
    b.eps_gap = get_double("tree", "eps_gap");
    b.eps_gap_delta = get_double("tree", "eps_gap_delta");
    b.p_min = get_double("tree", "p_min");
    return b;
  }

  AgentConfig agent_config() const {
    AgentConfig a;
    a.alpha = get_double("agent", "alpha");
    a.lambda = get_double("agent", "lambda");
    a.sigma = get_double("agent", "sigma");
    a.rho_max = get_double("agent", "rho_max");
    a.actor_init = get_double("agent", "actor_init");
    a.shuffle = get_bool("agent", "shuffle");
    a.project_mean = get_bool("agent", "project_mean");
    a.seed = stage_seed(51);
    return a;
  }

  SynthConfig synth_config() const {
    SynthConfig s;
    s.K_true = get_int("synth", "k_true");
    s.d_obs = get_int("synth", "d_obs");
    s.n_actions = get_int("synth", "n_actions");
    s.separation = get_double("synth", "separation");
    s.emission_sd = get_double("synth", "emission_sd");
    s.temperature = get_double("synth", "temperature");
    s.p_terminal = get_double("synth", "p_terminal");
    s.boost = get_double("synth", "boost");
    s.overshoot = get_double("synth", "overshoot");
    s.gamma = get_double("model", "gamma");
    s.r_discharge = get_double("model", "r_discharge");
    s.r_death = get_double("model", "r_death");
    return s;
  }

  std::uint64_t synth_spec_seed() const {
    long long s = parse_int(get("synth", "spec_seed"));
    return s < 0 ? seed() : static_cast<std::uint64_t>(s);
  }

 private:
  Table values_;
};

}  // namespace astc
