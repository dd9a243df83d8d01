#pragma once

#include "astc/agent.hpp"
#include "astc/belief_model.hpp"
#include "astc/bounded_tree.hpp"
#include "astc/config.hpp"
#include "astc/episode_store.hpp"
#include "astc/evaluation.hpp"
#include "astc/gmm.hpp"
#include "astc/svg_plot.hpp"
#include "astc/synth_env.hpp"

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace astc::pipeline {

namespace files {
inline constexpr const char* train = "train.tsv";
inline constexpr const char* test = "test.tsv";
inline constexpr const char* dev = "dev.tsv";
inline constexpr const char* truth = "truth.json";
inline constexpr const char* normalization = "normalization.txt";
inline constexpr const char* bic = "bic.csv";
inline constexpr const char* gmm = "gmm.txt";
inline constexpr const char* binning = "binning.txt";
inline constexpr const char* pomdp = "pomdp.txt";
inline constexpr const char* behavior = "behavior.txt";
inline constexpr const char* checkpoint = "checkpoint.txt";
inline constexpr const char* metrics = "metrics.csv";
inline constexpr const char* timing = "timing.csv";
}  // namespace files

// Seed streams per stage.
enum Stage : std::uint64_t { kGenTrain = 1, kGenTest = 2, kSplit = 3, kGmm = 4, kChannel = 5, kEval = 6 };

inline std::string provenance(const std::string& hash, const RunConfig& cfg) {
  return "# config_hash=" + hash + " seed=" + std::to_string(cfg.seed()) + "\n";
}

inline void ensure_out_dir(const RunConfig& cfg) { std::filesystem::create_directories(cfg.out_dir()); }

inline void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << content;
}

inline void apply_log_level(const RunConfig& cfg) {
  const auto& l = cfg.get("run", "log_level");
  if (l == "quiet") log::level() = log::Level::quiet;
  else if (l == "warn") log::level() = log::Level::warn;
  else if (l == "info") log::level() = log::Level::info;
  else throw ConfigError("run.log_level must be quiet, warn or info");
}

inline bool uses_split(const RunConfig& cfg) {
  return cfg.mode() == RunMode::medical && cfg.get("data", "test").empty();
}

inline std::string train_path(const RunConfig& cfg) { return cfg.path_or("data", "train", files::train); }
inline std::string test_path(const RunConfig& cfg) { return cfg.path_or("data", "test", files::test); }
inline std::string dev_path(const RunConfig& cfg) {
  return uses_split(cfg) ? cfg.out_path(files::dev) : train_path(cfg);
}
inline std::string truth_path(const RunConfig& cfg) { return cfg.path_or("data", "truth", files::truth); }
inline std::string checkpoint_path(const RunConfig& cfg) { return cfg.path_or("agent", "checkpoint", files::checkpoint); }

inline Dataset load_normalized(const RunConfig& cfg, const std::string& path) {
  Dataset ds = load_dataset(path, cfg.schema_config());
  if (cfg.get_bool("data", "normalize"))
    ds = apply_normalization(ds, NormalizationBounds::from_doc(TextDoc::load(cfg.out_path(files::normalization),
                                                                              "normalization")));
  return ds;
}

inline TruthFile load_truth(const RunConfig& cfg) {
  std::ifstream in(truth_path(cfg));
  if (!in) throw DataError("cannot open truth file '" + truth_path(cfg) + "'");
  return TruthFile::from_json(nlohmann::json::parse(in));
}

/// Fitted artifacts needed downstream of fit-model.
struct Models {
  GmmModel gmm;
  ActionBinning bins;
  PomdpModel pomdp;
};

inline Models load_models(const RunConfig& cfg) {
  return {GmmModel::load(cfg.out_path(files::gmm)),
          ActionBinning::from_doc(TextDoc::load(cfg.out_path(files::binning), "binning")),
          PomdpModel::load(cfg.out_path(files::pomdp))};
}

struct SynthGenResult {
  SynthSpec spec;
  OraclePolicy oracle;
  std::size_t train_steps = 0;
  std::size_t test_steps = 0;
};

inline SynthGenResult run_synth_gen(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  SynthGenResult res;
  res.spec = make_spec(cfg.synth_config(), cfg.synth_spec_seed());
  res.oracle = solve_mdp(res.spec);
  const double eps = cfg.get_double("synth", "epsilon");
  const int n_train = cfg.get_int("synth", "n_train");
  const int n_test = cfg.get_int("synth", "n_test");
  const int max_len = cfg.get_int("synth", "max_len");
  auto tr = generate(res.spec, res.oracle, n_train, eps, max_len, cfg.stage_seed(kGenTrain), 0);
  auto te = generate(res.spec, res.oracle, n_test, eps, max_len, cfg.stage_seed(kGenTest), n_train);
  save_dataset(tr.dataset, train_path(cfg));
  save_dataset(te.dataset, test_path(cfg));
  res.train_steps = tr.dataset.n_steps();
  res.test_steps = te.dataset.n_steps();

  TruthFile truth{res.spec, res.oracle, eps, std::move(tr.truth)};
  truth.episodes.merge(te.truth);
  auto j = truth.to_json();
  j["config_hash"] = cfg.fit_hash();
  j["seed"] = cfg.seed();
  write_text(truth_path(cfg), j.dump() + "\n");
  return res;
}

struct FitGmmResult {
  std::optional<BicReport> bic;
  int K = 0;
  double loglik = 0.0;
};

inline FitGmmResult run_fit_gmm(const RunConfig& cfg) {
  const std::string source = uses_split(cfg) ? train_path(cfg) : dev_path(cfg);
  if (!std::filesystem::exists(source)) throw ConfigError("dataset not found: '" + source + "'");
  ensure_out_dir(cfg);
  if (uses_split(cfg)) {
    Dataset full = load_dataset(train_path(cfg), cfg.schema_config());
    auto [dev, test] = split(full, cfg.get_double("data", "split_ratio"), cfg.stage_seed(kSplit));
    save_dataset(dev, cfg.out_path(files::dev));
    save_dataset(test, cfg.out_path(files::test));
  }
  Dataset dev = load_dataset(dev_path(cfg), cfg.schema_config());
  if (cfg.get_bool("data", "normalize")) {
    auto bounds = observation_bounds(dev);
    TextDoc doc = bounds.to_doc();
    doc.put("config_hash", cfg.fit_hash());
    doc.save(cfg.out_path(files::normalization));
    dev = normalize(dev);
  }
  auto obs = dev.all_observations();

  FitGmmResult res;
  res.K = cfg.get_int("gmm", "k");
  if (res.K <= 0) {
    res.bic = select_k_bic(obs, cfg.get_int("gmm", "k_min"), cfg.get_int("gmm", "k_max"), cfg.bic_config());
    res.K = res.bic->selected_K;
    write_text(cfg.out_path(files::bic), provenance(cfg.fit_hash(), cfg) + res.bic->csv());
  }
  auto gmm = fit_em(obs, res.K, cfg.stage_seed(kGmm), cfg.gmm_config());
  res.loglik = gmm.loglik(obs);
  TextDoc doc = gmm.to_doc();
  doc.put("config_hash", cfg.fit_hash());
  doc.save(cfg.out_path(files::gmm));
  return res;
}

inline PomdpModel run_fit_model(const RunConfig& cfg) {
  ensure_out_dir(cfg);
  Dataset dev = load_normalized(cfg, dev_path(cfg));
  auto gmm = GmmModel::load(cfg.out_path(files::gmm));
  auto bins = fit_action_bins(dev, cfg.n_bins(), cfg.get_bool("data", "zero_bin"));
  TextDoc bdoc = bins.to_doc();
  bdoc.put("config_hash", cfg.fit_hash());
  bdoc.save(cfg.out_path(files::binning));

  auto model = fit_transitions(dev, gmm, bins, cfg.transition_config());
  model.C = build_observation_channel(gmm, cfg.get_int("model", "channel_samples"), cfg.stage_seed(kChannel));
  model.config_hash = cfg.fit_hash();
  model.validate();
  model.save(cfg.out_path(files::pomdp));

  if (cfg.mode() == RunMode::medical) {
    auto behavior = fit_behavior(dev, model, gmm, bins, ActionScale::from_binning(bins));
    TextDoc doc = behavior.to_doc();
    doc.put("config_hash", cfg.fit_hash());
    doc.save(cfg.out_path(files::behavior));
  }
  return model;
}

inline BehaviorPolicy load_behavior(const RunConfig& cfg, const ActionBinning& bins) {
  if (cfg.mode() == RunMode::synthetic)
    return BehaviorPolicy::known_discrete(
        load_truth(cfg).taken_probs(),
        BehaviorPolicy::grid_cell_volume(bins, ActionScale::from_binning(bins)));
  return BehaviorPolicy::from_doc(TextDoc::load(cfg.out_path(files::behavior), "behavior"));
}

struct TrainResult {
  AgentState agent;
  std::vector<EpochMetrics> metrics;
};

inline std::string metrics_header() {
  return "epoch,mean_abs_delta,mean_root_gap,mean_rho,steps,actor_updates,skipped_episodes\n";
}

inline std::string metrics_row(const EpochMetrics& m) {
  return std::to_string(m.epoch) + ',' + fmt_double(m.mean_abs_delta) + ',' + fmt_double(m.mean_root_gap) + ',' +
         fmt_double(m.mean_rho) + ',' + std::to_string(m.steps) + ',' + std::to_string(m.actor_updates) + ',' +
         std::to_string(m.skipped_episodes) + '\n';
}

/// Trains up to agent.epochs total epochs. With `resume`, continues from that
/// checkpoint and appends to the existing metrics file.
inline TrainResult run_train(const RunConfig& cfg, const std::optional<std::string>& resume = std::nullopt,
                             std::ostream* progress = nullptr) {
  ensure_out_dir(cfg);
  Dataset dev = load_normalized(cfg, dev_path(cfg));
  Models m = load_models(cfg);
  if (m.pomdp.config_hash != cfg.fit_hash())
    throw ConfigError("model files were fitted with a different configuration (hash " + m.pomdp.config_hash +
                      ", expected " + cfg.fit_hash() + "); rerun fit-gmm and fit-model");
  BehaviorPolicy behavior = load_behavior(cfg, m.bins);
  const auto acfg = cfg.agent_config();
  const auto budget = cfg.search_budget();
  const int epochs = cfg.get_int("agent", "epochs");
  if (epochs < 0) throw ConfigError("agent.epochs must be >= 0");

  TrainResult res;
  const std::string metrics_path = cfg.out_path(files::metrics);
  const std::string timing_path = cfg.out_path(files::timing);
  if (resume) {
    res.agent = AgentState::load(*resume);
    if (res.agent.config_hash != cfg.train_hash())
      throw ConfigError("checkpoint '" + *resume + "' was trained with a different configuration");
  } else {
    res.agent = init_agent(m.pomdp, m.bins, acfg, cfg.get_bool("data", "terminal_only_rewards"));
    res.agent.config_hash = cfg.train_hash();
    res.agent.model_config_hash = m.pomdp.config_hash;
    write_text(metrics_path, provenance(cfg.train_hash(), cfg) + metrics_header());
    write_text(timing_path, provenance(cfg.train_hash(), cfg) + "epoch,seconds\n");
    res.agent.save(checkpoint_path(cfg));
  }

  while (res.agent.epochs_done < epochs) {
    auto t0 = std::chrono::steady_clock::now();
    auto em = train_epoch(dev, m.pomdp, m.gmm, m.bins, res.agent, budget, acfg, behavior);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.push_back(em);
    std::ofstream(metrics_path, std::ios::app | std::ios::binary) << metrics_row(em);
    std::ofstream(timing_path, std::ios::app | std::ios::binary) << em.epoch << ',' << fmt_double(secs) << '\n';
    res.agent.save(cfg.out_path("checkpoint_epoch_" + std::to_string(em.epoch) + ".txt"));
    res.agent.save(checkpoint_path(cfg));
    if (progress)
      *progress << "epoch " << em.epoch << ": mean|delta|=" << fmt_double(em.mean_abs_delta)
                << " mean_gap=" << fmt_double(em.mean_root_gap) << " mean_rho=" << fmt_double(em.mean_rho)
                << " skipped=" << em.skipped_episodes << " (" << secs << " s)\n";
  }
  return res;
}

inline EvalConfig eval_config(const RunConfig& cfg) {
  EvalConfig e;
  e.mode = parse_proposal_mode(cfg.get("eval", "action_mode"));
  e.hist_bins = cfg.get_int("eval", "hist_bins");
  e.bootstrap = cfg.get_int("eval", "bootstrap");
  e.trace_episodes = cfg.get_int("eval", "trace_episodes");
  e.seed = cfg.stage_seed(kEval);
  return e;
}

namespace detail {

inline void write_report(const RunConfig& cfg, const EvalReport& rep, int d_act) {
  const std::string head = provenance(cfg.eval_hash(), cfg);
  std::ostringstream ep;
  ep << head << "episode,outcome,length,return";
  for (int d = 0; d < d_act; ++d) ep << ",mean_abs_dev_" << d;
  ep << '\n';
  for (const auto& e : rep.episodes) {
    ep << e.id << ',' << to_string(e.outcome) << ',' << e.length << ',' << fmt_double(e.ret);
    for (int d = 0; d < d_act; ++d) ep << ',' << fmt_double(e.mean_abs_dev[d]);
    ep << '\n';
  }
  write_text(cfg.out_path("eval_episodes.csv"), ep.str());

  std::ostringstream tc, hc;
  tc << head << "dim,group,n,dev_lo,dev_hi,mean_return,survival_rate\n";
  hc << head << "dim,group,bin,lo,hi,count\n";
  for (const auto& r : rep.terciles) {
    tc << r.dim << ',' << r.group << ',' << r.n << ',' << fmt_double(r.dev_lo) << ',' << fmt_double(r.dev_hi) << ','
       << fmt_double(r.mean_return) << ',' << fmt_double(r.survival_rate) << '\n';
    for (std::size_t b = 0; b < r.returns.counts.size(); ++b)
      hc << r.dim << ',' << r.group << ',' << b << ',' << fmt_double(r.returns.edges[b]) << ','
         << fmt_double(r.returns.edges[b + 1]) << ',' << r.returns.counts[b] << '\n';
  }
  write_text(cfg.out_path("eval_terciles.csv"), tc.str());
  write_text(cfg.out_path("eval_histograms.csv"), hc.str());

  std::ostringstream bc;
  bc << head << "dim,group,replicate,mean_abs_dev\n";
  for (const auto& b : rep.bootstrap)
    for (std::size_t i = 0; i < b.means.size(); ++i)
      bc << b.dim << ',' << b.group << ',' << i << ',' << fmt_double(b.means[i]) << '\n';
  write_text(cfg.out_path("eval_bootstrap.csv"), bc.str());

  nlohmann::json j;
  j["config_hash"] = cfg.eval_hash();
  j["seed"] = cfg.seed();
  j["config"] = cfg.canonical({"run", "data", "synth", "gmm", "model", "tree", "agent", "eval"});
  j["n_episodes"] = rep.episodes.size();
  for (const auto& r : rep.terciles)
    j["terciles"].push_back({{"dim", r.dim},
                             {"group", r.group},
                             {"n", r.n},
                             {"dev_lo", r.dev_lo},
                             {"dev_hi", r.dev_hi},
                             {"mean_return", r.mean_return},
                             {"survival_rate", r.survival_rate}});
  for (const auto& b : rep.bootstrap) {
    double mean = b.means.empty() ? 0.0 : std::accumulate(b.means.begin(), b.means.end(), 0.0) / b.means.size();
    j["bootstrap"].push_back({{"dim", b.dim},
                              {"group", b.group},
                              {"n", b.means.size()},
                              {"mean", mean},
                              {"q025", b.means.empty() ? 0.0 : quantile(b.means, 0.025)},
                              {"q975", b.means.empty() ? 0.0 : quantile(b.means, 0.975)}});
  }
  if (rep.synthetic) {
    j["synthetic"] = {{"match_proposed", rep.synthetic->match_proposed},
                      {"match_behavior", rep.synthetic->match_behavior},
                      {"steps", rep.synthetic->steps}};
    std::ostringstream tr;
    tr << head << "episode,t,true_state,pi_star,behavior_action,proposed_action,proposed_bin\n";
    for (const auto& r : rep.synthetic->traces)
      tr << r.episode << ',' << r.t << ',' << r.true_state << ',' << r.pi_star << ',' << fmt_double(r.behavior_action)
         << ',' << fmt_double(r.proposed_action) << ',' << r.proposed_bin << '\n';
    write_text(cfg.out_path("eval_traces.csv"), tr.str());
  }
  write_text(cfg.out_path("eval_summary.json"), j.dump(2) + "\n");

  if (!cfg.get_bool("eval", "svg")) return;
  for (int d = 0; d < d_act; ++d) {
    std::vector<svg::Bars> bars;
    static const char* names[] = {"low deviation", "medium deviation", "high deviation"};
    for (const auto& r : rep.terciles) {
      if (r.dim != d) continue;
      std::vector<double> h(r.returns.counts.begin(), r.returns.counts.end());
      bars.push_back({names[r.group], r.returns.edges, h});
    }
    svg::write_file(cfg.out_path("eval_returns_dim" + std::to_string(d) + ".svg"),
                    svg::histogram_plot("Returns by deviation tercile", "return", "episodes", bars));

    std::vector<svg::Bars> boot;
    for (const auto& b : rep.bootstrap) {
      if (b.dim != d || b.means.empty()) continue;
      auto [lo, hi] = std::minmax_element(b.means.begin(), b.means.end());
      auto hg = histogram(b.means, 30, *lo, *hi);
      boot.push_back({b.group, hg.edges, std::vector<double>(hg.counts.begin(), hg.counts.end())});
    }
    svg::write_file(cfg.out_path("eval_bootstrap_dim" + std::to_string(d) + ".svg"),
                    svg::histogram_plot("Bootstrapped mean deviation", "mean |deviation|", "replicates", boot));
  }
  if (rep.synthetic && !rep.synthetic->traces.empty()) {
    long long first = rep.synthetic->traces.front().episode;
    svg::Series star{"optimal", {}, {}, true}, beh{"recorded", {}, {}, true}, prop{"proposed", {}, {}, false};
    for (const auto& r : rep.synthetic->traces) {
      if (r.episode != first) break;
      double t = static_cast<double>(r.t);
      star.x.push_back(t);
      star.y.push_back(r.pi_star);
      beh.x.push_back(t);
      beh.y.push_back(r.behavior_action);
      prop.x.push_back(t);
      prop.y.push_back(r.proposed_action);
    }
    svg::write_file(cfg.out_path("eval_trace.svg"),
                    svg::line_plot("Action selections, episode " + std::to_string(first), "step", "action",
                                   {star, beh, prop}));
  }
}

}  // namespace detail

inline EvalReport run_evaluate(const RunConfig& cfg, const std::optional<std::string>& checkpoint = std::nullopt) {
  ensure_out_dir(cfg);
  Models m = load_models(cfg);
  AgentState agent = AgentState::load(checkpoint ? *checkpoint : checkpoint_path(cfg));
  if (agent.model_config_hash != m.pomdp.config_hash)
    throw ConfigError("checkpoint was trained against different model files (model hash " + agent.model_config_hash +
                      ", found " + m.pomdp.config_hash + ")");
  Dataset test = load_normalized(cfg, test_path(cfg));
  auto ecfg = eval_config(cfg);
  auto evals = evaluate_episodes(test, m.pomdp, m.gmm, m.bins, agent, cfg.search_budget(), ecfg);
  std::optional<SyntheticScores> synth;
  if (cfg.mode() == RunMode::synthetic)
    synth = synthetic_scores(test, evals, load_truth(cfg), m.bins, ecfg.trace_episodes);
  EvalReport rep = build_report(std::move(evals), test.d_act, ecfg);
  rep.synthetic = std::move(synth);
  detail::write_report(cfg, rep, test.d_act);
  return rep;
}

struct PlanRequest {
  std::optional<Vec> belief;
  std::optional<Vec> observation;
  std::optional<int> budget;
  std::string model_path;
  std::string checkpoint_path;
  std::string dump_path;
};

/// Runs one search and prints its result.
inline SearchResult run_plan(const RunConfig& cfg, const PlanRequest& req, std::ostream& out) {
  PomdpModel model = PomdpModel::load(req.model_path.empty() ? cfg.out_path(files::pomdp) : req.model_path);
  Belief b;
  if (req.belief && req.observation) throw ConfigError("give either a belief or an observation, not both");
  if (req.belief) {
    b = *req.belief;
    if (b.size() != model.K) throw ConfigError("belief has " + std::to_string(b.size()) + " entries, model has K=" +
                                               std::to_string(model.K));
    if (!is_simplex(b, 1e-9)) throw ConfigError("belief must be non-negative and sum to 1");
  } else if (req.observation) {
    auto gmm = GmmModel::load(cfg.out_path(files::gmm));
    Vec o = *req.observation;
    if (cfg.get_bool("data", "normalize")) {
      auto nb = NormalizationBounds::from_doc(TextDoc::load(cfg.out_path(files::normalization), "normalization"));
      Dataset one;
      one.d_obs = static_cast<int>(o.size());
      one.d_act = 1;
      one.episodes.push_back({0, {{o, Vec::Zero(1), 0.0, true, Outcome::none}}});
      o = apply_normalization(one, nb).episodes[0].steps[0].obs;
    }
    b = condition_on_observation(model, gmm, initial_belief(model), o);
  } else {
    b = initial_belief(model);
  }

  BoundWeights critic;
  std::string ck = req.checkpoint_path;
  if (!ck.empty()) critic = AgentState::load(ck).critic.w;
  else critic = safe_initial_bounds(model, cfg.get_bool("data", "terminal_only_rewards"));

  SearchBudget budget = cfg.search_budget();
  if (req.budget) budget.max_expansions = *req.budget;
  std::optional<SearchTree> tree;
  auto res = search(model, critic, b, budget, &tree);

  out << "belief";
  for (Eigen::Index i = 0; i < b.size(); ++i) out << ' ' << fmt_double(b[i]);
  out << "\nroot_lower " << fmt_double(res.root_lower) << "\nroot_upper " << fmt_double(res.root_upper)
      << "\nroot_value " << fmt_double(res.root_value) << "\nbest_action_bin " << res.best_root_action_bin
      << "\nexpansions " << res.expansions_used << '\n';
  const std::string bins_path = cfg.out_path(files::binning);
  if (req.model_path.empty() && std::filesystem::exists(bins_path)) {
    auto bins = ActionBinning::from_doc(TextDoc::load(bins_path, "binning"));
    Vec a = bins.representative(res.best_root_action_bin);
    out << "action";
    for (Eigen::Index i = 0; i < a.size(); ++i) out << ' ' << fmt_double(a[i]);
    out << '\n';
  }
  if (!req.dump_path.empty()) {
    std::ofstream d(req.dump_path, std::ios::binary);
    if (!d) throw Error("cannot write '" + req.dump_path + "'");
    tree->dump(d);
  }
  return res;
}

}  // namespace astc::pipeline
