#include "astc/astc.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace astc;

Vec parse_list(const std::string& s) {
  std::vector<double> v;
  try {
    for (auto part : split_view(s, ',')) v.push_back(parse_double(trim(part)));
  } catch (const Error&) {
    throw ConfigError("expected a comma-separated list of numbers, got '" + s + "'");
  }
  return Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<long long> seed;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "configuration file");
  cmd->add_option("--set", c.overrides, "override a key, e.g. --set agent.sigma=0.2")->take_all();
  cmd->add_option("--seed", c.seed, "run seed");
  cmd->add_option("--out-dir", c.out_dir, "output directory");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig() : RunConfig::load(c.config);
  for (const auto& o : c.overrides) cfg.set_override(o);
  if (c.seed) cfg.set("run", "seed", std::to_string(*c.seed));
  if (!c.out_dir.empty()) cfg.set("run", "out_dir", c.out_dir);
  pipeline::apply_log_level(cfg);
  return cfg;
}

template <class T>
void set_if(RunConfig& cfg, const char* section, const char* key, const std::optional<T>& v) {
  if (!v) return;
  if constexpr (std::is_same_v<T, double>) cfg.set(section, key, fmt_double(*v));
  else if constexpr (std::is_same_v<T, std::string>) cfg.set(section, key, *v);
  else cfg.set(section, key, std::to_string(*v));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Belief-space actor-critic with bounded search: synthetic benchmark, model fitting, training, evaluation"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("synth-gen", "generate a synthetic benchmark dataset with ground truth");
  add_common(gen, common);
  std::optional<double> epsilon;
  std::optional<int> n_train, n_test;
  gen->add_option("--epsilon", epsilon, "behavior exploration rate");
  gen->add_option("--n-train", n_train, "training episodes");
  gen->add_option("--n-test", n_test, "test episodes");

  auto* fit_gmm = app.add_subcommand("fit-gmm", "fit observation normalization and the Gaussian mixture");
  add_common(fit_gmm, common);
  std::optional<int> k;
  fit_gmm->add_option("--k", k, "fixed number of components (0 selects by BIC)");

  auto* fit_model = app.add_subcommand("fit-model", "fit action bins, transition and observation models");
  add_common(fit_model, common);

  auto* train = app.add_subcommand("train", "train the actor and bound critics");
  add_common(train, common);
  std::optional<int> epochs, expansions;
  std::optional<double> alpha, lambda, sigma, rho_max, eps_gap;
  std::string resume;
  train->add_option("--epochs", epochs, "total epochs");
  train->add_option("--alpha", alpha, "actor step size");
  train->add_option("--lambda", lambda, "trace decay");
  train->add_option("--sigma", sigma, "actor standard deviation (unit action scale)");
  train->add_option("--rho-max", rho_max, "importance ratio clip");
  train->add_option("--tree-expansions", expansions, "search expansions per step");
  train->add_option("--eps-gap", eps_gap, "search stopping gap");
  train->add_option("--resume", resume, "continue from this checkpoint");

  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on the test split");
  add_common(eval, common);
  std::string eval_ckpt;
  std::optional<std::string> action_mode;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file");
  eval->add_option("--action-mode", action_mode, "mean, sample or tree");

  auto* plan = app.add_subcommand("plan", "run one bounded search and print the result");
  add_common(plan, common);
  std::string belief, observation, dump, model_path, plan_ckpt;
  std::optional<int> budget;
  plan->add_option("--belief", belief, "comma-separated belief over latent states");
  plan->add_option("--observation", observation, "comma-separated raw observation");
  plan->add_option("--budget", budget, "expansion budget");
  plan->add_option("--model", model_path, "planning model file");
  plan->add_option("--checkpoint", plan_ckpt, "take critic bounds from this checkpoint");
  plan->add_option("--dump", dump, "write the search tree to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = resolve(common);
    if (gen->parsed()) {
      set_if(cfg, "synth", "epsilon", epsilon);
      set_if(cfg, "synth", "n_train", n_train);
      set_if(cfg, "synth", "n_test", n_test);
      auto r = pipeline::run_synth_gen(cfg);
      std::cout << "wrote " << pipeline::train_path(cfg) << " (" << r.train_steps << " steps), "
                << pipeline::test_path(cfg) << " (" << r.test_steps << " steps), " << pipeline::truth_path(cfg)
                << "\npi*:";
      for (int a : r.oracle.pi_star) std::cout << ' ' << a;
      std::cout << '\n';
    } else if (fit_gmm->parsed()) {
      set_if(cfg, "gmm", "k", k);
      auto r = pipeline::run_fit_gmm(cfg);
      if (r.bic) std::cout << r.bic->csv();
      std::cout << "K=" << r.K << " loglik=" << fmt_double(r.loglik) << '\n';
    } else if (fit_model->parsed()) {
      auto m = pipeline::run_fit_model(cfg);
      std::cout << "model K=" << m.K << " actions=" << m.n_actions << " cells=" << m.n_cells()
                << " config_hash=" << m.config_hash << '\n';
    } else if (train->parsed()) {
      set_if(cfg, "agent", "epochs", epochs);
      set_if(cfg, "agent", "alpha", alpha);
      set_if(cfg, "agent", "lambda", lambda);
      set_if(cfg, "agent", "sigma", sigma);
      set_if(cfg, "agent", "rho_max", rho_max);
      set_if(cfg, "tree", "max_expansions", expansions);
      set_if(cfg, "tree", "eps_gap", eps_gap);
      std::optional<std::string> r;
      if (!resume.empty()) r = resume;
      auto res = pipeline::run_train(cfg, r, &std::cout);
      std::cout << "checkpoint " << pipeline::checkpoint_path(cfg) << " after " << res.agent.epochs_done
                << " epochs\n";
    } else if (eval->parsed()) {
      set_if(cfg, "eval", "action_mode", action_mode);
      std::optional<std::string> ck;
      if (!eval_ckpt.empty()) ck = eval_ckpt;
      auto rep = pipeline::run_evaluate(cfg, ck);
      std::cout << "episodes " << rep.episodes.size() << '\n';
      for (const auto& t : rep.terciles)
        std::cout << "dim " << t.dim << " tercile " << t.group << ": n=" << t.n << " mean_return=" << fmt_double(t.mean_return)
                  << " survival=" << fmt_double(t.survival_rate) << '\n';
      if (rep.synthetic)
        std::cout << "pi* match: proposed " << fmt_double(rep.synthetic->match_proposed) << ", recorded "
                  << fmt_double(rep.synthetic->match_behavior) << '\n';
    } else if (plan->parsed()) {
      pipeline::PlanRequest req;
      if (!belief.empty()) req.belief = parse_list(belief);
      if (!observation.empty()) req.observation = parse_list(observation);
      req.budget = budget;
      req.model_path = model_path;
      req.checkpoint_path = plan_ckpt;
      req.dump_path = dump;
      pipeline::run_plan(cfg, req, std::cout);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
