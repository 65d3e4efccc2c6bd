// exo: command-line front end for dataset collection, exogenous-state
// decomposition, return-moment analysis and learning-curve reproduction.

#include "exo/commands.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>

namespace {

void add_solver_flags(CLI::App& cmd, exo::SolverOptions& s) {
  cmd.add_option("--max-iters", s.max_iters, "solver iterations per restart")->capture_default_str();
  cmd.add_option("--restarts", s.restarts, "random restarts")->capture_default_str();
  cmd.add_option("--grad-tol", s.grad_tol, "Riemannian gradient tolerance")->capture_default_str();
  cmd.add_option("--solver-seed", s.seed, "seed for the random restarts")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exogenous-state decomposition and Q-learning experiments"};
  app.require_subcommand(1);

  exo::CollectArgs collect;
  auto* c = app.add_subcommand("collect", "roll out an environment and write a transition dataset");
  c->add_option("--problem", collect.problem, "p2, p3, traffic, a2 or a3")->capture_default_str();
  c->add_option("--steps", collect.steps, "number of transitions")->capture_default_str();
  c->add_option("--seed", collect.seed, "environment and policy seed")->capture_default_str();
  c->add_option("--policy", collect.policy, "uniform or zero")->capture_default_str();
  c->add_option("--out", collect.out, "output CSV (a .meta sidecar is written next to it)")->required();
  c->add_option("--p3_d_exo", collect.p3_d_exo, "p3 exogenous dimensions")->capture_default_str();
  c->add_option("--p3_d_endo", collect.p3_d_endo, "p3 endogenous dimensions")->capture_default_str();
  c->add_option("--p3_matrix_seed", collect.p3_matrix_seed, "seed of the p3 system matrices")->capture_default_str();
  c->add_option("--traffic_topology", collect.traffic_topology, "road network file");

  exo::DecomposeArgs decompose;
  auto* d = app.add_subcommand("decompose", "estimate the exogenous subspace of a dataset");
  d->add_option("--data", decompose.dataset, "dataset CSV")->required();
  d->add_option("--algorithm", decompose.algorithm, "global or stepwise")->capture_default_str();
  d->add_option("--epsilon", decompose.options.epsilon, "PCC threshold")->capture_default_str();
  d->add_option("--out", decompose.out, "report file (stdout when omitted)");
  add_solver_flags(*d, decompose.options.solver);

  exo::MomentsArgs moments;
  auto* m = app.add_subcommand("moments", "return moments of a tabular MDP under a policy");
  m->add_option("--mdp", moments.mdp, "MDP file")->required();
  m->add_option("--policy", moments.policy, "policy file")->required();
  m->add_option("--horizon", moments.horizon, "horizon H")->required();

  std::string problem, config_file;
  std::map<std::string, std::string> overrides;
  auto* r = app.add_subcommand("reproduce", "run the learning experiments for one problem");
  r->add_option("--problem", problem, "p2, p3, traffic, a2 or a3")->required();
  r->add_option("--config", config_file, "key = value file applied on top of the preset");
  for (const auto& key : exo::config_keys()) {
    if (key == "problem") continue;
    r->add_option_function<std::string>(
        "--" + key, [&overrides, key](const std::string& v) { overrides[key] = v; }, "override config key " + key);
  }

  exo::DiscretizeArgs disc;
  auto* g = app.add_subcommand("discretize-p2", "tabular approximation of the 2-d anti-correlated system");
  g->add_option("--nx", disc.grid.n_exo, "exogenous grid cells")->capture_default_str();
  g->add_option("--ne", disc.grid.n_endo, "endogenous grid cells")->capture_default_str();
  g->add_option("--x-min", disc.grid.x_min, "lowest exogenous cell center")->capture_default_str();
  g->add_option("--x-max", disc.grid.x_max, "highest exogenous cell center")->capture_default_str();
  g->add_option("--e-min", disc.grid.e_min, "lowest endogenous cell center")->capture_default_str();
  g->add_option("--e-max", disc.grid.e_max, "highest endogenous cell center")->capture_default_str();
  g->add_option("--gamma", disc.gamma, "discount factor")->capture_default_str();
  g->add_option("--out-mdp", disc.out_mdp, "output MDP file")->required();
  g->add_option("--out-policy", disc.out_policy, "output policy file")->required();

  CLI11_PARSE(app, argc, argv);

  if (c->parsed()) return exo::cmd_collect(collect, std::cout, std::cerr);
  if (d->parsed()) return exo::cmd_decompose(decompose, std::cout, std::cerr);
  if (m->parsed()) return exo::cmd_moments(moments, std::cout, std::cerr);
  if (g->parsed()) return exo::cmd_discretize_p2(disc, std::cout, std::cerr);

  exo::ExperimentConfig cfg;
  try {
    cfg = exo::preset(problem);
    if (!config_file.empty()) cfg = exo::parse_config(exo::read_file(config_file), cfg);
    for (const auto& [k, v] : overrides) exo::set_config_value(cfg, k, v);
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "reproduce: " << e.what() << "\n";
    return exo::kExitError;
  }
  return exo::cmd_reproduce(cfg, std::cout, std::cerr);
}
