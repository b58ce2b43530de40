#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>

#include <CLI11.hpp>

#include "dnpo/harness.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::string mode;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool has_mode = false;
  bool has_out = false;
  bool has_seed = false;
};

void add_common(CLI::App* sub, CommonOpts& opts) {
  sub->add_option("--config", opts.config_path, "experiment config (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--mode", opts.mode, "override the configured mode")
      ->check(CLI::IsMember({"spin", "dnpo", "fixed_noise", "alpha_spin"}));
  sub->add_option("--seed", opts.seed, "override the configured seed");
  sub->add_option("--out", opts.out_dir, "override the configured output directory");
}

dnpo::ExperimentConfig load_with_overrides(const CLI::App* sub, const CommonOpts& opts) {
  dnpo::ExperimentConfig cfg = dnpo::load_experiment_config(opts.config_path);
  if (sub->count("--mode")) cfg.mode = dnpo::mode_from_string(opts.mode);
  if (sub->count("--seed")) cfg.seed = opts.seed;
  if (sub->count("--out")) cfg.out_dir = opts.out_dir;
  return dnpo::resolve_config(cfg);
}

dnpo::IterationCheckpoint incoming_checkpoint(const dnpo::ExperimentConfig& cfg, int k) {
  dnpo::ExperimentPaths paths = dnpo::experiment_paths(cfg);
  if (k == 0) {
    dnpo::IterationCheckpoint seed = dnpo::make_seed_checkpoint(cfg);
    if (!std::filesystem::exists(paths.checkpoint(-1)))
      dnpo::save_checkpoint(paths.checkpoint(-1), seed);
    return seed;
  }
  std::string prev = paths.checkpoint(k - 1);
  if (!std::filesystem::exists(prev))
    throw std::runtime_error("no checkpoint for iteration " + std::to_string(k - 1) +
                             " under " + cfg.out_dir + "; run earlier iterations first");
  return dnpo::load_checkpoint(prev);
}

void print_row(const dnpo::PassStats& row) {
  std::printf("pass %d (%s): oracle gen %.2f vs human %.2f, win/tie/loss %.2f/%.2f/%.2f, "
              "mean log-prob %.4f\n",
              row.pass, dnpo::to_string(row.mode).c_str(), row.oracle_mean_generated,
              row.oracle_mean_human, row.wtl.win_rate, row.wtl.tie_rate, row.wtl.loss_rate,
              row.gen_mean_log_prob_token);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"iterative self-play preference training with trainable reference noise"};
  app.require_subcommand(1);

  CommonOpts run_opts, iter_opts, gen_opts, label_opts, train_opts, report_opts;
  int iteration = 0;

  CLI::App* run = app.add_subcommand("run", "run the full experiment");
  add_common(run, run_opts);

  CLI::App* iterate = app.add_subcommand("iterate", "run one self-play iteration");
  add_common(iterate, iter_opts);
  iterate->add_option("--iteration", iteration, "iteration index")->required();

  CLI::App* generate = app.add_subcommand("generate", "write one generation pass");
  add_common(generate, gen_opts);
  generate->add_option("--iteration", iteration, "generation pass index")->required();

  CLI::App* label = app.add_subcommand("label", "build preference pairs from a generation pass");
  add_common(label, label_opts);
  label->add_option("--iteration", iteration, "iteration index")->required();

  CLI::App* train = app.add_subcommand("train", "train on an iteration's pair file");
  add_common(train, train_opts);
  train->add_option("--iteration", iteration, "iteration index")->required();

  CLI::App* report = app.add_subcommand("report", "rebuild report files from stats on disk");
  add_common(report, report_opts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      dnpo::ExperimentConfig cfg = load_with_overrides(run, run_opts);
      dnpo::ExperimentReport rep = dnpo::run_experiment(cfg);
      for (const dnpo::PassStats& row : rep.rows) print_row(row);
      std::printf("report: %s\n", dnpo::experiment_paths(cfg).report_csv().c_str());
    } else if (iterate->parsed()) {
      dnpo::ExperimentConfig cfg = load_with_overrides(iterate, iter_opts);
      dnpo::IterationCheckpoint in = incoming_checkpoint(cfg, iteration);
      dnpo::IterationCheckpoint out = dnpo::run_iteration(iteration, in, cfg);
      dnpo::ExperimentPaths paths = dnpo::experiment_paths(cfg);
      dnpo::save_checkpoint(paths.checkpoint(iteration), out);
      std::printf("iteration %d done: %s\n", iteration, paths.checkpoint(iteration).c_str());
    } else if (generate->parsed()) {
      dnpo::ExperimentConfig cfg = load_with_overrides(generate, gen_opts);
      dnpo::IterationCheckpoint in = incoming_checkpoint(cfg, iteration);
      auto gens = dnpo::stage_generate(cfg, iteration, in.model);
      std::printf("wrote %zu generations to %s\n", gens.size(),
                  dnpo::experiment_paths(cfg).generations(iteration).c_str());
    } else if (label->parsed()) {
      dnpo::ExperimentConfig cfg = load_with_overrides(label, label_opts);
      auto pairs = dnpo::stage_label(cfg, iteration);
      long long human = 0;
      for (const auto& p : pairs)
        if (p.positive_source == dnpo::PositiveSource::human) ++human;
      std::printf("wrote %zu pairs (%lld human-positive) to %s\n", pairs.size(), human,
                  dnpo::experiment_paths(cfg).pairs(iteration).c_str());
    } else if (train->parsed()) {
      dnpo::ExperimentConfig cfg = load_with_overrides(train, train_opts);
      dnpo::IterationCheckpoint in = incoming_checkpoint(cfg, iteration);
      dnpo::IterationCheckpoint out = dnpo::stage_train(cfg, iteration, in);
      dnpo::ExperimentPaths paths = dnpo::experiment_paths(cfg);
      dnpo::save_checkpoint(paths.checkpoint(iteration), out);
      std::printf("trained iteration %d: %s\n", iteration, paths.checkpoint(iteration).c_str());
    } else if (report->parsed()) {
      dnpo::ExperimentConfig cfg = load_with_overrides(report, report_opts);
      dnpo::ExperimentReport rep = dnpo::build_report(cfg);
      for (const dnpo::PassStats& row : rep.rows) print_row(row);
      std::printf("report: %s\n", dnpo::experiment_paths(cfg).report_csv().c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
