#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dnpo/checkpoint.hpp"
#include "dnpo/labeler.hpp"
#include "dnpo/metrics.hpp"
#include "dnpo/objective.hpp"
#include "dnpo/tokenizer.hpp"

namespace dnpo {

// Training modes. Iteration 0 is a shared warm-up (human responses positive,
// generations negative, plain pairwise loss) in every mode; the modes differ
// from iteration 1 on.
enum class Mode { spin, dnpo, fixed_noise, alpha_spin };

Mode mode_from_string(const std::string& s);
std::string to_string(Mode m);

struct ExperimentConfig {
  Mode mode = Mode::dnpo;
  int num_iterations = 3;
  int epochs_per_iteration = 3;
  int batch_size = 8;
  double lambda = 0.1;
  double alpha = 0.1;
  double sigma_const = 0.5;
  double learning_rate = 1e-3;
  uint64_t seed = 0;
  // Corpus files. Empty paths are resolved against out_dir and, when absent
  // on disk, filled with a synthetic corpus derived from the seed.
  std::string dataset;
  std::string targets;
  std::string vocab;
  std::string out_dir;
  int max_new_tokens = 8;
  double temperature = 1.0;
  ModelConfig model;
  // Diagnostic switch: run dnpo mode with the noise forced to zero.
  bool force_sigma_zero = false;

  bool trains_noise() const { return mode == Mode::dnpo; }
  void validate() const;
};

// JSON document whose keys mirror the field names above; absent keys keep
// their defaults.
ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const std::string& path, const ExperimentConfig& cfg);

// Hash of everything that determines results: the canonical config document
// minus file locations, chained with the bytes of the dataset, target, and
// vocabulary files. Stored in every checkpoint so stale state is detectable.
uint64_t config_digest(const ExperimentConfig& cfg);

// Content hash of the parameter arrays; guards the frozen reference.
uint64_t params_digest(const ModelParams& params);

// Echo-task corpus: the target of each prompt is the prompt itself, and the
// recorded human response is the target with an occasional single-glyph
// corruption so evaluator scores can disagree.
struct CorpusConfig {
  int num_examples = 48;
  int prompt_len = 4;
  double corruption_rate = 0.15;
  int corrupt_glyphs = 1;  // substitutions per corrupted response
  int num_glyphs = 8;      // alphabet size, end marker excluded
  uint64_t seed = 0;

  void validate() const;
};

void write_synthetic_corpus(const CorpusConfig& cc, const std::string& vocab_path,
                            const std::string& dataset_path, const std::string& targets_path);

// Fills empty corpus paths with out_dir defaults and synthesizes any missing
// files. Idempotent; every CLI stage resolves the same way.
ExperimentConfig resolve_config(const ExperimentConfig& cfg);

// Locations of everything a run writes, all under out_dir.
struct ExperimentPaths {
  std::string out_dir;

  std::string checkpoint(int iteration) const;  // -1 names the seed state
  std::string partial_checkpoint(int iteration) const;
  std::string generations(int pass) const;
  std::string pairs(int iteration) const;
  std::string loss_csv(int iteration) const;
  std::string histogram(int pair_iteration, bool token_mean) const;
  std::string stats(int pass) const;
  std::string report_json() const;
  std::string report_csv() const;
};

ExperimentPaths experiment_paths(const ExperimentConfig& cfg);

// Untrained starting state; dnpo mode also carries a fresh noise head.
IterationCheckpoint make_seed_checkpoint(const ExperimentConfig& cfg);

// Per-pass record feeding the report. Pass k describes the data generated by
// the model after k trained iterations; the training columns hold the final
// step of the iteration that consumed that data (repeated verbatim on the
// closing generation-only pass).
struct PassStats {
  int pass = 0;
  Mode mode = Mode::dnpo;
  double gen_mean_log_prob_token = 0.0;
  double gen_mean_log_prob_sum = 0.0;
  double oracle_mean_generated = 0.0;
  double oracle_mean_human = 0.0;
  WinTieLoss wtl;  // generated vs human oracle scores
  double mean_rouge_f = 0.0;
  double mean_bleu = 0.0;
  long long skipped = 0;
  bool trained = false;
  double final_loss = 0.0;
  double mean_margin = 0.0;
  double mean_sigma2 = 0.0;
};

struct ExperimentReport {
  std::vector<PassStats> rows;
};

// Seeded without-replacement half/half selection; odd sizes give the older
// set one fewer pair. Identical inputs come back as a permutation.
std::vector<PreferencePair> alpha_spin_mix(const std::vector<PreferencePair>& pairs_km1,
                                           const std::vector<PreferencePair>& pairs_km2,
                                           uint64_t seed);

// One self-play round: generate with the incoming model, label, train for the
// configured epochs against the frozen incoming snapshot. Emits generation,
// pair, loss-curve, histogram, and stats files; the caller persists the
// returned checkpoint. A non-finite loss aborts after saving partial state.
IterationCheckpoint run_iteration(int k, const IterationCheckpoint& checkpoint_in,
                                  const ExperimentConfig& cfg);

// Full run: seed checkpoint, num_iterations rounds, one closing generation
// pass so the final model's output is measured, then the report files.
ExperimentReport run_experiment(const ExperimentConfig& cfg);

// Single stages backing the CLI; run_iteration composes the same code.
std::vector<GeneratedResponse> stage_generate(const ExperimentConfig& cfg, int pass,
                                              const ModelParams& model);
std::vector<PreferencePair> stage_label(const ExperimentConfig& cfg, int k);
IterationCheckpoint stage_train(const ExperimentConfig& cfg, int k,
                                const IterationCheckpoint& checkpoint_in);

// Rebuilds report.json / report.csv from the stats files already on disk.
ExperimentReport build_report(const ExperimentConfig& cfg);

std::string report_csv_header();
std::string report_csv_row(const PassStats& row);

}  // namespace dnpo
