#pragma once

#include <string>
#include <vector>

#include "dnpo/noise.hpp"
#include "dnpo/preference.hpp"

namespace dnpo {

struct DnpoCfg {
  LossConfig loss;
  NoiseConfig noise;
  uint64_t seed = 0;          // base for per-pair draw derivation
  bool freeze_model = false;  // train the noise head only

  void validate() const;
};

struct DnpoLossBreakdown {
  double model_term = 0.0;
  double noise_term = 0.0;
  double penalty = 0.0;
  double total = 0.0;
  double mean_sigma2 = 0.0;
  double mean_margin_noisy = 0.0;
  double mean_margin_clean = 0.0;
};

// The two independent noise streams of one pair's loss evaluation. Using the
// same stream for both terms couples the adversarial sides and is rejected.
struct DrawSeeds {
  uint64_t model_draw = 0;
  uint64_t noise_draw = 0;
  void validate() const;
};

DrawSeeds derive_draw_seeds(uint64_t base, size_t pair_index);

struct DnpoGraph {
  Var model_term;
  Var noise_term;
  Var penalty;
  Var total;
  DnpoLossBreakdown breakdown;
};

// Single-pass combined loss: model term (noise path value-frozen), negated
// noise term (policy path value-frozen), variance penalty. One reference
// forward per pair feeds both terms and the penalty.
DnpoGraph build_dnpo_loss(Tape& t, const ModelVars& policy, const ModelParams& ref,
                          const NoiseVars& noise, const std::vector<PreferencePair>& pairs,
                          const DnpoCfg& cfg);

DnpoLossBreakdown dnpo_loss(const ModelParams& policy, const ModelParams& ref,
                            const NoiseParams& noise, const std::vector<PreferencePair>& pairs,
                            const DnpoCfg& cfg);

// Root-mean-square gradient propagation, one accumulator per parameter.
struct OptimizerState {
  double learning_rate = 1e-3;
  double rho = 0.99;
  double eps = 1e-8;
  long long step = 0;
  std::vector<Mat> model_acc;  // ModelParams::entries() order
  std::vector<Mat> noise_acc;  // NoiseParams::entries() order; empty without a noise head
};

OptimizerState init_optimizer(const ModelParams& policy, double learning_rate);
OptimizerState init_optimizer(const ModelParams& policy, const NoiseParams& noise,
                              double learning_rate);

void rmsprop_update(Mat& param, const Mat& grad, Mat& acc, double lr, double rho, double eps);

struct DnpoStepResult {
  ModelParams policy;
  NoiseParams noise;
  DnpoLossBreakdown loss;
};

// One optimizer step on theta and theta_sigma together; the reference is
// read-only.
DnpoStepResult dnpo_step(const ModelParams& policy, const ModelParams& ref,
                         const NoiseParams& noise, OptimizerState& opt,
                         const std::vector<PreferencePair>& pairs, const DnpoCfg& cfg);

// breakdown mirrors the combined objective's record so every training mode
// feeds the same loss-curve columns; for these modes the noise term and
// penalty are identically zero and total equals model_term.
struct SpinStepResult {
  ModelParams policy;
  double loss = 0.0;
  DnpoLossBreakdown breakdown;
};

SpinStepResult spin_step(const ModelParams& policy, const ModelParams& ref, OptimizerState& opt,
                         const std::vector<PreferencePair>& pairs, const LossConfig& cfg);

struct FixedNoiseCfg {
  LossConfig loss;
  double sigma_const = 0.5;  // constant noise scale on reference negative logits
  uint64_t seed = 0;

  void validate() const;
};

Var build_fixed_noise_loss(Tape& t, const ModelVars& policy, const ModelParams& ref,
                           const std::vector<PreferencePair>& pairs, const FixedNoiseCfg& cfg,
                           DnpoLossBreakdown* breakdown = nullptr);

double fixed_noise_loss(const ModelParams& policy, const ModelParams& ref,
                        const std::vector<PreferencePair>& pairs, const FixedNoiseCfg& cfg);

SpinStepResult fixed_noise_step(const ModelParams& policy, const ModelParams& ref,
                                OptimizerState& opt, const std::vector<PreferencePair>& pairs,
                                const FixedNoiseCfg& cfg);

// Fixed columns feeding the per-step loss curve file.
std::string loss_csv_header();
std::string loss_csv_row(long long step, const DnpoLossBreakdown& b);

}  // namespace dnpo
