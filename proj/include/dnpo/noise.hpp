#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dnpo/model.hpp"

namespace dnpo {

// The variance head: per-position, per-vocabulary-entry log standard
// deviation predicted from the reference model's hidden states.
struct NoiseParams {
  Mat w_sigma;  // hidden_dim x vocab_size
  Mat b_sigma;  // 1 x vocab_size

  std::vector<std::pair<std::string, Mat*>> entries();
  std::vector<std::pair<std::string, const Mat*>> entries() const;
};

struct NoiseConfig {
  double alpha = 0.1;            // variance penalty weight
  double log_sigma_clamp_lo = -10.0;
  double log_sigma_clamp_hi = 2.0;
  // Test mode: treat sigma as exactly zero everywhere, making the noisy
  // objective collapse onto the noiseless one bitwise.
  bool force_sigma_zero = false;

  void validate() const;
};

struct NoiseDraw {
  Mat epsilon;  // standard normal, rows x cols of the logits it perturbs
  uint64_t seed = 0;
};

NoiseParams init_noise_params(const ModelConfig& config, uint64_t seed);
NoiseParams zeros_like(const NoiseParams& like);

NoiseDraw make_noise_draw(int rows, int cols, uint64_t seed);

// clamp(hidden * W_sigma + b_sigma); one row per hidden row.
Mat predict_log_sigma(const NoiseParams& noise, const Mat& hidden, const NoiseConfig& cfg);

// z + exp(log_sigma) ⊙ epsilon
Mat noisy_logits(const Mat& z, const Mat& log_sigma, const NoiseDraw& draw);

// Sum over y_minus tokens of log softmax(z')[token], where z' are the
// noise-perturbed reference logits at the positions predicting y_minus.
double noisy_sequence_log_prob(const ModelParams& ref, const NoiseParams& noise,
                               const std::vector<int>& prompt, const std::vector<int>& y_minus,
                               const NoiseDraw& draw, const NoiseConfig& cfg);

// alpha times the batch mean of per-example mean sigma^2 (each example's
// sigma grid averaged over positions and vocabulary first).
double variance_penalty(const NoiseParams& noise, const std::vector<Mat>& hidden_batch,
                        double alpha, const NoiseConfig& cfg);

// --- graph pieces ---

struct NoiseVars {
  Var w_sigma;
  Var b_sigma;

  std::vector<Var> entries() const { return {w_sigma, b_sigma}; }
};

NoiseVars bind_noise(Tape& t, const NoiseParams& params, bool trainable);

// log sigma node for one example's hidden rows (placed as a constant).
Var build_log_sigma(Tape& t, const NoiseVars& noise, Var hidden_rows, const NoiseConfig& cfg);

Var build_noisy_logits(Tape& t, Var z_rows, Var log_sigma, const NoiseDraw& draw);

NoiseParams collect_noise_grads(const Tape& tape, const NoiseVars& vars,
                                const NoiseParams& shape);

}  // namespace dnpo
