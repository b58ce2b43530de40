#include "dnpo/noise.hpp"

#include <cmath>
#include <stdexcept>

#include "dnpo/rng.hpp"

namespace dnpo {

void NoiseConfig::validate() const {
  if (alpha < 0.0) throw std::invalid_argument("NoiseConfig: alpha must be non-negative");
  if (!(log_sigma_clamp_lo < log_sigma_clamp_hi))
    throw std::invalid_argument("NoiseConfig: clamp lower bound must be below upper bound");
}

std::vector<std::pair<std::string, Mat*>> NoiseParams::entries() {
  return {{"w_sigma", &w_sigma}, {"b_sigma", &b_sigma}};
}

std::vector<std::pair<std::string, const Mat*>> NoiseParams::entries() const {
  return {{"w_sigma", &w_sigma}, {"b_sigma", &b_sigma}};
}

NoiseParams init_noise_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  NoiseParams p;
  p.w_sigma = Mat(config.hidden_dim, config.vocab_size);
  p.b_sigma = Mat(1, config.vocab_size);
  Rng rng(seed);
  for (auto& x : p.w_sigma.data) x = 0.08 * rng.normal();
  return p;  // bias zero: log sigma starts near 0, sigma near 1
}

NoiseParams zeros_like(const NoiseParams& like) {
  NoiseParams z = like;
  std::fill(z.w_sigma.data.begin(), z.w_sigma.data.end(), 0.0);
  std::fill(z.b_sigma.data.begin(), z.b_sigma.data.end(), 0.0);
  return z;
}

NoiseDraw make_noise_draw(int rows, int cols, uint64_t seed) {
  Rng rng(seed);
  return NoiseDraw{rng.normal_mat(rows, cols), seed};
}

Mat predict_log_sigma(const NoiseParams& noise, const Mat& hidden, const NoiseConfig& cfg) {
  cfg.validate();
  if (hidden.cols != noise.w_sigma.rows)
    throw std::invalid_argument("predict_log_sigma: hidden width " + shape_str(hidden) +
                                " does not match " + shape_str(noise.w_sigma));
  Mat out(hidden.rows, noise.w_sigma.cols);
  for (int i = 0; i < hidden.rows; ++i) {
    for (int j = 0; j < out.cols; ++j) {
      double s = noise.b_sigma(0, j);
      for (int k = 0; k < hidden.cols; ++k) s += hidden(i, k) * noise.w_sigma(k, j);
      out(i, j) = std::min(cfg.log_sigma_clamp_hi, std::max(cfg.log_sigma_clamp_lo, s));
    }
  }
  return out;
}

Mat noisy_logits(const Mat& z, const Mat& log_sigma, const NoiseDraw& draw) {
  if (!z.same_shape(log_sigma) || !z.same_shape(draw.epsilon))
    throw std::invalid_argument("noisy_logits: shape mismatch");
  Mat out = z;
  for (size_t i = 0; i < out.size(); ++i)
    out.data[i] += std::exp(log_sigma.data[i]) * draw.epsilon.data[i];
  return out;
}

namespace {

double log_prob_from_rows(const Mat& rows, const std::vector<int>& response) {
  double total = 0.0;
  for (int j = 0; j < rows.rows; ++j) {
    double m = rows(j, 0);
    for (int c = 1; c < rows.cols; ++c) m = std::max(m, rows(j, c));
    double z = 0.0;
    for (int c = 0; c < rows.cols; ++c) z += std::exp(rows(j, c) - m);
    total += rows(j, response[j]) - m - std::log(z);
  }
  return total;
}

}  // namespace

double noisy_sequence_log_prob(const ModelParams& ref, const NoiseParams& noise,
                               const std::vector<int>& prompt, const std::vector<int>& y_minus,
                               const NoiseDraw& draw, const NoiseConfig& cfg) {
  cfg.validate();
  ResponseSlices s = response_slices(ref, prompt, y_minus);
  if (cfg.force_sigma_zero) return s.log_prob;
  Mat log_sigma = predict_log_sigma(noise, s.hidden, cfg);
  Mat zp = noisy_logits(s.logits, log_sigma, draw);
  return log_prob_from_rows(zp, y_minus);
}

double variance_penalty(const NoiseParams& noise, const std::vector<Mat>& hidden_batch,
                        double alpha, const NoiseConfig& cfg) {
  cfg.validate();
  if (alpha < 0.0) throw std::invalid_argument("variance_penalty: alpha must be non-negative");
  if (hidden_batch.empty()) throw std::invalid_argument("variance_penalty: empty batch");
  if (cfg.force_sigma_zero) return 0.0;
  double batch_sum = 0.0;
  for (const Mat& hidden : hidden_batch) {
    Mat log_sigma = predict_log_sigma(noise, hidden, cfg);
    double example_sum = 0.0;
    for (double ls : log_sigma.data) {
      double sigma = std::exp(ls);
      example_sum += sigma * sigma;
    }
    batch_sum += example_sum / static_cast<double>(log_sigma.size());
  }
  return alpha * batch_sum / static_cast<double>(hidden_batch.size());
}

NoiseVars bind_noise(Tape& t, const NoiseParams& params, bool trainable) {
  NoiseVars v;
  v.w_sigma = trainable ? t.leaf(params.w_sigma) : t.constant(params.w_sigma);
  v.b_sigma = trainable ? t.leaf(params.b_sigma) : t.constant(params.b_sigma);
  return v;
}

Var build_log_sigma(Tape& t, const NoiseVars& noise, Var hidden_rows, const NoiseConfig& cfg) {
  cfg.validate();
  Var pre = t.add_row_broadcast(t.matmul(hidden_rows, noise.w_sigma), noise.b_sigma);
  return t.clamp(pre, cfg.log_sigma_clamp_lo, cfg.log_sigma_clamp_hi);
}

Var build_noisy_logits(Tape& t, Var z_rows, Var log_sigma, const NoiseDraw& draw) {
  return t.add(z_rows, t.mul(t.exp(log_sigma), t.constant(draw.epsilon)));
}

NoiseParams collect_noise_grads(const Tape& tape, const NoiseVars& vars,
                                const NoiseParams& shape) {
  NoiseParams g = zeros_like(shape);
  g.w_sigma = tape.grad(vars.w_sigma);
  g.b_sigma = tape.grad(vars.b_sigma);
  return g;
}

}  // namespace dnpo
