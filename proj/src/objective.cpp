#include "dnpo/objective.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "dnpo/rng.hpp"

namespace dnpo {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void DnpoCfg::validate() const {
  loss.validate();
  noise.validate();
}

void DrawSeeds::validate() const {
  if (model_draw == noise_draw)
    throw std::invalid_argument(
        "DrawSeeds: the model and noise terms must use independent draws");
}

DrawSeeds derive_draw_seeds(uint64_t base, size_t pair_index) {
  DrawSeeds s{derive_seed(base, pair_index, 1), derive_seed(base, pair_index, 2)};
  s.validate();
  return s;
}

DnpoGraph build_dnpo_loss(Tape& t, const ModelVars& policy, const ModelParams& ref,
                          const NoiseVars& noise, const std::vector<PreferencePair>& pairs,
                          const DnpoCfg& cfg) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("dnpo_loss: empty batch");
  const double lambda = cfg.loss.lambda;
  const bool forced_zero = cfg.noise.force_sigma_zero;

  Var model_sum, noise_sum, sigma2_sum;
  double margin_noisy_total = 0.0;
  double margin_clean_total = 0.0;
  double sigma2_total = 0.0;

  for (size_t i = 0; i < pairs.size(); ++i) {
    const PreferencePair& pair = pairs[i];
    validate_pair(pair);
    DrawSeeds seeds = derive_draw_seeds(cfg.seed, i);

    Var lp_pos_policy = build_sequence_log_prob(t, policy, pair.prompt, pair.positive);
    Var lp_neg_policy = build_sequence_log_prob(t, policy, pair.prompt, pair.negative);
    double lp_pos_ref = sequence_log_prob(ref, pair.prompt, pair.positive);
    ResponseSlices neg_ref = response_slices(ref, pair.prompt, pair.negative);
    Var z_rows = t.constant(neg_ref.logits);

    // One reference forward and one log-sigma evaluation per pair serve both
    // loss terms and the penalty; only the epsilon draws differ.
    Var log_sigma;
    if (!forced_zero) {
      Var hidden = t.constant(neg_ref.hidden);
      log_sigma = build_log_sigma(t, noise, hidden, cfg.noise);
    }
    auto noisy_neg_lp = [&](uint64_t draw_seed) {
      if (forced_zero) return build_log_prob_from_logit_rows(t, z_rows, pair.negative);
      NoiseDraw draw = make_noise_draw(neg_ref.logits.rows, neg_ref.logits.cols, draw_seed);
      Var zp = build_noisy_logits(t, z_rows, log_sigma, draw);
      return build_log_prob_from_logit_rows(t, zp, pair.negative);
    };

    // Model term: the noise path enters as a frozen value.
    Var lp_neg_ref_model = t.stop_gradient(noisy_neg_lp(seeds.model_draw));
    Var margin_model =
        build_margin(t, lp_pos_policy, lp_neg_policy, lp_pos_ref, lp_neg_ref_model, lambda);
    Var model_piece = t.neg_log_sigmoid(margin_model);
    model_sum = model_sum.valid() ? t.add(model_sum, model_piece) : model_piece;

    // Noise term: the policy path enters as a frozen value; independent draw.
    Var lp_neg_ref_noise = noisy_neg_lp(seeds.noise_draw);
    Var margin_noise = build_margin(t, t.stop_gradient(lp_pos_policy),
                                    t.stop_gradient(lp_neg_policy), lp_pos_ref,
                                    lp_neg_ref_noise, lambda);
    Var noise_piece = t.neg_log_sigmoid(margin_noise);
    noise_sum = noise_sum.valid() ? t.add(noise_sum, noise_piece) : noise_piece;

    if (!forced_zero) {
      Var sigma = t.exp(log_sigma);
      Var pair_mean_sigma2 = t.mean(t.mul(sigma, sigma));
      sigma2_sum = sigma2_sum.valid() ? t.add(sigma2_sum, pair_mean_sigma2) : pair_mean_sigma2;
      sigma2_total += pair_mean_sigma2.scalar();
    }

    margin_noisy_total += margin_model.scalar();
    double margin_clean = lambda * ((lp_pos_policy.scalar() - lp_pos_ref) -
                                    (lp_neg_policy.scalar() - neg_ref.log_prob));
    margin_clean_total += margin_clean;
  }

  const double n = static_cast<double>(pairs.size());
  DnpoGraph g;
  g.model_term = model_sum;
  g.noise_term = t.scale(noise_sum, -1.0);
  g.penalty = forced_zero ? t.constant(Mat(1, 1, {0.0}))
                          : t.scale(sigma2_sum, cfg.noise.alpha / n);
  g.total = t.add(t.add(g.model_term, g.noise_term), g.penalty);

  g.breakdown.model_term = g.model_term.scalar();
  g.breakdown.noise_term = g.noise_term.scalar();
  g.breakdown.penalty = g.penalty.scalar();
  g.breakdown.total = g.total.scalar();
  g.breakdown.mean_sigma2 = forced_zero ? 0.0 : sigma2_total / n;
  g.breakdown.mean_margin_noisy = margin_noisy_total / n;
  g.breakdown.mean_margin_clean = margin_clean_total / n;
  return g;
}

DnpoLossBreakdown dnpo_loss(const ModelParams& policy, const ModelParams& ref,
                            const NoiseParams& noise, const std::vector<PreferencePair>& pairs,
                            const DnpoCfg& cfg) {
  Tape t;
  ModelVars pv = bind_model(t, policy, false);
  NoiseVars nv = bind_noise(t, noise, false);
  return build_dnpo_loss(t, pv, ref, nv, pairs, cfg).breakdown;
}

OptimizerState init_optimizer(const ModelParams& policy, double learning_rate) {
  OptimizerState s;
  s.learning_rate = learning_rate;
  for (auto& [name, m] : policy.entries()) {
    (void)name;
    s.model_acc.emplace_back(m->rows, m->cols);
  }
  return s;
}

OptimizerState init_optimizer(const ModelParams& policy, const NoiseParams& noise,
                              double learning_rate) {
  OptimizerState s = init_optimizer(policy, learning_rate);
  for (auto& [name, m] : noise.entries()) {
    (void)name;
    s.noise_acc.emplace_back(m->rows, m->cols);
  }
  return s;
}

void rmsprop_update(Mat& param, const Mat& grad, Mat& acc, double lr, double rho, double eps) {
  if (!param.same_shape(grad) || !param.same_shape(acc))
    throw std::invalid_argument("rmsprop_update: shape mismatch");
  for (size_t i = 0; i < param.size(); ++i) {
    double g = grad.data[i];
    acc.data[i] = rho * acc.data[i] + (1.0 - rho) * g * g;
    param.data[i] -= lr * g / (std::sqrt(acc.data[i]) + eps);
  }
}

namespace {

void apply_model_update(ModelParams& params, const ModelParams& grads, OptimizerState& opt) {
  auto pe = params.entries();
  auto ge = grads.entries();
  if (opt.model_acc.size() != pe.size())
    throw std::logic_error("optimizer state does not match model layout");
  for (size_t i = 0; i < pe.size(); ++i)
    rmsprop_update(*pe[i].second, *ge[i].second, opt.model_acc[i], opt.learning_rate, opt.rho,
                   opt.eps);
}

void apply_noise_update(NoiseParams& params, const NoiseParams& grads, OptimizerState& opt) {
  auto pe = params.entries();
  auto ge = grads.entries();
  if (opt.noise_acc.size() != pe.size())
    throw std::logic_error("optimizer state does not match noise head layout");
  for (size_t i = 0; i < pe.size(); ++i)
    rmsprop_update(*pe[i].second, *ge[i].second, opt.noise_acc[i], opt.learning_rate, opt.rho,
                   opt.eps);
}

}  // namespace

DnpoStepResult dnpo_step(const ModelParams& policy, const ModelParams& ref,
                         const NoiseParams& noise, OptimizerState& opt,
                         const std::vector<PreferencePair>& pairs, const DnpoCfg& cfg) {
  Tape t;
  ModelVars pv = bind_model(t, policy, !cfg.freeze_model);
  NoiseVars nv = bind_noise(t, noise, true);
  DnpoGraph g = build_dnpo_loss(t, pv, ref, nv, pairs, cfg);
  t.backward(g.total);

  DnpoStepResult out{policy, noise, g.breakdown};
  if (!cfg.freeze_model) {
    ModelParams grads = collect_grads(t, pv, policy);
    apply_model_update(out.policy, grads, opt);
  }
  NoiseParams ngrads = collect_noise_grads(t, nv, noise);
  apply_noise_update(out.noise, ngrads, opt);
  opt.step += 1;
  return out;
}

SpinStepResult spin_step(const ModelParams& policy, const ModelParams& ref, OptimizerState& opt,
                         const std::vector<PreferencePair>& pairs, const LossConfig& cfg) {
  Tape t;
  ModelVars pv = bind_model(t, policy, true);
  double mean_margin = 0.0;
  Var loss = build_spin_loss(t, pv, ref, pairs, cfg, &mean_margin);
  t.backward(loss);
  SpinStepResult out{policy, loss.scalar(), {}};
  out.breakdown.model_term = out.loss;
  out.breakdown.total = out.loss;
  out.breakdown.mean_margin_noisy = mean_margin;
  out.breakdown.mean_margin_clean = mean_margin;
  ModelParams grads = collect_grads(t, pv, policy);
  apply_model_update(out.policy, grads, opt);
  opt.step += 1;
  return out;
}

void FixedNoiseCfg::validate() const {
  loss.validate();
  if (sigma_const < 0.0)
    throw std::invalid_argument("FixedNoiseCfg: sigma_const must be non-negative");
}

Var build_fixed_noise_loss(Tape& t, const ModelVars& policy, const ModelParams& ref,
                           const std::vector<PreferencePair>& pairs, const FixedNoiseCfg& cfg,
                           DnpoLossBreakdown* breakdown) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("fixed_noise_loss: empty batch");
  Var total;
  double margin_noisy_total = 0.0;
  double margin_clean_total = 0.0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const PreferencePair& pair = pairs[i];
    validate_pair(pair);
    Var lp_pos_policy = build_sequence_log_prob(t, policy, pair.prompt, pair.positive);
    Var lp_neg_policy = build_sequence_log_prob(t, policy, pair.prompt, pair.negative);
    double lp_pos_ref = sequence_log_prob(ref, pair.prompt, pair.positive);
    ResponseSlices neg_ref = response_slices(ref, pair.prompt, pair.negative);

    // Constant-scale noise on the reference negative logits; nothing here is
    // trainable, so the perturbed rows enter the graph as plain constants.
    Mat zp = neg_ref.logits;
    if (cfg.sigma_const > 0.0) {
      NoiseDraw draw = make_noise_draw(zp.rows, zp.cols,
                                       derive_draw_seeds(cfg.seed, i).model_draw);
      for (size_t k = 0; k < zp.size(); ++k) zp.data[k] += cfg.sigma_const * draw.epsilon.data[k];
    }
    Var lp_neg_ref = build_log_prob_from_logit_rows(t, t.constant(zp), pair.negative);
    Var margin = build_margin(t, lp_pos_policy, lp_neg_policy, lp_pos_ref, lp_neg_ref,
                              cfg.loss.lambda);
    Var piece = t.neg_log_sigmoid(margin);
    margin_noisy_total += margin.scalar();
    margin_clean_total += cfg.loss.lambda * ((lp_pos_policy.scalar() - lp_pos_ref) -
                                             (lp_neg_policy.scalar() - neg_ref.log_prob));
    total = total.valid() ? t.add(total, piece) : piece;
  }
  if (breakdown) {
    const double n = static_cast<double>(pairs.size());
    breakdown->model_term = total.scalar();
    breakdown->noise_term = 0.0;
    breakdown->penalty = 0.0;
    breakdown->total = total.scalar();
    breakdown->mean_sigma2 = cfg.sigma_const * cfg.sigma_const;
    breakdown->mean_margin_noisy = margin_noisy_total / n;
    breakdown->mean_margin_clean = margin_clean_total / n;
  }
  return total;
}

double fixed_noise_loss(const ModelParams& policy, const ModelParams& ref,
                        const std::vector<PreferencePair>& pairs, const FixedNoiseCfg& cfg) {
  Tape t;
  ModelVars pv = bind_model(t, policy, false);
  return build_fixed_noise_loss(t, pv, ref, pairs, cfg).scalar();
}

SpinStepResult fixed_noise_step(const ModelParams& policy, const ModelParams& ref,
                                OptimizerState& opt, const std::vector<PreferencePair>& pairs,
                                const FixedNoiseCfg& cfg) {
  Tape t;
  ModelVars pv = bind_model(t, policy, true);
  DnpoLossBreakdown breakdown;
  Var loss = build_fixed_noise_loss(t, pv, ref, pairs, cfg, &breakdown);
  t.backward(loss);
  SpinStepResult out{policy, loss.scalar(), breakdown};
  ModelParams grads = collect_grads(t, pv, policy);
  apply_model_update(out.policy, grads, opt);
  opt.step += 1;
  return out;
}

std::string loss_csv_header() {
  return "step,model_term,noise_term,penalty,total,mean_sigma2,mean_margin_noisy,"
         "mean_margin_clean";
}

std::string loss_csv_row(long long step, const DnpoLossBreakdown& b) {
  return std::to_string(step) + "," + fmt_double(b.model_term) + "," + fmt_double(b.noise_term) +
         "," + fmt_double(b.penalty) + "," + fmt_double(b.total) + "," +
         fmt_double(b.mean_sigma2) + "," + fmt_double(b.mean_margin_noisy) + "," +
         fmt_double(b.mean_margin_clean);
}

}  // namespace dnpo
