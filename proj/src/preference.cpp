#include "dnpo/preference.hpp"

#include <stdexcept>

namespace dnpo {

void LossConfig::validate() const {
  if (!(lambda > 0.0)) throw std::invalid_argument("LossConfig: lambda must be positive");
}

double pair_margin(const PairLogRatios& r, const LossConfig& cfg) {
  cfg.validate();
  return cfg.lambda * ((r.lp_pos_policy - r.lp_pos_ref) - (r.lp_neg_policy - r.lp_neg_ref));
}

MarginDecomposition margin_decomposition(const PairLogRatios& r) {
  MarginDecomposition d;
  d.policy_positive = r.lp_pos_policy;
  d.policy_negative = -r.lp_neg_policy;
  d.reference_negative = r.lp_neg_ref;
  d.reference_positive = -r.lp_pos_ref;
  d.recombined =
      d.policy_positive + d.policy_negative + d.reference_negative + d.reference_positive;
  return d;
}

Var build_log_prob_from_logit_rows(Tape& t, Var logit_rows, const std::vector<int>& response) {
  if (response.empty())
    throw std::invalid_argument("build_log_prob_from_logit_rows: empty response");
  return t.sum(t.gather_rows(t.log_softmax_rows(logit_rows), response));
}

Var build_margin(Tape& t, Var lp_pos_policy, Var lp_neg_policy, double lp_pos_ref,
                 Var lp_neg_ref, double lambda) {
  Var pos_ratio = t.sub(lp_pos_policy, t.constant(Mat(1, 1, {lp_pos_ref})));
  Var neg_ratio = t.sub(lp_neg_policy, lp_neg_ref);
  return t.scale(t.sub(pos_ratio, neg_ratio), lambda);
}

Var build_spin_loss(Tape& t, const ModelVars& policy, const ModelParams& ref,
                    const std::vector<PreferencePair>& pairs, const LossConfig& cfg,
                    double* mean_margin) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("spin_loss: empty batch");
  Var total;
  double margin_total = 0.0;
  for (const PreferencePair& pair : pairs) {
    validate_pair(pair);
    Var lp_pos_policy = build_sequence_log_prob(t, policy, pair.prompt, pair.positive);
    Var lp_neg_policy = build_sequence_log_prob(t, policy, pair.prompt, pair.negative);
    double lp_pos_ref = sequence_log_prob(ref, pair.prompt, pair.positive);
    // The reference negative term goes through the same log-softmax graph
    // path the noisy objective uses, so the two modes agree bitwise when
    // the noise is forced to zero.
    ResponseSlices neg_ref = response_slices(ref, pair.prompt, pair.negative);
    Var lp_neg_ref =
        build_log_prob_from_logit_rows(t, t.constant(neg_ref.logits), pair.negative);
    Var margin =
        build_margin(t, lp_pos_policy, lp_neg_policy, lp_pos_ref, lp_neg_ref, cfg.lambda);
    Var term = t.neg_log_sigmoid(margin);
    margin_total += margin.scalar();
    total = total.valid() ? t.add(total, term) : term;
  }
  if (mean_margin) *mean_margin = margin_total / static_cast<double>(pairs.size());
  return total;
}

double spin_loss(const ModelParams& policy, const ModelParams& ref,
                 const std::vector<PreferencePair>& pairs, const LossConfig& cfg) {
  Tape t;
  ModelVars vars = bind_model(t, policy, false);
  return build_spin_loss(t, vars, ref, pairs, cfg).scalar();
}

}  // namespace dnpo
