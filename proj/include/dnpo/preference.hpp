#pragma once

#include <vector>

#include "dnpo/model.hpp"
#include "dnpo/pair.hpp"

namespace dnpo {

// The four sequence log-probabilities entering one pair's loss.
struct PairLogRatios {
  double lp_pos_policy = 0.0;
  double lp_pos_ref = 0.0;
  double lp_neg_policy = 0.0;
  double lp_neg_ref = 0.0;
};

struct LossConfig {
  double lambda = 0.1;
  void validate() const;
};

// lambda * [(lp_pos_policy - lp_pos_ref) - (lp_neg_policy - lp_neg_ref)]
double pair_margin(const PairLogRatios& r, const LossConfig& cfg);

// Signed contributions summing to pair_margin / lambda. The policy terms
// never receive noise; noise on the reference negative term lowers it and
// with it the margin, noise on the reference positive term would raise the
// margin instead.
struct MarginDecomposition {
  double policy_positive;      // +lp_pos_policy
  double policy_negative;      // -lp_neg_policy
  double reference_negative;   // +lp_neg_ref
  double reference_positive;   // -lp_pos_ref
  double recombined;           // sum of the four
};

MarginDecomposition margin_decomposition(const PairLogRatios& r);

// Sum over pairs of neg_log_sigmoid(margin); policy differentiable,
// reference frozen.
double spin_loss(const ModelParams& policy, const ModelParams& ref,
                 const std::vector<PreferencePair>& pairs, const LossConfig& cfg);

// --- graph pieces, shared with the combined objective ---

// sum over response tokens of log softmax(logit_rows)[token]; one row per
// response position.
Var build_log_prob_from_logit_rows(Tape& t, Var logit_rows, const std::vector<int>& response);

// Margin node; lp_neg_ref enters as a graph node so callers can route a
// noisy (or frozen) reference term through it.
Var build_margin(Tape& t, Var lp_pos_policy, Var lp_neg_policy, double lp_pos_ref,
                 Var lp_neg_ref, double lambda);

// mean_margin, when given, receives the batch mean of the margin values.
Var build_spin_loss(Tape& t, const ModelVars& policy, const ModelParams& ref,
                    const std::vector<PreferencePair>& pairs, const LossConfig& cfg,
                    double* mean_margin = nullptr);

}  // namespace dnpo
