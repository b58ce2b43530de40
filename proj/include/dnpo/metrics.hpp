#pragma once

#include <string>
#include <vector>

#include "dnpo/model.hpp"

namespace dnpo {

// Fixed-edge histogram; values outside the edge range land in the first or
// last bin so no sample is dropped.
struct Histogram {
  std::vector<double> bin_edges;  // strictly increasing, bins + 1 entries
  std::vector<long long> counts;  // one per bin
  std::string label;
};

struct WinTieLoss {
  long long wins = 0;
  long long ties = 0;
  long long losses = 0;
  double win_rate = 0.0;
  double tie_rate = 0.0;
  double loss_rate = 0.0;
};

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

struct PromptResponse {
  std::vector<int> prompt;
  std::vector<int> response;
};

std::vector<double> uniform_edges(double lo, double hi, int bins);

Histogram make_histogram(const std::vector<double>& values, const std::vector<double>& edges,
                         const std::string& label);

// Per-sample log probability under the model; token_mean divides each
// sequence sum by its response length so lengths are comparable.
std::vector<double> sequence_log_probs(const ModelParams& model,
                                       const std::vector<PromptResponse>& samples,
                                       bool token_mean);

Histogram log_prob_histogram(const ModelParams& model, const std::vector<PromptResponse>& samples,
                             const std::vector<double>& edges, bool token_mean,
                             const std::string& label);

// Elementwise comparison of paired scores: a>b win, a=b tie, a<b loss.
WinTieLoss win_tie_loss(const std::vector<double>& scores_a, const std::vector<double>& scores_b);

// Longest-common-subsequence precision/recall/F1 of hypothesis against
// reference. An empty hypothesis scores zero everywhere.
RougeScore rouge_l(const std::vector<int>& reference, const std::vector<int>& hypothesis);

// Geometric mean of clipped n-gram precisions up to max_n with brevity
// penalty exp(1 - r/h) when the hypothesis is shorter; any zero precision
// zeroes the score (no smoothing).
double bleu(const std::vector<int>& reference, const std::vector<int>& hypothesis, int max_n = 4);

double mean_of(const std::vector<double>& values);

// CSV blocks consumed by external plotting. All series must share edges.
std::string histogram_csv(const std::vector<Histogram>& series);
std::string win_tie_loss_csv_header();
std::string win_tie_loss_csv_row(const std::string& label, const WinTieLoss& w);

}  // namespace dnpo
