#include "dnpo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <stdexcept>

namespace dnpo {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_edges(const std::vector<double>& edges) {
  if (edges.size() < 3)
    throw std::invalid_argument("histogram: need at least two bins");
  for (size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i - 1] < edges[i]))
      throw std::invalid_argument("histogram: edges must increase strictly");
}

}  // namespace

std::vector<double> uniform_edges(double lo, double hi, int bins) {
  if (bins < 2) throw std::invalid_argument("uniform_edges: need at least two bins");
  if (!(lo < hi)) throw std::invalid_argument("uniform_edges: lo must be below hi");
  std::vector<double> edges(bins + 1);
  for (int i = 0; i <= bins; ++i) edges[i] = lo + (hi - lo) * i / bins;
  return edges;
}

Histogram make_histogram(const std::vector<double>& values, const std::vector<double>& edges,
                         const std::string& label) {
  check_edges(edges);
  if (values.empty()) throw std::invalid_argument("histogram: empty sample set");
  Histogram h;
  h.bin_edges = edges;
  h.counts.assign(edges.size() - 1, 0);
  for (double v : values) {
    // Bins are [e_i, e_{i+1}); out-of-range values clamp to the end bins.
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    long long idx = (it - edges.begin()) - 1;
    idx = std::max(0ll, std::min<long long>(idx, h.counts.size() - 1));
    ++h.counts[idx];
  }
  h.label = label;
  return h;
}

std::vector<double> sequence_log_probs(const ModelParams& model,
                                       const std::vector<PromptResponse>& samples,
                                       bool token_mean) {
  if (samples.empty()) throw std::invalid_argument("sequence_log_probs: empty sample set");
  std::vector<double> out;
  out.reserve(samples.size());
  for (const PromptResponse& s : samples) {
    double lp = sequence_log_prob(model, s.prompt, s.response);
    out.push_back(token_mean ? lp / static_cast<double>(s.response.size()) : lp);
  }
  return out;
}

Histogram log_prob_histogram(const ModelParams& model, const std::vector<PromptResponse>& samples,
                             const std::vector<double>& edges, bool token_mean,
                             const std::string& label) {
  return make_histogram(sequence_log_probs(model, samples, token_mean), edges, label);
}

WinTieLoss win_tie_loss(const std::vector<double>& scores_a,
                        const std::vector<double>& scores_b) {
  if (scores_a.size() != scores_b.size())
    throw std::invalid_argument("win_tie_loss: score vectors differ in length");
  if (scores_a.empty()) throw std::invalid_argument("win_tie_loss: empty score vectors");
  WinTieLoss w;
  for (size_t i = 0; i < scores_a.size(); ++i) {
    if (scores_a[i] > scores_b[i])
      ++w.wins;
    else if (scores_a[i] < scores_b[i])
      ++w.losses;
    else
      ++w.ties;
  }
  double n = static_cast<double>(scores_a.size());
  w.win_rate = w.wins / n;
  w.tie_rate = w.ties / n;
  w.loss_rate = w.losses / n;
  return w;
}

RougeScore rouge_l(const std::vector<int>& reference, const std::vector<int>& hypothesis) {
  if (reference.empty()) throw std::invalid_argument("rouge_l: empty reference");
  RougeScore s;
  if (hypothesis.empty()) return s;
  size_t n = reference.size(), m = hypothesis.size();
  std::vector<std::vector<int>> dp(n + 1, std::vector<int>(m + 1, 0));
  for (size_t i = 1; i <= n; ++i)
    for (size_t j = 1; j <= m; ++j)
      dp[i][j] = reference[i - 1] == hypothesis[j - 1]
                     ? dp[i - 1][j - 1] + 1
                     : std::max(dp[i - 1][j], dp[i][j - 1]);
  double lcs = dp[n][m];
  s.precision = lcs / static_cast<double>(m);
  s.recall = lcs / static_cast<double>(n);
  s.f = lcs == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

double bleu(const std::vector<int>& reference, const std::vector<int>& hypothesis, int max_n) {
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be positive");
  if (reference.empty() || hypothesis.empty())
    throw std::invalid_argument("bleu: empty input sequence");

  double log_precision_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    if (static_cast<int>(hypothesis.size()) < n) return 0.0;  // no n-grams to score
    std::map<std::vector<int>, int> ref_counts;
    for (size_t i = 0; i + n <= reference.size(); ++i)
      ++ref_counts[std::vector<int>(reference.begin() + i, reference.begin() + i + n)];
    int matched = 0;
    int total = 0;
    std::map<std::vector<int>, int> used;
    for (size_t i = 0; i + n <= hypothesis.size(); ++i) {
      std::vector<int> gram(hypothesis.begin() + i, hypothesis.begin() + i + n);
      ++total;
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end() && used[gram] < it->second) {
        ++used[gram];
        ++matched;
      }
    }
    if (matched == 0) return 0.0;
    log_precision_sum += std::log(static_cast<double>(matched) / total);
  }
  double h = static_cast<double>(hypothesis.size());
  double r = static_cast<double>(reference.size());
  double brevity = h >= r ? 1.0 : std::exp(1.0 - r / h);
  return brevity * std::exp(log_precision_sum / max_n);
}

double mean_of(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("mean_of: empty vector");
  return std::accumulate(values.begin(), values.end(), 0.0) /
         static_cast<double>(values.size());
}

std::string histogram_csv(const std::vector<Histogram>& series) {
  if (series.empty()) throw std::invalid_argument("histogram_csv: no series");
  for (const Histogram& h : series)
    if (h.bin_edges != series.front().bin_edges)
      throw std::invalid_argument("histogram_csv: series do not share edges");
  std::string out = "bin_lo,bin_hi";
  for (const Histogram& h : series) out += ",count_" + h.label;
  out += "\n";
  const auto& edges = series.front().bin_edges;
  for (size_t b = 0; b + 1 < edges.size(); ++b) {
    out += fmt_double(edges[b]) + "," + fmt_double(edges[b + 1]);
    for (const Histogram& h : series) out += "," + std::to_string(h.counts[b]);
    out += "\n";
  }
  return out;
}

std::string win_tie_loss_csv_header() {
  return "series,wins,ties,losses,win_rate,tie_rate,loss_rate";
}

std::string win_tie_loss_csv_row(const std::string& label, const WinTieLoss& w) {
  return label + "," + std::to_string(w.wins) + "," + std::to_string(w.ties) + "," +
         std::to_string(w.losses) + "," + fmt_double(w.win_rate) + "," + fmt_double(w.tie_rate) +
         "," + fmt_double(w.loss_rate);
}

}  // namespace dnpo
