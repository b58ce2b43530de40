#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dnpo/evaluator.hpp"
#include "dnpo/model.hpp"
#include "dnpo/pair.hpp"
#include "dnpo/tokenizer.hpp"

namespace dnpo {

struct DatasetExample {
  std::string id;
  std::string prompt;
  std::string response;  // the human reference
};

struct GeneratedResponse {
  std::string id;
  std::string prompt;
  std::string response;
  int iteration = 0;
  uint64_t seed = 0;
};

struct SkippedExample {
  std::string id;
  std::string reason;
};

struct LabelStats {
  long long human_wins = 0;
  long long ties = 0;
  long long generated_wins = 0;
  long long skipped = 0;
};

struct LabelConfig {
  uint64_t base_seed = 0;
  int iteration = 0;
  double temperature = 1.0;
  int max_new_tokens = 16;
  int max_retries = 2;  // extra scoring attempts before skipping an example

  void validate() const;
};

struct LabelResult {
  std::vector<PreferencePair> pairs;              // dataset order, skipped examples removed
  std::vector<GeneratedResponse> generations;     // one per dataset example
  std::vector<SkippedExample> skipped;
  LabelStats stats;
};

// JSONL codecs; one object per line, keys sorted, so identical data produces
// identical bytes.
std::vector<DatasetExample> load_dataset_jsonl(const std::string& path);
void save_dataset_jsonl(const std::string& path, const std::vector<DatasetExample>& examples);
std::vector<GeneratedResponse> load_generations_jsonl(const std::string& path);
void save_generations_jsonl(const std::string& path,
                            const std::vector<GeneratedResponse>& generations);
std::vector<PreferencePair> load_pairs_jsonl(const std::string& path, const Vocab& vocab);
void save_pairs_jsonl(const std::string& path, const std::vector<PreferencePair>& pairs,
                      const Vocab& vocab);

uint64_t generation_seed(uint64_t base_seed, int iteration, const std::string& id);

// The labeling rule: the higher evaluator score is positive, a tie keeps the
// human response positive.
PreferencePair build_pair(const std::string& id, const std::vector<int>& prompt,
                          const std::vector<int>& y_human, const std::vector<int>& y_gen,
                          int score_human, int score_gen);

GeneratedResponse generate_response(const ModelParams& model, const Vocab& vocab,
                                    const DatasetExample& example, const LabelConfig& cfg);

// Generate one response per example, score both candidates, emit pairs.
// Scoring failures retry, then skip the example; generation is recorded
// either way.
LabelResult label_dataset(const ModelParams& model, const Vocab& vocab,
                          const std::vector<DatasetExample>& dataset, Evaluator& evaluator,
                          const LabelConfig& cfg);

}  // namespace dnpo
