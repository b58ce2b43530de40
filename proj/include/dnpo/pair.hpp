#pragma once

#include <string>
#include <vector>

namespace dnpo {

enum class PositiveSource { human, generated };

// Prompt plus ordered (positive, negative) responses with provenance and the
// evaluator scores that decided the ordering.
struct PreferencePair {
  std::string id;
  std::vector<int> prompt;
  std::vector<int> positive;
  std::vector<int> negative;
  PositiveSource positive_source = PositiveSource::human;
  int score_human = 0;
  int score_generated = 0;
};

// Enforces: scores in [0,100]; human is positive exactly when
// score_human >= score_generated; prompt and responses non-empty.
void validate_pair(const PreferencePair& pair);

const char* to_string(PositiveSource s);
PositiveSource positive_source_from_string(const std::string& s);

}  // namespace dnpo
