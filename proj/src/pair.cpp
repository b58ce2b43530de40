#include "dnpo/pair.hpp"

#include <stdexcept>

namespace dnpo {

void validate_pair(const PreferencePair& pair) {
  auto in_range = [](int s) { return s >= 0 && s <= 100; };
  if (!in_range(pair.score_human) || !in_range(pair.score_generated))
    throw std::invalid_argument("pair " + pair.id + ": score outside [0, 100]");
  bool human_positive = pair.positive_source == PositiveSource::human;
  if (human_positive != (pair.score_human >= pair.score_generated))
    throw std::invalid_argument("pair " + pair.id + ": positive_source contradicts scores");
  if (pair.prompt.empty()) throw std::invalid_argument("pair " + pair.id + ": empty prompt");
  if (pair.positive.empty() || pair.negative.empty())
    throw std::invalid_argument("pair " + pair.id + ": empty response");
}

const char* to_string(PositiveSource s) {
  return s == PositiveSource::human ? "human" : "generated";
}

PositiveSource positive_source_from_string(const std::string& s) {
  if (s == "human") return PositiveSource::human;
  if (s == "generated") return PositiveSource::generated;
  throw std::invalid_argument("unknown positive_source: " + s);
}

}  // namespace dnpo
