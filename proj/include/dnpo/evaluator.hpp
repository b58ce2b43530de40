#pragma once

#include <map>
#include <optional>
#include <string>

namespace dnpo {

// Scores a (prompt, response) on the judge's 0-100 scale. Implementations
// throw on unrecoverable failure; callers decide the retry/skip policy.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual int score(const std::string& prompt, const std::string& response) = 0;
  virtual std::string name() const = 0;
};

int levenshtein(const std::string& a, const std::string& b);

// Deterministic ground-truth judge: 100 minus the edit distance between the
// response and the prompt's known target, clamped to [0, 100].
class OracleEvaluator : public Evaluator {
 public:
  explicit OracleEvaluator(std::map<std::string, std::string> targets);
  int score(const std::string& prompt, const std::string& response) override;
  std::string name() const override { return "oracle"; }

 private:
  std::map<std::string, std::string> targets_;
};

// Memoizes scores by (prompt, response) digest; optionally persists the map
// as JSON so reruns never repeat an external call.
class CachingEvaluator : public Evaluator {
 public:
  // cache_path may be empty for an in-memory-only cache.
  CachingEvaluator(Evaluator& inner, std::string cache_path);
  int score(const std::string& prompt, const std::string& response) override;
  std::string name() const override { return inner_.name() + "+cache"; }
  long long inner_calls() const { return inner_calls_; }

 private:
  Evaluator& inner_;
  std::string cache_path_;
  std::map<std::string, int> cache_;
  long long inner_calls_ = 0;

  void persist() const;
};

struct ExternalEvaluatorConfig {
  std::string endpoint;  // http://host:port
  std::string path = "/v1/score";
  std::string model = "judge";
  int max_retries = 3;
  int timeout_seconds = 30;
  std::string api_key_env = "DNPO_EVAL_API_KEY";  // credential read from here, never from config

  void validate() const;
};

// HTTP judge client: POSTs the rendered judge prompt, parses the scalar
// score from the reply, retries transient failures with linear backoff.
class ExternalEvaluator : public Evaluator {
 public:
  explicit ExternalEvaluator(ExternalEvaluatorConfig cfg);
  int score(const std::string& prompt, const std::string& response) override;
  std::string name() const override { return "external:" + cfg_.model; }

 private:
  ExternalEvaluatorConfig cfg_;
};

// The stored judge template with the [question] and [answer] slots filled.
// Substitution is a single pass over the template, so slot-like text inside
// the arguments is never re-expanded.
std::string judge_template();
std::string render_judge_prompt(const std::string& question, const std::string& answer);

// Exactly one whole number in [0, 100] anywhere in the reply; anything else
// is a parse failure.
std::optional<int> parse_score(const std::string& raw);

}  // namespace dnpo
