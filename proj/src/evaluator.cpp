#include "dnpo/evaluator.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "dnpo/rng.hpp"

namespace dnpo {

int levenshtein(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= b.size(); ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

OracleEvaluator::OracleEvaluator(std::map<std::string, std::string> targets)
    : targets_(std::move(targets)) {}

int OracleEvaluator::score(const std::string& prompt, const std::string& response) {
  auto it = targets_.find(prompt);
  if (it == targets_.end())
    throw std::invalid_argument("oracle evaluator: no target for prompt \"" + prompt + "\"");
  return std::clamp(100 - levenshtein(response, it->second), 0, 100);
}

namespace {

std::string cache_key(const std::string& prompt, const std::string& response) {
  uint64_t h = fnv1a64(prompt);
  h = fnv1a64(std::string(1, '\x1f'), h);
  h = fnv1a64(response, h);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

CachingEvaluator::CachingEvaluator(Evaluator& inner, std::string cache_path)
    : inner_(inner), cache_path_(std::move(cache_path)) {
  if (cache_path_.empty()) return;
  std::ifstream in(cache_path_);
  if (!in) return;  // first run: no cache yet
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw std::runtime_error("evaluator cache: " + cache_path_ + " is not a JSON object");
  for (auto& [k, v] : j.items()) cache_[k] = v.get<int>();
}

int CachingEvaluator::score(const std::string& prompt, const std::string& response) {
  std::string key = cache_key(prompt, response);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  int s = inner_.score(prompt, response);
  ++inner_calls_;
  cache_[key] = s;
  persist();
  return s;
}

void CachingEvaluator::persist() const {
  if (cache_path_.empty()) return;
  nlohmann::json j(cache_);
  std::ofstream out(cache_path_, std::ios::trunc);
  if (!out) throw std::runtime_error("evaluator cache: cannot write " + cache_path_);
  out << j.dump();
}

void ExternalEvaluatorConfig::validate() const {
  if (endpoint.empty()) throw std::invalid_argument("external evaluator: endpoint required");
  if (max_retries < 0) throw std::invalid_argument("external evaluator: negative retry count");
}

ExternalEvaluator::ExternalEvaluator(ExternalEvaluatorConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
}

int ExternalEvaluator::score(const std::string& prompt, const std::string& response) {
  nlohmann::json body = {{"model", cfg_.model},
                         {"prompt", render_judge_prompt(prompt, response)}};
  httplib::Headers headers;
  if (const char* key = std::getenv(cfg_.api_key_env.c_str()))
    headers.emplace("Authorization", std::string("Bearer ") + key);

  std::string err = "no attempt made";
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(100 * attempt));
    httplib::Client client(cfg_.endpoint);
    client.set_read_timeout(cfg_.timeout_seconds, 0);
    auto res = client.Post(cfg_.path, headers, body.dump(), "application/json");
    if (!res) {
      err = "connection failure";
      continue;
    }
    if (res->status != 200) {
      err = "HTTP status " + std::to_string(res->status);
      continue;
    }
    std::string text = res->body;
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (!j.is_discarded() && j.is_object() && j.contains("score")) {
      const auto& s = j["score"];
      text = s.is_string() ? s.get<std::string>() : s.dump();
    }
    if (auto v = parse_score(text)) return *v;
    err = "unparseable reply \"" + res->body.substr(0, 80) + "\"";
  }
  throw std::runtime_error("external evaluator: " + err + " after " +
                           std::to_string(cfg_.max_retries) + " retries");
}

std::string judge_template() {
  return
      "You are tasked with evaluating the quality of the given answer based on the provided "
      "question. Your task is to assign a score between 0 and 100, where 0 indicates very poor "
      "quality, and 100 indicates excellent quality. You should use a 1-point increment scale, "
      "meaning the score can be any whole number between 0 and 100 (e.g. 73,91,68) and avoiding "
      "scores that are always multiples of 5. Consider factors such as relevance, clarity, "
      "accuracy, and completeness. Provide only the score without any explanation.\n"
      "\n"
      "Question: [question]\n"
      "\n"
      "answer: [answer]\n"
      "\n"
      "Score:\n";
}

std::string render_judge_prompt(const std::string& question, const std::string& answer) {
  if (question.empty()) throw std::invalid_argument("render_judge_prompt: empty question");
  const std::string tpl = judge_template();
  const std::string q_slot = "[question]";
  const std::string a_slot = "[answer]";
  std::string out;
  out.reserve(tpl.size() + question.size() + answer.size());
  size_t i = 0;
  while (i < tpl.size()) {
    if (tpl.compare(i, q_slot.size(), q_slot) == 0) {
      out += question;
      i += q_slot.size();
    } else if (tpl.compare(i, a_slot.size(), a_slot) == 0) {
      out += answer;
      i += a_slot.size();
    } else {
      out += tpl[i++];
    }
  }
  return out;
}

std::optional<int> parse_score(const std::string& raw) {
  int found = 0;
  long long value = -1;
  size_t i = 0;
  while (i < raw.size()) {
    if (std::isdigit(static_cast<unsigned char>(raw[i]))) {
      bool negative = i > 0 && raw[i - 1] == '-';
      long long v = 0;
      size_t len = 0;
      while (i < raw.size() && std::isdigit(static_cast<unsigned char>(raw[i]))) {
        if (len < 10) v = v * 10 + (raw[i] - '0');
        ++len;
        ++i;
      }
      ++found;
      value = negative || len >= 10 ? -1 : v;
    } else {
      ++i;
    }
  }
  if (found != 1 || value < 0 || value > 100) return std::nullopt;
  return static_cast<int>(value);
}

}  // namespace dnpo
