#include "dnpo/labeler.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "dnpo/rng.hpp"

namespace dnpo {

namespace {

using nlohmann::json;

json parse_line(const std::string& line, const std::string& path, size_t lineno) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": not a JSON object");
  return j;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const std::string& line : lines) out << line << "\n";
  if (!out) throw std::runtime_error("short write to " + path);
}

}  // namespace

void LabelConfig::validate() const {
  if (temperature < 0.0) throw std::invalid_argument("label config: negative temperature");
  if (max_new_tokens < 1) throw std::invalid_argument("label config: max_new_tokens < 1");
  if (max_retries < 0) throw std::invalid_argument("label config: negative retry count");
}

std::vector<DatasetExample> load_dataset_jsonl(const std::string& path) {
  std::vector<DatasetExample> out;
  size_t lineno = 0;
  for (const std::string& line : read_lines(path)) {
    json j = parse_line(line, path, ++lineno);
    out.push_back({j.at("id").get<std::string>(), j.at("prompt").get<std::string>(),
                   j.at("response").get<std::string>()});
  }
  return out;
}

void save_dataset_jsonl(const std::string& path, const std::vector<DatasetExample>& examples) {
  std::vector<std::string> lines;
  for (const DatasetExample& e : examples)
    lines.push_back(json{{"id", e.id}, {"prompt", e.prompt}, {"response", e.response}}.dump());
  write_lines(path, lines);
}

std::vector<GeneratedResponse> load_generations_jsonl(const std::string& path) {
  std::vector<GeneratedResponse> out;
  size_t lineno = 0;
  for (const std::string& line : read_lines(path)) {
    json j = parse_line(line, path, ++lineno);
    out.push_back({j.at("id").get<std::string>(), j.at("prompt").get<std::string>(),
                   j.at("response").get<std::string>(), j.at("iteration").get<int>(),
                   j.at("seed").get<uint64_t>()});
  }
  return out;
}

void save_generations_jsonl(const std::string& path,
                            const std::vector<GeneratedResponse>& generations) {
  std::vector<std::string> lines;
  for (const GeneratedResponse& g : generations)
    lines.push_back(json{{"id", g.id},
                         {"prompt", g.prompt},
                         {"response", g.response},
                         {"iteration", g.iteration},
                         {"seed", g.seed}}
                        .dump());
  write_lines(path, lines);
}

std::vector<PreferencePair> load_pairs_jsonl(const std::string& path, const Vocab& vocab) {
  std::vector<PreferencePair> out;
  size_t lineno = 0;
  for (const std::string& line : read_lines(path)) {
    json j = parse_line(line, path, ++lineno);
    PreferencePair p;
    p.id = j.at("id").get<std::string>();
    p.prompt = vocab.encode(j.at("prompt").get<std::string>());
    p.positive = vocab.encode_response(j.at("positive").get<std::string>());
    p.negative = vocab.encode_response(j.at("negative").get<std::string>());
    p.positive_source = positive_source_from_string(j.at("positive_source").get<std::string>());
    p.score_human = j.at("score_human").get<int>();
    p.score_generated = j.at("score_generated").get<int>();
    validate_pair(p);
    out.push_back(std::move(p));
  }
  return out;
}

void save_pairs_jsonl(const std::string& path, const std::vector<PreferencePair>& pairs,
                      const Vocab& vocab) {
  std::vector<std::string> lines;
  for (const PreferencePair& p : pairs) {
    validate_pair(p);
    lines.push_back(json{{"id", p.id},
                         {"prompt", vocab.decode(p.prompt)},
                         {"positive", vocab.decode(p.positive)},
                         {"negative", vocab.decode(p.negative)},
                         {"positive_source", to_string(p.positive_source)},
                         {"score_human", p.score_human},
                         {"score_generated", p.score_generated}}
                        .dump());
  }
  write_lines(path, lines);
}

uint64_t generation_seed(uint64_t base_seed, int iteration, const std::string& id) {
  return derive_seed(base_seed, fnv1a64(id), static_cast<uint64_t>(iteration));
}

PreferencePair build_pair(const std::string& id, const std::vector<int>& prompt,
                          const std::vector<int>& y_human, const std::vector<int>& y_gen,
                          int score_human, int score_gen) {
  PreferencePair p;
  p.id = id;
  p.prompt = prompt;
  p.score_human = score_human;
  p.score_generated = score_gen;
  bool human_positive = score_human >= score_gen;  // tie keeps the human response positive
  p.positive_source = human_positive ? PositiveSource::human : PositiveSource::generated;
  p.positive = human_positive ? y_human : y_gen;
  p.negative = human_positive ? y_gen : y_human;
  validate_pair(p);
  return p;
}

GeneratedResponse generate_response(const ModelParams& model, const Vocab& vocab,
                                    const DatasetExample& example, const LabelConfig& cfg) {
  cfg.validate();
  std::vector<int> prompt = vocab.encode(example.prompt);
  if (prompt.empty()) throw std::invalid_argument("example " + example.id + ": empty prompt");
  uint64_t seed = generation_seed(cfg.base_seed, cfg.iteration, example.id);
  std::vector<int> tokens = generate(model, prompt, cfg.max_new_tokens, cfg.temperature, seed);
  return {example.id, example.prompt, vocab.decode(tokens), cfg.iteration, seed};
}

namespace {

bool score_with_retries(Evaluator& evaluator, const std::string& prompt,
                        const std::string& response, int max_retries, int& out,
                        std::string& reason) {
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    try {
      int s = evaluator.score(prompt, response);
      if (s < 0 || s > 100) {
        reason = "evaluator returned out-of-range score " + std::to_string(s);
        continue;
      }
      out = s;
      return true;
    } catch (const std::exception& e) {
      reason = e.what();
    }
  }
  return false;
}

}  // namespace

LabelResult label_dataset(const ModelParams& model, const Vocab& vocab,
                          const std::vector<DatasetExample>& dataset, Evaluator& evaluator,
                          const LabelConfig& cfg) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("label_dataset: empty dataset");
  LabelResult result;
  for (const DatasetExample& ex : dataset) {
    GeneratedResponse gen = generate_response(model, vocab, ex, cfg);
    result.generations.push_back(gen);

    int s_human = 0, s_gen = 0;
    std::string reason;
    if (!score_with_retries(evaluator, ex.prompt, ex.response, cfg.max_retries, s_human,
                            reason) ||
        !score_with_retries(evaluator, ex.prompt, gen.response, cfg.max_retries, s_gen,
                            reason)) {
      result.skipped.push_back({ex.id, reason});
      ++result.stats.skipped;
      continue;
    }

    result.pairs.push_back(build_pair(ex.id, vocab.encode(ex.prompt),
                                      vocab.encode_response(ex.response),
                                      vocab.encode_response(gen.response), s_human, s_gen));
    if (s_gen > s_human)
      ++result.stats.generated_wins;
    else if (s_gen == s_human)
      ++result.stats.ties;
    else
      ++result.stats.human_wins;
  }
  return result;
}

}  // namespace dnpo
