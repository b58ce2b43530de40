#include "dnpo/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "dnpo/rng.hpp"

namespace dnpo {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

// Everything an iteration reads: tokenizer, examples, and the oracle's
// ground-truth targets keyed by prompt.
struct Corpus {
  Vocab vocab;
  std::vector<DatasetExample> dataset;
  std::map<std::string, std::string> targets;
};

Corpus load_corpus(const ExperimentConfig& cfg) {
  Corpus c{Vocab::load(cfg.vocab), load_dataset_jsonl(cfg.dataset), {}};
  if (c.vocab.size() != cfg.model.vocab_size)
    throw std::invalid_argument("vocabulary " + cfg.vocab + " has " +
                                std::to_string(c.vocab.size()) +
                                " entries but model.vocab_size is " +
                                std::to_string(cfg.model.vocab_size));
  if (c.dataset.empty()) throw std::runtime_error("dataset is empty: " + cfg.dataset);
  for (const DatasetExample& t : load_dataset_jsonl(cfg.targets)) {
    if (t.response.empty())
      throw std::runtime_error("target for prompt '" + t.prompt + "' is empty");
    auto [it, inserted] = c.targets.emplace(t.prompt, t.response);
    if (!inserted && it->second != t.response)
      throw std::runtime_error("conflicting targets for prompt '" + t.prompt + "'");
  }
  for (const DatasetExample& ex : c.dataset) {
    if (!c.targets.count(ex.prompt))
      throw std::runtime_error("example " + ex.id + ": no target for its prompt");
    size_t need = c.vocab.encode(ex.prompt).size() +
                  c.vocab.encode_response(ex.response).size();
    if (static_cast<int>(need) > cfg.model.max_seq_len)
      throw std::runtime_error("example " + ex.id + " exceeds max_seq_len");
  }
  return c;
}

// Generation budget leaving room for the end marker that pair encoding
// appends when the budget runs out before one is produced.
int effective_max_new(const ExperimentConfig& cfg, const Corpus& corpus) {
  size_t max_prompt = 0;
  for (const DatasetExample& ex : corpus.dataset)
    max_prompt = std::max(max_prompt, corpus.vocab.encode(ex.prompt).size());
  int cap = cfg.model.max_seq_len - static_cast<int>(max_prompt) - 1;
  int m = std::min(cfg.max_new_tokens, cap);
  if (m < 1)
    throw std::runtime_error("max_seq_len leaves no room to generate after the longest prompt");
  return m;
}

LabelConfig label_config(const ExperimentConfig& cfg, int pass, const Corpus& corpus) {
  LabelConfig lc;
  lc.base_seed = cfg.seed;
  lc.iteration = pass;
  lc.temperature = cfg.temperature;
  lc.max_new_tokens = effective_max_new(cfg, corpus);
  return lc;
}

bool labels_with_scores(const ExperimentConfig& cfg, int k) {
  return k >= 1 && (cfg.mode == Mode::dnpo || cfg.mode == Mode::fixed_noise);
}

std::vector<PreferencePair> human_positive_pairs(const Corpus& corpus,
                                                 const std::vector<GeneratedResponse>& gens) {
  if (gens.size() != corpus.dataset.size())
    throw std::runtime_error("generation count does not match the dataset");
  std::vector<PreferencePair> pairs;
  pairs.reserve(gens.size());
  for (size_t i = 0; i < gens.size(); ++i) {
    const DatasetExample& ex = corpus.dataset[i];
    if (gens[i].id != ex.id)
      throw std::runtime_error("generation order does not match the dataset at " + ex.id);
    pairs.push_back(build_pair(ex.id, corpus.vocab.encode(ex.prompt),
                               corpus.vocab.encode_response(ex.response),
                               corpus.vocab.encode_response(gens[i].response), 0, 0));
  }
  return pairs;
}

std::vector<PreferencePair> scored_pairs(const Corpus& corpus,
                                         const std::vector<GeneratedResponse>& gens) {
  if (gens.size() != corpus.dataset.size())
    throw std::runtime_error("generation count does not match the dataset");
  OracleEvaluator oracle(corpus.targets);
  std::vector<PreferencePair> pairs;
  pairs.reserve(gens.size());
  for (size_t i = 0; i < gens.size(); ++i) {
    const DatasetExample& ex = corpus.dataset[i];
    if (gens[i].id != ex.id)
      throw std::runtime_error("generation order does not match the dataset at " + ex.id);
    pairs.push_back(build_pair(ex.id, corpus.vocab.encode(ex.prompt),
                               corpus.vocab.encode_response(ex.response),
                               corpus.vocab.encode_response(gens[i].response),
                               oracle.score(ex.prompt, ex.response),
                               oracle.score(ex.prompt, gens[i].response)));
  }
  return pairs;
}

PassStats measure_pass(const ExperimentConfig& cfg, int pass, const ModelParams& model,
                       const Corpus& corpus, const std::vector<GeneratedResponse>& gens,
                       long long skipped) {
  OracleEvaluator oracle(corpus.targets);
  std::vector<PromptResponse> samples;
  std::vector<double> s_gen, s_human, rouge_f, bleu_scores;
  for (size_t i = 0; i < gens.size(); ++i) {
    const DatasetExample& ex = corpus.dataset[i];
    samples.push_back({corpus.vocab.encode(ex.prompt),
                       corpus.vocab.encode_response(gens[i].response)});
    s_gen.push_back(oracle.score(ex.prompt, gens[i].response));
    s_human.push_back(oracle.score(ex.prompt, ex.response));
    std::vector<int> target = corpus.vocab.encode(corpus.targets.at(ex.prompt));
    std::vector<int> hyp = corpus.vocab.encode(gens[i].response);
    rouge_f.push_back(rouge_l(target, hyp).f);
    bleu_scores.push_back(hyp.empty() ? 0.0 : bleu(target, hyp, 2));
  }
  PassStats s;
  s.pass = pass;
  s.mode = cfg.mode;
  s.gen_mean_log_prob_token = mean_of(sequence_log_probs(model, samples, true));
  s.gen_mean_log_prob_sum = mean_of(sequence_log_probs(model, samples, false));
  s.oracle_mean_generated = mean_of(s_gen);
  s.oracle_mean_human = mean_of(s_human);
  s.wtl = win_tie_loss(s_gen, s_human);
  s.mean_rouge_f = mean_of(rouge_f);
  s.mean_bleu = mean_of(bleu_scores);
  s.skipped = skipped;
  return s;
}

// Histogram bounds are fixed so every series and every iteration shares the
// same bins; tails land in the edge bins.
const std::vector<double>& token_mean_edges() {
  static const std::vector<double> e = uniform_edges(-6.0, 0.0, 24);
  return e;
}
const std::vector<double>& sequence_sum_edges() {
  static const std::vector<double> e = uniform_edges(-48.0, 0.0, 24);
  return e;
}

void write_pair_histograms(const ExperimentConfig& cfg, const ExperimentPaths& paths,
                           int pair_iteration, const ModelParams& model, const Corpus& corpus,
                           const std::vector<GeneratedResponse>& gens) {
  std::vector<PreferencePair> pairs =
      load_pairs_jsonl(paths.pairs(pair_iteration), corpus.vocab);
  std::vector<PromptResponse> pos, neg, gen;
  for (const PreferencePair& p : pairs) {
    pos.push_back({p.prompt, p.positive});
    neg.push_back({p.prompt, p.negative});
  }
  for (const GeneratedResponse& g : gens)
    gen.push_back({corpus.vocab.encode(g.prompt), corpus.vocab.encode_response(g.response)});
  for (bool token_mean : {true, false}) {
    const std::vector<double>& edges = token_mean ? token_mean_edges() : sequence_sum_edges();
    std::vector<Histogram> series{
        log_prob_histogram(model, pos, edges, token_mean, "positive"),
        log_prob_histogram(model, neg, edges, token_mean, "negative"),
        log_prob_histogram(model, gen, edges, token_mean, "generated")};
    write_file(paths.histogram(pair_iteration, token_mean), histogram_csv(series));
  }
  (void)cfg;
}

json stats_to_json(const PassStats& s) {
  json j;
  j["pass"] = s.pass;
  j["mode"] = to_string(s.mode);
  j["gen_mean_log_prob_token"] = s.gen_mean_log_prob_token;
  j["gen_mean_log_prob_sum"] = s.gen_mean_log_prob_sum;
  j["oracle_mean_generated"] = s.oracle_mean_generated;
  j["oracle_mean_human"] = s.oracle_mean_human;
  j["wins"] = s.wtl.wins;
  j["ties"] = s.wtl.ties;
  j["losses"] = s.wtl.losses;
  j["win_rate"] = s.wtl.win_rate;
  j["tie_rate"] = s.wtl.tie_rate;
  j["loss_rate"] = s.wtl.loss_rate;
  j["mean_rouge_f"] = s.mean_rouge_f;
  j["mean_bleu"] = s.mean_bleu;
  j["skipped"] = s.skipped;
  j["trained"] = s.trained;
  j["final_loss"] = s.final_loss;
  j["mean_margin"] = s.mean_margin;
  j["mean_sigma2"] = s.mean_sigma2;
  return j;
}

PassStats stats_from_json(const json& j) {
  PassStats s;
  s.pass = j.at("pass").get<int>();
  s.mode = mode_from_string(j.at("mode").get<std::string>());
  s.gen_mean_log_prob_token = j.at("gen_mean_log_prob_token").get<double>();
  s.gen_mean_log_prob_sum = j.at("gen_mean_log_prob_sum").get<double>();
  s.oracle_mean_generated = j.at("oracle_mean_generated").get<double>();
  s.oracle_mean_human = j.at("oracle_mean_human").get<double>();
  s.wtl.wins = j.at("wins").get<long long>();
  s.wtl.ties = j.at("ties").get<long long>();
  s.wtl.losses = j.at("losses").get<long long>();
  s.wtl.win_rate = j.at("win_rate").get<double>();
  s.wtl.tie_rate = j.at("tie_rate").get<double>();
  s.wtl.loss_rate = j.at("loss_rate").get<double>();
  s.mean_rouge_f = j.at("mean_rouge_f").get<double>();
  s.mean_bleu = j.at("mean_bleu").get<double>();
  s.skipped = j.at("skipped").get<long long>();
  s.trained = j.at("trained").get<bool>();
  s.final_loss = j.at("final_loss").get<double>();
  s.mean_margin = j.at("mean_margin").get<double>();
  s.mean_sigma2 = j.at("mean_sigma2").get<double>();
  return s;
}

void write_stats(const std::string& path, const PassStats& s) {
  write_file(path, stats_to_json(s).dump(2) + "\n");
}

PassStats read_stats(const std::string& path) {
  return stats_from_json(json::parse(read_file(path)));
}

// The config document with result-determining fields only; the digest and
// the report embed this form so artifacts do not depend on file placement.
json config_core_json(const ExperimentConfig& cfg) {
  json j;
  j["mode"] = to_string(cfg.mode);
  j["num_iterations"] = cfg.num_iterations;
  j["epochs_per_iteration"] = cfg.epochs_per_iteration;
  j["batch_size"] = cfg.batch_size;
  j["lambda"] = cfg.lambda;
  j["alpha"] = cfg.alpha;
  j["sigma_const"] = cfg.sigma_const;
  j["learning_rate"] = cfg.learning_rate;
  j["seed"] = cfg.seed;
  j["max_new_tokens"] = cfg.max_new_tokens;
  j["temperature"] = cfg.temperature;
  j["model"] = {{"vocab_size", cfg.model.vocab_size},
                {"hidden_dim", cfg.model.hidden_dim},
                {"num_blocks", cfg.model.num_blocks},
                {"num_heads", cfg.model.num_heads},
                {"max_seq_len", cfg.model.max_seq_len}};
  j["force_sigma_zero"] = cfg.force_sigma_zero;
  return j;
}

std::string hex_u64(uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct TrainOutcome {
  IterationCheckpoint checkpoint;
  DnpoLossBreakdown last;
};

std::vector<PreferencePair> load_training_pairs(const ExperimentConfig& cfg, int k,
                                                const Vocab& vocab,
                                                const ExperimentPaths& paths) {
  if (cfg.mode == Mode::alpha_spin && k >= 1) {
    std::vector<PreferencePair> km1 = load_pairs_jsonl(paths.pairs(k - 1), vocab);
    if (k == 1) return km1;
    std::vector<PreferencePair> km2 = load_pairs_jsonl(paths.pairs(k - 2), vocab);
    return alpha_spin_mix(km1, km2, derive_seed(cfg.seed, static_cast<uint64_t>(k), 0xA1));
  }
  return load_pairs_jsonl(paths.pairs(k), vocab);
}

TrainOutcome train_on_pairs(const ExperimentConfig& cfg, int k,
                            const IterationCheckpoint& in,
                            const std::vector<PreferencePair>& pairs,
                            const ExperimentPaths& paths) {
  if (pairs.empty())
    throw std::runtime_error("iteration " + std::to_string(k) + ": no training pairs");
  const ModelParams& ref = in.model;  // frozen for the whole iteration
  uint64_t ref_digest = params_digest(ref);

  ModelParams policy = in.model;
  std::optional<NoiseParams> noise = in.noise;
  if (cfg.trains_noise() && !noise)
    throw std::runtime_error("iteration " + std::to_string(k) +
                             ": checkpoint for dnpo mode lacks a noise head");
  OptimizerState opt = cfg.trains_noise()
                           ? init_optimizer(policy, *noise, cfg.learning_rate)
                           : init_optimizer(policy, cfg.learning_rate);

  LossConfig loss_cfg{cfg.lambda};
  const bool plain = k == 0 || cfg.mode == Mode::spin || cfg.mode == Mode::alpha_spin;
  const uint64_t iter_seed = derive_seed(cfg.seed, static_cast<uint64_t>(k), 7);

  std::ostringstream csv;
  csv << loss_csv_header() << "\n";
  DnpoLossBreakdown last;
  long long step = 0;
  const size_t n = pairs.size();
  const size_t bs = static_cast<size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs_per_iteration; ++epoch) {
    for (size_t lo = 0; lo < n; lo += bs) {
      std::vector<PreferencePair> batch(pairs.begin() + lo,
                                        pairs.begin() + std::min(lo + bs, n));
      try {
        if (plain) {
          SpinStepResult r = spin_step(policy, ref, opt, batch, loss_cfg);
          policy = std::move(r.policy);
          last = r.breakdown;
        } else if (cfg.mode == Mode::fixed_noise) {
          FixedNoiseCfg fc{loss_cfg, cfg.sigma_const,
                           derive_seed(iter_seed, static_cast<uint64_t>(step))};
          SpinStepResult r = fixed_noise_step(policy, ref, opt, batch, fc);
          policy = std::move(r.policy);
          last = r.breakdown;
        } else {
          DnpoCfg dc;
          dc.loss = loss_cfg;
          dc.noise.alpha = cfg.alpha;
          dc.noise.force_sigma_zero = cfg.force_sigma_zero;
          dc.seed = derive_seed(iter_seed, static_cast<uint64_t>(step));
          DnpoStepResult r = dnpo_step(policy, ref, *noise, opt, batch, dc);
          policy = std::move(r.policy);
          noise = std::move(r.noise);
          last = r.loss;
        }
        if (!std::isfinite(last.total))
          throw NonFiniteError("loss", "total=" + fmt_double(last.total));
      } catch (const NonFiniteError& e) {
        IterationCheckpoint partial{k, policy, noise, opt,
                                    derive_seed(cfg.seed, static_cast<uint64_t>(k) + 1),
                                    config_digest(cfg)};
        save_checkpoint(paths.partial_checkpoint(k), partial);
        throw std::runtime_error("iteration " + std::to_string(k) + ", step " +
                                 std::to_string(step) + ": " + e.what() +
                                 "; partial state saved to " + paths.partial_checkpoint(k));
      }
      csv << loss_csv_row(step, last) << "\n";
      ++step;
    }
  }
  write_file(paths.loss_csv(k), csv.str());

  if (params_digest(ref) != ref_digest)
    throw std::logic_error("iteration " + std::to_string(k) +
                           ": reference parameters changed during training");

  TrainOutcome out;
  out.checkpoint = IterationCheckpoint{
      k, std::move(policy),
      cfg.trains_noise() ? std::move(noise) : std::optional<NoiseParams>{}, std::move(opt),
      derive_seed(cfg.seed, static_cast<uint64_t>(k) + 1), config_digest(cfg)};
  out.last = last;
  return out;
}

}  // namespace

Mode mode_from_string(const std::string& s) {
  if (s == "spin") return Mode::spin;
  if (s == "dnpo") return Mode::dnpo;
  if (s == "fixed_noise") return Mode::fixed_noise;
  if (s == "alpha_spin") return Mode::alpha_spin;
  throw std::invalid_argument("unknown mode '" + s + "'");
}

std::string to_string(Mode m) {
  switch (m) {
    case Mode::spin: return "spin";
    case Mode::dnpo: return "dnpo";
    case Mode::fixed_noise: return "fixed_noise";
    case Mode::alpha_spin: return "alpha_spin";
  }
  throw std::logic_error("unreachable mode");
}

void ExperimentConfig::validate() const {
  if (num_iterations < 1)
    throw std::invalid_argument("ExperimentConfig: num_iterations must be at least 1");
  if (epochs_per_iteration < 1)
    throw std::invalid_argument("ExperimentConfig: epochs_per_iteration must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("ExperimentConfig: batch_size must be at least 1");
  LossConfig{lambda}.validate();
  NoiseConfig nc;
  nc.alpha = alpha;
  nc.validate();
  if (sigma_const < 0.0)
    throw std::invalid_argument("ExperimentConfig: sigma_const must be non-negative");
  if (!(learning_rate > 0.0))
    throw std::invalid_argument("ExperimentConfig: learning_rate must be positive");
  if (max_new_tokens < 1)
    throw std::invalid_argument("ExperimentConfig: max_new_tokens must be at least 1");
  if (temperature < 0.0)
    throw std::invalid_argument("ExperimentConfig: temperature must be non-negative");
  if (out_dir.empty()) throw std::invalid_argument("ExperimentConfig: out_dir is required");
  if (dataset.empty() != targets.empty() || dataset.empty() != vocab.empty())
    throw std::invalid_argument(
        "ExperimentConfig: provide all of dataset/targets/vocab or none");
  model.validate();
}

ExperimentConfig load_experiment_config(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  if (!j.is_object()) throw std::runtime_error(path + ": config must be a JSON object");
  ExperimentConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "mode") cfg.mode = mode_from_string(value.get<std::string>());
      else if (key == "num_iterations") cfg.num_iterations = value.get<int>();
      else if (key == "epochs_per_iteration") cfg.epochs_per_iteration = value.get<int>();
      else if (key == "batch_size") cfg.batch_size = value.get<int>();
      else if (key == "lambda") cfg.lambda = value.get<double>();
      else if (key == "alpha") cfg.alpha = value.get<double>();
      else if (key == "sigma_const") cfg.sigma_const = value.get<double>();
      else if (key == "learning_rate") cfg.learning_rate = value.get<double>();
      else if (key == "seed") cfg.seed = value.get<uint64_t>();
      else if (key == "dataset") cfg.dataset = value.get<std::string>();
      else if (key == "targets") cfg.targets = value.get<std::string>();
      else if (key == "vocab") cfg.vocab = value.get<std::string>();
      else if (key == "out_dir") cfg.out_dir = value.get<std::string>();
      else if (key == "max_new_tokens") cfg.max_new_tokens = value.get<int>();
      else if (key == "temperature") cfg.temperature = value.get<double>();
      else if (key == "force_sigma_zero") cfg.force_sigma_zero = value.get<bool>();
      else if (key == "model") {
        for (const auto& [mk, mv] : value.items()) {
          if (mk == "vocab_size") cfg.model.vocab_size = mv.get<int>();
          else if (mk == "hidden_dim") cfg.model.hidden_dim = mv.get<int>();
          else if (mk == "num_blocks") cfg.model.num_blocks = mv.get<int>();
          else if (mk == "num_heads") cfg.model.num_heads = mv.get<int>();
          else if (mk == "max_seq_len") cfg.model.max_seq_len = mv.get<int>();
          else throw std::runtime_error("unknown model key '" + mk + "'");
        }
      } else {
        throw std::runtime_error("unknown config key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return cfg;
}

void save_experiment_config(const std::string& path, const ExperimentConfig& cfg) {
  json j = config_core_json(cfg);
  j["dataset"] = cfg.dataset;
  j["targets"] = cfg.targets;
  j["vocab"] = cfg.vocab;
  j["out_dir"] = cfg.out_dir;
  write_file(path, j.dump(2) + "\n");
}

uint64_t config_digest(const ExperimentConfig& cfg) {
  uint64_t h = fnv1a64(config_core_json(cfg).dump());
  for (const std::string& path : {cfg.dataset, cfg.targets, cfg.vocab})
    h = fnv1a64(read_file(path), h);
  return h;
}

uint64_t params_digest(const ModelParams& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, m] : params.entries()) {
    h = fnv1a64(name, h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m->data.data()),
                                 m->data.size() * sizeof(double)),
                h);
  }
  return h;
}

void CorpusConfig::validate() const {
  if (num_examples < 1) throw std::invalid_argument("CorpusConfig: num_examples must be positive");
  if (prompt_len < 1) throw std::invalid_argument("CorpusConfig: prompt_len must be positive");
  if (corruption_rate < 0.0 || corruption_rate > 1.0)
    throw std::invalid_argument("CorpusConfig: corruption_rate must lie in [0, 1]");
  if (num_glyphs < 2 || num_glyphs > 26)
    throw std::invalid_argument("CorpusConfig: num_glyphs must lie in [2, 26]");
  if (corrupt_glyphs < 1 || corrupt_glyphs > prompt_len)
    throw std::invalid_argument("CorpusConfig: corrupt_glyphs must lie in [1, prompt_len]");
}

void write_synthetic_corpus(const CorpusConfig& cc, const std::string& vocab_path,
                            const std::string& dataset_path, const std::string& targets_path) {
  cc.validate();
  std::vector<std::string> glyphs{"<eos>"};
  for (int g = 0; g < cc.num_glyphs; ++g) glyphs.push_back(std::string(1, char('a' + g)));
  Vocab::from_glyphs(glyphs).save(vocab_path);

  Rng rng(derive_seed(cc.seed, 0x5EED5));
  std::vector<DatasetExample> dataset, targets;
  for (int i = 0; i < cc.num_examples; ++i) {
    std::string prompt;
    for (int p = 0; p < cc.prompt_len; ++p)
      prompt.push_back(char('a' + static_cast<int>(rng.uniform() * cc.num_glyphs)));
    std::string target = prompt;  // echo task
    std::string human = target;
    if (rng.uniform() < cc.corruption_rate) {
      // corrupt_glyphs distinct positions, each moved to a different glyph,
      // so the edit distance to the target is exactly corrupt_glyphs
      std::vector<int> positions(cc.prompt_len);
      for (int p = 0; p < cc.prompt_len; ++p) positions[p] = p;
      for (int c = 0; c < cc.corrupt_glyphs; ++c) {
        int j = c + static_cast<int>(rng.uniform() * (cc.prompt_len - c));
        std::swap(positions[c], positions[j]);
        int pos = positions[c];
        int cur = human[pos] - 'a';
        int other = (cur + 1 + static_cast<int>(rng.uniform() * (cc.num_glyphs - 1))) %
                    cc.num_glyphs;
        human[pos] = char('a' + other);
      }
    }
    char id[16];
    std::snprintf(id, sizeof id, "ex%03d", i);
    dataset.push_back({id, prompt, human});
    targets.push_back({id, prompt, target});
  }
  save_dataset_jsonl(dataset_path, dataset);
  save_dataset_jsonl(targets_path, targets);
}

ExperimentConfig resolve_config(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  if (c.out_dir.empty()) throw std::invalid_argument("ExperimentConfig: out_dir is required");
  fs::create_directories(c.out_dir);
  const bool defaulted = c.dataset.empty();
  if (defaulted) {
    c.dataset = c.out_dir + "/dataset.jsonl";
    c.targets = c.out_dir + "/targets.jsonl";
    c.vocab = c.out_dir + "/vocab.txt";
  }
  c.validate();
  const bool missing =
      !fs::exists(c.dataset) || !fs::exists(c.targets) || !fs::exists(c.vocab);
  if (missing) {
    if (!defaulted)
      throw std::runtime_error("configured corpus files do not exist (dataset: " + c.dataset +
                               ")");
    CorpusConfig cc;
    cc.num_glyphs = c.model.vocab_size - 1;
    cc.seed = c.seed;
    write_synthetic_corpus(cc, c.vocab, c.dataset, c.targets);
  }
  return c;
}

std::string ExperimentPaths::checkpoint(int iteration) const {
  if (iteration < 0) return out_dir + "/checkpoint_seed.ckpt";
  return out_dir + "/checkpoint_iter" + std::to_string(iteration) + ".ckpt";
}
std::string ExperimentPaths::partial_checkpoint(int iteration) const {
  return out_dir + "/checkpoint_iter" + std::to_string(iteration) + "_partial.ckpt";
}
std::string ExperimentPaths::generations(int pass) const {
  return out_dir + "/generations_pass" + std::to_string(pass) + ".jsonl";
}
std::string ExperimentPaths::pairs(int iteration) const {
  return out_dir + "/pairs_iter" + std::to_string(iteration) + ".jsonl";
}
std::string ExperimentPaths::loss_csv(int iteration) const {
  return out_dir + "/loss_iter" + std::to_string(iteration) + ".csv";
}
std::string ExperimentPaths::histogram(int pair_iteration, bool token_mean) const {
  return out_dir + "/histogram_iter" + std::to_string(pair_iteration) +
         (token_mean ? "_token_mean.csv" : "_seq_sum.csv");
}
std::string ExperimentPaths::stats(int pass) const {
  return out_dir + "/stats_pass" + std::to_string(pass) + ".json";
}
std::string ExperimentPaths::report_json() const { return out_dir + "/report.json"; }
std::string ExperimentPaths::report_csv() const { return out_dir + "/report.csv"; }

ExperimentPaths experiment_paths(const ExperimentConfig& cfg) {
  if (cfg.out_dir.empty()) throw std::invalid_argument("ExperimentConfig: out_dir is required");
  return ExperimentPaths{cfg.out_dir};
}

IterationCheckpoint make_seed_checkpoint(const ExperimentConfig& cfg) {
  cfg.validate();
  IterationCheckpoint ckpt;
  ckpt.iteration = -1;
  ckpt.model = init_params(cfg.model, derive_seed(cfg.seed, 0x11));
  if (cfg.trains_noise())
    ckpt.noise = init_noise_params(cfg.model, derive_seed(cfg.seed, 0x12));
  ckpt.opt = cfg.trains_noise() ? init_optimizer(ckpt.model, *ckpt.noise, cfg.learning_rate)
                                : init_optimizer(ckpt.model, cfg.learning_rate);
  ckpt.rng_state = derive_seed(cfg.seed, 0);
  ckpt.config_digest = config_digest(cfg);
  return ckpt;
}

std::vector<PreferencePair> alpha_spin_mix(const std::vector<PreferencePair>& pairs_km1,
                                           const std::vector<PreferencePair>& pairs_km2,
                                           uint64_t seed) {
  if (pairs_km1.empty() || pairs_km2.empty())
    throw std::invalid_argument("alpha_spin_mix: both pair sets must be non-empty");
  const size_t n = std::min(pairs_km1.size(), pairs_km2.size());
  std::vector<size_t> perm(n);
  std::iota(perm.begin(), perm.end(), size_t{0});
  Rng rng(derive_seed(seed, 0xA15A));
  for (size_t i = n; i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform() * static_cast<double>(i));
    std::swap(perm[i - 1], perm[j]);
  }
  // The newer set fills the first ceil(n/2) slots; disjoint index halves keep
  // identical inputs a permutation of themselves.
  const size_t from_km1 = (n + 1) / 2;
  std::vector<PreferencePair> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i)
    out.push_back(i < from_km1 ? pairs_km1[perm[i]] : pairs_km2[perm[i]]);
  return out;
}

std::vector<GeneratedResponse> stage_generate(const ExperimentConfig& cfg, int pass,
                                              const ModelParams& model) {
  Corpus corpus = load_corpus(cfg);
  LabelConfig lc = label_config(cfg, pass, corpus);
  std::vector<GeneratedResponse> gens;
  gens.reserve(corpus.dataset.size());
  for (const DatasetExample& ex : corpus.dataset)
    gens.push_back(generate_response(model, corpus.vocab, ex, lc));
  save_generations_jsonl(experiment_paths(cfg).generations(pass), gens);
  return gens;
}

std::vector<PreferencePair> stage_label(const ExperimentConfig& cfg, int k) {
  Corpus corpus = load_corpus(cfg);
  ExperimentPaths paths = experiment_paths(cfg);
  std::vector<GeneratedResponse> gens = load_generations_jsonl(paths.generations(k));
  std::vector<PreferencePair> pairs = labels_with_scores(cfg, k)
                                          ? scored_pairs(corpus, gens)
                                          : human_positive_pairs(corpus, gens);
  save_pairs_jsonl(paths.pairs(k), pairs, corpus.vocab);
  return pairs;
}

IterationCheckpoint stage_train(const ExperimentConfig& cfg, int k,
                                const IterationCheckpoint& checkpoint_in) {
  if (checkpoint_in.iteration != k - 1)
    throw std::invalid_argument("iteration " + std::to_string(k) +
                                " needs the checkpoint of iteration " + std::to_string(k - 1));
  Corpus corpus = load_corpus(cfg);
  ExperimentPaths paths = experiment_paths(cfg);
  std::vector<PreferencePair> pairs = load_training_pairs(cfg, k, corpus.vocab, paths);
  return train_on_pairs(cfg, k, checkpoint_in, pairs, paths).checkpoint;
}

IterationCheckpoint run_iteration(int k, const IterationCheckpoint& checkpoint_in,
                                  const ExperimentConfig& cfg) {
  cfg.validate();
  if (k < 0) throw std::invalid_argument("run_iteration: negative iteration");
  if (checkpoint_in.iteration != k - 1)
    throw std::invalid_argument("iteration " + std::to_string(k) +
                                " needs the checkpoint of iteration " + std::to_string(k - 1));
  Corpus corpus = load_corpus(cfg);
  ExperimentPaths paths = experiment_paths(cfg);

  // Generation + labeling. The scored path goes through label_dataset; the
  // warm-up and the self-play baselines label the human response positive
  // without consulting an evaluator.
  std::vector<GeneratedResponse> gens;
  std::vector<PreferencePair> fresh_pairs;
  long long skipped = 0;
  LabelConfig lc = label_config(cfg, k, corpus);
  if (labels_with_scores(cfg, k)) {
    OracleEvaluator oracle(corpus.targets);
    LabelResult lr = label_dataset(checkpoint_in.model, corpus.vocab, corpus.dataset, oracle, lc);
    gens = std::move(lr.generations);
    fresh_pairs = std::move(lr.pairs);
    skipped = lr.stats.skipped;
  } else {
    for (const DatasetExample& ex : corpus.dataset)
      gens.push_back(generate_response(checkpoint_in.model, corpus.vocab, ex, lc));
    fresh_pairs = human_positive_pairs(corpus, gens);
  }
  save_generations_jsonl(paths.generations(k), gens);
  save_pairs_jsonl(paths.pairs(k), fresh_pairs, corpus.vocab);

  PassStats stats = measure_pass(cfg, k, checkpoint_in.model, corpus, gens, skipped);
  if (k >= 1)
    write_pair_histograms(cfg, paths, k - 1, checkpoint_in.model, corpus, gens);

  // Training always consumes the files just written, so re-running the train
  // stage from disk reproduces this result exactly.
  std::vector<PreferencePair> train_pairs = load_training_pairs(cfg, k, corpus.vocab, paths);
  TrainOutcome outcome = train_on_pairs(cfg, k, checkpoint_in, train_pairs, paths);

  stats.trained = true;
  stats.final_loss = outcome.last.total;
  stats.mean_margin = outcome.last.mean_margin_clean;
  stats.mean_sigma2 = outcome.last.mean_sigma2;
  write_stats(paths.stats(k), stats);
  return outcome.checkpoint;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg0) {
  ExperimentConfig cfg = resolve_config(cfg0);
  ExperimentPaths paths = experiment_paths(cfg);

  IterationCheckpoint ckpt = make_seed_checkpoint(cfg);
  save_checkpoint(paths.checkpoint(-1), ckpt);
  for (int k = 0; k < cfg.num_iterations; ++k) {
    ckpt = run_iteration(k, ckpt, cfg);
    save_checkpoint(paths.checkpoint(k), ckpt);
  }

  // Closing generation-only pass: measures the final model's output and
  // completes the last iteration's histogram; the training columns repeat
  // the closing step of the last iteration.
  const int final_pass = cfg.num_iterations;
  Corpus corpus = load_corpus(cfg);
  std::vector<GeneratedResponse> gens = stage_generate(cfg, final_pass, ckpt.model);
  PassStats stats = measure_pass(cfg, final_pass, ckpt.model, corpus, gens, 0);
  write_pair_histograms(cfg, paths, final_pass - 1, ckpt.model, corpus, gens);
  PassStats closing = read_stats(paths.stats(final_pass - 1));
  stats.trained = false;
  stats.final_loss = closing.final_loss;
  stats.mean_margin = closing.mean_margin;
  stats.mean_sigma2 = closing.mean_sigma2;
  write_stats(paths.stats(final_pass), stats);

  return build_report(cfg);
}

ExperimentReport build_report(const ExperimentConfig& cfg) {
  ExperimentPaths paths = experiment_paths(cfg);
  ExperimentReport report;
  for (int pass = 0; fs::exists(paths.stats(pass)); ++pass)
    report.rows.push_back(read_stats(paths.stats(pass)));
  if (report.rows.empty())
    throw std::runtime_error("no stats files under " + cfg.out_dir +
                             "; run the experiment or its iterations first");

  json j;
  j["config"] = config_core_json(cfg);
  j["config_digest"] = hex_u64(config_digest(cfg));
  j["rows"] = json::array();
  for (const PassStats& row : report.rows) j["rows"].push_back(stats_to_json(row));
  write_file(paths.report_json(), j.dump(2) + "\n");

  std::ostringstream csv;
  csv << report_csv_header() << "\n";
  for (const PassStats& row : report.rows) csv << report_csv_row(row) << "\n";
  write_file(paths.report_csv(), csv.str());
  return report;
}

std::string report_csv_header() {
  return "pass,mode,gen_mean_log_prob_token,gen_mean_log_prob_sum,oracle_mean_generated,"
         "oracle_mean_human,win_rate,tie_rate,loss_rate,mean_rouge_f,mean_bleu,skipped,"
         "trained,final_loss,mean_margin,mean_sigma2";
}

std::string report_csv_row(const PassStats& s) {
  std::ostringstream out;
  out << s.pass << "," << to_string(s.mode) << "," << fmt_double(s.gen_mean_log_prob_token)
      << "," << fmt_double(s.gen_mean_log_prob_sum) << ","
      << fmt_double(s.oracle_mean_generated) << "," << fmt_double(s.oracle_mean_human) << ","
      << fmt_double(s.wtl.win_rate) << "," << fmt_double(s.wtl.tie_rate) << ","
      << fmt_double(s.wtl.loss_rate) << "," << fmt_double(s.mean_rouge_f) << ","
      << fmt_double(s.mean_bleu) << "," << s.skipped << "," << (s.trained ? 1 : 0) << ","
      << fmt_double(s.final_loss) << "," << fmt_double(s.mean_margin) << ","
      << fmt_double(s.mean_sigma2);
  return out.str();
}

}  // namespace dnpo
