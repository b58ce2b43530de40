#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "dnpo/harness.hpp"
#include "dnpo/rng.hpp"

using namespace dnpo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path = fs::temp_directory_path() / "dnpo_harness_test";
  TempDir() {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string dir(const std::string& name) const {
    fs::path p = path / name;
    fs::create_directories(p);
    return p.string();
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

// Shared tiny echo corpus: 4 glyphs + end marker, 3-glyph prompts.
struct TestCorpus {
  std::string vocab, dataset, targets;
};

TestCorpus write_corpus(const TempDir& tmp, const std::string& tag, int examples,
                        double corruption, uint64_t seed) {
  TestCorpus c{tmp.file(tag + "_vocab.txt"), tmp.file(tag + "_dataset.jsonl"),
               tmp.file(tag + "_targets.jsonl")};
  CorpusConfig cc;
  cc.num_examples = examples;
  cc.prompt_len = 3;
  cc.corruption_rate = corruption;
  cc.num_glyphs = 4;
  cc.seed = seed;
  write_synthetic_corpus(cc, c.vocab, c.dataset, c.targets);
  return c;
}

ExperimentConfig base_config(const std::string& out_dir, const TestCorpus& corpus, Mode mode,
                             uint64_t seed) {
  ExperimentConfig cfg;
  cfg.mode = mode;
  cfg.num_iterations = 2;
  cfg.epochs_per_iteration = 2;
  cfg.batch_size = 3;
  cfg.learning_rate = 5e-3;
  cfg.seed = seed;
  cfg.dataset = corpus.dataset;
  cfg.targets = corpus.targets;
  cfg.vocab = corpus.vocab;
  cfg.out_dir = out_dir;
  cfg.max_new_tokens = 6;
  cfg.model = ModelConfig{5, 8, 1, 2, 16};
  return cfg;
}

bool same_model_arrays(const ModelParams& a, const ModelParams& b) {
  auto ea = a.entries();
  auto eb = b.entries();
  REQUIRE(ea.size() == eb.size());
  for (size_t i = 0; i < ea.size(); ++i)
    if (ea[i].second->data != eb[i].second->data) return false;
  return true;
}

std::vector<PreferencePair> tagged_pairs(const std::string& tag, int n, uint64_t seed) {
  Rng rng(seed);
  std::vector<PreferencePair> out;
  for (int i = 0; i < n; ++i) {
    PreferencePair p;
    p.id = tag + std::to_string(i);
    p.prompt = {1, 2};
    p.positive = {1 + static_cast<int>(rng.uniform() * 3), 0};
    p.negative = {1 + static_cast<int>(rng.uniform() * 3), 2, 0};
    p.positive_source = PositiveSource::human;
    p.score_human = 0;
    p.score_generated = 0;
    out.push_back(p);
  }
  return out;
}

}  // namespace

TEST_CASE("mode names round trip") {
  for (Mode m : {Mode::spin, Mode::dnpo, Mode::fixed_noise, Mode::alpha_spin})
    CHECK(mode_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(mode_from_string("ppo"), std::invalid_argument);
}

TEST_CASE("config validation rejects bad values") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "val", 4, 0.2, 1);
  ExperimentConfig cfg = base_config(tmp.dir("val_out"), corpus, Mode::spin, 1);
  CHECK_NOTHROW(cfg.validate());

  ExperimentConfig bad = cfg;
  bad.num_iterations = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.targets.clear();  // corpus files must be given together
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.out_dir.clear();
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("config file round trips and rejects unknown keys") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "cfg", 4, 0.2, 2);
  ExperimentConfig cfg = base_config(tmp.dir("cfg_out"), corpus, Mode::fixed_noise, 42);
  cfg.alpha = 0.25;
  cfg.sigma_const = 0.75;
  cfg.temperature = 0.5;
  cfg.force_sigma_zero = true;

  std::string path = tmp.file("config.json");
  save_experiment_config(path, cfg);
  ExperimentConfig loaded = load_experiment_config(path);
  CHECK(loaded.mode == cfg.mode);
  CHECK(loaded.num_iterations == cfg.num_iterations);
  CHECK(loaded.epochs_per_iteration == cfg.epochs_per_iteration);
  CHECK(loaded.batch_size == cfg.batch_size);
  CHECK(loaded.lambda == cfg.lambda);
  CHECK(loaded.alpha == cfg.alpha);
  CHECK(loaded.sigma_const == cfg.sigma_const);
  CHECK(loaded.learning_rate == cfg.learning_rate);
  CHECK(loaded.seed == cfg.seed);
  CHECK(loaded.dataset == cfg.dataset);
  CHECK(loaded.targets == cfg.targets);
  CHECK(loaded.vocab == cfg.vocab);
  CHECK(loaded.out_dir == cfg.out_dir);
  CHECK(loaded.max_new_tokens == cfg.max_new_tokens);
  CHECK(loaded.temperature == cfg.temperature);
  CHECK(loaded.model == cfg.model);
  CHECK(loaded.force_sigma_zero == cfg.force_sigma_zero);

  {
    std::ofstream out(tmp.file("partial.json"));
    out << "{\"mode\": \"spin\", \"seed\": 9}\n";
  }
  ExperimentConfig partial = load_experiment_config(tmp.file("partial.json"));
  CHECK(partial.mode == Mode::spin);
  CHECK(partial.seed == 9);
  CHECK(partial.num_iterations == ExperimentConfig{}.num_iterations);

  {
    std::ofstream out(tmp.file("unknown.json"));
    out << "{\"learning_rte\": 0.1}\n";
  }
  CHECK_THROWS_AS(load_experiment_config(tmp.file("unknown.json")), std::runtime_error);
  CHECK_THROWS_AS(load_experiment_config(tmp.file("absent.json")), std::runtime_error);
}

TEST_CASE("synthetic corpus is a deterministic echo task") {
  TempDir tmp;
  TestCorpus a = write_corpus(tmp, "det_a", 40, 0.3, 7);
  TestCorpus b = write_corpus(tmp, "det_b", 40, 0.3, 7);
  CHECK(read_bytes(a.vocab) == read_bytes(b.vocab));
  CHECK(read_bytes(a.dataset) == read_bytes(b.dataset));
  CHECK(read_bytes(a.targets) == read_bytes(b.targets));

  TestCorpus other = write_corpus(tmp, "det_c", 40, 0.3, 8);
  CHECK(read_bytes(a.dataset) != read_bytes(other.dataset));

  std::vector<DatasetExample> dataset = load_dataset_jsonl(a.dataset);
  std::vector<DatasetExample> targets = load_dataset_jsonl(a.targets);
  REQUIRE(dataset.size() == 40);
  REQUIRE(targets.size() == 40);
  int corrupted = 0;
  for (size_t i = 0; i < dataset.size(); ++i) {
    CHECK(targets[i].prompt == dataset[i].prompt);
    CHECK(targets[i].response == targets[i].prompt);  // echo task
    REQUIRE(dataset[i].response.size() == dataset[i].prompt.size());
    int diffs = 0;
    for (size_t c = 0; c < dataset[i].response.size(); ++c)
      if (dataset[i].response[c] != targets[i].response[c]) ++diffs;
    CHECK(diffs <= 1);  // at most one corrupted glyph
    corrupted += diffs;
  }
  CHECK(corrupted > 0);
  CHECK(corrupted < 40);

  Vocab v = Vocab::load(a.vocab);
  CHECK(v.size() == 5);

  CHECK_THROWS_AS(write_corpus(tmp, "bad", 0, 0.1, 1), std::invalid_argument);
}

TEST_CASE("corpus corruption strength sets the edit distance exactly") {
  TempDir tmp;
  CorpusConfig cc;
  cc.num_examples = 30;
  cc.prompt_len = 4;
  cc.corruption_rate = 1.0;
  cc.corrupt_glyphs = 3;
  cc.num_glyphs = 6;
  cc.seed = 3;
  write_synthetic_corpus(cc, tmp.file("v.txt"), tmp.file("d.jsonl"), tmp.file("t.jsonl"));

  std::vector<DatasetExample> dataset = load_dataset_jsonl(tmp.file("d.jsonl"));
  std::vector<DatasetExample> targets = load_dataset_jsonl(tmp.file("t.jsonl"));
  for (size_t i = 0; i < dataset.size(); ++i) {
    int diffs = 0;
    for (size_t c = 0; c < dataset[i].response.size(); ++c)
      if (dataset[i].response[c] != targets[i].response[c]) ++diffs;
    CHECK(diffs == 3);  // distinct positions, each moved to another glyph
  }

  cc.corrupt_glyphs = 5;  // exceeds prompt_len
  CHECK_THROWS_AS(cc.validate(), std::invalid_argument);
}

TEST_CASE("alpha_spin_mix splits half and half without replacement") {
  std::vector<PreferencePair> a = tagged_pairs("a", 10, 1);
  std::vector<PreferencePair> b = tagged_pairs("b", 10, 2);

  std::vector<PreferencePair> mixed = alpha_spin_mix(a, b, 99);
  REQUIRE(mixed.size() == 10);
  int from_a = 0;
  std::set<std::string> seen;
  for (const PreferencePair& p : mixed) {
    CHECK(seen.insert(p.id).second);  // without replacement
    if (p.id[0] == 'a') ++from_a;
  }
  CHECK(from_a == 5);

  // deterministic in the seed
  std::vector<PreferencePair> again = alpha_spin_mix(a, b, 99);
  for (size_t i = 0; i < mixed.size(); ++i) CHECK(again[i].id == mixed[i].id);
  std::vector<PreferencePair> shuffled = alpha_spin_mix(a, b, 100);
  bool any_diff = false;
  for (size_t i = 0; i < mixed.size(); ++i) any_diff |= shuffled[i].id != mixed[i].id;
  CHECK(any_diff);

  // odd common size: newer set gets the extra pair
  std::vector<PreferencePair> b7 = tagged_pairs("b", 7, 3);
  std::vector<PreferencePair> odd = alpha_spin_mix(a, b7, 5);
  REQUIRE(odd.size() == 7);
  int odd_a = 0;
  for (const PreferencePair& p : odd)
    if (p.id[0] == 'a') ++odd_a;
  CHECK(odd_a == 4);

  // identical inputs come back as a permutation
  std::vector<PreferencePair> perm = alpha_spin_mix(a, a, 17);
  std::set<std::string> ids;
  for (const PreferencePair& p : perm) CHECK(ids.insert(p.id).second);
  CHECK(ids.size() == a.size());

  CHECK_THROWS_AS(alpha_spin_mix({}, b, 1), std::invalid_argument);
  CHECK_THROWS_AS(alpha_spin_mix(a, {}, 1), std::invalid_argument);
}

TEST_CASE("seed checkpoint carries a noise head only in dnpo mode") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "seed", 4, 0.2, 3);
  ExperimentConfig dnpo_cfg = base_config(tmp.dir("seed_dnpo"), corpus, Mode::dnpo, 5);
  ExperimentConfig spin_cfg = base_config(tmp.dir("seed_spin"), corpus, Mode::spin, 5);

  IterationCheckpoint d = make_seed_checkpoint(dnpo_cfg);
  IterationCheckpoint s = make_seed_checkpoint(spin_cfg);
  CHECK(d.iteration == -1);
  CHECK(d.noise.has_value());
  CHECK(!s.noise.has_value());
  CHECK(d.opt.noise_acc.size() == 2);
  CHECK(s.opt.noise_acc.empty());
  CHECK(same_model_arrays(d.model, s.model));  // init does not depend on mode
  CHECK(d.config_digest != 0);

  IterationCheckpoint d2 = make_seed_checkpoint(dnpo_cfg);
  CHECK(same_model_arrays(d.model, d2.model));
}

TEST_CASE("config digest tracks content, not placement") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "dig", 4, 0.2, 3);
  ExperimentConfig a = base_config(tmp.dir("dig_a"), corpus, Mode::dnpo, 5);
  ExperimentConfig b = base_config(tmp.dir("dig_b"), corpus, Mode::dnpo, 5);
  CHECK(config_digest(a) == config_digest(b));  // out_dir excluded

  ExperimentConfig c = a;
  c.seed = 6;
  CHECK(config_digest(c) != config_digest(a));

  TestCorpus other = write_corpus(tmp, "dig2", 4, 0.2, 9);
  ExperimentConfig d = a;
  d.dataset = other.dataset;
  d.targets = other.targets;
  d.vocab = other.vocab;
  CHECK(config_digest(d) != config_digest(a));
}

TEST_CASE("warm-up iteration is identical across modes") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "warm", 6, 0.3, 11);
  std::vector<Mode> modes{Mode::spin, Mode::dnpo, Mode::fixed_noise, Mode::alpha_spin};
  std::vector<IterationCheckpoint> ckpts;
  std::vector<std::string> gen_bytes, pair_bytes;
  for (Mode m : modes) {
    ExperimentConfig cfg = base_config(tmp.dir("warm_" + to_string(m)), corpus, m, 21);
    cfg.num_iterations = 1;
    run_experiment(cfg);
    ExperimentPaths paths = experiment_paths(cfg);
    ckpts.push_back(load_checkpoint(paths.checkpoint(0)));
    gen_bytes.push_back(read_bytes(paths.generations(0)));
    pair_bytes.push_back(read_bytes(paths.pairs(0)));
  }
  for (size_t i = 1; i < ckpts.size(); ++i) {
    CHECK(same_model_arrays(ckpts[0].model, ckpts[i].model));
    CHECK(gen_bytes[i] == gen_bytes[0]);
    CHECK(pair_bytes[i] == pair_bytes[0]);
  }
}

TEST_CASE("single-iteration experiment writes the full artifact set") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "mini", 5, 0.3, 13);
  ExperimentConfig cfg = base_config(tmp.dir("mini_out"), corpus, Mode::dnpo, 31);
  cfg.num_iterations = 1;
  ExperimentReport report = run_experiment(cfg);
  ExperimentPaths paths = experiment_paths(cfg);

  for (const std::string& f :
       {paths.checkpoint(-1), paths.checkpoint(0), paths.generations(0), paths.generations(1),
        paths.pairs(0), paths.loss_csv(0), paths.histogram(0, true), paths.histogram(0, false),
        paths.stats(0), paths.stats(1), paths.report_json(), paths.report_csv()})
    CHECK_MESSAGE(fs::exists(f), f);

  REQUIRE(report.rows.size() == 2);
  CHECK(report.rows[0].pass == 0);
  CHECK(report.rows[0].trained);
  CHECK(report.rows[1].pass == 1);
  CHECK(!report.rows[1].trained);
  // the closing row repeats the last training columns
  CHECK(report.rows[1].final_loss == report.rows[0].final_loss);
  CHECK(report.rows[1].mean_margin == report.rows[0].mean_margin);
  CHECK(report.rows[1].mean_sigma2 == report.rows[0].mean_sigma2);
  for (const PassStats& row : report.rows) {
    CHECK(row.mode == Mode::dnpo);
    CHECK(row.oracle_mean_generated >= 0.0);
    CHECK(row.oracle_mean_generated <= 100.0);
    CHECK(row.wtl.win_rate + row.wtl.tie_rate + row.wtl.loss_rate == doctest::Approx(1.0));
    CHECK(row.skipped == 0);
  }

  std::string csv = read_bytes(paths.report_csv());
  CHECK(csv.rfind(report_csv_header() + "\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 rows

  // loss curve: header plus epochs * ceil(5/3) rows
  std::string loss = read_bytes(paths.loss_csv(0));
  CHECK(std::count(loss.begin(), loss.end(), '\n') == 1 + 2 * 2);

  // histogram counts conserve the sample counts
  std::string hist = read_bytes(paths.histogram(0, true));
  std::istringstream lines(hist);
  std::string line;
  std::getline(lines, line);
  CHECK(line == "bin_lo,bin_hi,count_positive,count_negative,count_generated");
  long long seen_pos = 0, seen_neg = 0, seen_gen = 0;
  while (std::getline(lines, line)) {
    std::istringstream cells(line);
    std::string cell;
    std::getline(cells, cell, ',');
    std::getline(cells, cell, ',');
    std::getline(cells, cell, ',');
    seen_pos += std::stoll(cell);
    std::getline(cells, cell, ',');
    seen_neg += std::stoll(cell);
    std::getline(cells, cell, ',');
    seen_gen += std::stoll(cell);
  }
  CHECK(seen_pos == 5);
  CHECK(seen_neg == 5);
  CHECK(seen_gen == 5);
}

TEST_CASE("identical runs replay bytewise") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "replay", 6, 0.3, 17);
  for (Mode m : {Mode::dnpo, Mode::alpha_spin}) {
    ExperimentConfig a = base_config(tmp.dir("replay_a_" + to_string(m)), corpus, m, 77);
    ExperimentConfig b = base_config(tmp.dir("replay_b_" + to_string(m)), corpus, m, 77);
    a.num_iterations = 3;
    b.num_iterations = 3;
    run_experiment(a);
    run_experiment(b);
    ExperimentPaths pa = experiment_paths(a);
    ExperimentPaths pb = experiment_paths(b);
    for (int k = -1; k < 3; ++k)
      CHECK(read_bytes(pa.checkpoint(k)) == read_bytes(pb.checkpoint(k)));
    for (int k = 0; k < 3; ++k) {
      CHECK(read_bytes(pa.pairs(k)) == read_bytes(pb.pairs(k)));
      CHECK(read_bytes(pa.loss_csv(k)) == read_bytes(pb.loss_csv(k)));
      CHECK(read_bytes(pa.histogram(k, true)) == read_bytes(pb.histogram(k, true)));
      CHECK(read_bytes(pa.histogram(k, false)) == read_bytes(pb.histogram(k, false)));
    }
    for (int p = 0; p <= 3; ++p) {
      CHECK(read_bytes(pa.generations(p)) == read_bytes(pb.generations(p)));
      CHECK(read_bytes(pa.stats(p)) == read_bytes(pb.stats(p)));
    }
    CHECK(read_bytes(pa.report_json()) == read_bytes(pb.report_json()));
    CHECK(read_bytes(pa.report_csv()) == read_bytes(pb.report_csv()));
  }
}

TEST_CASE("zero noise and human-always-wins reduce dnpo to spin bitwise") {
  TempDir tmp;
  // no corruption: the human response equals the target, so it always wins
  TestCorpus corpus = write_corpus(tmp, "reduce", 6, 0.0, 19);
  ExperimentConfig spin_cfg = base_config(tmp.dir("reduce_spin"), corpus, Mode::spin, 23);
  ExperimentConfig dnpo_cfg = base_config(tmp.dir("reduce_dnpo"), corpus, Mode::dnpo, 23);
  dnpo_cfg.force_sigma_zero = true;
  run_experiment(spin_cfg);
  run_experiment(dnpo_cfg);

  ExperimentPaths ps = experiment_paths(spin_cfg);
  ExperimentPaths pd = experiment_paths(dnpo_cfg);
  for (int k = 0; k < 2; ++k) {
    IterationCheckpoint s = load_checkpoint(ps.checkpoint(k));
    IterationCheckpoint d = load_checkpoint(pd.checkpoint(k));
    CHECK(same_model_arrays(s.model, d.model));
  }
  // the dnpo run's labeling kept the human response positive everywhere
  Vocab v = Vocab::load(corpus.vocab);
  for (const PreferencePair& p : load_pairs_jsonl(pd.pairs(1), v)) {
    CHECK(p.positive_source == PositiveSource::human);
    CHECK(p.score_human == 100);
  }
  // generations of the final pass agree too
  CHECK(read_bytes(ps.generations(2)) == read_bytes(pd.generations(2)));
}

TEST_CASE("cli stages reproduce the orchestrated artifacts") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "stage", 5, 0.3, 29);
  ExperimentConfig cfg = base_config(tmp.dir("stage_out"), corpus, Mode::dnpo, 41);
  run_experiment(cfg);
  ExperimentPaths paths = experiment_paths(cfg);

  std::string gens_before = read_bytes(paths.generations(1));
  std::string pairs_before = read_bytes(paths.pairs(1));
  std::string ckpt_before = read_bytes(paths.checkpoint(1));
  std::string loss_before = read_bytes(paths.loss_csv(1));

  IterationCheckpoint ckpt0 = load_checkpoint(paths.checkpoint(0));
  stage_generate(cfg, 1, ckpt0.model);
  CHECK(read_bytes(paths.generations(1)) == gens_before);
  stage_label(cfg, 1);
  CHECK(read_bytes(paths.pairs(1)) == pairs_before);
  IterationCheckpoint retrained = stage_train(cfg, 1, ckpt0);
  CHECK(read_bytes(paths.loss_csv(1)) == loss_before);
  std::string repro = tmp.file("retrained.ckpt");
  save_checkpoint(repro, retrained);
  CHECK(read_bytes(repro) == ckpt_before);
}

TEST_CASE("alpha_spin trains on the two previous pair files") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "alpha", 5, 0.3, 37);
  ExperimentConfig cfg = base_config(tmp.dir("alpha_out"), corpus, Mode::alpha_spin, 53);
  cfg.num_iterations = 3;
  run_experiment(cfg);
  ExperimentPaths paths = experiment_paths(cfg);

  // every iteration still writes its own fresh pair file
  for (int k = 0; k < 3; ++k) CHECK(fs::exists(paths.pairs(k)));
  // iteration 1 falls back to the warm-up pairs alone: 5 pairs, 2 batches
  std::string loss1 = read_bytes(paths.loss_csv(1));
  CHECK(std::count(loss1.begin(), loss1.end(), '\n') == 1 + 2 * 2);
  // iteration 2 mixes five-and-five down to five pairs again
  std::string loss2 = read_bytes(paths.loss_csv(2));
  CHECK(std::count(loss2.begin(), loss2.end(), '\n') == 1 + 2 * 2);
  IterationCheckpoint last = load_checkpoint(paths.checkpoint(2));
  CHECK(last.iteration == 2);
  CHECK(!last.noise.has_value());
}

TEST_CASE("run_iteration rejects a checkpoint from the wrong iteration") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "order", 4, 0.2, 43);
  ExperimentConfig cfg = base_config(tmp.dir("order_out"), corpus, Mode::spin, 59);
  IterationCheckpoint seed = make_seed_checkpoint(cfg);
  CHECK_THROWS_AS(run_iteration(1, seed, cfg), std::invalid_argument);
}

TEST_CASE("missing targets and vocab mismatches fail with context") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "err", 4, 0.2, 47);
  // drop one target line
  {
    std::vector<DatasetExample> targets = load_dataset_jsonl(corpus.targets);
    targets.pop_back();
    save_dataset_jsonl(corpus.targets, targets);
  }
  ExperimentConfig cfg = base_config(tmp.dir("err_out"), corpus, Mode::spin, 61);
  bool threw = false;
  try {
    run_experiment(cfg);
  } catch (const std::runtime_error& e) {
    threw = true;
    CHECK(std::string(e.what()).find("no target") != std::string::npos);
  }
  CHECK(threw);

  TestCorpus corpus2 = write_corpus(tmp, "err2", 4, 0.2, 47);
  ExperimentConfig cfg2 = base_config(tmp.dir("err2_out"), corpus2, Mode::spin, 61);
  cfg2.model.vocab_size = 7;  // vocabulary file has 5 entries
  CHECK_THROWS_AS(run_experiment(cfg2), std::invalid_argument);
}

TEST_CASE("a non-finite loss aborts after saving partial state") {
  TempDir tmp;
  TestCorpus corpus = write_corpus(tmp, "blow", 4, 0.2, 53);
  ExperimentConfig cfg = base_config(tmp.dir("blow_out"), corpus, Mode::dnpo, 67);

  // A poisoned noise head sails through the warm-up untouched and detonates
  // on the first combined-objective step of iteration 1.
  IterationCheckpoint seed = make_seed_checkpoint(cfg);
  REQUIRE(seed.noise.has_value());
  seed.noise->b_sigma.data[0] = std::numeric_limits<double>::quiet_NaN();
  IterationCheckpoint after_warmup = run_iteration(0, seed, cfg);

  bool threw = false;
  try {
    run_iteration(1, after_warmup, cfg);
  } catch (const std::runtime_error& e) {
    threw = true;
    std::string msg = e.what();
    CHECK(msg.find("iteration 1") != std::string::npos);
    CHECK(msg.find("partial state saved") != std::string::npos);
  }
  CHECK(threw);
  ExperimentPaths paths = experiment_paths(cfg);
  REQUIRE(fs::exists(paths.partial_checkpoint(1)));
  IterationCheckpoint partial = load_checkpoint(paths.partial_checkpoint(1));
  CHECK(partial.iteration == 1);
}

TEST_CASE("auto-synthesized corpus resolves idempotently") {
  TempDir tmp;
  ExperimentConfig cfg;
  cfg.mode = Mode::spin;
  cfg.num_iterations = 1;
  cfg.epochs_per_iteration = 1;
  cfg.batch_size = 8;
  cfg.seed = 71;
  cfg.out_dir = tmp.dir("auto_out");
  cfg.model = ModelConfig{9, 8, 1, 2, 16};  // default corpus uses 8 glyphs

  ExperimentConfig resolved = resolve_config(cfg);
  CHECK(fs::exists(resolved.dataset));
  CHECK(fs::exists(resolved.targets));
  CHECK(fs::exists(resolved.vocab));
  CHECK(Vocab::load(resolved.vocab).size() == 9);
  CHECK(load_dataset_jsonl(resolved.dataset).size() == 48);

  std::string bytes = read_bytes(resolved.dataset);
  ExperimentConfig again = resolve_config(cfg);
  CHECK(read_bytes(again.dataset) == bytes);  // reused, not regenerated

  ExperimentConfig explicit_missing = cfg;
  explicit_missing.dataset = tmp.file("nope.jsonl");
  explicit_missing.targets = tmp.file("nope_t.jsonl");
  explicit_missing.vocab = tmp.file("nope_v.txt");
  CHECK_THROWS_AS(resolve_config(explicit_missing), std::runtime_error);
}
