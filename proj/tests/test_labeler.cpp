#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "dnpo/labeler.hpp"
#include "dnpo/rng.hpp"

using namespace dnpo;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path = fs::temp_directory_path() / "dnpo_labeler_test";
  TempDir() {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

class CountingEvaluator : public Evaluator {
 public:
  explicit CountingEvaluator(int value) : value_(value) {}
  int score(const std::string&, const std::string&) override {
    ++calls;
    return value_;
  }
  std::string name() const override { return "counting"; }
  int calls = 0;

 private:
  int value_;
};

class FailingEvaluator : public Evaluator {
 public:
  int score(const std::string&, const std::string&) override {
    ++calls;
    throw std::runtime_error("judge unavailable");
  }
  std::string name() const override { return "failing"; }
  int calls = 0;
};

// Fails the first `failures` calls, then behaves like the oracle would.
class FlakyEvaluator : public Evaluator {
 public:
  FlakyEvaluator(int failures, int value) : failures_(failures), value_(value) {}
  int score(const std::string&, const std::string&) override {
    if (calls++ < failures_) throw std::runtime_error("transient judge error");
    return value_;
  }
  std::string name() const override { return "flaky"; }
  int calls = 0;

 private:
  int failures_;
  int value_;
};

Vocab test_vocab() { return Vocab::from_glyphs({"<eos>", "a", "b", "c", "d"}); }

ModelConfig labeler_config() {
  ModelConfig c;
  c.vocab_size = 5;
  c.hidden_dim = 4;
  c.num_blocks = 1;
  c.num_heads = 2;
  c.max_seq_len = 16;
  return c;
}

}  // namespace

TEST_CASE("edit distance hand cases") {
  CHECK(levenshtein("", "") == 0);
  CHECK(levenshtein("abc", "abc") == 0);
  CHECK(levenshtein("kitten", "sitting") == 3);
  CHECK(levenshtein("", "abc") == 3);
  CHECK(levenshtein("ab", "ba") == 2);
}

TEST_CASE("oracle evaluator scores by proximity to the target") {
  OracleEvaluator oracle(std::map<std::string, std::string>{{"p", "abcd"}});
  CHECK(oracle.score("p", "abcd") == 100);
  CHECK(oracle.score("p", "abcc") == 99);
  CHECK(oracle.score("p", std::string(200, 'x')) == 0);  // clamped
  CHECK_THROWS_AS(oracle.score("unknown", "x"), std::invalid_argument);
}

TEST_CASE("pair construction follows the score order with ties to human") {
  std::vector<int> prompt = {1, 2};
  std::vector<int> y_h = {3, 0};
  std::vector<int> y_g = {4, 0};

  PreferencePair strict = build_pair("a", prompt, y_h, y_g, 80, 75);
  CHECK(strict.positive_source == PositiveSource::human);
  CHECK(strict.positive == y_h);
  CHECK(strict.negative == y_g);

  PreferencePair tie = build_pair("b", prompt, y_h, y_g, 70, 70);
  CHECK(tie.positive_source == PositiveSource::human);

  PreferencePair flipped = build_pair("c", prompt, y_h, y_g, 60, 90);
  CHECK(flipped.positive_source == PositiveSource::generated);
  CHECK(flipped.positive == y_g);
  CHECK(flipped.negative == y_h);

  CHECK_THROWS_AS(build_pair("d", prompt, y_h, y_g, 101, 50), std::invalid_argument);
  CHECK_THROWS_AS(build_pair("e", prompt, y_h, y_g, 50, -1), std::invalid_argument);
}

TEST_CASE("labels are invariant under strictly increasing score maps") {
  std::vector<int> prompt = {1};
  std::vector<int> y_h = {2, 0};
  std::vector<int> y_g = {3, 0};
  Rng rng(41);
  for (int trial = 0; trial < 200; ++trial) {
    int s_h = static_cast<int>(rng.uniform() * 101);
    int s_g = static_cast<int>(rng.uniform() * 101);
    // Random strictly increasing map of [0,100] into [0,100]: spread 101
    // random gaps summing to at most 100.
    std::vector<int> map(101);
    int v = 0;
    for (int s = 0; s <= 100; ++s) {
      map[s] = v;
      if (v < 100 && rng.uniform() < 0.5) ++v;
    }
    // Enforce strictness on the two scores that matter.
    if (s_h != s_g && map[s_h] == map[s_g]) continue;
    PositiveSource base =
        build_pair("m", prompt, y_h, y_g, s_h, s_g).positive_source;
    PositiveSource mapped =
        build_pair("m", prompt, y_h, y_g, map[s_h], map[s_g]).positive_source;
    CHECK(base == mapped);
  }
}

TEST_CASE("judge prompt renders the stored template verbatim") {
  std::string tpl = judge_template();
  std::string rendered = render_judge_prompt("Why?", "Because.");

  // Reconstruct the expectation by direct splicing at the two slots.
  std::string expected = tpl;
  expected.replace(expected.find("[question]"), 10, "Why?");
  expected.replace(expected.find("[answer]"), 8, "Because.");
  CHECK(rendered == expected);

  CHECK(rendered.find("assign a score between 0 and 100") != std::string::npos);
  CHECK(rendered.find("1-point increment") != std::string::npos);
  CHECK(rendered.find("multiples of 5") != std::string::npos);
  CHECK(rendered.find("without any explanation") != std::string::npos);

  // Slot-like text inside the question is data, not a slot.
  std::string tricky = render_judge_prompt("what is [answer]?", "42");
  CHECK(tricky.find("Question: what is [answer]?") != std::string::npos);
  CHECK(tricky.find("answer: 42") != std::string::npos);

  std::string empty_answer = render_judge_prompt("Q", "");
  CHECK(empty_answer.find("answer: \n") != std::string::npos);
  CHECK_THROWS_AS(render_judge_prompt("", "a"), std::invalid_argument);
}

TEST_CASE("the template asset matches the embedded template byte for byte") {
  std::string asset = read_bytes(std::string(DNPO_ASSET_DIR) + "/judge_prompt.txt");
  CHECK(asset == judge_template());
}

TEST_CASE("score parsing accepts exactly one in-range integer") {
  CHECK(parse_score("73") == 73);
  CHECK(parse_score(" 91\n") == 91);
  CHECK(parse_score("Score: 85") == 85);
  CHECK(parse_score("0") == 0);
  CHECK(parse_score("100") == 100);
  CHECK(!parse_score("Score: 150").has_value());
  CHECK(!parse_score("101").has_value());
  CHECK(!parse_score("-5").has_value());
  CHECK(!parse_score("73 91").has_value());
  CHECK(!parse_score("").has_value());
  CHECK(!parse_score("no digits").has_value());
  CHECK(!parse_score("99999999999999999999").has_value());
}

TEST_CASE("caching evaluator memoizes and persists") {
  TempDir dir;
  std::string cache_path = dir.file("scores.json");
  CountingEvaluator counting(42);
  {
    CachingEvaluator cached(counting, cache_path);
    CHECK(cached.score("p", "r") == 42);
    CHECK(cached.score("p", "r") == 42);
    CHECK(counting.calls == 1);
    CHECK(cached.score("p", "other") == 42);
    CHECK(counting.calls == 2);
    CHECK(cached.inner_calls() == 2);
  }
  {
    CountingEvaluator fresh(42);
    CachingEvaluator cached(fresh, cache_path);
    CHECK(cached.score("p", "r") == 42);  // served from disk
    CHECK(fresh.calls == 0);
  }
  {
    std::ofstream(dir.file("broken.json")) << "[1,2,3]";
    CountingEvaluator fresh(1);
    CHECK_THROWS_AS(CachingEvaluator(fresh, dir.file("broken.json")), std::runtime_error);
  }
}

TEST_CASE("labeling a synthetic corpus with the oracle") {
  Vocab vocab = test_vocab();
  ModelParams model = init_params(labeler_config(), 7);

  const char letters[] = {'a', 'b', 'c', 'd'};
  std::vector<DatasetExample> dataset;
  std::map<std::string, std::string> targets;
  Rng rng(53);
  for (int i = 0; i < 50; ++i) {
    std::string prompt;
    int n = i;
    for (int k = 0; k < 3; ++k) {
      prompt += letters[n % 4];
      n /= 4;
    }
    std::string response;
    int len = 1 + static_cast<int>(rng.uniform() * 3);
    for (int k = 0; k < len; ++k) response += letters[static_cast<int>(rng.uniform() * 4)];
    dataset.push_back({"ex" + std::to_string(i), prompt, response});
    targets[prompt] = response;  // prompts are distinct by construction
  }

  OracleEvaluator oracle(targets);
  LabelConfig cfg;
  cfg.base_seed = 11;
  cfg.iteration = 1;
  cfg.max_new_tokens = 8;
  LabelResult result = label_dataset(model, vocab, dataset, oracle, cfg);

  REQUIRE(result.pairs.size() == 50);
  CHECK(result.generations.size() == 50);
  CHECK(result.stats.skipped == 0);

  long long human = 0, ties = 0, generated = 0;
  for (const PreferencePair& p : result.pairs) {
    int pos = p.positive_source == PositiveSource::human ? p.score_human : p.score_generated;
    int neg = p.positive_source == PositiveSource::human ? p.score_generated : p.score_human;
    CHECK(pos >= neg);
    CHECK(p.score_human == 100);  // targets are the human responses
    if (p.score_generated > p.score_human)
      ++generated;
    else if (p.score_generated == p.score_human)
      ++ties;
    else
      ++human;
  }
  CHECK(result.stats.human_wins == human);
  CHECK(result.stats.ties == ties);
  CHECK(result.stats.generated_wins == generated);

  for (size_t i = 0; i < dataset.size(); ++i) {
    CHECK(result.generations[i].id == dataset[i].id);
    CHECK(result.generations[i].seed == generation_seed(11, 1, dataset[i].id));
    CHECK(result.generations[i].iteration == 1);
  }

  // Determinism down to the emitted bytes, and recounting from the file.
  TempDir dir;
  save_pairs_jsonl(dir.file("p1.jsonl"), result.pairs, vocab);
  LabelResult again = label_dataset(model, vocab, dataset, oracle, cfg);
  save_pairs_jsonl(dir.file("p2.jsonl"), again.pairs, vocab);
  CHECK(read_bytes(dir.file("p1.jsonl")) == read_bytes(dir.file("p2.jsonl")));

  std::vector<PreferencePair> reloaded = load_pairs_jsonl(dir.file("p1.jsonl"), vocab);
  REQUIRE(reloaded.size() == result.pairs.size());
  long long file_human = 0;
  for (const PreferencePair& p : reloaded)
    if (p.score_human >= p.score_generated) ++file_human;
  CHECK(file_human == result.stats.human_wins + result.stats.ties);
}

TEST_CASE("greedy generation matching the human response ties to human") {
  Vocab vocab = test_vocab();
  ModelParams model = zeros_like(init_params(labeler_config(), 1));
  // Uniform logits and greedy decoding emit the terminator immediately, so
  // the generation equals an empty human response.
  std::vector<DatasetExample> dataset = {{"solo", "ab", ""}};
  OracleEvaluator oracle(std::map<std::string, std::string>{{"ab", ""}});
  LabelConfig cfg;
  cfg.temperature = 0.0;
  LabelResult result = label_dataset(model, vocab, dataset, oracle, cfg);
  REQUIRE(result.pairs.size() == 1);
  CHECK(result.generations[0].response == "");
  CHECK(result.pairs[0].score_human == 100);
  CHECK(result.pairs[0].score_generated == 100);
  CHECK(result.pairs[0].positive_source == PositiveSource::human);
}

TEST_CASE("evaluator failures retry and then skip the example") {
  Vocab vocab = test_vocab();
  ModelParams model = init_params(labeler_config(), 3);
  std::vector<DatasetExample> dataset = {{"x", "a", "b"}, {"y", "b", "c"}};
  LabelConfig cfg;
  cfg.max_retries = 1;

  FailingEvaluator failing;
  LabelResult all_skipped = label_dataset(model, vocab, dataset, failing, cfg);
  CHECK(all_skipped.pairs.empty());
  CHECK(all_skipped.stats.skipped == 2);
  REQUIRE(all_skipped.skipped.size() == 2);
  CHECK(all_skipped.skipped[0].id == "x");
  CHECK(all_skipped.skipped[0].reason == "judge unavailable");
  CHECK(all_skipped.generations.size() == 2);  // generation still recorded

  FlakyEvaluator flaky(1, 60);  // one transient failure, then fine
  LabelResult recovered = label_dataset(model, vocab, dataset, flaky, cfg);
  CHECK(recovered.pairs.size() == 2);
  CHECK(recovered.stats.skipped == 0);
}

TEST_CASE("jsonl codecs round trip and reject malformed lines") {
  TempDir dir;
  Vocab vocab = test_vocab();

  std::vector<DatasetExample> ds = {{"a", "ab", "cd"}, {"b", "c", ""}};
  save_dataset_jsonl(dir.file("d.jsonl"), ds);
  std::vector<DatasetExample> ds2 = load_dataset_jsonl(dir.file("d.jsonl"));
  REQUIRE(ds2.size() == 2);
  CHECK(ds2[0].id == "a");
  CHECK(ds2[0].prompt == "ab");
  CHECK(ds2[1].response == "");

  std::vector<GeneratedResponse> gs = {{"a", "ab", "dd", 2, 12345678901234567ull}};
  save_generations_jsonl(dir.file("g.jsonl"), gs);
  std::vector<GeneratedResponse> gs2 = load_generations_jsonl(dir.file("g.jsonl"));
  REQUIRE(gs2.size() == 1);
  CHECK(gs2[0].seed == 12345678901234567ull);
  CHECK(gs2[0].iteration == 2);

  PreferencePair p = build_pair("a", vocab.encode("ab"), vocab.encode_response("cd"),
                                vocab.encode_response("dc"), 90, 30);
  save_pairs_jsonl(dir.file("p.jsonl"), {p}, vocab);
  std::vector<PreferencePair> ps = load_pairs_jsonl(dir.file("p.jsonl"), vocab);
  REQUIRE(ps.size() == 1);
  CHECK(ps[0].prompt == p.prompt);
  CHECK(ps[0].positive == p.positive);
  CHECK(ps[0].negative == p.negative);
  CHECK(ps[0].positive_source == p.positive_source);

  std::ofstream(dir.file("bad.jsonl")) << "{not json}\n";
  CHECK_THROWS_AS(load_dataset_jsonl(dir.file("bad.jsonl")), std::runtime_error);
  CHECK_THROWS_AS(load_dataset_jsonl(dir.file("absent.jsonl")), std::runtime_error);
}

TEST_CASE("external evaluator talks to an http judge") {
  httplib::Server server;
  std::atomic<int> requests{0};
  std::atomic<int> mode{0};  // 0 plain text, 1 json, 2 fail-once, 3 garbage
  std::string seen_auth;
  std::string seen_body;

  server.Post("/v1/score", [&](const httplib::Request& req, httplib::Response& res) {
    int n = ++requests;
    seen_auth = req.get_header_value("Authorization");
    seen_body = req.body;
    switch (mode.load()) {
      case 0:
        res.set_content("88", "text/plain");
        break;
      case 1:
        res.set_content("{\"score\": 73}", "application/json");
        break;
      case 2:
        if (n % 2 == 1) {
          res.status = 500;
          res.set_content("overloaded", "text/plain");
        } else {
          res.set_content("score: 64", "text/plain");
        }
        break;
      default:
        res.set_content("no numbers here", "text/plain");
        break;
    }
  });

  int port = server.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread listener([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ExternalEvaluatorConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.max_retries = 2;
  ::setenv("DNPO_EVAL_API_KEY", "sekret", 1);
  ExternalEvaluator judge(cfg);

  CHECK(judge.score("why", "because") == 88);
  CHECK(seen_auth == "Bearer sekret");
  nlohmann::json body = nlohmann::json::parse(seen_body);
  CHECK(body.at("model") == "judge");
  std::string prompt = body.at("prompt").get<std::string>();
  CHECK(prompt.find("Question: why") != std::string::npos);
  CHECK(prompt.find("answer: because") != std::string::npos);

  mode = 1;
  CHECK(judge.score("q", "a") == 73);

  mode = 2;
  requests = 0;
  CHECK(judge.score("q", "a2") == 64);  // first attempt 500, retry succeeds
  CHECK(requests == 2);

  mode = 3;
  CHECK_THROWS_AS(judge.score("q", "a3"), std::runtime_error);

  ::unsetenv("DNPO_EVAL_API_KEY");
  server.stop();
  listener.join();

  ExternalEvaluatorConfig bad;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
