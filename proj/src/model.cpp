#include "dnpo/model.hpp"

#include <cmath>
#include <stdexcept>

#include "dnpo/rng.hpp"

namespace dnpo {

namespace {

constexpr double kInitStd = 0.08;

std::string block_key(int i, const char* name) {
  return "blocks." + std::to_string(i) + "." + name;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
  if (hidden_dim < 1) throw std::invalid_argument("ModelConfig: hidden_dim must be positive");
  if (num_blocks < 0) throw std::invalid_argument("ModelConfig: num_blocks must be >= 0");
  if (max_seq_len < 2) throw std::invalid_argument("ModelConfig: max_seq_len must be >= 2");
  if (num_heads < 1 || hidden_dim % num_heads != 0)
    throw std::invalid_argument("ModelConfig: num_heads must divide hidden_dim");
}

std::vector<std::pair<std::string, Mat*>> ModelParams::entries() {
  std::vector<std::pair<std::string, Mat*>> out;
  out.emplace_back("token_embedding", &token_embedding);
  out.emplace_back("position_embedding", &position_embedding);
  for (size_t i = 0; i < blocks.size(); ++i) {
    BlockParams& b = blocks[i];
    int k = static_cast<int>(i);
    out.emplace_back(block_key(k, "wq"), &b.wq);
    out.emplace_back(block_key(k, "wk"), &b.wk);
    out.emplace_back(block_key(k, "wv"), &b.wv);
    out.emplace_back(block_key(k, "wo"), &b.wo);
    out.emplace_back(block_key(k, "fc1"), &b.fc1);
    out.emplace_back(block_key(k, "b1"), &b.b1);
    out.emplace_back(block_key(k, "fc2"), &b.fc2);
    out.emplace_back(block_key(k, "b2"), &b.b2);
  }
  out.emplace_back("output_projection", &output_projection);
  return out;
}

std::vector<std::pair<std::string, const Mat*>> ModelParams::entries() const {
  auto mut = const_cast<ModelParams*>(this)->entries();
  std::vector<std::pair<std::string, const Mat*>> out;
  out.reserve(mut.size());
  for (auto& [name, m] : mut) out.emplace_back(name, m);
  return out;
}

ModelParams init_params(const ModelConfig& config, uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  int d = config.hidden_dim;
  p.token_embedding = Mat(config.vocab_size, d);
  p.position_embedding = Mat(config.max_seq_len, d);
  p.blocks.resize(config.num_blocks);
  for (auto& b : p.blocks) {
    b.wq = Mat(d, d);
    b.wk = Mat(d, d);
    b.wv = Mat(d, d);
    b.wo = Mat(d, d);
    b.fc1 = Mat(d, 4 * d);
    b.b1 = Mat(1, 4 * d);
    b.fc2 = Mat(4 * d, d);
    b.b2 = Mat(1, d);
  }
  p.output_projection = Mat(d, config.vocab_size);

  // Weights N(0, 0.08), biases zero; one stream, fixed enumeration order.
  Rng rng(seed);
  for (auto& [name, m] : p.entries()) {
    if (name.ends_with(".b1") || name.ends_with(".b2")) continue;
    for (auto& x : m->data) x = kInitStd * rng.normal();
  }
  return p;
}

ModelParams zeros_like(const ModelParams& like) {
  ModelParams z = like;
  for (auto& [name, m] : z.entries()) {
    (void)name;
    std::fill(m->data.begin(), m->data.end(), 0.0);
  }
  return z;
}

void validate_tokens(const ModelConfig& config, const std::vector<int>& tokens) {
  if (tokens.empty()) throw std::invalid_argument("token sequence is empty");
  if (static_cast<int>(tokens.size()) > config.max_seq_len)
    throw std::invalid_argument("token sequence longer than max_seq_len");
  for (int t : tokens) {
    if (t < 0 || t >= config.vocab_size)
      throw std::invalid_argument("token id " + std::to_string(t) + " out of range");
  }
}

std::vector<Var> ModelVars::entries() const {
  std::vector<Var> out;
  out.push_back(token_embedding);
  out.push_back(position_embedding);
  for (const BlockVars& b : blocks) {
    out.push_back(b.wq);
    out.push_back(b.wk);
    out.push_back(b.wv);
    out.push_back(b.wo);
    out.push_back(b.fc1);
    out.push_back(b.b1);
    out.push_back(b.fc2);
    out.push_back(b.b2);
  }
  out.push_back(output_projection);
  return out;
}

ModelVars bind_model(Tape& tape, const ModelParams& params, bool trainable) {
  auto put = [&](const Mat& m) { return trainable ? tape.leaf(m) : tape.constant(m); };
  ModelVars v;
  v.config = &params.config;
  v.token_embedding = put(params.token_embedding);
  v.position_embedding = put(params.position_embedding);
  for (const BlockParams& b : params.blocks) {
    BlockVars bv;
    bv.wq = put(b.wq);
    bv.wk = put(b.wk);
    bv.wv = put(b.wv);
    bv.wo = put(b.wo);
    bv.fc1 = put(b.fc1);
    bv.b1 = put(b.b1);
    bv.fc2 = put(b.fc2);
    bv.b2 = put(b.b2);
    v.blocks.push_back(bv);
  }
  v.output_projection = put(params.output_projection);
  return v;
}

ForwardVars build_forward(Tape& t, const ModelVars& vars, const std::vector<int>& tokens) {
  const ModelConfig& cfg = *vars.config;
  validate_tokens(cfg, tokens);
  int T = static_cast<int>(tokens.size());
  int d = cfg.hidden_dim;
  int dh = d / cfg.num_heads;

  std::vector<int> positions(T);
  for (int i = 0; i < T; ++i) positions[i] = i;
  Var h = t.add(t.embedding_rows(vars.token_embedding, tokens),
                t.embedding_rows(vars.position_embedding, positions));

  for (const BlockVars& b : vars.blocks) {
    Var x = t.rms_norm_rows(h);
    Var q = t.matmul(x, b.wq);
    Var k = t.matmul(x, b.wk);
    Var v = t.matmul(x, b.wv);
    std::vector<Var> heads;
    for (int hd = 0; hd < cfg.num_heads; ++hd) {
      Var qh = t.slice_cols(q, hd * dh, dh);
      Var kh = t.slice_cols(k, hd * dh, dh);
      Var vh = t.slice_cols(v, hd * dh, dh);
      Var scores = t.scale(t.matmul(qh, t.transpose(kh)), 1.0 / std::sqrt(double(dh)));
      Var probs = t.causal_softmax_rows(scores);
      heads.push_back(t.matmul(probs, vh));
    }
    Var attn = t.matmul(t.concat_cols(heads), b.wo);
    h = t.add(h, attn);

    Var m = t.rms_norm_rows(h);
    Var inner = t.gelu(t.add_row_broadcast(t.matmul(m, b.fc1), b.b1));
    Var mlp = t.add_row_broadcast(t.matmul(inner, b.fc2), b.b2);
    h = t.add(h, mlp);
  }

  Var hidden = t.rms_norm_rows(h);
  Var logits = t.matmul(hidden, vars.output_projection);
  return {logits, hidden};
}

Var build_sequence_log_prob(Tape& t, const ModelVars& vars, const std::vector<int>& prompt,
                            const std::vector<int>& response) {
  if (prompt.empty()) throw std::invalid_argument("sequence_log_prob: empty prompt");
  if (response.empty()) throw std::invalid_argument("sequence_log_prob: empty response");
  std::vector<int> all = prompt;
  all.insert(all.end(), response.begin(), response.end());
  ForwardVars f = build_forward(t, vars, all);
  int P = static_cast<int>(prompt.size());
  int R = static_cast<int>(response.size());
  Var rows = t.slice_rows(f.logits, P - 1, R);
  Var logp = t.log_softmax_rows(rows);
  return t.sum(t.gather_rows(logp, response));
}

ForwardResult forward(const ModelParams& params, const std::vector<int>& tokens) {
  Tape t;
  ModelVars vars = bind_model(t, params, false);
  ForwardVars f = build_forward(t, vars, tokens);
  return {t.value(f.logits), t.value(f.hidden)};
}

ResponseSlices response_slices(const ModelParams& params, const std::vector<int>& prompt,
                               const std::vector<int>& response) {
  if (prompt.empty()) throw std::invalid_argument("response_slices: empty prompt");
  if (response.empty()) throw std::invalid_argument("response_slices: empty response");
  std::vector<int> all = prompt;
  all.insert(all.end(), response.begin(), response.end());
  ForwardResult f = forward(params, all);
  int P = static_cast<int>(prompt.size());
  int R = static_cast<int>(response.size());
  ResponseSlices out;
  out.logits = f.logits.slice_rows(P - 1, R);
  out.hidden = f.hidden.slice_rows(P - 1, R);
  out.log_prob = 0.0;
  for (int j = 0; j < R; ++j) {
    const Mat& z = out.logits;
    double m = z(j, 0);
    for (int c = 1; c < z.cols; ++c) m = std::max(m, z(j, c));
    double total = 0.0;
    for (int c = 0; c < z.cols; ++c) total += std::exp(z(j, c) - m);
    out.log_prob += z(j, response[j]) - m - std::log(total);
  }
  return out;
}

double sequence_log_prob(const ModelParams& params, const std::vector<int>& prompt,
                         const std::vector<int>& response) {
  return response_slices(params, prompt, response).log_prob;
}

int sample_from_logits(const Mat& logits_row, double temperature, Rng& rng) {
  if (logits_row.rows != 1) throw std::invalid_argument("sample_from_logits: expected 1xV row");
  if (temperature < 0.0) throw std::invalid_argument("sample_from_logits: negative temperature");
  int V = logits_row.cols;
  if (temperature == 0.0) {
    int best = 0;
    for (int c = 1; c < V; ++c)
      if (logits_row(0, c) > logits_row(0, best)) best = c;
    return best;
  }
  double m = logits_row(0, 0) / temperature;
  for (int c = 1; c < V; ++c) m = std::max(m, logits_row(0, c) / temperature);
  std::vector<double> probs(V);
  double total = 0.0;
  for (int c = 0; c < V; ++c) {
    probs[c] = std::exp(logits_row(0, c) / temperature - m);
    total += probs[c];
  }
  for (auto& p : probs) p /= total;
  return rng.categorical(probs);
}

std::vector<int> generate(const ModelParams& params, const std::vector<int>& prompt, int max_new,
                          double temperature, uint64_t seed) {
  validate_tokens(params.config, prompt);
  if (static_cast<int>(prompt.size()) >= params.config.max_seq_len)
    throw std::invalid_argument("generate: prompt leaves no room for new tokens");
  Rng rng(seed);
  std::vector<int> all = prompt;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(all.size()) >= params.config.max_seq_len) break;
    ForwardResult f = forward(params, all);
    Mat last = f.logits.slice_rows(f.logits.rows - 1, 1);
    int tok = sample_from_logits(last, temperature, rng);
    out.push_back(tok);
    all.push_back(tok);
    if (tok == kEosId) break;
  }
  return out;
}

ModelParams collect_grads(const Tape& tape, const ModelVars& vars, const ModelParams& shape) {
  ModelParams g = zeros_like(shape);
  auto names = g.entries();
  auto vs = vars.entries();
  if (names.size() != vs.size())
    throw std::logic_error("collect_grads: parameter count mismatch");
  for (size_t i = 0; i < names.size(); ++i) *names[i].second = tape.grad(vs[i]);
  return g;
}

}  // namespace dnpo
