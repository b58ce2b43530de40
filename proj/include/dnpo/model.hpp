#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dnpo/mat.hpp"
#include "dnpo/tape.hpp"

namespace dnpo {

// Token id 0 terminates every response sequence.
inline constexpr int kEosId = 0;

struct ModelConfig {
  int vocab_size = 32;
  int hidden_dim = 32;
  int num_blocks = 2;
  int num_heads = 2;
  int max_seq_len = 64;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct BlockParams {
  Mat wq, wk, wv, wo;  // hidden_dim x hidden_dim
  Mat fc1, b1;         // hidden_dim x 4*hidden_dim, 1 x 4*hidden_dim
  Mat fc2, b2;         // 4*hidden_dim x hidden_dim, 1 x hidden_dim
};

// All weights of the decoder. Also serves as the gradient container, since
// gradients have the same shapes.
struct ModelParams {
  ModelConfig config;
  Mat token_embedding;     // vocab_size x hidden_dim
  Mat position_embedding;  // max_seq_len x hidden_dim
  std::vector<BlockParams> blocks;
  Mat output_projection;  // hidden_dim x vocab_size

  // Stable name -> matrix enumeration; the order defines the parameter
  // layout used by the optimizer and the checkpoint format.
  std::vector<std::pair<std::string, Mat*>> entries();
  std::vector<std::pair<std::string, const Mat*>> entries() const;
};

struct ForwardResult {
  Mat logits;  // seq_len x vocab_size
  Mat hidden;  // seq_len x hidden_dim, after the final normalization
};

// Rows of a forward pass aligned with the positions that predict each
// response token (position prompt_len-1+j predicts response token j).
struct ResponseSlices {
  Mat logits;      // response_len x vocab_size
  Mat hidden;      // response_len x hidden_dim
  double log_prob; // sum over response tokens of log softmax(logits)[token]
};

ModelParams init_params(const ModelConfig& config, uint64_t seed);

// Shaped like `like`, all entries zero. Gradient/accumulator containers.
ModelParams zeros_like(const ModelParams& like);

ForwardResult forward(const ModelParams& params, const std::vector<int>& tokens);

double sequence_log_prob(const ModelParams& params, const std::vector<int>& prompt,
                         const std::vector<int>& response);

ResponseSlices response_slices(const ModelParams& params, const std::vector<int>& prompt,
                               const std::vector<int>& response);

// Newly generated tokens only (prompt excluded); includes the terminating
// end-of-sequence token when one was produced. temperature 0 is greedy
// argmax and ignores the seed.
std::vector<int> generate(const ModelParams& params, const std::vector<int>& prompt, int max_new,
                          double temperature, uint64_t seed);

// One sampled token id from a single logits row.
int sample_from_logits(const Mat& logits_row, double temperature, class Rng& rng);

// --- graph building (for losses that differentiate through the model) ---

struct BlockVars {
  Var wq, wk, wv, wo, fc1, b1, fc2, b2;
};

struct ModelVars {
  const ModelConfig* config = nullptr;
  Var token_embedding;
  Var position_embedding;
  std::vector<BlockVars> blocks;
  Var output_projection;

  // Same order as ModelParams::entries().
  std::vector<Var> entries() const;
};

// Places every parameter on the tape, as differentiable leaves when
// `trainable`, otherwise as constants (frozen reference).
ModelVars bind_model(Tape& tape, const ModelParams& params, bool trainable);

struct ForwardVars {
  Var logits;
  Var hidden;
};

ForwardVars build_forward(Tape& tape, const ModelVars& vars, const std::vector<int>& tokens);

// 1x1 node holding log p(response | prompt).
Var build_sequence_log_prob(Tape& tape, const ModelVars& vars, const std::vector<int>& prompt,
                            const std::vector<int>& response);

// Reads accumulated gradients for every parameter back into a ModelParams
// shaped container. Call after Tape::backward.
ModelParams collect_grads(const Tape& tape, const ModelVars& vars, const ModelParams& shape);

void validate_tokens(const ModelConfig& config, const std::vector<int>& tokens);

}  // namespace dnpo
