#pragma once

// A small seeded decoder-only transformer with a byte-level vocabulary.
// It stands in for a real chat model so extraction, gating and generation
// can run without external weights.
//
// Architecture: learned token + position embeddings, N pre-norm blocks of
// causal multi-head self-attention and a GELU feed-forward with residuals,
// final LayerNorm, LM head tied to the token embedding. All weights are
// N(0, 0.02^2) draws from SplitMix64; LayerNorm gains are 1, biases 0.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace actgate::refmodel {

struct ModelConfig {
  int vocab_size = 256;
  int hidden_dim = 64;
  int num_layers = 8;
  int num_heads = 4;
  int ffn_dim = 256;
  // Longest prompt accepted by forward().
  int max_len = 512;
  // Positions available to prompt + generated tokens.
  int context_len = 1024;
  std::uint64_t seed = 42;

  void validate() const;

  /// Stable identifier, e.g. "tiny:vocab=256,d=64,layers=8,...,seed=42".
  std::string model_id() const;
  static ModelConfig from_model_id(std::string_view id);
  static bool is_tiny_model_id(std::string_view id);
};

enum class Truncation { kKeepFirst, kKeepLast };

using TokenSeq = std::vector<std::int32_t>;

/// UTF-8 bytes of `text`, truncated to max_len tokens.
TokenSeq tokenize(std::string_view text, int max_len,
                  Truncation truncation = Truncation::kKeepFirst);

/// N+1 matrices of shape T x d; layers[0] is the embedding output and
/// layers[l] the output of block l.
struct HiddenStates {
  int seq_len = 0;
  int hidden_dim = 0;
  std::vector<std::vector<float>> layers;

  int num_matrices() const { return static_cast<int>(layers.size()); }
  std::span<const float> row(int matrix, int t) const;
};

/// Row T-1 of layers[layer + 1]; layer in [0, N).
std::vector<float> last_token(const HiddenStates& hidden, int layer);

/// last_token for every block, concatenated layer-major (N * d values), the
/// layout of an ACTV record.
std::vector<float> stacked_last_tokens(const HiddenStates& hidden);

/// Per-block key/value rows for positions already processed.
struct KvCache {
  int length = 0;
  std::vector<std::vector<float>> keys;    // [layer][position * d]
  std::vector<std::vector<float>> values;  // [layer][position * d]
};

/// One prompt pass whose states serve both classification and decoding.
struct Prefill {
  TokenSeq tokens;
  HiddenStates hidden;
  KvCache cache;
};

struct GenerateResult {
  std::string text;
  TokenSeq new_tokens;
  int new_token_count = 0;
  bool reused_prefill = false;
  int prefill_passes = 0;
};

class Model {
 public:
  /// Throws actgate::Error on an invalid config.
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// FNV-1a over the bit patterns of every weight, in initialization order.
  std::uint64_t checksum() const;

  HiddenStates forward(const TokenSeq& tokens) const;
  Prefill prefill(const TokenSeq& tokens) const;

  /// Greedy decoding, ties to the lowest token id. When `prior` holds the
  /// prefill of exactly `tokens`, it is reused and no new prompt pass runs.
  GenerateResult generate(const TokenSeq& tokens, int max_new_tokens,
                          const Prefill* prior = nullptr) const;

  /// Vocabulary logits for a final-block hidden row.
  std::vector<float> logits(std::span<const float> block_output) const;

 private:
  struct Block {
    std::vector<float> ln1_gain, ln1_bias;
    std::vector<float> wq, wk, wv, wo;  // d x d, [in][out]
    std::vector<float> ln2_gain, ln2_bias;
    std::vector<float> w1, b1;  // d x ffn
    std::vector<float> w2, b2;  // ffn x d
  };

  void check_tokens(const TokenSeq& tokens, int limit) const;
  // Pushes one position through every block. `x` holds the embedding row on
  // entry and the last block's output on return; `states` (optional) receives
  // each block output.
  void step(std::int32_t token, KvCache& cache, std::vector<float>& x,
            std::vector<std::vector<float>>* states) const;
  std::int32_t argmax_token(std::span<const float> block_output) const;

  ModelConfig config_;
  std::vector<float> token_embedding_;     // vocab x d
  std::vector<float> position_embedding_;  // context_len x d
  std::vector<Block> blocks_;
  std::vector<float> final_gain_, final_bias_;
};

}  // namespace actgate::refmodel
