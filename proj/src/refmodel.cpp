#include "actgate/refmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <sstream>

#include "actgate/error.hpp"
#include "actgate/prng.hpp"

namespace actgate::refmodel {
namespace {

constexpr float kInitStd = 0.02f;
constexpr float kLayerNormEps = 1e-5f;
constexpr std::string_view kTinyPrefix = "tiny:";

std::vector<float> gaussian(SplitMix64& rng, std::size_t n) {
  std::vector<float> w(n);
  for (auto& v : w) v = static_cast<float>(rng.normal()) * kInitStd;
  return w;
}

void layer_norm(std::span<const float> x, std::span<const float> gain,
                std::span<const float> bias, std::span<float> out) {
  const std::size_t d = x.size();
  float mean = 0.0f;
  for (float v : x) mean += v;
  mean /= static_cast<float>(d);
  float var = 0.0f;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<float>(d);
  const float inv = 1.0f / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
}

// out = x * W with W stored [in][out].
void matvec(std::span<const float> x, const std::vector<float>& w, std::span<float> out) {
  const std::size_t n_out = out.size();
  std::fill(out.begin(), out.end(), 0.0f);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float xi = x[i];
    const float* row = w.data() + i * n_out;
    for (std::size_t j = 0; j < n_out; ++j) out[j] += xi * row[j];
  }
}

float gelu(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

int parse_int_field(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw Error("tiny model id missing '" + key + "'");
  try {
    std::size_t used = 0;
    const int v = std::stoi(it->second, &used);
    if (used != it->second.size()) throw Error("bad value");
    return v;
  } catch (const std::exception&) {
    throw Error("tiny model id: bad value for '" + key + "'");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 1) throw Error("vocab_size must be >= 1");
  if (hidden_dim < 1) throw Error("hidden_dim must be >= 1");
  if (num_layers < 1) throw Error("num_layers must be >= 1");
  if (num_heads < 1) throw Error("num_heads must be >= 1");
  if (hidden_dim % num_heads != 0) throw Error("d not divisible by heads");
  if (ffn_dim < 1) throw Error("ffn_dim must be >= 1");
  if (max_len < 1) throw Error("max_len must be >= 1");
  if (context_len < max_len) throw Error("context_len must be >= max_len");
}

std::string ModelConfig::model_id() const {
  std::ostringstream os;
  os << kTinyPrefix << "vocab=" << vocab_size << ",d=" << hidden_dim << ",layers=" << num_layers
     << ",heads=" << num_heads << ",ffn=" << ffn_dim << ",max_len=" << max_len
     << ",context=" << context_len << ",seed=" << seed;
  return os.str();
}

bool ModelConfig::is_tiny_model_id(std::string_view id) { return id.starts_with(kTinyPrefix); }

ModelConfig ModelConfig::from_model_id(std::string_view id) {
  if (!is_tiny_model_id(id)) {
    throw Error("model id '" + std::string(id) + "' does not describe a tiny model");
  }
  std::map<std::string, std::string> kv;
  std::string rest(id.substr(kTinyPrefix.size()));
  std::istringstream in(rest);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw Error("tiny model id: malformed field '" + item + "'");
    kv[item.substr(0, eq)] = item.substr(eq + 1);
  }
  ModelConfig c;
  c.vocab_size = parse_int_field(kv, "vocab");
  c.hidden_dim = parse_int_field(kv, "d");
  c.num_layers = parse_int_field(kv, "layers");
  c.num_heads = parse_int_field(kv, "heads");
  c.ffn_dim = parse_int_field(kv, "ffn");
  c.max_len = parse_int_field(kv, "max_len");
  c.context_len = parse_int_field(kv, "context");
  auto seed = kv.find("seed");
  if (seed == kv.end()) throw Error("tiny model id missing 'seed'");
  try {
    c.seed = std::stoull(seed->second);
  } catch (const std::exception&) {
    throw Error("tiny model id: bad value for 'seed'");
  }
  c.validate();
  return c;
}

TokenSeq tokenize(std::string_view text, int max_len, Truncation truncation) {
  if (text.empty()) throw Error("empty prompt");
  if (max_len < 1) throw Error("max_len must be >= 1");
  const std::size_t keep = std::min(text.size(), static_cast<std::size_t>(max_len));
  const std::string_view kept =
      truncation == Truncation::kKeepFirst ? text.substr(0, keep) : text.substr(text.size() - keep);
  TokenSeq tokens;
  tokens.reserve(kept.size());
  for (char c : kept) tokens.push_back(static_cast<unsigned char>(c));
  return tokens;
}

std::span<const float> HiddenStates::row(int matrix, int t) const {
  if (matrix < 0 || matrix >= num_matrices()) throw Error("hidden state index out of range");
  if (t < 0 || t >= seq_len) throw Error("position out of range");
  return std::span<const float>(layers[static_cast<std::size_t>(matrix)])
      .subspan(static_cast<std::size_t>(t) * hidden_dim, static_cast<std::size_t>(hidden_dim));
}

std::vector<float> last_token(const HiddenStates& hidden, int layer) {
  const int blocks = hidden.num_matrices() - 1;
  if (layer < 0 || layer >= blocks) {
    throw Error("layer out of range: " + std::to_string(layer) + " not in [0, " +
                std::to_string(blocks) + ")");
  }
  if (hidden.seq_len < 1) throw Error("empty hidden states");
  auto row = hidden.row(layer + 1, hidden.seq_len - 1);
  return {row.begin(), row.end()};
}

std::vector<float> stacked_last_tokens(const HiddenStates& hidden) {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(hidden.num_matrices() - 1) *
              static_cast<std::size_t>(hidden.hidden_dim));
  for (int l = 0; l + 1 < hidden.num_matrices(); ++l) {
    const auto h = last_token(hidden, l);
    out.insert(out.end(), h.begin(), h.end());
  }
  return out;
}

Model::Model(ModelConfig config) : config_(config) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.hidden_dim);
  const auto f = static_cast<std::size_t>(config_.ffn_dim);
  SplitMix64 rng(config_.seed);
  token_embedding_ = gaussian(rng, static_cast<std::size_t>(config_.vocab_size) * d);
  position_embedding_ = gaussian(rng, static_cast<std::size_t>(config_.context_len) * d);
  blocks_.resize(static_cast<std::size_t>(config_.num_layers));
  for (auto& b : blocks_) {
    b.ln1_gain.assign(d, 1.0f);
    b.ln1_bias.assign(d, 0.0f);
    b.wq = gaussian(rng, d * d);
    b.wk = gaussian(rng, d * d);
    b.wv = gaussian(rng, d * d);
    b.wo = gaussian(rng, d * d);
    b.ln2_gain.assign(d, 1.0f);
    b.ln2_bias.assign(d, 0.0f);
    b.w1 = gaussian(rng, d * f);
    b.b1.assign(f, 0.0f);
    b.w2 = gaussian(rng, f * d);
    b.b2.assign(d, 0.0f);
  }
  final_gain_.assign(d, 1.0f);
  final_bias_.assign(d, 0.0f);
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const std::vector<float>& v) {
    for (float x : v) {
      auto bits = std::bit_cast<std::uint32_t>(x);
      for (int i = 0; i < 4; ++i) {
        h ^= (bits >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
      }
    }
  };
  feed(token_embedding_);
  feed(position_embedding_);
  for (const auto& b : blocks_) {
    for (const auto* v : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain,
                          &b.ln2_bias, &b.w1, &b.b1, &b.w2, &b.b2}) {
      feed(*v);
    }
  }
  feed(final_gain_);
  feed(final_bias_);
  return h;
}

void Model::check_tokens(const TokenSeq& tokens, int limit) const {
  if (tokens.empty()) throw Error("empty token sequence");
  if (static_cast<int>(tokens.size()) > limit) {
    throw Error("sequence length " + std::to_string(tokens.size()) + " exceeds max_len " +
                std::to_string(limit));
  }
  for (auto t : tokens) {
    if (t < 0 || t >= config_.vocab_size) {
      throw Error("token " + std::to_string(t) + " out of vocabulary");
    }
  }
}

void Model::step(std::int32_t token, KvCache& cache, std::vector<float>& x,
                 std::vector<std::vector<float>>* states) const {
  const auto d = static_cast<std::size_t>(config_.hidden_dim);
  const auto f = static_cast<std::size_t>(config_.ffn_dim);
  const auto heads = static_cast<std::size_t>(config_.num_heads);
  const std::size_t hd = d / heads;
  const auto t = static_cast<std::size_t>(cache.length);
  if (cache.length >= config_.context_len) throw Error("context overflow");
  if (cache.keys.empty()) {
    cache.keys.resize(blocks_.size());
    cache.values.resize(blocks_.size());
  }

  x.resize(d);
  const float* te = token_embedding_.data() + static_cast<std::size_t>(token) * d;
  const float* pe = position_embedding_.data() + t * d;
  for (std::size_t i = 0; i < d; ++i) x[i] = te[i] + pe[i];
  if (states) (*states)[0].insert((*states)[0].end(), x.begin(), x.end());

  std::vector<float> normed(d), q(d), k(d), v(d), attn(d), proj(d), hidden(f), ffn_out(d);
  std::vector<float> scores(t + 1);
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));

  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    layer_norm(x, b.ln1_gain, b.ln1_bias, normed);
    matvec(normed, b.wq, q);
    matvec(normed, b.wk, k);
    matvec(normed, b.wv, v);
    auto& keys = cache.keys[l];
    auto& vals = cache.values[l];
    keys.insert(keys.end(), k.begin(), k.end());
    vals.insert(vals.end(), v.begin(), v.end());

    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      float max_score = -INFINITY;
      for (std::size_t j = 0; j <= t; ++j) {
        const float* kj = keys.data() + j * d + off;
        float s = 0.0f;
        for (std::size_t c = 0; c < hd; ++c) s += q[off + c] * kj[c];
        s *= scale;
        scores[j] = s;
        max_score = std::max(max_score, s);
      }
      float denom = 0.0f;
      for (std::size_t j = 0; j <= t; ++j) {
        scores[j] = std::exp(scores[j] - max_score);
        denom += scores[j];
      }
      for (std::size_t c = 0; c < hd; ++c) attn[off + c] = 0.0f;
      for (std::size_t j = 0; j <= t; ++j) {
        const float p = scores[j] / denom;
        const float* vj = vals.data() + j * d + off;
        for (std::size_t c = 0; c < hd; ++c) attn[off + c] += p * vj[c];
      }
    }
    matvec(attn, b.wo, proj);
    for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

    layer_norm(x, b.ln2_gain, b.ln2_bias, normed);
    matvec(normed, b.w1, hidden);
    for (std::size_t i = 0; i < f; ++i) hidden[i] = gelu(hidden[i] + b.b1[i]);
    matvec(hidden, b.w2, ffn_out);
    for (std::size_t i = 0; i < d; ++i) x[i] += ffn_out[i] + b.b2[i];

    if (states) (*states)[l + 1].insert((*states)[l + 1].end(), x.begin(), x.end());
  }
  ++cache.length;
}

Prefill Model::prefill(const TokenSeq& tokens) const {
  check_tokens(tokens, config_.max_len);
  Prefill p;
  p.tokens = tokens;
  p.hidden.seq_len = static_cast<int>(tokens.size());
  p.hidden.hidden_dim = config_.hidden_dim;
  p.hidden.layers.resize(blocks_.size() + 1);
  for (auto& m : p.hidden.layers) m.reserve(tokens.size() * static_cast<std::size_t>(config_.hidden_dim));
  std::vector<float> x;
  for (auto tok : tokens) step(tok, p.cache, x, &p.hidden.layers);
  return p;
}

HiddenStates Model::forward(const TokenSeq& tokens) const { return prefill(tokens).hidden; }

std::vector<float> Model::logits(std::span<const float> block_output) const {
  const auto d = static_cast<std::size_t>(config_.hidden_dim);
  if (block_output.size() != d) throw Error("dimension mismatch");
  std::vector<float> normed(d);
  layer_norm(block_output, final_gain_, final_bias_, normed);
  std::vector<float> out(static_cast<std::size_t>(config_.vocab_size));
  for (std::size_t tok = 0; tok < out.size(); ++tok) {
    const float* e = token_embedding_.data() + tok * d;
    float s = 0.0f;
    for (std::size_t i = 0; i < d; ++i) s += normed[i] * e[i];
    out[tok] = s;
  }
  return out;
}

std::int32_t Model::argmax_token(std::span<const float> block_output) const {
  const auto l = logits(block_output);
  std::size_t best = 0;
  for (std::size_t i = 1; i < l.size(); ++i) {
    if (l[i] > l[best]) best = i;
  }
  return static_cast<std::int32_t>(best);
}

GenerateResult Model::generate(const TokenSeq& tokens, int max_new_tokens,
                               const Prefill* prior) const {
  if (max_new_tokens < 0) throw Error("max_new_tokens must be >= 0");
  check_tokens(tokens, config_.max_len);
  if (static_cast<long>(tokens.size()) + max_new_tokens > config_.context_len) {
    throw Error("context overflow: " + std::to_string(tokens.size()) + " prompt + " +
                std::to_string(max_new_tokens) + " new tokens exceed context_len " +
                std::to_string(config_.context_len));
  }
  GenerateResult result;
  if (max_new_tokens == 0) return result;

  KvCache cache;
  std::vector<float> x;
  if (prior != nullptr) {
    if (prior->tokens != tokens || prior->cache.length != static_cast<int>(tokens.size())) {
      throw Error("cached prefill does not match the prompt");
    }
    cache = prior->cache;
    auto last = prior->hidden.row(prior->hidden.num_matrices() - 1, prior->hidden.seq_len - 1);
    x.assign(last.begin(), last.end());
    result.reused_prefill = true;
  } else {
    const Prefill p = prefill(tokens);
    cache = p.cache;
    auto last = p.hidden.row(p.hidden.num_matrices() - 1, p.hidden.seq_len - 1);
    x.assign(last.begin(), last.end());
    result.prefill_passes = 1;
  }

  for (int k = 0; k < max_new_tokens; ++k) {
    const auto tok = argmax_token(x);
    result.new_tokens.push_back(tok);
    result.text.push_back(static_cast<char>(static_cast<unsigned char>(tok)));
    if (k + 1 < max_new_tokens) step(tok, cache, x, nullptr);
  }
  result.new_token_count = static_cast<int>(result.new_tokens.size());
  return result;
}

}  // namespace actgate::refmodel
