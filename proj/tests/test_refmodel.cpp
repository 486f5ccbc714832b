#include <gtest/gtest.h>

#include <algorithm>
#include <thread>

#include "actgate/error.hpp"
#include "actgate/prng.hpp"
#include "actgate/refmodel.hpp"

using namespace actgate;
using namespace actgate::refmodel;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.max_len = 64;
  c.context_len = 96;
  return c;
}

const Model& shared_model() {
  static const Model m(small_config());
  return m;
}

TokenSeq random_tokens(SplitMix64& rng, int len) {
  TokenSeq t(static_cast<std::size_t>(len));
  for (auto& v : t) v = static_cast<std::int32_t>(rng.next() % 256);
  return t;
}

// Greedy decoding without any cache: every step reruns the full sequence.
TokenSeq uncached_greedy(const Model& m, TokenSeq tokens, int new_tokens) {
  TokenSeq out;
  for (int k = 0; k < new_tokens; ++k) {
    const auto h = m.forward(tokens);
    const auto logits = m.logits(h.row(h.num_matrices() - 1, h.seq_len - 1));
    const auto best = static_cast<std::int32_t>(
        std::max_element(logits.begin(), logits.end()) - logits.begin());
    out.push_back(best);
    tokens.push_back(best);
  }
  return out;
}

}  // namespace

TEST(Tokenize, BytesAndTruncation) {
  EXPECT_EQ(tokenize("abc", 512), (TokenSeq{97, 98, 99}));
  const std::string long_text(600, 'x');
  EXPECT_EQ(tokenize(long_text, 512).size(), 512u);
  EXPECT_EQ(tokenize("abcdef", 4, Truncation::kKeepFirst), (TokenSeq{97, 98, 99, 100}));
  EXPECT_EQ(tokenize("abcdef", 4, Truncation::kKeepLast), (TokenSeq{99, 100, 101, 102}));
  EXPECT_EQ(tokenize("\xc3\xa9", 8), (TokenSeq{0xc3, 0xa9}));
  try {
    tokenize("", 512);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty prompt");
  }
}

TEST(ModelConfig, ValidationAndIds) {
  ModelConfig c;
  c.hidden_dim = 63;
  try {
    Model m(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "d not divisible by heads");
  }
  const ModelConfig d;
  EXPECT_EQ(d.model_id(),
            "tiny:vocab=256,d=64,layers=8,heads=4,ffn=256,max_len=512,context=1024,seed=42");
  const auto back = ModelConfig::from_model_id(d.model_id());
  EXPECT_EQ(back.model_id(), d.model_id());
  EXPECT_TRUE(ModelConfig::is_tiny_model_id(d.model_id()));
  EXPECT_FALSE(ModelConfig::is_tiny_model_id("synth:sep=4,from=0,seed=42"));
  EXPECT_THROW(ModelConfig::from_model_id("meta-llama/Llama-2-7b-chat-hf"), Error);
}

TEST(Model, SeedDeterminesWeights) {
  ModelConfig c = small_config();
  c.seed = 1;
  const Model a(c), b(c);
  c.seed = 2;
  const Model other(c);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), other.checksum());
}

TEST(Model, ForwardShape) {
  const auto& m = shared_model();
  const auto h = m.forward({1, 2, 3, 4, 5});
  ASSERT_EQ(h.num_matrices(), 9);
  for (const auto& layer : h.layers) EXPECT_EQ(layer.size(), 5u * 64u);
  EXPECT_EQ(h.seq_len, 5);
  EXPECT_EQ(h.hidden_dim, 64);
  for (const auto& layer : h.layers) {
    for (float v : layer) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(Model, ForwardRejectsBadInput) {
  const auto& m = shared_model();
  EXPECT_THROW(m.forward({}), Error);
  EXPECT_THROW(m.forward({256}), Error);
  EXPECT_THROW(m.forward({-1}), Error);
  EXPECT_THROW(m.forward(TokenSeq(65, 1)), Error);
}

TEST(Model, ForwardIsDeterministic) {
  const auto& m = shared_model();
  const TokenSeq t{10, 20, 30, 40};
  const auto a = m.forward(t);
  const auto b = m.forward(t);
  EXPECT_EQ(a.layers, b.layers);
}

TEST(Model, PrefixProperty) {
  const auto& m = shared_model();
  const TokenSeq full{72, 101, 108, 108, 111, 33};
  const auto a = m.forward(TokenSeq(full.begin(), full.begin() + 4));
  const auto b = m.forward(full);
  for (int l = 0; l < a.num_matrices(); ++l) {
    for (int t = 0; t < 4; ++t) {
      const auto ra = a.row(l, t);
      const auto rb = b.row(l, t);
      for (std::size_t j = 0; j < ra.size(); ++j) EXPECT_NEAR(ra[j], rb[j], 1e-5);
    }
  }
}

TEST(Model, PerturbationsNeverReachEarlierPositions) {
  const auto& m = shared_model();
  SplitMix64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int len = 2 + static_cast<int>(rng.next() % 30);
    auto tokens = random_tokens(rng, len);
    const auto base = m.forward(tokens);
    const int t = static_cast<int>(rng.next() % static_cast<std::uint64_t>(len));
    tokens[static_cast<std::size_t>(t)] = (tokens[static_cast<std::size_t>(t)] + 1) % 256;
    const auto pert = m.forward(tokens);
    for (int l = 0; l < base.num_matrices(); ++l) {
      for (int r = 0; r < t; ++r) {
        const auto a = base.row(l, r);
        const auto b = pert.row(l, r);
        ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << "layer " << l << " row " << r;
      }
      const auto a = base.row(l, t);
      const auto b = pert.row(l, t);
      EXPECT_FALSE(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST(LastToken, IndexesBlockOutputs) {
  HiddenStates h;
  h.seq_len = 3;
  h.hidden_dim = 2;
  for (int l = 0; l < 3; ++l) {
    std::vector<float> m;
    for (int t = 0; t < 3; ++t) {
      m.push_back(static_cast<float>(10 * l + t));
      m.push_back(static_cast<float>(-(10 * l + t)));
    }
    h.layers.push_back(m);
  }
  EXPECT_EQ(last_token(h, 0), (std::vector<float>{12, -12}));
  EXPECT_EQ(last_token(h, 1), (std::vector<float>{22, -22}));
  EXPECT_THROW(last_token(h, 2), Error);
  EXPECT_THROW(last_token(h, -1), Error);
  EXPECT_EQ(stacked_last_tokens(h), (std::vector<float>{12, -12, 22, -22}));
}

TEST(Generate, ZeroTokensAndDeterminism) {
  const auto& m = shared_model();
  const auto tokens = tokenize("Hello there", 64);
  const auto none = m.generate(tokens, 0);
  EXPECT_TRUE(none.text.empty());
  EXPECT_EQ(none.new_token_count, 0);
  const auto a = m.generate(tokens, 12);
  const auto b = m.generate(tokens, 12);
  EXPECT_EQ(a.new_tokens, b.new_tokens);
  EXPECT_EQ(a.new_token_count, 12);
  EXPECT_EQ(a.text.size(), 12u);
  EXPECT_FALSE(a.reused_prefill);
  EXPECT_EQ(a.prefill_passes, 1);
}

TEST(Generate, CachedPrefillMatchesUncachedDecoding) {
  const auto& m = shared_model();
  SplitMix64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const auto tokens = random_tokens(rng, 1 + static_cast<int>(rng.next() % 40));
    const auto pre = m.prefill(tokens);
    const auto cached = m.generate(tokens, 16, &pre);
    EXPECT_TRUE(cached.reused_prefill);
    EXPECT_EQ(cached.prefill_passes, 0);
    EXPECT_EQ(cached.new_tokens, m.generate(tokens, 16).new_tokens);
    EXPECT_EQ(cached.new_tokens, uncached_greedy(m, tokens, 16));
  }
}

TEST(Generate, PrefillStatesEqualForward) {
  const auto& m = shared_model();
  const TokenSeq t{5, 6, 7, 8, 9};
  EXPECT_EQ(m.prefill(t).hidden.layers, m.forward(t).layers);
}

TEST(Generate, RejectsMismatchedCacheAndOverflow) {
  const auto& m = shared_model();
  const auto pre = m.prefill({1, 2, 3});
  EXPECT_THROW(m.generate({1, 2, 4}, 4, &pre), Error);
  EXPECT_THROW(m.generate({1, 2, 3}, 94), Error);
  EXPECT_NO_THROW(m.generate({1, 2, 3}, 93));
  EXPECT_THROW(m.generate({1, 2, 3}, -1), Error);
}

TEST(Model, ConcurrentCallsAgree) {
  const auto& m = shared_model();
  const auto tokens = tokenize("concurrency check", 64);
  const auto expected = m.generate(tokens, 8).new_tokens;
  std::vector<TokenSeq> got(4);
  {
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < got.size(); ++i) {
      pool.emplace_back([&, i] { got[i] = m.generate(tokens, 8).new_tokens; });
    }
  }
  for (const auto& g : got) EXPECT_EQ(g, expected);
}
