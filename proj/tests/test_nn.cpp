#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"

using namespace qkvae;
using qkvae::testing::random_tensor;

namespace {

std::vector<double> vec(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

struct Fixture {
  Rng rng{11};
  std::mt19937_64 data{12};
  BlockStack<double> dec = make_decoder_stack<double>(2, 8, 2, 16, 8, 8, rng);
  BlockStack<double> qkv = make_decoder_stack<double>(2, 8, 2, 16, 8, 12, rng);
  BlockStack<double> enc = make_encoder_stack<double>(2, 8, 2, 16, rng);
};

}  // namespace

TEST(Attention, QkvDecWithSharedSourceIsTransDec) {
  Fixture f;
  auto t = random_tensor({2, 5, 8}, f.data), s = random_tensor({2, 3, 8}, f.data);
  EXPECT_EQ(vec(qkv_dec(t, s, s, f.dec)), vec(trans_dec(t, s, f.dec)));
  const Mask causal = Mask::causal(5);
  EXPECT_EQ(vec(qkv_dec(t, s, s, f.dec, &causal)), vec(trans_dec(t, s, f.dec, &causal)));
  EXPECT_EQ(vec(ar_qkv_dec(t, s, s, f.dec)), vec(ar_trans_dec(t, s, f.dec)));
}

TEST(Attention, CausalDecoderIgnoresFutureTokensBitExactly) {
  Fixture f;
  auto prefix = random_tensor({2, 6, 8}, f.data);
  auto sk = random_tensor({2, 4, 8}, f.data), sv = random_tensor({2, 4, 12}, f.data);
  const auto base = vec(ar_qkv_dec_sequence(prefix, sk, sv, f.qkv));
  for (std::size_t cut = 0; cut < 5; ++cut) {
    Tensor<double> perturbed = prefix.clone();
    auto d = perturbed.mutable_data();
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = cut + 1; i < 6; ++i)
        for (std::size_t j = 0; j < 8; ++j) d[(b * 6 + i) * 8 + j] += 3.0 * std::sin(double(i * 8 + j + cut));
    const auto out = vec(ar_qkv_dec_sequence(perturbed, sk, sv, f.qkv));
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i <= cut; ++i)
        for (std::size_t j = 0; j < 8; ++j) ASSERT_EQ(out[(b * 6 + i) * 8 + j], base[(b * 6 + i) * 8 + j]);
  }
}

TEST(Attention, OutputsLieInTheConvexHullOfValues) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    auto q = random_tensor({3, 4}, rng, 3.0), k = random_tensor({5, 4}, rng, 3.0), v = random_tensor({5, 6}, rng);
    Tensor<double> w;
    const auto out = vec(attention(q, k, v, nullptr, &w));
    const auto wv = vec(w), vv = vec(v);
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        EXPECT_GE(wv[i * 5 + j], 0.0);
        s += wv[i * 5 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
      for (std::size_t c = 0; c < 6; ++c) {
        double lo = vv[c], hi = vv[c];
        for (std::size_t j = 1; j < 5; ++j) {
          lo = std::min(lo, vv[j * 6 + c]);
          hi = std::max(hi, vv[j * 6 + c]);
        }
        EXPECT_GE(out[i * 6 + c], lo - 1e-5);
        EXPECT_LE(out[i * 6 + c], hi + 1e-5);
      }
    }
  }
}

TEST(Attention, InvariantToJointPermutationOfKeysAndValues) {
  std::mt19937_64 rng(14);
  auto q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 2}, rng);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const auto kp = gather_rows(k, perm), vp = gather_rows(v, perm);
  const auto a = vec(attention(q, k, v)), b = vec(attention(q, kp, vp));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Attention, MaskedAttentionMatchesExplicitOracle) {
  std::mt19937_64 rng(15);
  const std::size_t n = 4, m = 5, d = 3;
  auto q = random_tensor({n, d}, rng), k = random_tensor({m, d}, rng), v = random_tensor({m, 2}, rng);
  Mask mask{{n, m}, std::vector<std::uint8_t>(n * m, 0)};
  std::bernoulli_distribution coin(0.5);
  for (std::size_t i = 0; i < n; ++i) {
    mask.allowed[i * m + i % m] = 1;
    for (std::size_t j = 0; j < m; ++j)
      if (coin(rng)) mask.allowed[i * m + j] = 1;
  }
  const auto got = vec(attention(q, k, v, &mask));
  const auto qv = vec(q), kv = vec(k), vv = vec(v);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits;
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < m; ++j) {
      if (!mask.allowed[i * m + j]) continue;
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += qv[i * d + c] * kv[j * d + c];
      logits.push_back(s / std::sqrt(double(d)));
      keep.push_back(j);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    for (std::size_t c = 0; c < 2; ++c) {
      double want = 0;
      for (std::size_t t = 0; t < keep.size(); ++t) want += logits[t] / z * vv[keep[t] * 2 + c];
      EXPECT_NEAR(got[i * 2 + c], want, 1e-12);
    }
  }
}

TEST(Attention, WeightsDependOnlyOnKeySource) {
  Fixture f;
  auto t = random_tensor({1, 3, 8}, f.data), sk = random_tensor({1, 4, 8}, f.data);
  auto v1 = random_tensor({1, 4, 12}, f.data), v2 = random_tensor({1, 4, 12}, f.data);
  const BlockStack<double> one{{f.qkv.layers.front()}};
  AttentionTrace<double> a, b;
  qkv_dec(t, sk, v1, one, nullptr, nullptr, {}, &a);
  qkv_dec(t, sk, v2, one, nullptr, nullptr, {}, &b);
  ASSERT_EQ(a.cross_weights.size(), 1u);
  EXPECT_EQ(vec(a.cross_weights[0]), vec(b.cross_weights[0]));
}

TEST(Attention, UnbatchedMatchesBatchOfOne) {
  Fixture f;
  auto t = random_tensor({5, 8}, f.data), s = random_tensor({3, 8}, f.data);
  const auto a = vec(trans_dec(t, s, f.dec));
  const auto b = vec(trans_dec(reshape(t, Shape{1, 5, 8}), reshape(s, Shape{1, 3, 8}), f.dec));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  EXPECT_EQ(ar_qkv_dec(t, s, s, f.dec).shape(), (Shape{8}));
}

TEST(Attention, LastPositionOfSequenceIsArOutput) {
  Fixture f;
  auto t = random_tensor({2, 4, 8}, f.data), sk = random_tensor({2, 3, 8}, f.data), sv = random_tensor({2, 3, 12}, f.data);
  const auto seq = vec(ar_qkv_dec_sequence(t, sk, sv, f.qkv));
  const auto last = vec(ar_qkv_dec(t, sk, sv, f.qkv));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(last[b * 8 + j], seq[(b * 4 + 3) * 8 + j]);
}

TEST(Attention, ShapeErrors) {
  Fixture f;
  auto t = random_tensor({1, 3, 8}, f.data);
  EXPECT_THROW(qkv_dec(t, random_tensor({1, 4, 8}, f.data), random_tensor({1, 5, 12}, f.data), f.qkv), ShapeError);
  EXPECT_THROW(attention(random_tensor({2, 3}, f.data), random_tensor({2, 4}, f.data), random_tensor({2, 4}, f.data)),
               ShapeError);
}

TEST(Encoder, PermutingTokensPermutesOutputs) {
  // Without position information, self-attention layers are permutation-equivariant.
  Fixture f;
  auto x = random_tensor({4, 8}, f.data);
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const auto a = vec(gather_rows(trans_enc(x, f.enc), perm));
  const auto b = vec(trans_enc(gather_rows(x, perm), f.enc));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Encoder, PaddingDoesNotLeakIntoRealPositions) {
  Fixture f;
  auto x = random_tensor({1, 5, 8}, f.data);
  const std::vector<std::size_t> len{3};
  const Mask m = Mask::key_padding(len, 5, 5);
  const auto padded = vec(trans_enc(x, f.enc, &m));
  const auto trimmed = vec(trans_enc(slice(x, 1, 0, 3), f.enc));
  for (std::size_t i = 0; i < trimmed.size(); ++i) EXPECT_NEAR(padded[i], trimmed[i], 1e-12);
}
