#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace qkvae;
using qkvae::testing::naive_matmul;
using qkvae::testing::random_tensor;

namespace {

std::vector<double> vec(const Tensor<double>& t) { return {t.data().begin(), t.data().end()}; }

std::vector<double> transpose(const std::vector<double>& x, std::size_t rows, std::size_t cols) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
  return out;
}

}  // namespace

TEST(Tensor, RejectsZeroDimsAndLengthMismatch) {
  EXPECT_THROW(Tensor<double>(Shape{0, 3}, {}), ShapeError);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_NO_THROW(Tensor<double>::scalar(3.0));
}

TEST(Tensor, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 9);
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    const auto want = naive_matmul(vec(a), vec(b), m, k, n);
    const auto got = vec(matmul(a, b));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);

    auto bt = Tensor<double>({n, k}, transpose(vec(b), k, n));
    const auto got_t = vec(matmul(a, bt, true));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got_t[i], want[i], 1e-12);
  }
}

TEST(Tensor, BatchedMatmulMatchesPerBatchOracle) {
  std::mt19937_64 rng(2);
  const std::size_t batch = 3, m = 4, k = 5, n = 2;
  auto a = random_tensor({batch, m, k}, rng), b = random_tensor({batch, k, n}, rng);
  const auto got = vec(matmul(a, b));
  for (std::size_t i = 0; i < batch; ++i) {
    std::vector<double> ai(a.data().begin() + i * m * k, a.data().begin() + (i + 1) * m * k);
    std::vector<double> bi(b.data().begin() + i * k * n, b.data().begin() + (i + 1) * k * n);
    const auto want = naive_matmul(ai, bi, m, k, n);
    for (std::size_t j = 0; j < want.size(); ++j) EXPECT_NEAR(got[i * m * n + j], want[j], 1e-12);
  }
  // A 2-D right operand applies to every leading row.
  auto w = random_tensor({k, n}, rng);
  const auto shared = vec(matmul(a, w));
  const auto flat = naive_matmul(vec(a), vec(w), batch * m, k, n);
  for (std::size_t j = 0; j < flat.size(); ++j) EXPECT_NEAR(shared[j], flat[j], 1e-12);
}

TEST(Tensor, MatmulShapeErrors) {
  std::mt19937_64 rng(3);
  EXPECT_THROW(matmul(random_tensor({2, 3}, rng), random_tensor({4, 2}, rng)), ShapeError);
  EXPECT_THROW(matmul(random_tensor({2, 2, 3}, rng), random_tensor({3, 3, 2}, rng)), ShapeError);
}

TEST(Tensor, AddBroadcastsSuffix) {
  Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> b({3}, {10, 20, 30});
  EXPECT_EQ(vec(add(a, b)), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  EXPECT_THROW(add(a, Tensor<double>({2}, {1, 2})), ShapeError);
}

TEST(Tensor, SoftmaxRowsAndMaskedZeros) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({3, 4}, rng, 3.0);
  const auto p = vec(masked_softmax(x));
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 4; ++j) s += p[r * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  Mask causal = Mask::causal(4);
  auto y = random_tensor({4, 4}, rng, 3.0);
  const auto q = vec(masked_softmax(y, &causal));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) EXPECT_EQ(q[i * 4 + j], 0.0);
}

TEST(Tensor, SoftmaxMatchesExplicitFormula) {
  Tensor<double> x({1, 3}, {1.0, 2.0, 3.0});
  const auto p = vec(masked_softmax(x));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(p[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(p[2], std::exp(3.0) / z, 1e-15);
}

TEST(Tensor, FullyMaskedRowIsAnError) {
  Mask m{{1, 2}, {0, 0}};
  Tensor<double> x({1, 2}, {0.0, 1.0});
  EXPECT_THROW(masked_softmax(x, &m), std::exception);
}

TEST(Tensor, LayerNormStandardizesRows) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({4, 16}, rng, 5.0);
  auto y = vec(layer_norm(x, Tensor<double>::full({16}, 1.0), Tensor<double>::zeros({16}), 1e-12));
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < 16; ++j) mean += y[r * 16 + j];
    mean /= 16;
    for (std::size_t j = 0; j < 16; ++j) var += (y[r * 16 + j] - mean) * (y[r * 16 + j] - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var / 16, 1.0, 1e-9);  // eps is negligible next to var ~ 25
  }
}

TEST(Tensor, CrossEntropyIgnoresPadRows) {
  Tensor<double> logits({3, 3}, {1, 2, 3, 0, 0, 0, 5, 1, 1});
  const std::vector<int> targets{2, 0, 0};  // middle row ignored (id 0 as pad), last row target 0
  auto lse = [](double a, double b, double c) { return std::log(std::exp(a) + std::exp(b) + std::exp(c)); };
  const double want = ((lse(1, 2, 3) - 3) + (lse(5, 1, 1) - 5)) / 2.0;
  // With ignore_id = 0 the last row is also ignored; use ignore_id = -1 to keep it.
  const std::vector<int> t2{2, -1, 0};
  EXPECT_NEAR(cross_entropy(logits, t2, -1).item(), want, 1e-12);
  EXPECT_NEAR(cross_entropy(logits, targets, 0).item(), lse(1, 2, 3) - 3, 1e-12);
  EXPECT_THROW(cross_entropy(logits, std::vector<int>{1, 2}, -1), ShapeError);
  EXPECT_THROW(cross_entropy(logits, std::vector<int>{7, 1, 1}, -1), ShapeError);
}

TEST(Tensor, KlClosedForm) {
  Tensor<double> mu({2}, {0.0, 1.5}), sd({2}, {1.0, 0.5});
  const auto kl = vec(kl_std_normal(mu, sd));
  EXPECT_DOUBLE_EQ(kl[0], 0.0);
  EXPECT_NEAR(kl[1], 0.5 * (2.25 + 0.25 - 1.0 - 2.0 * std::log(0.5)), 1e-15);
  EXPECT_THROW(kl_std_normal(mu, Tensor<double>({2}, {1.0, 0.0})), NumericalError);
}

TEST(Tensor, SplitMergeHeadsRoundTrip) {
  std::mt19937_64 rng(6);
  auto x = random_tensor({2, 3, 8}, rng);
  auto s = split_heads(x, 4);
  EXPECT_EQ(s.shape(), (Shape{8, 3, 2}));
  // Head h of batch b lives at index h * B + b.
  EXPECT_EQ(s.data()[(1 * 2 + 0) * 3 * 2 + 0], x.data()[0 * 24 + 0 * 8 + 2]);
  EXPECT_EQ(vec(merge_heads(s, 4)), vec(x));
}

TEST(Tensor, SliceConcatReshape) {
  Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(vec(slice(a, 1, 1, 2)), (std::vector<double>{2, 3, 5, 6}));
  EXPECT_EQ(vec(slice(a, 0, 1, 1)), (std::vector<double>{4, 5, 6}));
  EXPECT_THROW(slice(a, 1, 2, 2), ShapeError);
  Tensor<double> b({2, 1}, {7, 8});
  EXPECT_EQ(vec(concat_last(a, b)), (std::vector<double>{1, 2, 3, 7, 4, 5, 6, 8}));
  EXPECT_EQ(reshape(a, Shape{3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(a, Shape{4, 2}), ShapeError);
}

TEST(Tensor, EmbeddingAndGather) {
  Tensor<double> table({3, 2}, {0, 1, 10, 11, 20, 21});
  const std::vector<int> ids{2, 0};
  EXPECT_EQ(vec(embedding(table, ids, Shape{1, 2})), (std::vector<double>{20, 21, 0, 1}));
  EXPECT_THROW(embedding(table, std::vector<int>{3}, Shape{1}), ShapeError);
  const std::vector<std::size_t> rows{1};
  EXPECT_EQ(vec(gather_rows(table, rows)), (std::vector<double>{10, 11}));
}

TEST(Tape, BackwardContract) {
  Tensor<double> x({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = mul(x, x);
  EXPECT_THROW(tape.backward(y), ShapeError);  // not scalar
  auto loss = sum(y);
  tape.backward(loss);
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2.0, 4.0}));
  EXPECT_THROW(tape.backward(loss), NumericalError);  // consumed
  tape.reset();
  Tensor<double> other = sum(Tensor<double>({1}, {1.0}, true));
  EXPECT_THROW(tape.backward(Tensor<double>::scalar(1.0)), NumericalError);  // not on this tape
  (void)other;
}

TEST(Tape, NoGradScopeRecordsNothing) {
  Tensor<double> x({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  {
    NoGradScope<double> off;
    (void)sum(mul(x, x));
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tensor, NonFiniteResultNamesTheOp) {
  Tensor<double> x({1}, {1e308});
  try {
    (void)scale(x, 1e10);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("scale"), std::string::npos);
  }
}

TEST(Tensor, DropoutKeepsExpectation) {
  std::mt19937_64 rng(7);
  auto x = Tensor<double>::full({20000}, 1.0);
  const auto y = vec(dropout(x, 0.25, rng));
  double s = 0;
  for (double v : y) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12);
    s += v;
  }
  EXPECT_NEAR(s / 20000, 1.0, 0.03);
  EXPECT_EQ(vec(dropout(x, 0.0, rng)), vec(x));
}
