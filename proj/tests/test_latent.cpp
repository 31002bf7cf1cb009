#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"

using namespace qkvae;

TEST(Kl, ClosedFormMatchesMonteCarlo) {
  std::mt19937_64 rng(21);
  // Per-sample variance is (sd^2-1)^2/2 + mu^2 sd^2; these cases keep the estimator's relative
  // standard error under 0.4% at 1e5 draws, so 1% is a real test rather than a coin flip.
  const std::vector<std::pair<double, double>> cases{{0.0, 1.0}, {1.2, 0.7}, {2.0, 0.3}, {3.0, 0.5}, {-2.5, 1.5}, {-1.0, 0.4}};
  for (auto [mu, sd] : cases) {
    const double closed = kl_std_normal(Tensor<double>({1}, {mu}), Tensor<double>({1}, {sd})).item();
    std::normal_distribution<double> z(mu, sd);
    double acc = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      const double x = z(rng);
      const double log_q = -0.5 * ((x - mu) / sd) * ((x - mu) / sd) - std::log(sd);
      const double log_p = -0.5 * x * x;
      acc += log_q - log_p;
    }
    const double mc = acc / n;
    if (closed == 0.0)
      EXPECT_NEAR(mc, 0.0, 1e-2);
    else
      EXPECT_NEAR(mc, closed, 0.01 * closed) << "mu " << mu << " sd " << sd;
  }
}

TEST(Reparameterize, SamplesHaveTheRequestedMoments) {
  std::mt19937_64 rng(22);
  const std::size_t n = 100000;
  GaussianPosterior<double> p{Tensor<double>::full({n}, 1.5), Tensor<double>::full({n}, 0.4)};
  const auto z = reparameterize(p, Tensor<double>::randn({n}, rng));
  double m = 0, v = 0;
  for (double x : z.data()) m += x;
  m /= n;
  for (double x : z.data()) v += (x - m) * (x - m);
  EXPECT_NEAR(m, 1.5, 0.01);
  EXPECT_NEAR(std::sqrt(v / n), 0.4, 0.01);
  EXPECT_THROW(reparameterize(p, Tensor<double>::zeros({3})), ShapeError);
}

TEST(FreeBits, EqualsKlWhenEveryDimensionIsAboveThreshold) {
  Tensor<double> kl({3}, {0.2, 0.5, 1.0});
  EXPECT_DOUBLE_EQ(free_bits(kl, 0.05).item(), 1.7);
  EXPECT_DOUBLE_EQ(free_bits(kl, 0.2).item(), 1.7);
}

TEST(FreeBits, ExceedsKlOtherwiseAndBlocksThoseGradients) {
  Tensor<double> kl({3}, {0.01, 0.5, 0.0}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto fb = free_bits(kl, 0.05);
  EXPECT_DOUBLE_EQ(fb.item(), 0.05 + 0.5 + 0.05);
  EXPECT_GT(fb.item(), 0.51);
  tape.backward(fb);
  EXPECT_EQ(std::vector<double>(kl.grad().begin(), kl.grad().end()), (std::vector<double>{0.0, 1.0, 0.0}));
  EXPECT_THROW(free_bits(kl, -1.0), UsageError);
}

TEST(BetaSchedule, HitsTheAnchorPoints) {
  const TrainConfig cfg;
  EXPECT_EQ(beta_at(3000, cfg.sem_schedule()), 0.0);
  EXPECT_EQ(beta_at(6000, cfg.sem_schedule()), 0.6);
  EXPECT_EQ(beta_at(7000, cfg.syn_schedule()), 0.0);
  EXPECT_EQ(beta_at(20000, cfg.syn_schedule()), 0.3);
  EXPECT_DOUBLE_EQ(beta_at(4500, cfg.sem_schedule()), 0.3);
  EXPECT_EQ(beta_at(0, cfg.sem_schedule()), 0.0);
  EXPECT_EQ(beta_at(100000, cfg.syn_schedule()), 0.3);
  EXPECT_THROW(beta_at(0, BetaSchedule{5, 5, 1.0}), UsageError);
}

TEST(BetaSchedule, MonotoneAndStaged) {
  const TrainConfig cfg;
  double prev_sem = 0, prev_syn = 0;
  for (std::int64_t s = 0; s <= 25000; s += 7) {
    const double bs = beta_at(s, cfg.sem_schedule()), by = beta_at(s, cfg.syn_schedule());
    EXPECT_GE(bs, prev_sem);
    EXPECT_GE(by, prev_syn);
    if (by > 0) {
      EXPECT_EQ(bs, 0.6) << "step " << s;
    }
    prev_sem = bs;
    prev_syn = by;
  }
}

TEST(BetaSchedule, ScaledScheduleDividesEveryAnchor) {
  const TrainConfig c = TrainConfig{}.scaled_schedule(10);
  EXPECT_EQ(beta_at(300, c.sem_schedule()), 0.0);
  EXPECT_EQ(beta_at(600, c.sem_schedule()), 0.6);
  EXPECT_EQ(beta_at(700, c.syn_schedule()), 0.0);
  EXPECT_EQ(beta_at(2000, c.syn_schedule()), 0.3);
}

TEST(Posterior, StdIsPositiveEvenForVeryNegativeInputs) {
  Tensor<double> pre({3}, {-800.0, 0.0, 30.0});
  const auto s = positive_std(pre);
  for (double v : s.data()) EXPECT_GE(v, kStdFloor);
  EXPECT_NEAR(s.data()[1], std::log(2.0) + kStdFloor, 1e-12);
}

TEST(Posterior, ShapesPerMode) {
  Rng rng(23);
  std::mt19937_64 data(24);
  auto stack = make_decoder_stack<double>(1, 8, 2, 16, 8, 8, rng);
  const auto q = LatentBank<double>::init(4, 8, 6, true, 8, 8, rng);
  const auto states = Tensor<double>::randn({3, 5, 8}, data);
  const auto p = encode_posteriors(states, q, stack);
  EXPECT_EQ(p.sem.mean.shape(), (Shape{3, 4, 2}));
  ASSERT_TRUE(p.syn.has_value());
  EXPECT_EQ(p.syn->mean.shape(), (Shape{3, 6}));
  const auto a = LatentBank<double>::init(4, 8, 0, false, 8, 8, rng);
  const auto pa = encode_posteriors(states, a, stack);
  EXPECT_FALSE(pa.syn.has_value());
  EXPECT_THROW(LatentBank<double>::init(3, 8, 6, true, 8, 8, rng), UsageError);
}
