#include <gtest/gtest.h>

#include "grad_suite.hpp"
#include "helpers.hpp"

using namespace qkvae;

class PrimitiveGrad : public ::testing::TestWithParam<std::size_t> {};

TEST_P(PrimitiveGrad, MatchesCentralDifferences) {
  const auto checks = qkvae::testing::primitive_checks();
  const auto& check = checks.at(GetParam());
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    const GradCheckReport r = check.run(1000 + trial);
    ASSERT_TRUE(r.failure.empty()) << check.name << ": " << r.failure;
    EXPECT_LE(r.max_rel_error, 1e-4) << check.name << " trial " << trial;
    EXPECT_GT(r.coordinates, 0u);
  }
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGrad,
                         ::testing::Range<std::size_t>(0, qkvae::testing::primitive_checks().size()),
                         [](const auto& info) { return qkvae::testing::primitive_checks()[info.param].name; });

TEST(GradCheck, DetectsAWrongBackwardRule) {
  Tensor<double> x({3}, {0.5, -1.0, 2.0});
  auto bad_square = [&] {
    std::vector<double> out;
    for (double v : x.data()) out.push_back(v * v);
    return sum(detail::make_result<double>("bad_square", x.shape(), out, {&x}, [](const auto& r) {
      auto& g = detail::grad_of(*r.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += r.output->grad[i] * r.inputs[0]->data[i];  // missing factor 2
    }));
  };
  const GradCheckReport r = grad_check(bad_square, {x});
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(GradCheck, RejectsStepOutsideRange) {
  Tensor<double> x({1}, {1.0});
  GradCheckOptions opt;
  opt.eps = 1e-2;
  EXPECT_THROW(grad_check([&] { return sum(x); }, {x}, opt), UsageError);
}

TEST(GradCheck, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0, 1e-6), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0, 1e-6), 1e-3);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0, 1e-6), 0.5);
}

TEST(GradCheck, FullObjectiveQkvae) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const GradCheckReport r = elbo_grad_check(8, seed);
    ASSERT_TRUE(r.failure.empty()) << r.failure;
    EXPECT_LE(r.max_rel_error, 1e-3) << "seed " << seed;
  }
}

TEST(GradCheck, FullObjectiveAdvae) {
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    const GradCheckReport r = elbo_grad_check(8, seed, 3, ModelMode::kAdvae);
    ASSERT_TRUE(r.failure.empty()) << r.failure;
    EXPECT_LE(r.max_rel_error, 1e-3) << "seed " << seed;
  }
}
