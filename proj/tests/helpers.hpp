#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "qkvae/qkvae.hpp"

namespace qkvae::testing {

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                        std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  return Tensor<double>::randn(std::move(shape), rng, sd);
}

/// Fresh per-test scratch directory under the build tree.
inline std::string scratch_dir(const std::string& name) {
  const std::filesystem::path p = std::filesystem::path(QKVAE_TEST_TMP) / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

inline ModelConfig tiny_model(ModelMode mode = ModelMode::kQkvae, std::size_t vocab = 16) {
  ModelConfig c = tiny_config(8, mode).model;
  c.vocab_size = vocab;
  return c;
}

}  // namespace qkvae::testing
