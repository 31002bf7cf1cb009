#pragma once

// Central-difference gradient checking in 64-bit mode.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "qkvae/tensor.hpp"

namespace qkvae {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = false;
  std::string failure;  // set when a non-finite value aborted the check
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  // Denominator floor of the relative error, so coordinates whose true
  // gradient is ~0 are compared on an absolute scale.
  double floor = 1e-6;
  // Per-input cap on probed coordinates (0 = all); chosen with `seed`.
  std::size_t max_coords = 0;
  unsigned seed = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares the tape gradient of the scalar `f()` with respect to each tensor
/// in `inputs` against (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
template <typename F>
GradCheckReport grad_check(F&& f, std::vector<Tensor<double>> inputs, const GradCheckOptions& opt = {}) {
  if (opt.eps < 1e-6 || opt.eps > 1e-4) throw UsageError("grad_check: eps must lie in [1e-6, 1e-4]");
  GradCheckReport report;
  try {
    for (auto& x : inputs) {
      x.set_requires_grad(true);
      x.zero_grad();
    }
    {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      Tensor<double> loss = f();
      if (loss.numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
      tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto& x : inputs)
      analytic.emplace_back(x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                         : std::vector<double>(x.numel(), 0.0));

    std::mt19937 rng(opt.seed);
    NoGradScope<double> no_grad;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
      auto data = inputs[t].mutable_data();
      std::vector<std::size_t> coords(data.size());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
      if (opt.max_coords > 0 && coords.size() > opt.max_coords) {
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(opt.max_coords);
      }
      for (std::size_t i : coords) {
        const double saved = data[i];
        data[i] = saved + opt.eps;
        const double up = f().item();
        data[i] = saved - opt.eps;
        const double down = f().item();
        data[i] = saved;
        const double numeric = (up - down) / (2.0 * opt.eps);
        const double a = analytic[t][i];
        report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
        report.max_rel_error = std::max(report.max_rel_error, relative_error(a, numeric, opt.floor));
        ++report.coordinates;
      }
    }
    report.passed = report.max_rel_error <= opt.tol;
  } catch (const NumericalError& e) {
    report.failure = e.what();
    report.passed = false;
  }
  for (auto& x : inputs) x.zero_grad();
  return report;
}

}  // namespace qkvae
