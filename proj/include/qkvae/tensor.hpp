#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// A Tensor is a shared handle onto a TensorImpl. Operations run eagerly; when a
// Tape is active on the calling thread (see TapeScope) and any input requires a
// gradient, the operation is also recorded so that Tape::backward can propagate
// gradients in reverse recording order. Without an active tape the result is a
// plain value and may be shared read-only across threads.
//
// Scalar type is float for training and double for gradient checking.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qkvae/errors.hpp"

namespace qkvae {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::ptrdiff_t node = -1;  // index of the producing record on the tape, -1 for leaves
};

template <typename T>
class Tape;

template <typename T>
class Tensor {
 public:
  using Impl = TensorImpl<T>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    if (qkvae::numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::size_t n = qkvae::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor(Shape{}, {value}, requires_grad); }

  template <typename Rng>
  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> v(qkvae::numel(shape));
    for (T& x : v) x = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  template <typename Rng>
  static Tensor uniform(Shape shape, Rng& rng, T limit, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(-static_cast<double>(limit), static_cast<double>(limit));
    std::vector<T> v(qkvae::numel(shape));
    for (T& x : v) x = static_cast<T>(dist(rng));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t last_dim() const { return impl_->shape.empty() ? 1 : impl_->shape.back(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const& { return impl_->data; }
  std::span<const T> data() const&& = delete;  // would dangle once the temporary drops its storage
  // Writable view; intended for leaves (parameter updates, test fixtures).
  std::span<T> mutable_data() { return impl_->data; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(numel(), T(0));
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  // Deep copy detached from any tape.
  Tensor clone(bool requires_grad = false) const { return Tensor(shape(), impl_->data, requires_grad); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> v(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(shape(), std::move(v), requires_grad());
  }

  Impl* impl() const { return impl_.get(); }
  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

// ---------------------------------------------------------------------------
// Tape

template <typename T>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<TensorImpl<T>>;

  struct Record {
    const char* op;
    std::vector<ImplPtr> inputs;
    ImplPtr output;
    std::function<void(const Record&)> backward;
  };

  std::size_t size() const { return records_.size(); }
  bool consumed() const { return consumed_; }

  void record(const char* op, std::vector<ImplPtr> inputs, const ImplPtr& output,
              std::function<void(const Record&)> backward) {
    if (consumed_) throw NumericalError("tape already consumed by backward(); call reset() first");
    output->node = static_cast<std::ptrdiff_t>(records_.size());
    records_.push_back(Record{op, std::move(inputs), output, std::move(backward)});
  }

  // Propagates d(loss)/d(x) into the grad slot of every reachable tensor that
  // requires a gradient. Each record's rule runs at most once.
  void backward(const Tensor<T>& loss) {
    if (consumed_) throw NumericalError("backward() called twice on the same tape without reset()");
    if (!loss.defined() || loss.numel() != 1)
      throw ShapeError("backward() needs a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
    auto* impl = loss.impl();
    if (impl->node < 0 || static_cast<std::size_t>(impl->node) >= records_.size() ||
        records_[impl->node].output.get() != impl)
      throw NumericalError("backward(): loss was not produced on this tape");
    consumed_ = true;
    if (impl->grad.empty()) impl->grad.assign(1, T(0));
    impl->grad[0] += T(1);
    for (std::size_t i = static_cast<std::size_t>(impl->node) + 1; i-- > 0;) {
      const Record& r = records_[i];
      if (r.output->grad.empty()) continue;
      r.backward(r);
    }
  }

  void reset() {
    for (auto& r : records_) r.output->node = -1;
    records_.clear();
    consumed_ = false;
  }

 private:
  std::vector<Record> records_;
  bool consumed_ = false;
};

template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// Makes `tape` the recording target on this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (inference mode) for the scope's lifetime.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradScope() { active_tape<T>() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m x n] (+)= op(A) * op(B). A is stored row-major as (ta ? k x m : m x k),
// B as (tb ? n x k : k x n).
template <typename T>
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  using MutMap = Eigen::Map<RowMat<T>>;
  const auto M = static_cast<Eigen::Index>(m), N = static_cast<Eigen::Index>(n), K = static_cast<Eigen::Index>(k);
  MutMap cm(c, M, N);
  if (!accumulate) cm.setZero();
  Map am(a, ta ? K : M, ta ? M : K);
  Map bm(b, tb ? N : K, tb ? K : N);
  if (!ta && !tb)
    cm.noalias() += am * bm;
  else if (ta && !tb)
    cm.noalias() += am.transpose() * bm;
  else if (!ta && tb)
    cm.noalias() += am * bm.transpose();
  else
    cm.noalias() += am.transpose() * bm.transpose();
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (const T& x : v)
    if (!std::isfinite(x)) throw NumericalError(std::string("non-finite value produced by ") + op);
}

template <typename T>
std::vector<T>& grad_of(TensorImpl<T>& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
  return impl.grad;
}

// Builds the op result and records it when a tape is active and any input
// requires a gradient. `backward` receives the record; inputs[i] aligns with
// the order of `inputs` here.
template <typename T, typename Backward>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      Backward&& backward) {
  check_finite(op, data);
  bool needs_grad = false;
  for (const Tensor<T>* in : inputs) needs_grad = needs_grad || in->requires_grad();
  Tensor<T> out(std::move(shape), std::move(data), false);
  Tape<T>* tape = active_tape<T>();
  if (tape != nullptr && needs_grad) {
    out.set_requires_grad(true);
    std::vector<typename Tape<T>::ImplPtr> ins;
    ins.reserve(inputs.size());
    for (const Tensor<T>* in : inputs) ins.push_back(in->impl_ptr());
    tape->record(op, std::move(ins), out.impl_ptr(), std::forward<Backward>(backward));
  }
  return out;
}

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product. `a` is [..., m, k]; `b` is either a [k, n] matrix applied to
/// every row of `a`, or a batch [B, k, n] matching `a`'s [B, m, k]. With
/// `transpose_b` the last two axes of `b` are read as [n, k].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     (transpose_b ? " (b transposed)" : ""));
  };
  if (a.rank() < 1 || b.rank() < 2) fail();
  const std::size_t bk = transpose_b ? b.shape()[b.rank() - 1] : b.shape()[b.rank() - 2];
  const std::size_t n = transpose_b ? b.shape()[b.rank() - 2] : b.shape()[b.rank() - 1];
  const std::size_t k = a.last_dim();
  if (k != bk) fail();

  if (b.rank() == 2) {
    const std::size_t rows = a.numel() / k;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(n);
    std::vector<T> out(rows * n);
    detail::gemm(false, transpose_b, rows, n, k, a.data().data(), b.data().data(), out.data(), false);
    return detail::make_result<T>("matmul", std::move(out_shape), std::move(out), {&a, &b},
                                  [rows, n, k, transpose_b](const auto& r) {
                                    auto& A = *r.inputs[0];
                                    auto& B = *r.inputs[1];
                                    const T* g = r.output->grad.data();
                                    if (A.requires_grad)
                                      detail::gemm(false, !transpose_b, rows, k, n, g, B.data.data(),
                                                   detail::grad_of(A).data(), true);
                                    if (B.requires_grad) {
                                      if (transpose_b)
                                        detail::gemm(true, false, n, k, rows, g, A.data.data(),
                                                     detail::grad_of(B).data(), true);
                                      else
                                        detail::gemm(true, false, k, n, rows, A.data.data(), g,
                                                     detail::grad_of(B).data(), true);
                                    }
                                  });
  }

  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) fail();
  const std::size_t batch = a.dim(0), m = a.dim(1);
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    detail::gemm(false, transpose_b, m, n, k, a.data().data() + i * m * k, b.data().data() + i * k * n,
                 out.data() + i * m * n, false);
  return detail::make_result<T>(
      "matmul", Shape{batch, m, n}, std::move(out), {&a, &b}, [batch, m, n, k, transpose_b](const auto& r) {
        auto& A = *r.inputs[0];
        auto& B = *r.inputs[1];
        const T* g = r.output->grad.data();
        for (std::size_t i = 0; i < batch; ++i) {
          const T* gi = g + i * m * n;
          if (A.requires_grad)
            detail::gemm(false, !transpose_b, m, k, n, gi, B.data.data() + i * k * n,
                         detail::grad_of(A).data() + i * m * k, true);
          if (B.requires_grad) {
            if (transpose_b)
              detail::gemm(true, false, n, k, m, gi, A.data.data() + i * m * k, detail::grad_of(B).data() + i * k * n,
                           true);
            else
              detail::gemm(true, false, k, n, m, A.data.data() + i * m * k, gi, detail::grad_of(B).data() + i * k * n,
                           true);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b where b's shape equals a trailing suffix of a's shape (broadcast over
/// the leading axes of a).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::is_suffix(b.shape(), a.shape()))
    throw ShapeError("add: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  const std::size_t nb = b.numel();
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i % nb];
  return detail::make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [nb](const auto& r) {
    const auto& g = r.output->grad;
    if (r.inputs[0]->requires_grad) {
      auto& ga = detail::grad_of(*r.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (r.inputs[1]->requires_grad) {
      auto& gb = detail::grad_of(*r.inputs[1]);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += g[i];
    }
  });
}

/// Elementwise product of equally shaped tensors.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<T> out(a.numel());
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [](const auto& r) {
    const auto& g = r.output->grad;
    auto& A = *r.inputs[0];
    auto& B = *r.inputs[1];
    if (A.requires_grad) {
      auto& ga = detail::grad_of(A);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B.data[i];
    }
    if (B.requires_grad) {
      auto& gb = detail::grad_of(B);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A.data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& x : out) x *= factor;
  return detail::make_result<T>("scale", a.shape(), std::move(out), {&a}, [factor](const auto& r) {
    const auto& g = r.output->grad;
    auto& ga = detail::grad_of(*r.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

namespace detail {

template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, DF df) {
  std::vector<T> out(a.numel());
  auto ad = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(ad[i]);
  return make_result<T>(op, a.shape(), std::move(out), {&a}, [df](const auto& r) {
    const auto& g = r.output->grad;
    const auto& x = r.inputs[0]->data;
    auto& ga = grad_of(*r.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i]);
  });
}

}  // namespace detail

/// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  return detail::unary<T>(
      "gelu", a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2)); },
      [](T x) { return T(0.5) * (T(1) + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(T(-0.5) * x * x); });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary<T>(
      "softplus", a, [](T x) { return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); });
}

/// max(a, floor) elementwise; the gradient flows only where a > floor.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& a, T floor) {
  return detail::unary<T>(
      "clamp_min", a, [floor](T x) { return x > floor ? x : floor; },
      [floor](T x) { return x > floor ? T(1) : T(0); });
}

/// Inverted dropout; identity when p == 0.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw UsageError("dropout probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<T> mask(a.numel());
  const T s = T(1.0 / (1.0 - p));
  for (T& m : mask) m = keep(rng) ? s : T(0);
  return mul(a, Tensor<T>(a.shape(), std::move(mask)));
}

// ---------------------------------------------------------------------------
// Normalization

/// Boolean mask over the last axis. Its rows broadcast cyclically over the
/// rows of the masked tensor: logits row r uses mask row r % mask_rows. This
/// covers both a per-example [B, q, k] mask applied to head-major [H*B, q, k]
/// scores and a shared [q, k] mask.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> allowed;  // 1 = attend, 0 = blocked

  std::size_t cols() const { return shape.back(); }
  std::size_t rows() const { return allowed.size() / cols(); }

  /// Lower-triangular [n, n] mask: query i sees keys j <= i.
  static Mask causal(std::size_t n) {
    Mask m{{n, n}, std::vector<std::uint8_t>(n * n, 0)};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.allowed[i * n + j] = 1;
    return m;
  }

  /// [B, q, k] mask that blocks key positions >= lengths[b].
  static Mask key_padding(std::span<const std::size_t> lengths, std::size_t queries, std::size_t keys) {
    Mask m{{lengths.size(), queries, keys}, std::vector<std::uint8_t>(lengths.size() * queries * keys, 0)};
    for (std::size_t b = 0; b < lengths.size(); ++b)
      for (std::size_t i = 0; i < queries; ++i)
        for (std::size_t j = 0; j < std::min(lengths[b], keys); ++j) m.allowed[(b * queries + i) * keys + j] = 1;
    return m;
  }
};

inline constexpr double kMaskedLogit = -1e9;

/// Softmax over the last axis, stabilized by max-subtraction. Blocked
/// positions receive a large negative logit and are then forced to exactly 0.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, const Mask* mask = nullptr) {
  const std::size_t n = logits.last_dim();
  const std::size_t rows = logits.numel() / n;
  if (mask != nullptr) {
    if (mask->shape.empty() || mask->cols() != n || mask->allowed.empty() || rows % mask->rows() != 0)
      throw ShapeError("masked_softmax: mask " + shape_str(mask->shape) + " does not fit logits " +
                       shape_str(logits.shape()));
  }
  auto x = logits.data();
  std::vector<T> out(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* allow = mask ? mask->allowed.data() + (r % mask->rows()) * n : nullptr;
    T* y = out.data() + r * n;
    const T* xr = x.data() + r * n;
    bool any = false;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = (allow && !allow[j]) ? static_cast<T>(kMaskedLogit) : xr[j];
      if (!allow || allow[j]) any = true;
      mx = std::max(mx, y[j]);
    }
    if (!any) throw DataError("masked_softmax: row " + std::to_string(r) + " has every position masked");
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(y[j] - mx);
      sum += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] = (allow && !allow[j]) ? T(0) : y[j] / sum;
  }
  return detail::make_result<T>("masked_softmax", logits.shape(), std::move(out), {&logits}, [n, rows](const auto& r) {
    const auto& g = r.output->grad;
    const auto& y = r.output->data;
    auto& gx = detail::grad_of(*r.inputs[0]);
    for (std::size_t row = 0; row < rows; ++row) {
      const std::size_t o = row * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[o + j] * y[o + j];
      for (std::size_t j = 0; j < n; ++j) gx[o + j] += y[o + j] * (g[o + j] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.last_dim();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw ShapeError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match width " + std::to_string(d));
  if (!(eps > T(0))) throw UsageError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  std::vector<T> xhat(x.numel()), inv_std(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(d);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mean) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gd[j] + bd[j];
    }
  }
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const auto& r) {
        const auto& g = r.output->grad;
        auto& X = *r.inputs[0];
        auto& G = *r.inputs[1];
        auto& Bi = *r.inputs[2];
        if (G.requires_grad) {
          auto& gg = detail::grad_of(G);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
        }
        if (Bi.requires_grad) {
          auto& gb = detail::grad_of(Bi);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
        }
        if (X.requires_grad) {
          auto& gx = detail::grad_of(X);
          for (std::size_t row = 0; row < rows; ++row) {
            const std::size_t o = row * d;
            T mean_g = 0, mean_gx = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = g[o + j] * G.data[j];
              mean_g += gh;
              mean_gx += gh * xhat[o + j];
            }
            mean_g /= T(d);
            mean_gx /= T(d);
            for (std::size_t j = 0; j < d; ++j) {
              const T gh = g[o + j] * G.data[j];
              gx[o + j] += inv_std[row] * (gh - mean_g - xhat[o + j] * mean_gx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and layout

/// Rows of `table` [V, d] selected by `ids`; result shape is `lead` + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids, Shape lead) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (numel(lead) != ids.size())
    throw ShapeError("embedding: " + std::to_string(ids.size()) + " ids for shape " + shape_str(lead));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw ShapeError("embedding: id " + std::to_string(id) + " outside table of " + std::to_string(vocab) + " rows");
  std::vector<T> out(idx.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  lead.push_back(d);
  return detail::make_result<T>("embedding", std::move(lead), std::move(out), {&table},
                                [d, idx = std::move(idx)](const auto& r) {
                                  const auto& g = r.output->grad;
                                  auto& gt = detail::grad_of(*r.inputs[0]);
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += g[i * d + j];
                                });
}

/// Rows of `x` viewed as [R, d] (d = last axis) gathered by `rows`; result [rows.size(), d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
  const std::size_t d = x.last_dim();
  const std::size_t total = x.numel() / d;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t i : idx)
    if (i >= total) throw ShapeError("gather_rows: row " + std::to_string(i) + " out of " + std::to_string(total));
  if (idx.empty()) throw ShapeError("gather_rows: no rows selected");
  std::vector<T> out(idx.size() * d);
  auto xd = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  Shape shape{idx.size(), d};
  return detail::make_result<T>("gather_rows", std::move(shape), std::move(out), {&x},
                                [d, idx = std::move(idx)](const auto& r) {
                                  const auto& g = r.output->grad;
                                  auto& gx = detail::grad_of(*r.inputs[0]);
                                  for (std::size_t i = 0; i < idx.size(); ++i)
                                    for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += g[i * d + j];
                                });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {&a}, [](const auto& r) {
    const auto& g = r.output->grad;
    auto& ga = detail::grad_of(*r.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Contiguous range [start, start + len) along `axis`.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.rank() || len == 0 || start + len > a.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t full = a.dim(axis);
  Shape shape = a.shape();
  shape[axis] = len;
  std::vector<T> out(outer * len * inner);
  auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>((o * full + start) * inner), len * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  return detail::make_result<T>("slice", std::move(shape), std::move(out), {&a},
                                [outer, inner, full, start, len](const auto& r) {
                                  const auto& g = r.output->grad;
                                  auto& ga = detail::grad_of(*r.inputs[0]);
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < len * inner; ++i)
                                      ga[(o * full + start) * inner + i] += g[o * len * inner + i];
                                });
}

/// Concatenation along the last axis; leading axes must agree.
template <typename T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
  Shape la(a.shape().begin(), a.shape().end() - 1), lb(b.shape().begin(), b.shape().end() - 1);
  if (a.rank() == 0 || la != lb)
    throw ShapeError("concat_last: leading axes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t da = a.last_dim(), db = b.last_dim(), rows = a.numel() / da;
  std::vector<T> out(rows * (da + db));
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(r * da), da, out.begin() + static_cast<std::ptrdiff_t>(r * (da + db)));
    std::copy_n(bd.begin() + static_cast<std::ptrdiff_t>(r * db), db,
                out.begin() + static_cast<std::ptrdiff_t>(r * (da + db) + da));
  }
  Shape shape = la;
  shape.push_back(da + db);
  return detail::make_result<T>("concat_last", std::move(shape), std::move(out), {&a, &b}, [rows, da, db](const auto& r) {
    const auto& g = r.output->grad;
    if (r.inputs[0]->requires_grad) {
      auto& ga = detail::grad_of(*r.inputs[0]);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < da; ++j) ga[i * da + j] += g[i * (da + db) + j];
    }
    if (r.inputs[1]->requires_grad) {
      auto& gb = detail::grad_of(*r.inputs[1]);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < db; ++j) gb[i * db + j] += g[i * (da + db) + da + j];
    }
  });
}

/// [r...] -> [copies, r...] by repetition.
template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& a, std::size_t copies) {
  if (copies == 0) throw ShapeError("broadcast_batch: zero copies");
  const std::size_t n = a.numel();
  std::vector<T> out(copies * n);
  auto ad = a.data();
  for (std::size_t c = 0; c < copies; ++c) std::copy(ad.begin(), ad.end(), out.begin() + static_cast<std::ptrdiff_t>(c * n));
  Shape shape{copies};
  shape.insert(shape.end(), a.shape().begin(), a.shape().end());
  return detail::make_result<T>("broadcast_batch", std::move(shape), std::move(out), {&a}, [n](const auto& r) {
    const auto& g = r.output->grad;
    auto& ga = detail::grad_of(*r.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i % n] += g[i];
  });
}

namespace detail {

// [B, n, H*dk] <-> [H*B, n, dk] (head-major).
template <typename T>
Tensor<T> head_permute(const char* op, const Tensor<T>& x, std::size_t heads, bool split) {
  if (x.rank() != 3) throw ShapeError(std::string(op) + ": expected rank 3, got " + shape_str(x.shape()));
  std::size_t batch, n = x.dim(1), dk;
  if (split) {
    if (x.dim(2) % heads != 0)
      throw ShapeError(std::string(op) + ": width " + std::to_string(x.dim(2)) + " not divisible by " +
                       std::to_string(heads) + " heads");
    batch = x.dim(0);
    dk = x.dim(2) / heads;
  } else {
    if (x.dim(0) % heads != 0) throw ShapeError(std::string(op) + ": leading axis not divisible by head count");
    batch = x.dim(0) / heads;
    dk = x.dim(2);
  }
  // Flat offset of (b, i, h, j) in the merged [B, n, H*dk] layout and in the split layout.
  std::vector<std::size_t> merged_of_split(x.numel());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dk; ++j)
          merged_of_split[((h * batch + b) * n + i) * dk + j] = (b * n + i) * heads * dk + h * dk + j;
  auto xd = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t s = 0; s < out.size(); ++s) {
    if (split)
      out[s] = xd[merged_of_split[s]];
    else
      out[merged_of_split[s]] = xd[s];
  }
  Shape shape = split ? Shape{heads * batch, n, dk} : Shape{batch, n, heads * dk};
  return make_result<T>(op, std::move(shape), std::move(out), {&x}, [split, map = std::move(merged_of_split)](const auto& r) {
    const auto& g = r.output->grad;
    auto& gx = grad_of(*r.inputs[0]);
    for (std::size_t s = 0; s < map.size(); ++s) {
      if (split)
        gx[map[s]] += g[s];
      else
        gx[s] += g[map[s]];
    }
  });
}

}  // namespace detail

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  return detail::head_permute<T>("split_heads", x, heads, true);
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
  return detail::head_permute<T>("merge_heads", x, heads, false);
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.data()) s += x;
  return detail::make_result<T>("sum", Shape{}, {s}, {&a}, [](const auto& r) {
    const T g = r.output->grad[0];
    auto& ga = detail::grad_of(*r.inputs[0]);
    for (T& x : ga) x += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / T(a.numel()));
}

/// Mean over every axis except the last: [..., d] -> [d].
template <typename T>
Tensor<T> mean_leading(const Tensor<T>& a) {
  const std::size_t d = a.last_dim(), rows = a.numel() / d;
  std::vector<T> out(d, T(0));
  auto ad = a.data();
  for (std::size_t i = 0; i < a.numel(); ++i) out[i % d] += ad[i];
  for (T& x : out) x /= T(rows);
  return detail::make_result<T>("mean_leading", Shape{d}, std::move(out), {&a}, [d, rows](const auto& r) {
    const auto& g = r.output->grad;
    auto& ga = detail::grad_of(*r.inputs[0]);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i % d] / T(rows);
  });
}

/// Mean token cross-entropy of `logits` [..., V] against `targets` (one per
/// row). Rows whose target equals `ignore_id` contribute nothing. Returns 0
/// when every row is ignored.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, int ignore_id) {
  const std::size_t vocab = logits.last_dim(), rows = logits.numel() / vocab;
  if (targets.size() != rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                     " rows of " + shape_str(logits.shape()));
  std::vector<int> tgt(targets.begin(), targets.end());
  std::size_t count = 0;
  for (int t : tgt) {
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw ShapeError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    ++count;
  }
  auto x = logits.data();
  std::vector<T> probs(logits.numel(), T(0));
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] == ignore_id) continue;
    const T* xr = x.data() + r * vocab;
    T* p = probs.data() + r * vocab;
    const T mx = *std::max_element(xr, xr + vocab);
    T s = 0;
    for (std::size_t j = 0; j < vocab; ++j) s += (p[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < vocab; ++j) p[j] /= s;
    loss += -(xr[tgt[r]] - mx - std::log(s));
  }
  if (count > 0) loss /= T(count);
  return detail::make_result<T>("cross_entropy", Shape{}, {loss}, {&logits},
                                [vocab, rows, count, tgt = std::move(tgt), probs = std::move(probs),
                                 ignore_id](const auto& r) {
                                  if (count == 0) return;
                                  const T g = r.output->grad[0] / T(count);
                                  auto& gx = detail::grad_of(*r.inputs[0]);
                                  for (std::size_t row = 0; row < rows; ++row) {
                                    if (tgt[row] == ignore_id) continue;
                                    for (std::size_t j = 0; j < vocab; ++j) gx[row * vocab + j] += g * probs[row * vocab + j];
                                    gx[row * vocab + tgt[row]] -= g;
                                  }
                                });
}

/// Per-dimension KL(N(mean, std^2) || N(0, 1)) = 0.5 (mean^2 + std^2 - 1 - 2 ln std).
template <typename T>
Tensor<T> kl_std_normal(const Tensor<T>& mu, const Tensor<T>& std) {
  if (mu.shape() != std.shape())
    throw ShapeError("kl_std_normal: mean " + shape_str(mu.shape()) + " vs std " + shape_str(std.shape()));
  auto m = mu.data();
  auto s = std.data();
  std::vector<T> out(mu.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(s[i] > T(0))) throw NumericalError("kl_std_normal: non-positive standard deviation");
    out[i] = T(0.5) * (m[i] * m[i] + s[i] * s[i] - T(1) - T(2) * std::log(s[i]));
  }
  return detail::make_result<T>("kl_std_normal", mu.shape(), std::move(out), {&mu, &std}, [](const auto& r) {
    const auto& g = r.output->grad;
    auto& M = *r.inputs[0];
    auto& S = *r.inputs[1];
    if (M.requires_grad) {
      auto& gm = detail::grad_of(M);
      for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i] * M.data[i];
    }
    if (S.requires_grad) {
      auto& gs = detail::grad_of(S);
      for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i] * (S.data[i] - T(1) / S.data[i]);
    }
  });
}

}  // namespace qkvae
