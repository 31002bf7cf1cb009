#pragma once

// Attention operators and Transformer block stacks.
//
// Blocks use the post-norm arrangement x <- LayerNorm(x + sublayer(x)) around
// every self-attention, cross-attention and feed-forward sublayer. Scores are
// scaled by 1/sqrt(d_k). The cross-attention of a decoder layer takes its keys
// and values from two separately supplied sources; ordinary cross-attention
// is the special case where both sources are the same tensor.

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qkvae/tensor.hpp"

namespace qkvae {

using Rng = std::mt19937_64;

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const T limit = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out)));
    return Linear{Tensor<T>::uniform({in, out}, rng, limit, true), Tensor<T>::zeros({out}, true)};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight), bias); }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& v) const {
    v(prefix + ".weight", weight);
    v(prefix + ".bias", bias);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  T eps = T(1e-5);

  static LayerNorm init(std::size_t width) {
    return LayerNorm{Tensor<T>::full({width}, T(1), true), Tensor<T>::zeros({width}, true)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias, eps); }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& v) const {
    v(prefix + ".gain", gain);
    v(prefix + ".bias", bias);
  }
};

template <typename T>
struct FeedForward {
  Linear<T> inner;
  Linear<T> outer;

  static FeedForward init(std::size_t width, std::size_t hidden, Rng& rng) {
    return FeedForward{Linear<T>::init(width, hidden, rng), Linear<T>::init(hidden, width, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return outer(gelu(inner(x))); }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& v) const {
    inner.visit(prefix + ".inner", v);
    outer.visit(prefix + ".outer", v);
  }
};

/// Multi-head attention parameters. The H per-head projections W_i^Q, W_i^K,
/// W_i^V (each in x d_k) are stored side by side as one [in, H*d_k] matrix per
/// role; `output` is W^O of shape [H*d_k, d_model].
template <typename T>
struct MhaParams {
  std::size_t heads = 1;
  Linear<T> query;
  Linear<T> key;
  Linear<T> value;
  Linear<T> output;

  static MhaParams init(std::size_t d_model, std::size_t heads, std::size_t key_in, std::size_t value_in, Rng& rng) {
    if (heads == 0 || d_model % heads != 0)
      throw UsageError("attention: d_model " + std::to_string(d_model) + " is not divisible by " +
                       std::to_string(heads) + " heads");
    MhaParams p;
    p.heads = heads;
    p.query = Linear<T>::init(d_model, d_model, rng);
    p.key = Linear<T>::init(key_in, d_model, rng);
    p.value = Linear<T>::init(value_in, d_model, rng);
    p.output = Linear<T>::init(d_model, d_model, rng);
    return p;
  }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& v) const {
    query.visit(prefix + ".query", v);
    key.visit(prefix + ".key", v);
    value.visit(prefix + ".value", v);
    output.visit(prefix + ".output", v);
  }
};

template <typename T>
struct BlockLayer {
  MhaParams<T> self_attn;
  std::optional<MhaParams<T>> cross_attn;
  LayerNorm<T> ln_self;
  LayerNorm<T> ln_cross;
  LayerNorm<T> ln_ff;
  FeedForward<T> ff;

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& v) const {
    self_attn.visit(prefix + ".self_attn", v);
    ln_self.visit(prefix + ".ln_self", v);
    if (cross_attn) {
      cross_attn->visit(prefix + ".cross_attn", v);
      ln_cross.visit(prefix + ".ln_cross", v);
    }
    ff.visit(prefix + ".ff", v);
    ln_ff.visit(prefix + ".ln_ff", v);
  }
};

template <typename T>
struct BlockStack {
  std::vector<BlockLayer<T>> layers;

  std::size_t depth() const { return layers.size(); }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& v) const {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + "." + std::to_string(i), v);
  }
};

/// Self-attention + feed-forward layers.
template <typename T>
BlockStack<T> make_encoder_stack(std::size_t depth, std::size_t d_model, std::size_t heads, std::size_t ff_width,
                                 Rng& rng) {
  BlockStack<T> s;
  for (std::size_t i = 0; i < depth; ++i) {
    BlockLayer<T> l;
    l.self_attn = MhaParams<T>::init(d_model, heads, d_model, d_model, rng);
    l.ln_self = LayerNorm<T>::init(d_model);
    l.ff = FeedForward<T>::init(d_model, ff_width, rng);
    l.ln_ff = LayerNorm<T>::init(d_model);
    s.layers.push_back(std::move(l));
  }
  return s;
}

/// Self-attention + cross-attention + feed-forward layers. The cross-attention
/// reads keys of width `key_in` and values of width `value_in`.
template <typename T>
BlockStack<T> make_decoder_stack(std::size_t depth, std::size_t d_model, std::size_t heads, std::size_t ff_width,
                                 std::size_t key_in, std::size_t value_in, Rng& rng) {
  BlockStack<T> s;
  for (std::size_t i = 0; i < depth; ++i) {
    BlockLayer<T> l;
    l.self_attn = MhaParams<T>::init(d_model, heads, d_model, d_model, rng);
    l.ln_self = LayerNorm<T>::init(d_model);
    l.cross_attn = MhaParams<T>::init(d_model, heads, key_in, value_in, rng);
    l.ln_cross = LayerNorm<T>::init(d_model);
    l.ff = FeedForward<T>::init(d_model, ff_width, rng);
    l.ln_ff = LayerNorm<T>::init(d_model);
    s.layers.push_back(std::move(l));
  }
  return s;
}

/// Dropout configuration threaded through a forward pass. Off by default.
struct Regularization {
  double dropout = 0.0;
  Rng* rng = nullptr;
};

/// Collects the cross-attention weight tensors ([H*B, queries, slots]) of
/// each decoder layer, in layer order.
template <typename T>
struct AttentionTrace {
  std::vector<Tensor<T>> cross_weights;
};

namespace detail {

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const Regularization& reg) {
  if (reg.dropout <= 0.0 || reg.rng == nullptr) return x;
  return dropout(x, reg.dropout, *reg.rng);
}

template <typename T>
Tensor<T> as_batched(const Tensor<T>& x) {
  if (x.rank() == 3) return x;
  if (x.rank() == 2) return reshape(x, Shape{1, x.dim(0), x.dim(1)});
  throw ShapeError("expected a [n, d] or [B, n, d] sequence, got " + shape_str(x.shape()));
}

}  // namespace detail

/// softmax(Q K^T / sqrt(d_k)) V over the last two axes; inputs are [n, d] or
/// batched [B, n, d]. When `weights` is non-null it receives the softmax output.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Mask* mask = nullptr,
                    Tensor<T>* weights = nullptr) {
  if (q.rank() != k.rank() || k.rank() != v.rank() || (q.rank() != 2 && q.rank() != 3))
    throw ShapeError("attention: ranks differ or unsupported: Q " + shape_str(q.shape()) + ", K " +
                     shape_str(k.shape()) + ", V " + shape_str(v.shape()));
  const std::size_t r = q.rank();
  if (k.dim(r - 2) != v.dim(r - 2))
    throw ShapeError("attention: K " + shape_str(k.shape()) + " and V " + shape_str(v.shape()) +
                     " disagree on length");
  if (q.last_dim() != k.last_dim())
    throw ShapeError("attention: Q " + shape_str(q.shape()) + " and K " + shape_str(k.shape()) +
                     " disagree on d_k");
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.last_dim()));
  Tensor<T> w = masked_softmax(scale(matmul(q, k, /*transpose_b=*/true), inv_sqrt), mask);
  if (weights != nullptr) *weights = w;
  return matmul(w, v);
}

/// Multi-head attention where `target` queries keys computed from `source_k`
/// and values computed from `source_v`. Sequences are [n, d] or [B, n, d].
template <typename T>
Tensor<T> mha(const Tensor<T>& target, const Tensor<T>& source_k, const Tensor<T>& source_v, const MhaParams<T>& p,
              const Mask* mask = nullptr, Tensor<T>* weights = nullptr) {
  if (source_k.rank() < 2 || source_v.rank() < 2 ||
      source_k.dim(source_k.rank() - 2) != source_v.dim(source_v.rank() - 2))
    throw ShapeError("mha: key source " + shape_str(source_k.shape()) + " and value source " +
                     shape_str(source_v.shape()) + " must have the same length");
  const bool unbatched = target.rank() == 2;
  Tensor<T> t = detail::as_batched(target);
  Tensor<T> sk = detail::as_batched(source_k);
  Tensor<T> sv = &source_v == &source_k ? sk : detail::as_batched(source_v);
  if (sk.dim(0) != t.dim(0) || sv.dim(0) != t.dim(0))
    throw ShapeError("mha: batch sizes differ between target and sources");
  Tensor<T> qh = split_heads(p.query(t), p.heads);
  Tensor<T> kh = split_heads(p.key(sk), p.heads);
  Tensor<T> vh = split_heads(p.value(sv), p.heads);
  Tensor<T> out = p.output(merge_heads(attention(qh, kh, vh, mask, weights), p.heads));
  if (unbatched) out = reshape(out, Shape{out.dim(1), out.dim(2)});
  return out;
}

/// SA(T) = MHA(T, T, T).
template <typename T>
Tensor<T> sa(const Tensor<T>& x, const MhaParams<T>& p, const Mask* mask = nullptr) {
  return mha(x, x, x, p, mask);
}

/// CA(T, S) = MHA(T, S, S).
template <typename T>
Tensor<T> ca(const Tensor<T>& x, const Tensor<T>& source, const MhaParams<T>& p, const Mask* mask = nullptr) {
  return mha(x, source, source, p, mask);
}

/// TransEnc: `stack.depth()` layers of self-attention and feed-forward.
/// `mask` (typically key padding) applies to every self-attention.
template <typename T>
Tensor<T> trans_enc(const Tensor<T>& x, const BlockStack<T>& stack, const Mask* mask = nullptr,
                    const Regularization& reg = {}) {
  Tensor<T> h = x;
  for (const auto& layer : stack.layers) {
    h = layer.ln_self(add(h, detail::maybe_dropout(sa(h, layer.self_attn, mask), reg)));
    h = layer.ln_ff(add(h, detail::maybe_dropout(layer.ff(h), reg)));
  }
  return h;
}

/// QKVDec: each layer applies self-attention over the target, multi-head
/// attention with keys from `source_k` and values from `source_v`, then a
/// feed-forward block.
template <typename T>
Tensor<T> qkv_dec(const Tensor<T>& x, const Tensor<T>& source_k, const Tensor<T>& source_v, const BlockStack<T>& stack,
                  const Mask* self_mask = nullptr, const Mask* cross_mask = nullptr, const Regularization& reg = {},
                  AttentionTrace<T>* trace = nullptr) {
  if (source_k.rank() < 2 || source_v.rank() < 2 ||
      source_k.dim(source_k.rank() - 2) != source_v.dim(source_v.rank() - 2))
    throw ShapeError("qkv_dec: key source " + shape_str(source_k.shape()) + " and value source " +
                     shape_str(source_v.shape()) + " must have the same length");
  Tensor<T> h = x;
  for (const auto& layer : stack.layers) {
    if (!layer.cross_attn) throw ShapeError("qkv_dec: stack layer has no cross-attention parameters");
    h = layer.ln_self(add(h, detail::maybe_dropout(sa(h, layer.self_attn, self_mask), reg)));
    Tensor<T> weights;
    Tensor<T> crossed = mha(h, source_k, source_v, *layer.cross_attn, cross_mask, trace ? &weights : nullptr);
    if (trace) trace->cross_weights.push_back(weights);
    h = layer.ln_cross(add(h, detail::maybe_dropout(crossed, reg)));
    h = layer.ln_ff(add(h, detail::maybe_dropout(layer.ff(h), reg)));
  }
  return h;
}

/// TransDec(T; S) = QKVDec(T; S; S).
template <typename T>
Tensor<T> trans_dec(const Tensor<T>& x, const Tensor<T>& source, const BlockStack<T>& stack,
                    const Mask* self_mask = nullptr, const Mask* cross_mask = nullptr, const Regularization& reg = {}) {
  return qkv_dec(x, source, source, stack, self_mask, cross_mask, reg);
}

/// Causally masked QKVDec returning every position: position i only sees
/// prefix positions j <= i.
template <typename T>
Tensor<T> ar_qkv_dec_sequence(const Tensor<T>& prefix, const Tensor<T>& source_k, const Tensor<T>& source_v,
                              const BlockStack<T>& stack, const Regularization& reg = {},
                              AttentionTrace<T>* trace = nullptr) {
  if (prefix.rank() < 2) throw ShapeError("ar decoder: prefix must be [n, d] or [B, n, d]");
  const Mask causal = Mask::causal(prefix.dim(prefix.rank() - 2));
  return qkv_dec(prefix, source_k, source_v, stack, &causal, nullptr, reg, trace);
}

/// ARQKVDec: the representation of the final prefix position, [d] for an
/// unbatched prefix or [B, d] for a batch.
template <typename T>
Tensor<T> ar_qkv_dec(const Tensor<T>& prefix, const Tensor<T>& source_k, const Tensor<T>& source_v,
                     const BlockStack<T>& stack) {
  Tensor<T> seq = ar_qkv_dec_sequence(prefix, source_k, source_v, stack);
  const std::size_t axis = seq.rank() - 2;
  Tensor<T> last = slice(seq, axis, seq.dim(axis) - 1, 1);
  return seq.rank() == 2 ? reshape(last, Shape{seq.last_dim()}) : reshape(last, Shape{seq.dim(0), seq.last_dim()});
}

template <typename T>
Tensor<T> ar_trans_dec_sequence(const Tensor<T>& prefix, const Tensor<T>& source, const BlockStack<T>& stack,
                                const Regularization& reg = {}) {
  return ar_qkv_dec_sequence(prefix, source, source, stack, reg);
}

/// ARTransDec = ARQKVDec with a single source for keys and values.
template <typename T>
Tensor<T> ar_trans_dec(const Tensor<T>& prefix, const Tensor<T>& source, const BlockStack<T>& stack) {
  return ar_qkv_dec(prefix, source, source, stack);
}

}  // namespace qkvae
