#pragma once

// Gaussian latent variables: posterior heads over identifier queries,
// reparameterized sampling, KL to the standard Normal prior, free bits and
// linear beta schedules.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "qkvae/nn.hpp"
#include "qkvae/tensor.hpp"

namespace qkvae {

/// Diagonal Gaussian. `mean` and `std` share a shape; `std` is strictly positive.
template <typename T>
struct GaussianPosterior {
  Tensor<T> mean;
  Tensor<T> std;
};

/// Lower bound added to softplus so that std stays representable.
inline constexpr double kStdFloor = 1e-5;

/// Slot identifiers and posterior heads. In QKVAE mode the encoder queries
/// e_1..e_L for z_sem plus e_s for z_syn; the decoder binds d_1..d_L to the
/// value slots and M^s maps z_syn to L keys. In ADVAE mode there is no z_syn
/// and the L latents each carry d_sem / L dimensions.
template <typename T>
struct LatentBank {
  std::size_t latents = 4;
  std::size_t d_sem = 64;  // total width over all semantic slots
  std::size_t d_syn = 64;
  bool has_syn = true;

  Tensor<T> enc_ids;  // [L (+1), d_model]
  Tensor<T> dec_ids;  // [L, d_id]
  Linear<T> sem_mean;
  Linear<T> sem_std;
  Linear<T> syn_mean;
  Linear<T> syn_std;
  Linear<T> key_proj;  // z_syn -> L * d_model

  std::size_t slot_width() const { return d_sem / latents; }
  std::size_t queries() const { return latents + (has_syn ? 1 : 0); }

  static LatentBank init(std::size_t latents, std::size_t d_sem, std::size_t d_syn, bool has_syn, std::size_t d_model,
                         std::size_t d_id, Rng& rng) {
    if (latents == 0 || d_sem % latents != 0)
      throw UsageError("latent width " + std::to_string(d_sem) + " is not divisible by " + std::to_string(latents) +
                       " latent slots");
    LatentBank b;
    b.latents = latents;
    b.d_sem = d_sem;
    b.d_syn = has_syn ? d_syn : 0;
    b.has_syn = has_syn;
    const T id_std = T(1) / std::sqrt(static_cast<T>(d_model));
    b.enc_ids = Tensor<T>::randn({b.queries(), d_model}, rng, id_std, true);
    b.dec_ids = Tensor<T>::randn({latents, d_id}, rng, id_std, true);
    b.sem_mean = Linear<T>::init(d_model, d_sem / latents, rng);
    b.sem_std = Linear<T>::init(d_model, d_sem / latents, rng);
    if (has_syn) {
      if (d_syn == 0) throw UsageError("QKVAE needs a positive z_syn width");
      b.syn_mean = Linear<T>::init(d_model, d_syn, rng);
      b.syn_std = Linear<T>::init(d_model, d_syn, rng);
      b.key_proj = Linear<T>::init(d_syn, latents * d_model, rng);
    }
    return b;
  }

  template <typename Visit>
  void visit(const std::string& prefix, Visit&& v) const {
    v(prefix + ".enc_ids", enc_ids);
    v(prefix + ".dec_ids", dec_ids);
    sem_mean.visit(prefix + ".sem_mean", v);
    sem_std.visit(prefix + ".sem_std", v);
    if (has_syn) {
      syn_mean.visit(prefix + ".syn_mean", v);
      syn_std.visit(prefix + ".syn_std", v);
      key_proj.visit(prefix + ".key_proj", v);
    }
  }
};

/// Posteriors for a batch: `sem` is [B, L, d_sem/L]; `syn` is [B, d_syn].
template <typename T>
struct Posteriors {
  GaussianPosterior<T> sem;
  std::optional<GaussianPosterior<T>> syn;

  std::size_t batch() const { return sem.mean.dim(0); }
};

template <typename T>
Tensor<T> positive_std(const Tensor<T>& pre) {
  return add(softplus(pre), Tensor<T>::scalar(static_cast<T>(kStdFloor)));
}

/// One TransDec pass with the identifier queries over the encoder states
/// [B, n, d_model]. `key_mask` blocks padded encoder positions.
template <typename T>
Posteriors<T> encode_posteriors(const Tensor<T>& token_states, const LatentBank<T>& bank, const BlockStack<T>& stack,
                                const Mask* key_mask = nullptr, const Regularization& reg = {}) {
  if (token_states.rank() != 3) throw ShapeError("encode_posteriors: states must be [B, n, d]");
  const std::size_t batch = token_states.dim(0);
  Tensor<T> queries = broadcast_batch(bank.enc_ids, batch);
  Tensor<T> z = trans_dec(queries, token_states, stack, nullptr, key_mask, reg);
  Posteriors<T> out;
  Tensor<T> sem_h = bank.has_syn ? slice(z, 1, 0, bank.latents) : z;
  out.sem.mean = bank.sem_mean(sem_h);
  out.sem.std = positive_std(bank.sem_std(sem_h));
  if (bank.has_syn) {
    Tensor<T> syn_h = reshape(slice(z, 1, bank.latents, 1), Shape{batch, z.dim(2)});
    out.syn = GaussianPosterior<T>{bank.syn_mean(syn_h), positive_std(bank.syn_std(syn_h))};
  }
  return out;
}

/// z = mean + std * noise.
template <typename T>
Tensor<T> reparameterize(const GaussianPosterior<T>& p, const Tensor<T>& noise) {
  if (noise.shape() != p.mean.shape())
    throw ShapeError("reparameterize: noise " + shape_str(noise.shape()) + " vs mean " + shape_str(p.mean.shape()));
  return add(p.mean, mul(p.std, noise));
}

template <typename T>
Tensor<T> kl_std_normal(const GaussianPosterior<T>& p) {
  return kl_std_normal(p.mean, p.std);
}

/// sum_i max(kl_i, lambda).
template <typename T>
Tensor<T> free_bits(const Tensor<T>& kl_dims, T lambda) {
  if (lambda < T(0)) throw UsageError("free bits threshold must be >= 0");
  return sum(clamp_min(kl_dims, lambda));
}

struct BetaSchedule {
  std::int64_t start_step = 0;
  std::int64_t end_step = 1;
  double beta_final = 1.0;
};

/// 0 before start_step, linear up to beta_final at end_step, constant after.
inline double beta_at(std::int64_t step, const BetaSchedule& s) {
  if (s.start_step >= s.end_step) throw UsageError("beta schedule needs start_step < end_step");
  if (step <= s.start_step) return 0.0;
  if (step >= s.end_step) return s.beta_final;
  return s.beta_final * static_cast<double>(step - s.start_step) / static_cast<double>(s.end_step - s.start_step);
}

}  // namespace qkvae
