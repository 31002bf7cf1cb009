#pragma once

// QKVAE and the ADVAE baseline.
//
// Encoder: token + position embeddings -> TransEnc -> TransDec over the
// identifier queries -> Gaussian heads (see latent.hpp).
//
// QKVAE decoder: values v_l = Concat(d_l; z_sem_l), keys = M^s(z_syn)
// reshaped to L rows; an autoregressive QKVDec over BOS w_1 .. w_{i-1}
// followed by M^w gives the next-token logits.
//
// ADVAE decoder: y = Concat(d; z) is projected to d_model, passed through a
// TransEnc and cross-attended by an autoregressive TransDec.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qkvae/latent.hpp"
#include "qkvae/nn.hpp"
#include "qkvae/tensor.hpp"
#include "qkvae/token_batch.hpp"

namespace qkvae {

enum class ModelMode { kQkvae = 0, kAdvae = 1 };

struct ModelConfig {
  ModelMode mode = ModelMode::kQkvae;
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t enc_layers = 2;     // TransEnc over tokens
  std::size_t post_layers = 2;    // TransDec over identifier queries
  std::size_t dec_layers = 2;     // generator (D^QKV)
  std::size_t latent_layers = 2;  // ADVAE TransEnc(y)
  std::size_t ff_mult = 4;
  std::size_t latents = 4;  // L
  std::size_t d_sem = 64;   // total over the L semantic slots
  std::size_t d_syn = 64;
  std::size_t max_len = 24;
  double dropout = 0.0;

  /// Desk-scale default.
  static ModelConfig desk(std::size_t vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    return c;
  }

  /// Published scale (BART-sized layers, 4 of each), for reference.
  static ModelConfig paper(std::size_t vocab_size, ModelMode mode = ModelMode::kQkvae) {
    ModelConfig c;
    c.mode = mode;
    c.vocab_size = vocab_size;
    c.d_model = 768;
    c.heads = 12;
    c.enc_layers = c.post_layers = c.dec_layers = c.latent_layers = 4;
    c.latents = 4;
    c.d_sem = mode == ModelMode::kQkvae ? 768 : 1536;
    c.d_syn = mode == ModelMode::kQkvae ? 768 : 0;
    c.max_len = 64;
    c.dropout = 0.1;
    return c;
  }

  void validate() const {
    if (vocab_size <= static_cast<std::size_t>(kReservedTokens))
      throw UsageError("vocab_size must exceed the reserved tokens");
    if (d_model == 0 || heads == 0 || d_model % heads != 0)
      throw UsageError("d_model must be a positive multiple of heads");
    if (dec_layers == 0) throw UsageError("dec_layers must be >= 1");
    if (latents == 0 || d_sem % latents != 0) throw UsageError("d_sem must be a positive multiple of latents");
    if (mode == ModelMode::kQkvae && d_syn == 0) throw UsageError("QKVAE needs d_syn > 0");
    if (max_len == 0) throw UsageError("max_len must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must lie in [0, 1)");
  }

  /// Named scalar entries, in a fixed order (checkpoint config block).
  std::vector<std::pair<std::string, double>> entries() const {
    return {{"model.mode", static_cast<double>(mode)},
            {"model.vocab_size", static_cast<double>(vocab_size)},
            {"model.d_model", static_cast<double>(d_model)},
            {"model.heads", static_cast<double>(heads)},
            {"model.enc_layers", static_cast<double>(enc_layers)},
            {"model.post_layers", static_cast<double>(post_layers)},
            {"model.dec_layers", static_cast<double>(dec_layers)},
            {"model.latent_layers", static_cast<double>(latent_layers)},
            {"model.ff_mult", static_cast<double>(ff_mult)},
            {"model.latents", static_cast<double>(latents)},
            {"model.d_sem", static_cast<double>(d_sem)},
            {"model.d_syn", static_cast<double>(d_syn)},
            {"model.max_len", static_cast<double>(max_len)},
            {"model.dropout", dropout}};
  }

  static ModelConfig from_entries(const std::vector<std::pair<std::string, double>>& kv) {
    ModelConfig c;
    auto get = [&](const std::string& key) -> double {
      for (const auto& [k, v] : kv)
        if (k == key) return v;
      throw DataError("checkpoint config lacks entry '" + key + "'");
    };
    auto size = [&](const std::string& key) { return static_cast<std::size_t>(get(key)); };
    const int mode = static_cast<int>(get("model.mode"));
    if (mode != 0 && mode != 1) throw DataError("checkpoint has unknown model mode " + std::to_string(mode));
    c.mode = static_cast<ModelMode>(mode);
    c.vocab_size = size("model.vocab_size");
    c.d_model = size("model.d_model");
    c.heads = size("model.heads");
    c.enc_layers = size("model.enc_layers");
    c.post_layers = size("model.post_layers");
    c.dec_layers = size("model.dec_layers");
    c.latent_layers = size("model.latent_layers");
    c.ff_mult = size("model.ff_mult");
    c.latents = size("model.latents");
    c.d_sem = size("model.d_sem");
    c.d_syn = size("model.d_syn");
    c.max_len = size("model.max_len");
    c.dropout = get("model.dropout");
    c.validate();
    return c;
  }
};

/// Latent sample or mean for a batch: z_sem [B, L, d_sem/L], z_syn [B, d_syn]
/// (undefined in ADVAE mode).
template <typename T>
struct LatentCode {
  Tensor<T> sem;
  Tensor<T> syn;
};

struct DecodeStrategy {
  enum class Kind { kGreedy, kSample } kind = Kind::kGreedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static DecodeStrategy greedy() { return {}; }
  static DecodeStrategy sample(double temperature, std::uint64_t seed) {
    return {Kind::kSample, temperature, seed};
  }
};

template <typename T>
class QkvaeModel {
 public:
  QkvaeModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = cfg_.d_model, ff = cfg_.ff_mult * d;
    tok_embed_ = Tensor<T>::randn({cfg_.vocab_size, d}, rng, T(1), true);
    pos_embed_ = Tensor<T>::randn({cfg_.max_len + 1, d}, rng, T(0.5), true);
    encoder_ = make_encoder_stack<T>(cfg_.enc_layers, d, cfg_.heads, ff, rng);
    posterior_ = make_decoder_stack<T>(cfg_.post_layers, d, cfg_.heads, ff, d, d, rng);
    const bool qkv = cfg_.mode == ModelMode::kQkvae;
    bank_ = LatentBank<T>::init(cfg_.latents, cfg_.d_sem, cfg_.d_syn, qkv, d, d, rng);
    const std::size_t value_in = d + bank_.slot_width();
    if (qkv) {
      generator_ = make_decoder_stack<T>(cfg_.dec_layers, d, cfg_.heads, ff, d, value_in, rng);
    } else {
      latent_in_ = Linear<T>::init(value_in, d, rng);
      latent_encoder_ = make_encoder_stack<T>(cfg_.latent_layers, d, cfg_.heads, ff, rng);
      generator_ = make_decoder_stack<T>(cfg_.dec_layers, d, cfg_.heads, ff, d, d, rng);
    }
    out_head_ = Linear<T>::init(d, cfg_.vocab_size, rng);
    std::set<std::string> seen;
    visit([&](const std::string& name, const Tensor<T>&) {
      if (!seen.insert(name).second) throw std::logic_error("duplicate parameter name " + name);
    });
  }

  const ModelConfig& config() const { return cfg_; }
  const LatentBank<T>& bank() const { return bank_; }
  const BlockStack<T>& generator() const { return generator_; }

  template <typename Visit>
  void visit(Visit&& v) const {
    v("tok_embed", tok_embed_);
    v("pos_embed", pos_embed_);
    encoder_.visit("encoder", v);
    posterior_.visit("posterior", v);
    bank_.visit("bank", v);
    if (cfg_.mode == ModelMode::kAdvae) {
      latent_in_.visit("latent_in", v);
      latent_encoder_.visit("latent_encoder", v);
    }
    generator_.visit("generator", v);
    out_head_.visit("out_head", v);
  }

  /// Parameter handles (sharing storage with the model) in a fixed order.
  std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit([&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
    return n;
  }

  void zero_grad() const {
    visit([](const std::string&, Tensor<T> t) { t.zero_grad(); });
  }

  /// Token + position embeddings for `ids` laid out as [batch, n].
  Tensor<T> embed(std::span<const int> ids, std::size_t batch, std::size_t n) const {
    if (n == 0 || n > cfg_.max_len + 1)
      throw DataError("sequence length " + std::to_string(n) + " outside [1, " + std::to_string(cfg_.max_len + 1) + "]");
    return add(embedding(tok_embed_, ids, Shape{batch, n}), slice(pos_embed_, 0, 0, n));
  }

  Posteriors<T> encode(const TokenBatch& batch, const Regularization& reg = {}) const {
    if (batch.width > cfg_.max_len)
      throw DataError("sequence of " + std::to_string(batch.width) + " tokens exceeds max_len " +
                      std::to_string(cfg_.max_len));
    Tensor<T> x = embed(batch.tokens, batch.batch, batch.width);
    const Mask self_mask = Mask::key_padding(batch.lengths, batch.width, batch.width);
    Tensor<T> states = trans_enc(x, encoder_, &self_mask, reg);
    const Mask cross_mask = Mask::key_padding(batch.lengths, bank_.queries(), batch.width);
    return encode_posteriors(states, bank_, posterior_, &cross_mask, reg);
  }

  Posteriors<T> encode(const TokenSeq& tokens) const {
    const std::vector<TokenSeq> one{tokens};
    return encode(make_batch(one, cfg_.max_len));
  }

  /// Posterior means as a latent code.
  LatentCode<T> means(const Posteriors<T>& p) const {
    LatentCode<T> z{p.sem.mean, {}};
    if (p.syn) z.syn = p.syn->mean;
    return z;
  }

  /// Decoder states [B, n, d_model] for prefixes `ids` laid out as [B, n]
  /// (each starting with BOS), conditioned on `z`.
  Tensor<T> decoder_states(const LatentCode<T>& z, std::span<const int> ids, std::size_t n,
                           const Regularization& reg = {}, AttentionTrace<T>* trace = nullptr) const {
    check_code(z);
    const std::size_t batch = z.sem.dim(0);
    if (ids.size() != batch * n) throw ShapeError("decoder prefix ids do not match the latent batch");
    Tensor<T> prefix = embed(ids, batch, n);
    Tensor<T> values = concat_last(broadcast_batch(bank_.dec_ids, batch), z.sem);
    if (cfg_.mode == ModelMode::kQkvae) {
      Tensor<T> keys = reshape(bank_.key_proj(z.syn), Shape{batch, cfg_.latents, cfg_.d_model});
      return ar_qkv_dec_sequence(prefix, keys, values, generator_, reg, trace);
    }
    Tensor<T> source = trans_enc(latent_in_(values), latent_encoder_, nullptr, reg);
    return ar_qkv_dec_sequence(prefix, source, source, generator_, reg, trace);
  }

  /// Teacher-forced logits [B * (width + 1), V] for the batch's decoder inputs.
  Tensor<T> teacher_forced_logits(const LatentCode<T>& z, const TokenBatch& batch, const Regularization& reg = {}) const {
    const std::vector<int> inputs = batch.decoder_inputs();
    Tensor<T> h = decoder_states(z, inputs, batch.width + 1, reg);
    return reshape(out_head_(h), Shape{batch.batch * (batch.width + 1), cfg_.vocab_size});
  }

  /// Next-token logits [V] after `prefix` (which starts with BOS) for a single
  /// latent code (z.sem [1, L, w] or [L, w]; z.syn [1, d] or [d]).
  Tensor<T> decode_logits(LatentCode<T> z, const TokenSeq& prefix) const {
    if (prefix.empty() || prefix.front() != kBos) throw DataError("decoder prefix must start with BOS");
    if (z.sem.rank() == 2) z.sem = reshape(z.sem, Shape{1, z.sem.dim(0), z.sem.dim(1)});
    if (z.syn.defined() && z.syn.rank() == 1) z.syn = reshape(z.syn, Shape{1, z.syn.dim(0)});
    Tensor<T> h = decoder_states(z, prefix, prefix.size());
    Tensor<T> last = slice(h, 1, prefix.size() - 1, 1);
    return reshape(out_head_(last), Shape{cfg_.vocab_size});
  }

  /// ADVAE form of decode_logits; `z` holds the L latent slots.
  Tensor<T> advae_decode_logits(const Tensor<T>& z, const TokenSeq& prefix) const {
    if (cfg_.mode != ModelMode::kAdvae) throw UsageError("advae_decode_logits needs an ADVAE model");
    return decode_logits(LatentCode<T>{z, {}}, prefix);
  }

  /// Autoregressive generation for every code in the batch. Output sequences
  /// exclude BOS and EOS and hold at most `max_len` tokens.
  std::vector<TokenSeq> generate(const LatentCode<T>& z, const DecodeStrategy& strategy, std::size_t max_len) const {
    if (max_len == 0) throw UsageError("generate: max_len must be >= 1");
    max_len = std::min(max_len, cfg_.max_len);
    check_code(z);
    NoGradScope<T> no_grad;
    const std::size_t batch = z.sem.dim(0), vocab = cfg_.vocab_size;
    std::vector<TokenSeq> out(batch);
    std::vector<bool> done(batch, false);
    std::vector<int> ids(batch, kBos);  // [batch, step]
    Rng rng(strategy.seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t step = 1; step <= max_len; ++step) {
      Tensor<T> h = decoder_states(z, ids, step);
      std::vector<std::size_t> last(batch);
      for (std::size_t b = 0; b < batch; ++b) last[b] = b * step + step - 1;
      Tensor<T> logits = out_head_(gather_rows(h, last));
      auto ld = logits.data();
      std::vector<int> next(batch, kEos);
      for (std::size_t b = 0; b < batch; ++b) {
        if (done[b]) continue;
        const T* row = ld.data() + b * vocab;
        next[b] = strategy.kind == DecodeStrategy::Kind::kGreedy ? argmax_token(row, vocab)
                                                                 : sample_token(row, vocab, strategy.temperature, unif(rng));
        if (next[b] == kEos)
          done[b] = true;
        else
          out[b].push_back(next[b]);
      }
      if (std::all_of(done.begin(), done.end(), [](bool d) { return d; })) break;
      std::vector<int> grown(batch * (step + 1));
      for (std::size_t b = 0; b < batch; ++b) {
        std::copy_n(ids.begin() + static_cast<std::ptrdiff_t>(b * step), step,
                    grown.begin() + static_cast<std::ptrdiff_t>(b * (step + 1)));
        grown[b * (step + 1) + step] = next[b];
      }
      ids = std::move(grown);
    }
    return out;
  }

 private:
  void check_code(const LatentCode<T>& z) const {
    if (!z.sem.defined() || z.sem.rank() != 3 || z.sem.dim(1) != cfg_.latents || z.sem.dim(2) != bank_.slot_width())
      throw ShapeError("z_sem must be [B, " + std::to_string(cfg_.latents) + ", " + std::to_string(bank_.slot_width()) +
                       "], got " + (z.sem.defined() ? shape_str(z.sem.shape()) : "undefined"));
    if (cfg_.mode == ModelMode::kQkvae &&
        (!z.syn.defined() || z.syn.shape() != Shape{z.sem.dim(0), cfg_.d_syn}))
      throw ShapeError("z_syn must be [B, " + std::to_string(cfg_.d_syn) + "]");
  }

  // PAD and BOS are never generated.
  static bool blocked(std::size_t id) { return id == static_cast<std::size_t>(kPad) || id == static_cast<std::size_t>(kBos); }

  static int argmax_token(const T* row, std::size_t vocab) {
    std::size_t best = kEos;
    for (std::size_t j = 0; j < vocab; ++j)
      if (!blocked(j) && row[j] > row[best]) best = j;
    return static_cast<int>(best);
  }

  static int sample_token(const T* row, std::size_t vocab, double temperature, double u) {
    if (!(temperature > 0.0)) throw UsageError("sampling temperature must be positive");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j)
      if (!blocked(j)) mx = std::max(mx, static_cast<double>(row[j]) / temperature);
    std::vector<double> p(vocab, 0.0);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j)
      if (!blocked(j)) s += (p[j] = std::exp(static_cast<double>(row[j]) / temperature - mx));
    double acc = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      acc += p[j] / s;
      if (!blocked(j) && u < acc) return static_cast<int>(j);
    }
    return kEos;
  }

  ModelConfig cfg_;
  Tensor<T> tok_embed_;
  Tensor<T> pos_embed_;
  BlockStack<T> encoder_;
  BlockStack<T> posterior_;
  LatentBank<T> bank_;
  Linear<T> latent_in_;
  BlockStack<T> latent_encoder_;
  BlockStack<T> generator_;
  Linear<T> out_head_;
};

}  // namespace qkvae
