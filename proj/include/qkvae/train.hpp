#pragma once

// beta-ELBo objective with separately weighted z_sem / z_syn KL terms, Adam and
// SGD, the binary checkpoint format, and a deterministic resumable trainer.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qkvae/grad_check.hpp"
#include "qkvae/latent.hpp"
#include "qkvae/model.hpp"
#include "qkvae/tensor.hpp"
#include "qkvae/token_batch.hpp"

namespace qkvae {

enum class OptimizerKind { kAdam = 0, kSgd = 1 };

struct TrainConfig {
  ModelConfig model;  // vocab_size is filled in from the data
  double beta_sem_final = 0.6;
  double beta_syn_final = 0.3;
  double lambda_fb = 0.05;
  std::int64_t sem_anneal_start = 3000;
  std::int64_t sem_anneal_end = 6000;
  std::int64_t syn_anneal_start = 7000;
  std::int64_t syn_anneal_end = 20000;
  std::size_t batch_size = 64;
  std::size_t epochs = 40;
  std::int64_t steps = 0;  // overrides epochs when > 0
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 1000;

  BetaSchedule sem_schedule() const { return {sem_anneal_start, sem_anneal_end, beta_sem_final}; }
  BetaSchedule syn_schedule() const { return {syn_anneal_start, syn_anneal_end, beta_syn_final}; }

  /// Every anneal step count divided by `factor`.
  TrainConfig scaled_schedule(std::int64_t factor) const {
    TrainConfig c = *this;
    c.sem_anneal_start /= factor;
    c.sem_anneal_end /= factor;
    c.syn_anneal_start /= factor;
    c.syn_anneal_end /= factor;
    return c;
  }

  void validate() const {
    if (beta_sem_final < 0 || beta_syn_final < 0) throw UsageError("beta values must be >= 0");
    if (lambda_fb < 0) throw UsageError("lambda_fb must be >= 0");
    if (sem_anneal_start >= sem_anneal_end || syn_anneal_start >= syn_anneal_end)
      throw UsageError("anneal windows need start < end");
    if (sem_anneal_end > syn_anneal_start) throw UsageError("the z_sem anneal must end before the z_syn anneal starts");
    if (batch_size == 0) throw UsageError("batch_size must be >= 1");
    if (!(lr > 0)) throw UsageError("lr must be positive");
    if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1 || !(adam_eps > 0))
      throw UsageError("adam hyper-parameters out of range");
    if (checkpoint_every <= 0) throw UsageError("checkpoint_every must be >= 1");
  }

  std::vector<std::pair<std::string, double>> entries() const {
    auto out = model.entries();
    const std::vector<std::pair<std::string, double>> train = {
        {"train.beta_sem_final", beta_sem_final},
        {"train.beta_syn_final", beta_syn_final},
        {"train.lambda_fb", lambda_fb},
        {"train.sem_anneal_start", static_cast<double>(sem_anneal_start)},
        {"train.sem_anneal_end", static_cast<double>(sem_anneal_end)},
        {"train.syn_anneal_start", static_cast<double>(syn_anneal_start)},
        {"train.syn_anneal_end", static_cast<double>(syn_anneal_end)},
        {"train.batch_size", static_cast<double>(batch_size)},
        {"train.epochs", static_cast<double>(epochs)},
        {"train.steps", static_cast<double>(steps)},
        {"train.lr", lr},
        {"train.optimizer", static_cast<double>(optimizer)},
        {"train.adam_beta1", adam_beta1},
        {"train.adam_beta2", adam_beta2},
        {"train.adam_eps", adam_eps},
        {"train.seed", static_cast<double>(seed)},
        {"train.checkpoint_every", static_cast<double>(checkpoint_every)}};
    out.insert(out.end(), train.begin(), train.end());
    return out;
  }

  static TrainConfig from_entries(const std::vector<std::pair<std::string, double>>& kv) {
    TrainConfig c;
    c.model = ModelConfig::from_entries(kv);
    auto get = [&](const std::string& key) -> double {
      for (const auto& [k, v] : kv)
        if (k == key) return v;
      throw DataError("checkpoint config lacks entry '" + key + "'");
    };
    c.beta_sem_final = get("train.beta_sem_final");
    c.beta_syn_final = get("train.beta_syn_final");
    c.lambda_fb = get("train.lambda_fb");
    c.sem_anneal_start = static_cast<std::int64_t>(get("train.sem_anneal_start"));
    c.sem_anneal_end = static_cast<std::int64_t>(get("train.sem_anneal_end"));
    c.syn_anneal_start = static_cast<std::int64_t>(get("train.syn_anneal_start"));
    c.syn_anneal_end = static_cast<std::int64_t>(get("train.syn_anneal_end"));
    c.batch_size = static_cast<std::size_t>(get("train.batch_size"));
    c.epochs = static_cast<std::size_t>(get("train.epochs"));
    c.steps = static_cast<std::int64_t>(get("train.steps"));
    c.lr = get("train.lr");
    c.optimizer = static_cast<OptimizerKind>(static_cast<int>(get("train.optimizer")));
    c.adam_beta1 = get("train.adam_beta1");
    c.adam_beta2 = get("train.adam_beta2");
    c.adam_eps = get("train.adam_eps");
    c.seed = static_cast<std::uint64_t>(get("train.seed"));
    c.checkpoint_every = static_cast<std::int64_t>(get("train.checkpoint_every"));
    return c;
  }
};

/// Parses a line-oriented key=value config. '#' starts a comment; unknown
/// keys and malformed values are errors.
inline TrainConfig parse_train_config(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    auto where = [&] { return "config line " + std::to_string(n) + ": "; };
    if (eq == std::string::npos) throw UsageError(where() + "expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto num = [&]() -> double {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != value.size() || !std::isfinite(v))
        throw UsageError(where() + "'" + key + "' needs a number, got '" + value + "'");
      return v;
    };
    auto count = [&]() -> std::size_t {
      const double v = num();
      if (v < 0 || v != std::floor(v)) throw UsageError(where() + "'" + key + "' needs a non-negative integer");
      return static_cast<std::size_t>(v);
    };
    auto& m = c.model;
    if (key == "mode") {
      if (value == "qkvae") m.mode = ModelMode::kQkvae;
      else if (value == "advae") m.mode = ModelMode::kAdvae;
      else throw UsageError(where() + "mode must be qkvae or advae");
    } else if (key == "d_model") m.d_model = count();
    else if (key == "heads") m.heads = count();
    else if (key == "enc_layers") m.enc_layers = count();
    else if (key == "post_layers") m.post_layers = count();
    else if (key == "dec_layers") m.dec_layers = count();
    else if (key == "latent_layers") m.latent_layers = count();
    else if (key == "ff_mult") m.ff_mult = count();
    else if (key == "latents") m.latents = count();
    else if (key == "d_sem") m.d_sem = count();
    else if (key == "d_syn") m.d_syn = count();
    else if (key == "max_len") m.max_len = count();
    else if (key == "dropout") m.dropout = num();
    else if (key == "beta_sem_final") c.beta_sem_final = num();
    else if (key == "beta_syn_final") c.beta_syn_final = num();
    else if (key == "lambda_fb") c.lambda_fb = num();
    else if (key == "sem_anneal_start") c.sem_anneal_start = static_cast<std::int64_t>(count());
    else if (key == "sem_anneal_end") c.sem_anneal_end = static_cast<std::int64_t>(count());
    else if (key == "syn_anneal_start") c.syn_anneal_start = static_cast<std::int64_t>(count());
    else if (key == "syn_anneal_end") c.syn_anneal_end = static_cast<std::int64_t>(count());
    else if (key == "batch_size") c.batch_size = count();
    else if (key == "epochs") c.epochs = count();
    else if (key == "steps") c.steps = static_cast<std::int64_t>(count());
    else if (key == "lr") c.lr = num();
    else if (key == "optimizer") {
      if (value == "adam") c.optimizer = OptimizerKind::kAdam;
      else if (value == "sgd") c.optimizer = OptimizerKind::kSgd;
      else throw UsageError(where() + "optimizer must be adam or sgd");
    } else if (key == "adam_beta1") c.adam_beta1 = num();
    else if (key == "adam_beta2") c.adam_beta2 = num();
    else if (key == "adam_eps") c.adam_eps = num();
    else if (key == "seed") c.seed = count();
    else if (key == "checkpoint_every") c.checkpoint_every = static_cast<std::int64_t>(count());
    else throw UsageError(where() + "unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

// ---------------------------------------------------------------------------
// Objective

template <typename T>
struct ElboTerms {
  Tensor<T> loss;
  double nll = 0;      // mean per target token
  double kl_sem = 0;   // raw KL per sentence (batch mean)
  double kl_syn = 0;
  double beta_sem = 0;
  double beta_syn = 0;
};

namespace detail {

template <typename T>
Tensor<T> batch_mean_kl_dims(const GaussianPosterior<T>& p) {
  Tensor<T> kl = kl_std_normal(p);
  const std::size_t batch = kl.dim(0);
  return mean_leading(reshape(kl, Shape{batch, kl.numel() / batch}));
}

inline void require_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NumericalError(std::string("non-finite ") + term + " in the training objective");
}

}  // namespace detail

/// loss = NLL + (beta_sem * FB(KL_sem) + beta_syn * FB(KL_syn)) / tokens.
///
/// NLL is the mean over target tokens (padding excluded). KL terms are per
/// sentence (batch mean per dimension, then free-bits thresholded), so they are
/// divided by the mean number of target tokens per sentence: the whole loss is
/// the per-sentence beta-ELBo divided by a constant.
template <typename T>
ElboTerms<T> elbo_from_posteriors(const QkvaeModel<T>& model, const TokenBatch& batch, const Posteriors<T>& post,
                                  std::int64_t step, const TrainConfig& cfg, Rng& noise_rng,
                                  const Regularization& reg = {}) {
  ElboTerms<T> out;
  out.beta_sem = beta_at(step, cfg.sem_schedule());
  out.beta_syn = model.config().mode == ModelMode::kQkvae ? beta_at(step, cfg.syn_schedule()) : 0.0;

  LatentCode<T> z;
  z.sem = reparameterize(post.sem, Tensor<T>::randn(post.sem.mean.shape(), noise_rng));
  if (post.syn) z.syn = reparameterize(*post.syn, Tensor<T>::randn(post.syn->mean.shape(), noise_rng));

  const std::vector<int> targets = batch.decoder_targets();
  Tensor<T> nll = cross_entropy(model.teacher_forced_logits(z, batch, reg), targets, kPad);
  out.nll = static_cast<double>(nll.item());
  detail::require_finite(out.nll, "NLL");

  const T lambda = static_cast<T>(cfg.lambda_fb);
  const T tokens_per_sentence = static_cast<T>(batch.target_tokens()) / static_cast<T>(batch.batch);
  Tensor<T> loss = nll;
  Tensor<T> kl_sem = detail::batch_mean_kl_dims(post.sem);
  for (T v : kl_sem.data()) out.kl_sem += static_cast<double>(v);
  detail::require_finite(out.kl_sem, "z_sem KL");
  if (out.beta_sem > 0)
    loss = add(loss, scale(free_bits(kl_sem, lambda), static_cast<T>(out.beta_sem) / tokens_per_sentence));
  if (post.syn) {
    Tensor<T> kl_syn = detail::batch_mean_kl_dims(*post.syn);
    for (T v : kl_syn.data()) out.kl_syn += static_cast<double>(v);
    detail::require_finite(out.kl_syn, "z_syn KL");
    if (out.beta_syn > 0)
      loss = add(loss, scale(free_bits(kl_syn, lambda), static_cast<T>(out.beta_syn) / tokens_per_sentence));
  }
  detail::require_finite(static_cast<double>(loss.item()), "loss");
  out.loss = loss;
  return out;
}

/// Encodes the batch, samples one latent per sentence and evaluates the objective.
template <typename T>
ElboTerms<T> elbo_loss(const QkvaeModel<T>& model, const TokenBatch& batch, std::int64_t step, const TrainConfig& cfg,
                       Rng& noise_rng, const Regularization& reg = {}) {
  return elbo_from_posteriors(model, batch, model.encode(batch, reg), step, cfg, noise_rng, reg);
}

// ---------------------------------------------------------------------------
// Optimizers

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t t = 0;
};

/// Bias-corrected Adam update of every parameter from its grad slot; a
/// parameter without a gradient is treated as having a zero gradient.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamHyper& h) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  ++state.t;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T step = static_cast<T>(h.lr / c1), inv_c2 = static_cast<T>(1.0 / c2), eps = static_cast<T>(h.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].mutable_data();
    if (state.m[i].size() != data.size()) throw ShapeError("adam_step: state shape mismatch for parameter " + std::to_string(i));
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has = params[i].has_grad();
    auto g = params[i].grad();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const T gj = has ? g[j] : T(0);
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      data[j] -= step * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
    }
  }
}

template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, double lr) {
  for (auto& p : params) {
    if (!p.has_grad()) continue;
    auto data = p.mutable_data();
    auto g = p.grad();
    for (std::size_t j = 0; j < data.size(); ++j) data[j] -= static_cast<T>(lr) * g[j];
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// magic "QKVAE\0", u16 version, u32 entry count, entries (name, f64), u32
// tensor count, tensors (name, u8 dtype tag, u32 rank, u32 dims, raw f32).
// Strings are u32 length + bytes. All integers and floats little-endian.

inline constexpr char kCheckpointMagic[6] = {'Q', 'K', 'V', 'A', 'E', '\0'};
inline constexpr std::uint16_t kCheckpointVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct CheckpointData {
  std::vector<std::pair<std::string, double>> config;
  std::vector<NamedArray> tensors;

  double entry(const std::string& key) const {
    for (const auto& [k, v] : config)
      if (k == key) return v;
    throw DataError("checkpoint config lacks entry '" + key + "'");
  }
};

namespace detail {

template <typename U>
void put_le(std::string& out, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(U));
}

inline void put_string(std::string& out, const std::string& s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string bytes) : b_(std::move(bytes)) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, b_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, bytes, sizeof(U));
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::string get_raw(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw DataError("truncated checkpoint (needed " + std::to_string(n) + " bytes at offset " +
                                              std::to_string(pos_) + ")");
  }

  std::string b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointData& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint16_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.config.size()));
  for (const auto& [k, v] : ck.config) {
    detail::put_string(out, k);
    detail::put_le<double>(out, v);
  }
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    detail::put_string(out, t.name);
    detail::put_le<std::uint8_t>(out, kDtypeF32);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float x : t.data) detail::put_le<float>(out, x);
  }
  return out;
}

inline CheckpointData decode_checkpoint(std::string bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw DataError("not a QKVAE checkpoint (bad magic)");
  detail::Reader r(std::move(bytes));
  r.get_raw(sizeof(kCheckpointMagic));
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw DataError("incompatible checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  CheckpointData ck;
  const auto entries = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < entries; ++i) {
    std::string k = r.get_string();
    ck.config.emplace_back(std::move(k), r.get<double>());
  }
  const auto tensors = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < tensors; ++i) {
    NamedArray t;
    t.name = r.get_string();
    if (r.get<std::uint8_t>() != kDtypeF32) throw DataError("checkpoint tensor '" + t.name + "' has an unknown dtype");
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t d = 0; d < rank; ++d) t.shape.push_back(r.get<std::uint32_t>());
    const std::size_t n = numel(t.shape);
    t.data.resize(n);
    for (std::size_t j = 0; j < n; ++j) t.data[j] = r.get<float>();
    ck.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw DataError("trailing bytes after checkpoint tensor table");
  return ck;
}

inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Everything needed to continue training: model, optimizer state, step.
struct TrainState {
  TrainConfig cfg;
  QkvaeModel<float> model;
  AdamState<float> adam;
  std::int64_t step = 0;
};

inline CheckpointData to_checkpoint(const TrainState& s) {
  CheckpointData ck;
  ck.config = s.cfg.entries();
  ck.config.emplace_back("state.step", static_cast<double>(s.step));
  ck.config.emplace_back("state.adam_t", static_cast<double>(s.adam.t));
  const auto params = s.model.parameters();
  for (const auto& [name, t] : params) ck.tensors.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
  if (!s.adam.m.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i)
      ck.tensors.push_back({"adam.m/" + params[i].first, params[i].second.shape(), s.adam.m[i]});
    for (std::size_t i = 0; i < params.size(); ++i)
      ck.tensors.push_back({"adam.v/" + params[i].first, params[i].second.shape(), s.adam.v[i]});
  }
  return ck;
}

inline TrainState from_checkpoint(const CheckpointData& ck) {
  TrainConfig cfg = TrainConfig::from_entries(ck.config);
  TrainState s{cfg, QkvaeModel<float>(cfg.model, 0), {}, static_cast<std::int64_t>(ck.entry("state.step"))};
  std::map<std::string, const NamedArray*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  auto take = [&](const std::string& name, const Shape& shape) -> const NamedArray& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
    if (it->second->shape != shape)
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second->shape) + ", model expects " +
                      shape_str(shape));
    return *it->second;
  };
  auto params = s.model.parameters();
  for (auto& [name, t] : params) {
    const auto& src = take(name, t.shape());
    std::copy(src.data.begin(), src.data.end(), t.mutable_data().begin());
  }
  s.adam.t = static_cast<std::int64_t>(ck.entry("state.adam_t"));
  if (by_name.count("adam.m/" + params.front().first)) {
    for (auto& [name, t] : params) {
      s.adam.m.push_back(take("adam.m/" + name, t.shape()).data);
      s.adam.v.push_back(take("adam.v/" + name, t.shape()).data);
    }
  }
  return s;
}

inline void save_checkpoint(const TrainState& s, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(to_checkpoint(s)));
}

inline TrainState load_checkpoint(const std::string& path) { return from_checkpoint(decode_checkpoint(read_file(path))); }

// ---------------------------------------------------------------------------
// Training loop

struct StepMetrics {
  std::int64_t step = 0;
  double nll = 0;
  double kl_sem = 0;
  double kl_syn = 0;
  double beta_sem = 0;
  double beta_syn = 0;
  double wall_ms = 0;
};

using MetricSink = std::function<void(const StepMetrics&)>;

inline const char* kMetricHeader = "step\tnll\tkl_sem\tkl_syn\tbeta_sem\tbeta_syn\twall_ms";

inline std::string format_metrics(const StepMetrics& m) {
  std::ostringstream out;
  out << m.step << '\t' << std::setprecision(9) << m.nll << '\t' << m.kl_sem << '\t' << m.kl_syn << '\t' << m.beta_sem
      << '\t' << m.beta_syn << '\t' << std::setprecision(6) << m.wall_ms;
  return out.str();
}

/// splitmix64 finalizer over (seed, a, b): independent deterministic streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

/// Deterministic trainer. Batch order depends only on (seed, epoch), latent
/// noise and dropout only on (seed, step), so a run resumed from a
/// checkpoint continues bit-identically.
class Trainer {
 public:
  Trainer(TrainState state, std::vector<TokenSeq> corpus) : s_(std::move(state)), corpus_(std::move(corpus)) {
    if (corpus_.empty()) throw DataError("training corpus is empty");
    s_.cfg.validate();
    for (std::size_t i = 0; i < corpus_.size(); ++i) {
      if (corpus_[i].empty()) throw DataError("corpus sentence " + std::to_string(i + 1) + " has no tokens");
      if (corpus_[i].size() > s_.cfg.model.max_len)
        throw DataError("corpus sentence " + std::to_string(i + 1) + " has " + std::to_string(corpus_[i].size()) +
                        " tokens, above max_len " + std::to_string(s_.cfg.model.max_len));
      for (int id : corpus_[i])
        if (id < 0 || static_cast<std::size_t>(id) >= s_.cfg.model.vocab_size)
          throw DataError("corpus sentence " + std::to_string(i + 1) + " has a token id outside the vocabulary");
    }
    for (auto& [name, t] : s_.model.parameters()) params_.push_back(t);
  }

  /// Fresh model initialized from cfg.seed.
  static Trainer fresh(const TrainConfig& cfg, std::vector<TokenSeq> corpus) {
    return Trainer(TrainState{cfg, QkvaeModel<float>(cfg.model, mix_seed(cfg.seed, 0x1417)), {}, 0}, std::move(corpus));
  }

  const TrainState& state() const { return s_; }
  TrainState& state() { return s_; }
  std::int64_t step() const { return s_.step; }

  std::size_t batches_per_epoch() const { return (corpus_.size() + s_.cfg.batch_size - 1) / s_.cfg.batch_size; }

  std::int64_t total_steps() const {
    return s_.cfg.steps > 0 ? s_.cfg.steps : static_cast<std::int64_t>(s_.cfg.epochs * batches_per_epoch());
  }

  /// Corpus indices of the batch used at `step`.
  std::vector<std::size_t> batch_indices(std::int64_t step) {
    const std::size_t bpe = batches_per_epoch();
    const std::size_t epoch = static_cast<std::size_t>(step) / bpe, pos = static_cast<std::size_t>(step) % bpe;
    if (epoch != perm_epoch_ || perm_.empty()) {
      perm_.resize(corpus_.size());
      for (std::size_t i = 0; i < perm_.size(); ++i) perm_[i] = i;
      Rng rng(mix_seed(s_.cfg.seed, 0xE90C, epoch));
      std::shuffle(perm_.begin(), perm_.end(), rng);
      perm_epoch_ = epoch;
    }
    const std::size_t begin = pos * s_.cfg.batch_size, end = std::min(begin + s_.cfg.batch_size, perm_.size());
    return {perm_.begin() + static_cast<std::ptrdiff_t>(begin), perm_.begin() + static_cast<std::ptrdiff_t>(end)};
  }

  /// One optimizer update; returns the step's metrics.
  StepMetrics train_step() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<TokenSeq> seqs;
    for (std::size_t i : batch_indices(s_.step)) seqs.push_back(corpus_[i]);
    const TokenBatch batch = make_batch(seqs, s_.cfg.model.max_len);
    Rng noise(mix_seed(s_.cfg.seed, 0x401E, static_cast<std::uint64_t>(s_.step)));
    Rng drop(mix_seed(s_.cfg.seed, 0xD809, static_cast<std::uint64_t>(s_.step)));
    const Regularization reg{s_.cfg.model.dropout, &drop};
    StepMetrics m;
    {
      Tape<float> tape;
      TapeScope<float> scope(tape);
      ElboTerms<float> terms = elbo_loss(s_.model, batch, s_.step, s_.cfg, noise, reg);
      tape.backward(terms.loss);
      m = {s_.step, terms.nll, terms.kl_sem, terms.kl_syn, terms.beta_sem, terms.beta_syn, 0.0};
    }
    for (auto& p : params_) {
      if (!p.has_grad()) continue;
      for (float g : p.grad())
        if (!std::isfinite(g)) throw NumericalError("non-finite gradient at step " + std::to_string(s_.step));
    }
    if (s_.cfg.optimizer == OptimizerKind::kAdam)
      adam_step(params_, s_.adam, AdamHyper{s_.cfg.lr, s_.cfg.adam_beta1, s_.cfg.adam_beta2, s_.cfg.adam_eps});
    else
      sgd_step(params_, s_.cfg.lr);
    for (auto& p : params_) p.zero_grad();
    ++s_.step;
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return m;
  }

  /// Trains until `until` steps have been taken (or total_steps() when
  /// negative). Writes `checkpoint_path` every checkpoint_every steps and at
  /// the end, when non-empty.
  void run(std::int64_t until, const MetricSink& sink, const std::string& checkpoint_path = {}) {
    if (until < 0) until = total_steps();
    while (s_.step < until) {
      StepMetrics m = train_step();
      if (sink) sink(m);
      if (!checkpoint_path.empty() && s_.step % s_.cfg.checkpoint_every == 0) save_checkpoint(s_, checkpoint_path);
    }
    if (!checkpoint_path.empty()) save_checkpoint(s_, checkpoint_path);
  }

 private:
  TrainState s_;
  std::vector<TokenSeq> corpus_;
  std::vector<Tensor<float>> params_;
  std::vector<std::size_t> perm_;
  std::size_t perm_epoch_ = 0;
};

// ---------------------------------------------------------------------------
// End-to-end gradient check

/// Tiny model for 64-bit gradient checks; `width` is d_model.
inline TrainConfig tiny_config(std::size_t width, ModelMode mode = ModelMode::kQkvae) {
  if (width < 2 || width % 2 != 0) throw UsageError("grad-check size must be an even number >= 2");
  TrainConfig c;
  c.model.mode = mode;
  c.model.vocab_size = 12;
  c.model.d_model = width;
  c.model.heads = 2;
  c.model.enc_layers = c.model.post_layers = c.model.dec_layers = c.model.latent_layers = 1;
  c.model.ff_mult = 2;
  c.model.latents = 2;
  c.model.d_sem = 4;
  c.model.d_syn = 4;
  c.model.max_len = 6;
  c.lambda_fb = 0.01;
  return c.scaled_schedule(1000);  // anneals at steps 3..6 and 7..20
}

/// Checks the full objective of a freshly initialized tiny model on a random
/// two-sentence batch against central differences, probing up to
/// `coords_per_tensor` coordinates of every parameter. Both KL terms are
/// active (step between the two anneal windows' ends).
inline GradCheckReport elbo_grad_check(std::size_t width, std::uint64_t seed, std::size_t coords_per_tensor = 3,
                                       ModelMode mode = ModelMode::kQkvae) {
  const TrainConfig cfg = tiny_config(width, mode);
  const QkvaeModel<double> model(cfg.model, seed);
  Rng rng(mix_seed(seed, 0xB47C));
  std::uniform_int_distribution<int> token(kReservedTokens, static_cast<int>(cfg.model.vocab_size) - 1);
  std::uniform_int_distribution<std::size_t> length(1, cfg.model.max_len);
  std::vector<TokenSeq> seqs(2);
  for (auto& s : seqs) {
    s.resize(length(rng));
    for (int& t : s) t = token(rng);
  }
  const TokenBatch batch = make_batch(seqs, cfg.model.max_len);
  std::vector<Tensor<double>> params;
  for (auto& [name, t] : model.parameters()) params.push_back(t);
  GradCheckOptions opt;
  opt.tol = 1e-3;
  opt.max_coords = coords_per_tensor;
  opt.seed = static_cast<unsigned>(seed);
  return grad_check(
      [&] {
        Rng noise(mix_seed(seed, 0x401E));
        return elbo_loss(model, batch, 12, cfg, noise).loss;
      },
      params, opt);
}

}  // namespace qkvae
