#pragma once

// Evaluation: separation probability over posterior-mean embeddings, latent
// swap transfer, homotopy interpolation, syntactic transfer scores (STED and
// template matching), precomputed similarity scores and a paired t-test.

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qkvae/data.hpp"
#include "qkvae/model.hpp"
#include "qkvae/tree.hpp"

namespace qkvae {

enum class Metric { kL2, kCosine };

inline Metric parse_metric(const std::string& s) {
  if (s == "l2") return Metric::kL2;
  if (s == "cosine") return Metric::kCosine;
  throw UsageError("metric must be l2 or cosine, got '" + s + "'");
}

using Embedding = std::vector<double>;

/// Which posterior mean represents a sentence: z_sem, z_syn, their
/// concatenation, or one latent slot z_l (1-based).
struct VariableTag {
  enum class Kind { kSem, kSyn, kWhole, kSlot } kind = Kind::kSem;
  std::size_t slot = 0;

  static VariableTag parse(const std::string& s, std::size_t latents) {
    if (s == "sem") return {Kind::kSem, 0};
    if (s == "syn") return {Kind::kSyn, 0};
    if (s == "whole") return {Kind::kWhole, 0};
    if (s.size() > 1 && s[0] == 'z' && std::all_of(s.begin() + 1, s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      const std::size_t l = std::stoul(s.substr(1));
      if (l >= 1 && l <= latents) return {Kind::kSlot, l};
    }
    throw UsageError("variable must be sem, syn, whole or z1..z" + std::to_string(latents) + ", got '" + s + "'");
  }

  std::string name() const {
    switch (kind) {
      case Kind::kSem: return "sem";
      case Kind::kSyn: return "syn";
      case Kind::kWhole: return "whole";
      case Kind::kSlot: return "z" + std::to_string(slot);
    }
    return {};
  }
};

inline double embedding_distance(const Embedding& a, const Embedding& b, Metric metric) {
  if (a.size() != b.size())
    throw ShapeError("embedding widths differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (metric == Metric::kL2) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  }
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 1.0;  // a zero vector is orthogonal to everything
  return 1.0 - dot / std::sqrt(na * nb);
}

struct TripletEmbedding {
  Embedding target;
  Embedding sem_src;
  Embedding syn_src;
};

/// Fraction of triplets whose target is closer to sem_src than to syn_src;
/// ties count 0.5.
inline double separation_probability(std::span<const TripletEmbedding> triplets, Metric metric) {
  if (triplets.empty()) throw DataError("separation_probability needs at least one triplet");
  double wins = 0;
  for (const auto& t : triplets) {
    const double ds = embedding_distance(t.target, t.sem_src, metric);
    const double dy = embedding_distance(t.target, t.syn_src, metric);
    wins += ds < dy ? 1.0 : (ds == dy ? 0.5 : 0.0);
  }
  return wins / static_cast<double>(triplets.size());
}

/// `embed` maps a sentence to its embedding.
template <typename EmbedFn>
double separation_probability(std::span<const TripletRecord> triplets, EmbedFn&& embed, Metric metric) {
  std::vector<TripletEmbedding> e;
  e.reserve(triplets.size());
  for (const auto& t : triplets) e.push_back({embed(t.target), embed(t.sem_src), embed(t.syn_src)});
  return separation_probability(std::span<const TripletEmbedding>(e), metric);
}

struct SlotSelection {
  std::size_t sem_slot = 1;  // 1-based
  std::size_t syn_slot = 1;
  bool tie = false;  // every slot scored the same
};

/// sem = argmax, syn = argmin of per-slot separation probability; ties go to
/// the lowest index.
inline SlotSelection select_advae_variables(std::span<const double> slot_probs) {
  if (slot_probs.size() < 2) throw UsageError("slot selection needs at least 2 latent slots");
  SlotSelection s;
  for (std::size_t l = 1; l < slot_probs.size(); ++l) {
    if (slot_probs[l] > slot_probs[s.sem_slot - 1]) s.sem_slot = l + 1;
    if (slot_probs[l] < slot_probs[s.syn_slot - 1]) s.syn_slot = l + 1;
  }
  s.tie = std::all_of(slot_probs.begin(), slot_probs.end(), [&](double p) { return p == slot_probs.front(); });
  return s;
}

/// `embed_slot(l, sentence)` embeds with slot l (1-based).
template <typename SlotEmbedFn>
SlotSelection select_advae_variables(std::span<const TripletRecord> dev, std::size_t latents, SlotEmbedFn&& embed_slot,
                                     Metric metric = Metric::kL2) {
  std::vector<double> probs;
  for (std::size_t l = 1; l <= latents; ++l)
    probs.push_back(separation_probability(dev, [&](const std::string& s) { return embed_slot(l, s); }, metric));
  return select_advae_variables(probs);
}

// ---------------------------------------------------------------------------
// Model-backed embeddings

/// Posterior means of one sentence, flattened.
struct SentenceMeans {
  std::vector<double> sem;  // L * slot_width, slot-major
  std::vector<double> syn;  // empty for ADVAE
};

template <typename T>
std::vector<SentenceMeans> posterior_means(const QkvaeModel<T>& model, std::span<const TokenSeq> seqs,
                                           std::size_t batch_size = 64) {
  NoGradScope<T> no_grad;
  std::vector<SentenceMeans> out;
  out.reserve(seqs.size());
  for (std::size_t begin = 0; begin < seqs.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, seqs.size() - begin);
    const Posteriors<T> p = model.encode(make_batch(seqs.subspan(begin, n), model.config().max_len));
    const std::size_t ws = p.sem.mean.numel() / n;
    const std::size_t wy = p.syn ? p.syn->mean.numel() / n : 0;
    for (std::size_t b = 0; b < n; ++b) {
      SentenceMeans m;
      auto sem = p.sem.mean.data().subspan(b * ws, ws);
      m.sem.assign(sem.begin(), sem.end());
      if (p.syn) {
        auto syn = p.syn->mean.data().subspan(b * wy, wy);
        m.syn.assign(syn.begin(), syn.end());
      }
      out.push_back(std::move(m));
    }
  }
  return out;
}

inline Embedding select_embedding(const SentenceMeans& m, const VariableTag& tag, std::size_t latents) {
  switch (tag.kind) {
    case VariableTag::Kind::kSem: return m.sem;
    case VariableTag::Kind::kSyn:
      if (m.syn.empty()) throw UsageError("this model has no z_syn variable");
      return m.syn;
    case VariableTag::Kind::kWhole: {
      Embedding e = m.sem;
      e.insert(e.end(), m.syn.begin(), m.syn.end());
      return e;
    }
    case VariableTag::Kind::kSlot: {
      if (tag.slot < 1 || tag.slot > latents) throw UsageError("latent slot out of range");
      const std::size_t w = m.sem.size() / latents;
      const auto first = m.sem.begin() + static_cast<std::ptrdiff_t>((tag.slot - 1) * w);
      return Embedding(first, first + static_cast<std::ptrdiff_t>(w));
    }
  }
  return {};
}

/// Encodes every distinct sentence of `sentences` once (batched) and serves
/// embeddings by text.
template <typename T>
class EmbeddingCache {
 public:
  EmbeddingCache(const QkvaeModel<T>& model, const Vocab& vocab, const std::vector<std::string>& sentences)
      : latents_(model.config().latents) {
    std::vector<std::string> keys;
    std::vector<TokenSeq> seqs;
    for (const auto& s : sentences) {
      if (index_.count(s)) continue;
      TokenSeq t = vocab.tokenize(s);
      if (t.empty()) throw DataError("cannot embed an empty sentence");
      if (t.size() > model.config().max_len) t.resize(model.config().max_len);
      index_.emplace(s, keys.size());
      keys.push_back(s);
      seqs.push_back(std::move(t));
    }
    means_ = posterior_means(model, seqs);
  }

  Embedding operator()(const std::string& sentence, const VariableTag& tag) const {
    auto it = index_.find(sentence);
    if (it == index_.end()) throw DataError("sentence was not encoded: " + sentence);
    return select_embedding(means_[it->second], tag, latents_);
  }

 private:
  std::size_t latents_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<SentenceMeans> means_;
};

inline std::vector<std::string> triplet_sentences(std::span<const TripletRecord> triplets) {
  std::vector<std::string> out;
  for (const auto& t : triplets) {
    out.push_back(t.target);
    out.push_back(t.sem_src);
    out.push_back(t.syn_src);
  }
  return out;
}

template <typename T>
double separation_probability(const QkvaeModel<T>& model, const Vocab& vocab, std::span<const TripletRecord> triplets,
                              const VariableTag& tag, Metric metric) {
  const EmbeddingCache<T> cache(model, vocab, triplet_sentences(triplets));
  return separation_probability(triplets, [&](const std::string& s) { return cache(s, tag); }, metric);
}

// ---------------------------------------------------------------------------
// Generation protocols

/// Share of target tokens (EOS included) that are the argmax of the
/// teacher-forced logits, decoding from posterior means.
template <typename T>
double teacher_forced_accuracy(const QkvaeModel<T>& model, std::span<const TokenSeq> seqs, std::size_t batch_size = 64) {
  NoGradScope<T> no_grad;
  std::size_t hit = 0, total = 0;
  const std::size_t vocab = model.config().vocab_size;
  for (std::size_t begin = 0; begin < seqs.size(); begin += batch_size) {
    const TokenBatch batch = make_batch(seqs.subspan(begin, std::min(batch_size, seqs.size() - begin)), model.config().max_len);
    const Tensor<T> logits = model.teacher_forced_logits(model.means(model.encode(batch)), batch);
    const auto l = logits.data();
    const std::vector<int> targets = batch.decoder_targets();
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] == kPad) continue;
      const auto row = l.subspan(r * vocab, vocab);
      hit += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == targets[r];
      ++total;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

/// Greedy decoding from the posterior means of each sequence.
template <typename T>
std::vector<TokenSeq> reconstruct(const QkvaeModel<T>& model, std::span<const TokenSeq> seqs) {
  NoGradScope<T> no_grad;
  const Posteriors<T> p = model.encode(make_batch(seqs, model.config().max_len));
  return model.generate(model.means(p), DecodeStrategy::greedy(), model.config().max_len);
}

/// Greedy decoding from z_sem of sem[i] and z_syn of syn[i].
template <typename T>
std::vector<TokenSeq> transfer(const QkvaeModel<T>& model, std::span<const TokenSeq> sem, std::span<const TokenSeq> syn) {
  if (model.config().mode != ModelMode::kQkvae) throw UsageError("transfer needs a QKVAE model (use advae_transfer)");
  if (sem.size() != syn.size()) throw UsageError("transfer: sem and syn batches differ in size");
  NoGradScope<T> no_grad;
  const Posteriors<T> ps = model.encode(make_batch(sem, model.config().max_len));
  const Posteriors<T> py = model.encode(make_batch(syn, model.config().max_len));
  return model.generate(LatentCode<T>{ps.sem.mean, py.syn->mean}, DecodeStrategy::greedy(), model.config().max_len);
}

template <typename T>
TokenSeq transfer(const QkvaeModel<T>& model, const TokenSeq& sem, const TokenSeq& syn) {
  return transfer(model, std::span<const TokenSeq>(&sem, 1), std::span<const TokenSeq>(&syn, 1)).front();
}

/// ADVAE transfer: all slots from sem[i] except `syn_slot` (1-based), taken
/// from syn[i].
template <typename T>
std::vector<TokenSeq> advae_transfer(const QkvaeModel<T>& model, std::span<const TokenSeq> sem,
                                     std::span<const TokenSeq> syn, std::size_t syn_slot) {
  const std::size_t latents = model.config().latents;
  if (syn_slot < 1 || syn_slot > latents) throw UsageError("syntactic slot out of range");
  if (sem.size() != syn.size()) throw UsageError("transfer: sem and syn batches differ in size");
  NoGradScope<T> no_grad;
  const Posteriors<T> ps = model.encode(make_batch(sem, model.config().max_len));
  const Posteriors<T> py = model.encode(make_batch(syn, model.config().max_len));
  Tensor<T> z = ps.sem.mean.clone();
  const std::size_t w = z.dim(2);
  auto dst = z.mutable_data();
  auto src = py.sem.mean.data();
  for (std::size_t b = 0; b < z.dim(0); ++b) {
    const std::size_t off = (b * latents + syn_slot - 1) * w;
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(off), w, dst.begin() + static_cast<std::ptrdiff_t>(off));
  }
  return model.generate(LatentCode<T>{z, {}}, DecodeStrategy::greedy(), model.config().max_len);
}

/// Greedy decodes of (1 - a) z_a + a z_b for `steps` evenly spaced a in
/// [0, 1], over both z_sem and z_syn.
template <typename T>
std::vector<TokenSeq> interpolate(const QkvaeModel<T>& model, const TokenSeq& a, const TokenSeq& b, std::size_t steps) {
  if (steps < 2) throw UsageError("interpolate needs at least 2 steps");
  NoGradScope<T> no_grad;
  const LatentCode<T> za = model.means(model.encode(a)), zb = model.means(model.encode(b));
  auto mix = [](const Tensor<T>& x, const Tensor<T>& y, T alpha) {
    if (!x.defined()) return x;
    return add(scale(x, T(1) - alpha), scale(y, alpha));
  };
  std::vector<TokenSeq> out;
  for (std::size_t k = 0; k < steps; ++k) {
    const T alpha = static_cast<T>(k) / static_cast<T>(steps - 1);
    const LatentCode<T> z{mix(za.sem, zb.sem, alpha), mix(za.syn, zb.syn, alpha)};
    out.push_back(model.generate(z, DecodeStrategy::greedy(), model.config().max_len).front());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Syntactic transfer scores

/// One bracketed parse per line (blank lines skipped).
inline std::vector<ConstTree> load_trees(const std::string& path) {
  std::vector<ConstTree> out;
  detail::for_each_line(path, [&](std::size_t n, const std::string& line) {
    if (detail::blank(line)) return;
    try {
      out.push_back(parse_bracketed(line));
    } catch (const TreeParseError& e) {
      throw DataError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  });
  return out;
}

/// Finds the parse of a sentence: first among known trees (keyed by their
/// normalized yield), then by recognizing it with a synthetic grammar.
class TreeLookup {
 public:
  TreeLookup() = default;
  explicit TreeLookup(const std::vector<ConstTree>& trees, std::optional<SynthGrammar> grammar = std::nullopt)
      : grammar_(std::move(grammar)) {
    for (const auto& t : trees) add(t);
  }

  void add(const ConstTree& t) {
    std::string key;
    for (const auto& w : tree_yield(t)) key += (key.empty() ? "" : " ") + w;
    by_yield_.emplace(normalize_text(key), t);
  }

  void set_grammar(SynthGrammar g) { grammar_ = std::move(g); }

  std::optional<ConstTree> find(const std::string& sentence) const {
    const std::string key = normalize_text(sentence);
    if (auto it = by_yield_.find(key); it != by_yield_.end()) return it->second;
    if (grammar_) {
      if (auto s = grammar_->parse(split_words(key))) return s->tree;
    }
    return std::nullopt;
  }

 private:
  std::map<std::string, ConstTree> by_yield_;
  std::optional<SynthGrammar> grammar_;
};

struct SyntaxScores {
  double sted = 0;
  bool tma2 = false;
  bool tma3 = false;
};

/// STED and template matches between two parses, words removed.
inline SyntaxScores syntax_scores(const ConstTree& a, const ConstTree& b) {
  const ConstTree sa = strip_terminals(a), sb = strip_terminals(b);
  return {static_cast<double>(tree_edit_distance(sa, sb)), template_match(sa, sb, 2), template_match(sa, sb, 3)};
}

struct TransferCase {
  std::string sem_src;
  std::string syn_src;
  std::string target;
  std::string output;
  // Scores of the output against each reference; empty when a parse is missing.
  std::optional<SyntaxScores> vs_sem, vs_syn, vs_target;
};

inline void score_transfer(TransferCase& c, const TreeLookup& trees) {
  const auto out = trees.find(c.output);
  auto score = [&](const std::string& ref) -> std::optional<SyntaxScores> {
    const auto t = trees.find(ref);
    if (!out || !t) return std::nullopt;
    return syntax_scores(*out, *t);
  };
  c.vs_sem = score(c.sem_src);
  c.vs_syn = score(c.syn_src);
  c.vs_target = score(c.target);
}

/// Column means per reference. STED averages over parsed outputs; TMA
/// counts an unparsed output as a mismatch.
struct TransferSummary {
  std::size_t cases = 0;
  std::size_t parsed = 0;
  double sted[3] = {0, 0, 0};
  double tma2[3] = {0, 0, 0};
  double tma3[3] = {0, 0, 0};
};

inline TransferSummary summarize_transfer(std::span<const TransferCase> cases) {
  TransferSummary s;
  s.cases = cases.size();
  std::size_t scored[3] = {0, 0, 0};
  for (const auto& c : cases) {
    const std::optional<SyntaxScores>* refs[3] = {&c.vs_sem, &c.vs_syn, &c.vs_target};
    if (c.vs_syn) ++s.parsed;
    for (int r = 0; r < 3; ++r) {
      if (!*refs[r]) continue;
      ++scored[r];
      s.sted[r] += (*refs[r])->sted;
      s.tma2[r] += (*refs[r])->tma2;
      s.tma3[r] += (*refs[r])->tma3;
    }
  }
  for (int r = 0; r < 3; ++r) {
    if (scored[r]) s.sted[r] /= static_cast<double>(scored[r]);
    if (s.cases) {
      s.tma2[r] *= 100.0 / static_cast<double>(s.cases);
      s.tma3[r] *= 100.0 / static_cast<double>(s.cases);
    }
  }
  return s;
}

/// Per-case rows, then a mean row; columns grouped by reference (sem_src,
/// syn_src, target) as STED, TMA2, TMA3.
inline std::string transfer_report(std::span<const TransferCase> cases) {
  std::ostringstream out;
  out << "sem_src\tsyn_src\ttarget\toutput";
  for (const char* ref : {"sem", "syn", "target"}) out << '\t' << ref << "_sted\t" << ref << "_tma2\t" << ref << "_tma3";
  out << '\n';
  for (const auto& c : cases) {
    out << c.sem_src << '\t' << c.syn_src << '\t' << c.target << '\t' << c.output;
    for (const auto* r : {&c.vs_sem, &c.vs_syn, &c.vs_target}) {
      if (*r)
        out << '\t' << (*r)->sted << '\t' << int((*r)->tma2) << '\t' << int((*r)->tma3);
      else
        out << "\tNA\tNA\tNA";
    }
    out << '\n';
  }
  const TransferSummary s = summarize_transfer(cases);
  out << std::fixed << std::setprecision(2) << "MEAN\t\t\tparsed " << s.parsed << '/' << s.cases;
  for (int r = 0; r < 3; ++r) out << '\t' << s.sted[r] << '\t' << s.tma2[r] << '\t' << s.tma3[r];
  out << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Precomputed similarity scores and significance

/// (id_a, id_b, score) rows. Lookup is order-insensitive.
class SimilarityTable {
 public:
  static SimilarityTable load(const std::string& path) {
    SimilarityTable t;
    detail::for_each_line(path, [&](std::size_t n, const std::string& line) {
      if (detail::blank(line)) return;
      std::vector<std::string> cols;
      std::string col;
      std::istringstream ss(line);
      while (std::getline(ss, col, '\t')) cols.push_back(col);
      if (cols.size() != 3)
        throw DataError(path + ":" + std::to_string(n) + ": expected id_a, id_b, score separated by tabs");
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(cols[2], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cols[2].size() || !std::isfinite(v))
        throw DataError(path + ":" + std::to_string(n) + ": score '" + cols[2] + "' is not a finite number");
      t.scores_[key(cols[0], cols[1])] = v;
    });
    return t;
  }

  std::optional<double> get(const std::string& a, const std::string& b) const {
    auto it = scores_.find(key(a, b));
    if (it == scores_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t size() const { return scores_.size(); }

 private:
  static std::pair<std::string, std::string> key(const std::string& a, const std::string& b) {
    return a < b ? std::make_pair(a, b) : std::make_pair(b, a);
  }
  std::map<std::pair<std::string, std::string>, double> scores_;
};

struct TTestResult {
  double mean_diff = 0;
  double t = 0;
  std::size_t df = 0;
  double p_value = 1;  // two-sided
};

/// Paired t-test on a[i] - b[i].
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("paired_t_test: score vectors differ in length");
  if (a.size() < 2) throw DataError("paired_t_test needs at least 2 pairs");
  const std::size_t n = a.size();
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  TTestResult r;
  r.mean_diff = mean;
  r.df = n - 1;
  const double se = std::sqrt(ss / static_cast<double>(n - 1) / static_cast<double>(n));
  if (se == 0) {
    r.t = mean == 0 ? 0.0 : std::copysign(INFINITY, mean);
    r.p_value = mean == 0 ? 1.0 : 0.0;
    return r;
  }
  r.t = mean / se;
  const boost::math::students_t dist(static_cast<double>(r.df));
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t)));
  return r;
}

}  // namespace qkvae
