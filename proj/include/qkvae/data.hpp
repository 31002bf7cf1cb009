#pragma once

// Tokenization, corpus/triplet ingestion, and the synthetic template grammar
// whose sentences carry ground-truth syntax (template) and semantics
// (content) labels.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qkvae/errors.hpp"
#include "qkvae/token_batch.hpp"
#include "qkvae/tree.hpp"

namespace qkvae {

// ---------------------------------------------------------------------------
// Tokenization

/// Lowercased word-level tokens; ASCII punctuation characters are split off
/// as single-character tokens. Non-ASCII bytes are kept inside words.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

/// Tokens joined by single spaces.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

class Vocab {
 public:
  Vocab() {
    for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add(t);
  }

  int add(const std::string& token) {
    if (auto it = ids_.find(token); it != ids_.end()) return it->second;
    const int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
  }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return tokens_.size(); }

  /// Token ids of `text`; out-of-vocabulary words map to UNK.
  TokenSeq tokenize(std::string_view text) const {
    TokenSeq out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

  /// Space-joined tokens; reserved ids other than UNK are skipped.
  std::string detokenize(const TokenSeq& seq) const {
    std::string out;
    for (int id : seq) {
      if (id == kPad || id == kBos || id == kEos) continue;
      if (!out.empty()) out += ' ';
      out += token(id);
    }
    return out;
  }

  static Vocab build(const std::vector<std::string>& sentences) {
    Vocab v;
    for (const auto& s : sentences)
      for (const auto& w : split_words(s)) v.add(w);
    return v;
  }

  /// One token per line, line index == id.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary " + path);
    Vocab v;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (n < static_cast<std::size_t>(kReservedTokens)) {
        if (line != v.tokens_[n]) throw DataError(path + ":" + std::to_string(n + 1) + ": reserved token mismatch");
      } else if (v.add(line) != static_cast<int>(n)) {
        throw DataError(path + ":" + std::to_string(n + 1) + ": duplicate token '" + line + "'");
      }
      ++n;
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// ---------------------------------------------------------------------------
// Files

inline bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) || cp > 0x10FFFF ||
        (cp >= 0xD800 && cp <= 0xDFFF))
      return false;
    i += len;
  }
  return true;
}

namespace detail {

// Calls fn(line_number, line) for each line with any trailing CR removed.
template <typename Fn>
void for_each_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!valid_utf8(line)) throw DataError(path + ":" + std::to_string(n) + ": invalid UTF-8");
    fn(n, line);
  }
  if (in.bad()) throw DataError("error while reading " + path);
}

inline bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

}  // namespace detail

/// One sentence per line; blank lines are skipped.
inline std::vector<std::string> load_corpus(const std::string& path) {
  std::vector<std::string> out;
  detail::for_each_line(path, [&](std::size_t, const std::string& line) {
    if (!detail::blank(line)) out.push_back(line);
  });
  return out;
}

struct TripletRecord {
  std::string target;
  std::string sem_src;  // paraphrase of target
  std::string syn_src;  // syntactically similar to target
};

/// Tab-separated target, sem_src, syn_src. Fields cannot contain tabs (no
/// quoting).
inline std::vector<TripletRecord> load_triplets(const std::string& path, bool has_header = false) {
  std::vector<TripletRecord> out;
  detail::for_each_line(path, [&](std::size_t n, const std::string& line) {
    if (has_header && n == 1) return;
    if (detail::blank(line)) return;
    std::vector<std::string> cols;
    std::string col;
    std::istringstream ss(line);
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (!line.empty() && line.back() == '\t') cols.emplace_back();
    if (cols.size() != 3)
      throw DataError(path + ":" + std::to_string(n) + ": expected 3 tab-separated columns, found " +
                      std::to_string(cols.size()));
    for (const auto& c : cols)
      if (detail::blank(c)) throw DataError(path + ":" + std::to_string(n) + ": empty column");
    out.push_back({cols[0], cols[1], cols[2]});
  });
  return out;
}

inline void write_triplets(const std::string& path, const std::vector<TripletRecord>& triplets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& t : triplets) out << t.target << '\t' << t.sem_src << '\t' << t.syn_src << '\n';
}

// ---------------------------------------------------------------------------
// Synthetic grammar

/// A slot type with its lexicon; each entry lists its word forms (form 0 is
/// the citation form used in content labels).
struct SlotType {
  std::string name;
  std::vector<std::vector<std::string>> entries;
};

/// Bracketed tree whose leaves may be slot references "{name}" or
/// "{name.form}".
struct SynthTemplate {
  std::string name;
  ConstTree pattern;
};

struct SynthSpec {
  std::vector<SynthTemplate> templates;
  std::vector<SlotType> slots;
  std::uint64_t seed = 13;

  /// Line format: "seed N", "slot NAME form/form/.. form/..", "template NAME
  /// (BRACKETED TREE)"; '#' starts a comment line.
  static SynthSpec parse(std::string_view text);
  static SynthSpec default_spec();
  std::string to_text() const;
};

struct SynthSentence {
  std::string text;
  std::size_t template_id = 0;
  std::vector<std::size_t> content;  // lexicon entry per slot type
  ConstTree tree;
};

struct SynthTriplet {
  SynthSentence target;
  SynthSentence sem_src;  // same content, different template
  SynthSentence syn_src;  // same template, every slot different
};

struct SynthCorpus {
  std::vector<SynthSentence> sentences;
  std::vector<SynthTriplet> triplets;  // targets never occur in `sentences`
};

/// Realizes and recognizes sentences of a SynthSpec.
class SynthGrammar {
 public:
  explicit SynthGrammar(SynthSpec spec);

  const SynthSpec& spec() const { return spec_; }
  std::size_t template_count() const { return spec_.templates.size(); }
  std::size_t content_count() const;

  SynthSentence realize(std::size_t template_id, const std::vector<std::size_t>& content) const;

  /// Recovers (template, content, tree) from a token sequence, if the
  /// sentence belongs to the grammar.
  std::optional<SynthSentence> parse(const std::vector<std::string>& words) const;

  /// "agent|verb|patient" style label of citation forms.
  std::string content_label(const std::vector<std::size_t>& content) const;

 private:
  struct SlotRef {
    std::size_t slot;
    std::size_t form;
  };
  struct Leaf {
    std::string literal;
    std::optional<SlotRef> ref;
  };

  static std::optional<SlotRef> read_ref(const std::string& label, const SynthSpec& spec, const std::string& tmpl);
  ConstTree fill(const ConstTree& node, const std::vector<std::size_t>& content) const;

  SynthSpec spec_;
  std::vector<std::vector<Leaf>> leaves_;  // per template
};

/// Samples `n` distinct (template, content) sentences and `n_triplets`
/// evaluation triplets whose targets are disjoint from the corpus.
inline SynthCorpus gen_synthetic(const SynthSpec& spec, std::size_t n, std::size_t n_triplets);

// ---------------------------------------------------------------------------
// Implementation

inline std::optional<SynthGrammar::SlotRef> SynthGrammar::read_ref(const std::string& label, const SynthSpec& spec,
                                                                   const std::string& tmpl) {
  if (label.size() < 3 || label.front() != '{' || label.back() != '}') return std::nullopt;
  std::string body = label.substr(1, label.size() - 2);
  std::size_t form = 0;
  if (auto dot = body.find('.'); dot != std::string::npos) {
    try {
      form = std::stoul(body.substr(dot + 1));
    } catch (const std::exception&) {
      throw DataError("template '" + tmpl + "': bad slot form in " + label);
    }
    body = body.substr(0, dot);
  }
  for (std::size_t s = 0; s < spec.slots.size(); ++s) {
    if (spec.slots[s].name != body) continue;
    if (spec.slots[s].entries.empty()) throw DataError("slot type '" + body + "' has an empty lexicon");
    for (const auto& e : spec.slots[s].entries)
      if (form >= e.size())
        throw DataError("template '" + tmpl + "': slot " + label + " asks for a form missing from the lexicon");
    return SlotRef{s, form};
  }
  throw DataError("template '" + tmpl + "' uses undeclared slot type '" + body + "'");
}

inline SynthGrammar::SynthGrammar(SynthSpec spec) : spec_(std::move(spec)) {
  if (spec_.templates.empty()) throw DataError("synthetic spec has no templates");
  if (spec_.slots.empty()) throw DataError("synthetic spec has no slot types");
  for (const auto& s : spec_.slots)
    if (s.entries.empty()) throw DataError("slot type '" + s.name + "' has an empty lexicon");
  for (const auto& t : spec_.templates) {
    std::vector<Leaf> leaves;
    for (const auto& w : tree_yield(t.pattern)) leaves.push_back(Leaf{w, read_ref(w, spec_, t.name)});
    leaves_.push_back(std::move(leaves));
  }
}

inline std::size_t SynthGrammar::content_count() const {
  std::size_t n = 1;
  for (const auto& s : spec_.slots) n *= s.entries.size();
  return n;
}

inline std::string SynthGrammar::content_label(const std::vector<std::size_t>& content) const {
  std::string out;
  for (std::size_t s = 0; s < content.size(); ++s) {
    if (s) out += '|';
    out += spec_.slots[s].entries[content[s]][0];
  }
  return out;
}

inline ConstTree SynthGrammar::fill(const ConstTree& node, const std::vector<std::size_t>& content) const {
  ConstTree out;
  out.terminal = node.terminal;
  out.label = node.label;
  if (node.terminal)
    if (auto ref = read_ref(node.label, spec_, "")) out.label = spec_.slots[ref->slot].entries[content[ref->slot]][ref->form];
  for (const auto& c : node.children) out.children.push_back(fill(c, content));
  return out;
}

inline SynthSentence SynthGrammar::realize(std::size_t template_id, const std::vector<std::size_t>& content) const {
  if (template_id >= spec_.templates.size()) throw DataError("template id out of range");
  if (content.size() != spec_.slots.size()) throw DataError("content tuple arity mismatch");
  SynthSentence s;
  s.template_id = template_id;
  s.content = content;
  s.tree = fill(spec_.templates[template_id].pattern, content);
  for (const auto& w : tree_yield(s.tree)) {
    if (!s.text.empty()) s.text += ' ';
    s.text += w;
  }
  return s;
}

inline std::optional<SynthSentence> SynthGrammar::parse(const std::vector<std::string>& words) const {
  for (std::size_t t = 0; t < leaves_.size(); ++t) {
    const auto& pat = leaves_[t];
    if (pat.size() != words.size()) continue;
    std::vector<std::optional<std::size_t>> content(spec_.slots.size());
    bool ok = true;
    for (std::size_t i = 0; ok && i < pat.size(); ++i) {
      if (!pat[i].ref) {
        ok = pat[i].literal == words[i];
        continue;
      }
      const auto [slot, form] = *pat[i].ref;
      const auto& entries = spec_.slots[slot].entries;
      std::optional<std::size_t> hit;
      for (std::size_t e = 0; e < entries.size(); ++e) {
        if (entries[e][form] != words[i]) continue;
        if (content[slot] && *content[slot] != e) continue;
        hit = e;
        break;
      }
      if (!hit) ok = false;
      else content[slot] = hit;
    }
    if (!ok) continue;
    std::vector<std::size_t> c(spec_.slots.size(), 0);
    for (std::size_t s = 0; s < c.size(); ++s) c[s] = content[s].value_or(0);
    return realize(t, c);
  }
  return std::nullopt;
}

inline SynthSpec SynthSpec::parse(std::string_view text) {
  SynthSpec spec;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line.substr(first));
    std::string kind, name;
    ls >> kind;
    auto where = [&] { return "synthetic spec line " + std::to_string(n) + ": "; };
    if (kind == "seed") {
      if (!(ls >> spec.seed)) throw DataError(where() + "expected an integer seed");
    } else if (kind == "slot") {
      if (!(ls >> name)) throw DataError(where() + "slot needs a name");
      SlotType slot{name, {}};
      std::string entry;
      while (ls >> entry) {
        std::vector<std::string> forms;
        std::string f;
        std::istringstream es(entry);
        while (std::getline(es, f, '/')) forms.push_back(f);
        if (forms.empty() || std::any_of(forms.begin(), forms.end(), [](const auto& x) { return x.empty(); }))
          throw DataError(where() + "empty word form in '" + entry + "'");
        slot.entries.push_back(std::move(forms));
      }
      if (slot.entries.empty()) throw DataError(where() + "slot type '" + name + "' has an empty lexicon");
      spec.slots.push_back(std::move(slot));
    } else if (kind == "template") {
      if (!(ls >> name)) throw DataError(where() + "template needs a name");
      std::string rest;
      std::getline(ls, rest);
      try {
        spec.templates.push_back({name, parse_bracketed(rest)});
      } catch (const TreeParseError& e) {
        throw DataError(where() + e.what());
      }
    } else {
      throw DataError(where() + "unknown directive '" + kind + "'");
    }
  }
  SynthGrammar check(spec);  // validates slot references
  return spec;
}

inline std::string SynthSpec::to_text() const {
  std::ostringstream out;
  out << "seed " << seed << '\n';
  for (const auto& s : slots) {
    out << "slot " << s.name;
    for (const auto& e : s.entries) {
      out << ' ';
      for (std::size_t i = 0; i < e.size(); ++i) out << (i ? "/" : "") << e[i];
    }
    out << '\n';
  }
  for (const auto& t : templates) out << "template " << t.name << ' ' << to_bracketed(t.pattern) << '\n';
  return out.str();
}

inline SynthSpec SynthSpec::default_spec() {
  static constexpr std::string_view kDefault = R"(# 12 templates x 20 agents x 20 verbs x 20 patients
seed 13
slot agent child woman man girl boy teacher doctor farmer student artist soldier king queen baker nurse pilot singer driver writer sailor
slot verb wear/wears/worn read/reads/read write/writes/written drive/drives/driven build/builds/built sing/sings/sung bake/bakes/baked paint/paints/painted throw/throws/thrown open/opens/opened break/breaks/broken sell/sells/sold buy/buys/bought find/finds/found see/sees/seen take/takes/taken hide/hides/hidden carry/carries/carried clean/cleans/cleaned steal/steals/stolen
slot patient cloak book letter car house song cake picture ball door window ship horse garden bridge coat hat boat table lamp
template active (S (NP (DT the) (NN {agent})) (VP (VBZ {verb.1}) (NP (DT the) (NN {patient}))) (. .))
template passive (S (NP (DT the) (NN {patient})) (VP (VBZ is) (VP (VBN {verb.2}) (PP (IN by) (NP (DT the) (NN {agent}))))) (. .))
template question_active (SQ (VBZ does) (NP (DT the) (NN {agent})) (VP (VB {verb.0}) (NP (DT the) (NN {patient}))) (. ?))
template question_passive (SQ (VBZ is) (NP (DT the) (NN {patient})) (VP (VBN {verb.2}) (PP (IN by) (NP (DT the) (NN {agent})))) (. ?))
template negated_active (S (NP (DT the) (NN {agent})) (VP (VBZ does) (RB not) (VP (VB {verb.0}) (NP (DT the) (NN {patient})))) (. .))
template negated_passive (S (NP (DT the) (NN {patient})) (VP (VBZ is) (RB not) (VP (VBN {verb.2}) (PP (IN by) (NP (DT the) (NN {agent}))))) (. .))
template fronted_active (S (ADVP (RB today)) (, ,) (NP (DT the) (NN {agent})) (VP (VBZ {verb.1}) (NP (DT the) (NN {patient}))) (. .))
template fronted_passive (S (ADVP (RB today)) (, ,) (NP (DT the) (NN {patient})) (VP (VBZ is) (VP (VBN {verb.2}) (PP (IN by) (NP (DT the) (NN {agent}))))) (. .))
template cleft (S (NP (PRP it)) (VP (VBZ is) (NP (DT the) (NN {agent})) (SBAR (WHNP (WDT that)) (S (VP (VBZ {verb.1}) (NP (DT the) (NN {patient})))))) (. .))
template wh_question (SBARQ (WHNP (WDT which) (NN {agent})) (SQ (VP (VBZ {verb.1}) (NP (DT the) (NN {patient})))) (. ?))
template embedded (S (NP (PRP they)) (VP (VBP say) (SBAR (IN that) (S (NP (DT the) (NN {agent})) (VP (VBZ {verb.1}) (NP (DT the) (NN {patient})))))) (. .))
template topicalized (S (NP (DT the) (NN {patient})) (, ,) (NP (DT the) (NN {agent})) (VP (VBZ {verb.1})) (. .))
)";
  return parse(kDefault);
}

inline SynthCorpus gen_synthetic(const SynthSpec& spec, std::size_t n, std::size_t n_triplets) {
  if (n == 0) throw UsageError("gen_synthetic: n must be >= 1");
  SynthGrammar g(spec);
  const std::size_t contents = g.content_count(), templates = g.template_count();
  const std::size_t total = contents * templates;
  if (n + n_triplets > total)
    throw UsageError("gen_synthetic: asked for " + std::to_string(n + n_triplets) + " sentences but the grammar has " +
                     std::to_string(total));
  std::mt19937_64 rng(spec.seed);
  auto decode_content = [&](std::size_t c) {
    std::vector<std::size_t> out(spec.slots.size());
    for (std::size_t s = spec.slots.size(); s-- > 0;) {
      out[s] = c % spec.slots[s].entries.size();
      c /= spec.slots[s].entries.size();
    }
    return out;
  };
  // Sentence index = template * contents + content.
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  SynthCorpus out;
  for (std::size_t i = 0; i < n; ++i)
    out.sentences.push_back(g.realize(order[i] / contents, decode_content(order[i] % contents)));

  std::uniform_int_distribution<std::size_t> pick_template(0, templates - 1);
  for (std::size_t i = n; i < n + n_triplets; ++i) {
    const std::size_t tmpl = order[i] / contents;
    const auto content = decode_content(order[i] % contents);
    SynthTriplet t;
    t.target = g.realize(tmpl, content);
    std::size_t other = tmpl;
    while (templates > 1 && other == tmpl) other = pick_template(rng);
    t.sem_src = g.realize(other, content);
    std::vector<std::size_t> fresh(content.size());
    for (std::size_t s = 0; s < content.size(); ++s) {
      const std::size_t m = spec.slots[s].entries.size();
      std::uniform_int_distribution<std::size_t> pick(0, m - 1);
      fresh[s] = content[s];
      while (m > 1 && fresh[s] == content[s]) fresh[s] = pick(rng);
    }
    t.syn_src = g.realize(tmpl, fresh);
    out.triplets.push_back(std::move(t));
  }
  return out;
}

}  // namespace qkvae
