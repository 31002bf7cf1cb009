#pragma once

// Labeled ordered trees: Penn-style bracket parsing/printing, truncation,
// template matching and Zhang-Shasha tree edit distance.

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "qkvae/errors.hpp"

namespace qkvae {

struct ConstTree {
  std::string label;
  std::vector<ConstTree> children;
  bool terminal = false;  // bare word in the bracketing, not "(label)"

  std::size_t size() const {
    std::size_t n = 1;
    for (const auto& c : children) n += c.size();
    return n;
  }

  std::size_t depth() const {
    std::size_t d = 0;
    for (const auto& c : children) d = std::max(d, c.depth());
    return d + 1;
  }

  /// Label-and-shape equality (the terminal flag is ignored).
  friend bool same_tree(const ConstTree& a, const ConstTree& b) {
    if (a.label != b.label || a.children.size() != b.children.size()) return false;
    for (std::size_t i = 0; i < a.children.size(); ++i)
      if (!same_tree(a.children[i], b.children[i])) return false;
    return true;
  }
};

class TreeParseError : public DataError {
 public:
  TreeParseError(const std::string& what, std::size_t offset)
      : DataError("bracket parse error at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

namespace detail {

class BracketParser {
 public:
  explicit BracketParser(std::string_view text) : s_(text) {}

  ConstTree parse() {
    skip_space();
    if (pos_ >= s_.size()) throw TreeParseError("empty input", pos_);
    if (s_[pos_] != '(') throw TreeParseError("expected '('", pos_);
    ConstTree t = node();
    skip_space();
    if (pos_ != s_.size()) throw TreeParseError("trailing characters after tree", pos_);
    return t;
  }

 private:
  static bool is_delim(char c) { return c == '(' || c == ')' || std::isspace(static_cast<unsigned char>(c)); }

  void skip_space() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  std::string word() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && !is_delim(s_[pos_])) ++pos_;
    return std::string(s_.substr(start, pos_ - start));
  }

  ConstTree node() {
    const std::size_t open = pos_;
    ++pos_;  // '('
    skip_space();
    if (pos_ >= s_.size()) throw TreeParseError("unbalanced '(' opened here", open);
    if (s_[pos_] == ')' || s_[pos_] == '(') throw TreeParseError("empty bracket label", pos_);
    ConstTree t;
    t.label = word();
    while (true) {
      skip_space();
      if (pos_ >= s_.size()) throw TreeParseError("unbalanced '(' opened at byte " + std::to_string(open), pos_);
      if (s_[pos_] == ')') {
        ++pos_;
        return t;
      }
      if (s_[pos_] == '(') {
        t.children.push_back(node());
      } else {
        ConstTree leaf;
        leaf.label = word();
        leaf.terminal = true;
        t.children.push_back(std::move(leaf));
      }
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

inline void print_tree(const ConstTree& t, std::string& out) {
  if (t.terminal && t.children.empty()) {
    out += t.label;
    return;
  }
  out += '(';
  out += t.label;
  for (const auto& c : t.children) {
    out += ' ';
    print_tree(c, out);
  }
  out += ')';
}

inline void collect_leaves(const ConstTree& t, std::vector<std::string>& out) {
  if (t.children.empty()) {
    if (t.terminal) out.push_back(t.label);
    return;
  }
  for (const auto& c : t.children) collect_leaves(c, out);
}

}  // namespace detail

/// Parses "(S (NP (DT the) (NN child)) (VP ...))". A parenthesized node may
/// have no children ("(B)"); bare words become terminal leaves.
inline ConstTree parse_bracketed(std::string_view text) { return detail::BracketParser(text).parse(); }

inline std::string to_bracketed(const ConstTree& t) {
  std::string out;
  detail::print_tree(t, out);
  return out;
}

/// Terminal words, left to right.
inline std::vector<std::string> tree_yield(const ConstTree& t) {
  std::vector<std::string> out;
  detail::collect_leaves(t, out);
  return out;
}

/// Removes terminal words, leaving the labeled constituent/POS skeleton.
inline ConstTree strip_terminals(const ConstTree& t) {
  ConstTree out;
  out.label = t.label;
  for (const auto& c : t.children)
    if (!c.terminal) out.children.push_back(strip_terminals(c));
  return out;
}

/// Keeps nodes at levels 1..depth, the root being level 1.
inline ConstTree truncate_tree(const ConstTree& t, std::size_t depth) {
  ConstTree out;
  out.label = t.label;
  out.terminal = t.terminal;
  if (depth > 1)
    for (const auto& c : t.children) out.children.push_back(truncate_tree(c, depth - 1));
  return out;
}

/// True iff both trees truncated at `depth` are label-and-shape identical.
inline bool template_match(const ConstTree& a, const ConstTree& b, std::size_t depth) {
  if (depth == 0) throw UsageError("template_match: depth must be >= 1");
  return same_tree(truncate_tree(a, depth), truncate_tree(b, depth));
}

namespace detail {

// Postorder arrays for Zhang-Shasha: labels[i] and leftmost leaf descendant
// lld[i] of node i (0-based postorder).
struct PostorderTree {
  std::vector<std::string> labels;
  std::vector<std::size_t> lld;

  explicit PostorderTree(const ConstTree& t) { walk(t); }

  std::size_t walk(const ConstTree& t) {
    std::size_t first = labels.size();
    bool have_first = false;
    for (const auto& c : t.children) {
      const std::size_t child_lld = walk(c);
      if (!have_first) {
        first = child_lld;
        have_first = true;
      }
    }
    labels.push_back(t.label);
    lld.push_back(have_first ? first : labels.size() - 1);
    return lld.back();
  }

  std::vector<std::size_t> keyroots() const {
    // Nodes whose leftmost leaf differs from their parent's: the highest node
    // for each distinct lld value.
    std::vector<std::size_t> roots;
    std::vector<bool> seen(labels.size(), false);
    for (std::size_t i = labels.size(); i-- > 0;) {
      if (!seen[lld[i]]) {
        roots.push_back(i);
        seen[lld[i]] = true;
      }
    }
    std::sort(roots.begin(), roots.end());
    return roots;
  }
};

}  // namespace detail

/// Ordered tree edit distance with unit insert/delete/relabel costs
/// (Zhang & Shasha 1989).
inline std::size_t tree_edit_distance(const ConstTree& a, const ConstTree& b) {
  const detail::PostorderTree ta(a), tb(b);
  const std::size_t n = ta.labels.size(), m = tb.labels.size();
  std::vector<std::size_t> td(n * m, 0);
  std::vector<std::size_t> fd((n + 1) * (m + 1), 0);
  for (std::size_t i : ta.keyroots()) {
    for (std::size_t j : tb.keyroots()) {
      const std::size_t li = ta.lld[i], lj = tb.lld[j];
      const std::size_t rows = i - li + 2, cols = j - lj + 2;
      // fd[x][y]: forest distance between a[li..li+x-1] and b[lj..lj+y-1].
      auto at = [&](std::size_t x, std::size_t y) -> std::size_t& { return fd[x * cols + y]; };
      at(0, 0) = 0;
      for (std::size_t x = 1; x < rows; ++x) at(x, 0) = at(x - 1, 0) + 1;
      for (std::size_t y = 1; y < cols; ++y) at(0, y) = at(0, y - 1) + 1;
      for (std::size_t x = 1; x < rows; ++x) {
        for (std::size_t y = 1; y < cols; ++y) {
          const std::size_t ni = li + x - 1, nj = lj + y - 1;
          const std::size_t del = at(x - 1, y) + 1, ins = at(x, y - 1) + 1;
          if (ta.lld[ni] == li && tb.lld[nj] == lj) {
            const std::size_t rel = at(x - 1, y - 1) + (ta.labels[ni] == tb.labels[nj] ? 0 : 1);
            at(x, y) = std::min({del, ins, rel});
            td[ni * m + nj] = at(x, y);
          } else {
            const std::size_t px = ta.lld[ni] - li, py = tb.lld[nj] - lj;
            at(x, y) = std::min({del, ins, at(px, py) + td[ni * m + nj]});
          }
        }
      }
    }
  }
  return td[(n - 1) * m + (m - 1)];
}

}  // namespace qkvae
