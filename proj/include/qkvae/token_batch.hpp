#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qkvae/errors.hpp"

namespace qkvae {

using TokenSeq = std::vector<int>;

// Reserved vocabulary ids.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;  // w_0
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kReservedTokens = 4;

/// Right-padded batch of token sequences (without BOS/EOS).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t width = 0;            // longest sequence
  std::vector<int> tokens;          // [batch, width], kPad beyond each length
  std::vector<std::size_t> lengths;

  /// Decoder input BOS w_1..w_n, [batch, width + 1].
  std::vector<int> decoder_inputs() const {
    std::vector<int> out(batch * (width + 1), kPad);
    for (std::size_t b = 0; b < batch; ++b) {
      out[b * (width + 1)] = kBos;
      for (std::size_t i = 0; i < lengths[b]; ++i) out[b * (width + 1) + i + 1] = tokens[b * width + i];
    }
    return out;
  }

  /// Decoder targets w_1..w_n EOS, [batch, width + 1], kPad where ignored.
  std::vector<int> decoder_targets() const {
    std::vector<int> out(batch * (width + 1), kPad);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < lengths[b]; ++i) out[b * (width + 1) + i] = tokens[b * width + i];
      out[b * (width + 1) + lengths[b]] = kEos;
    }
    return out;
  }

  std::size_t target_tokens() const {
    std::size_t n = 0;
    for (std::size_t l : lengths) n += l + 1;
    return n;
  }
};

/// Packs sequences into a padded batch. Every sequence must hold between 1 and
/// `max_len` tokens.
inline TokenBatch make_batch(std::span<const TokenSeq> seqs, std::size_t max_len) {
  if (seqs.empty()) throw DataError("empty batch");
  TokenBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) {
    if (s.empty()) throw DataError("cannot encode an empty token sequence");
    if (s.size() > max_len)
      throw DataError("sequence of " + std::to_string(s.size()) + " tokens exceeds max_len " + std::to_string(max_len));
    b.width = std::max(b.width, s.size());
    b.lengths.push_back(s.size());
  }
  b.tokens.assign(b.batch * b.width, kPad);
  for (std::size_t i = 0; i < seqs.size(); ++i) std::copy(seqs[i].begin(), seqs[i].end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.width));
  return b;
}

}  // namespace qkvae
