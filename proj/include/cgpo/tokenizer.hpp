#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "error.hpp"
#include "hash.hpp"

namespace cgpo {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

/// Character-level vocabulary: four special tokens followed by one token per
/// character of the arithmetic task alphabet. Ids are fixed by construction.
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr int kNumSpecial = 4;
  static constexpr std::string_view kAlphabet = "0123456789+-*()=\n# ";

  Tokenizer() {
    lookup_.fill(-1);
    for (std::size_t i = 0; i < kAlphabet.size(); ++i) {
      lookup_[static_cast<unsigned char>(kAlphabet[i])] =
          static_cast<TokenId>(kNumSpecial + i);
    }
  }

  int vocab_size() const { return kNumSpecial + static_cast<int>(kAlphabet.size()); }

  bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecial; }
  bool valid(TokenId id) const { return id >= 0 && id < vocab_size(); }

  Tokens tokenize(std::string_view text) const {
    Tokens out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      const TokenId id = lookup_[static_cast<unsigned char>(text[i])];
      if (id < 0) throw UnknownCharacterError(i, text[i]);
      out.push_back(id);
    }
    return out;
  }

  TokenId token_of(char ch) const {
    const TokenId id = lookup_[static_cast<unsigned char>(ch)];
    if (id < 0) throw UnknownCharacterError(0, ch);
    return id;
  }

  // Exact inverse of tokenize() on non-special ids; specials render as <NAME>.
  std::string detokenize(std::span<const TokenId> tokens) const {
    std::string out;
    out.reserve(tokens.size());
    for (TokenId id : tokens) out += piece(id);
    return out;
  }

  // Text of a generated completion: everything before the first EOS, with
  // other specials dropped.
  std::string completion_text(std::span<const TokenId> tokens) const {
    std::string out;
    for (TokenId id : tokens) {
      if (id == kEos) break;
      if (!is_special(id) && valid(id)) out += char_of(id);
    }
    return out;
  }

  char char_of(TokenId id) const {
    return kAlphabet[static_cast<std::size_t>(id - kNumSpecial)];
  }

  std::string piece(TokenId id) const {
    switch (id) {
      case kPad: return "<PAD>";
      case kBos: return "<BOS>";
      case kEos: return "<EOS>";
      case kSep: return "<SEP>";
      default:
        if (!valid(id)) return "<?>";
        return std::string(1, char_of(id));
    }
  }

  /// Stable hash of the id-to-symbol table; checkpoints store it.
  std::string fingerprint() const {
    Fnv1a h;
    h.update("cgpo-char-tokenizer-v1");
    for (TokenId id = 0; id < vocab_size(); ++id) {
      const std::string p = piece(id);
      h.update(p);
      h.update("\x1f", 1);
    }
    return h.hex();
  }

 private:
  std::array<TokenId, 256> lookup_{};
};

}  // namespace cgpo
