#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rlqfs/ndgrad/ops.hpp"

namespace rlqfs::corpus {

using nd::TokenId;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kSep = 4;
inline constexpr TokenId kMask = 5;
inline constexpr TokenId kRepr = 6;
inline constexpr TokenId kNumSpecial = 7;

inline constexpr std::array<std::string_view, kNumSpecial> kSpecialTokens{
    "<pad>", "<s>", "</s>", "<unk>", "<sep>", "<mask>", "<repr>"};

// Lowercased word-level split: whitespace separates, every ASCII
// punctuation character is a token of its own.
std::vector<std::string> split_words(std::string_view text);
// split_words joined by single spaces.
std::string normalize(std::string_view text);
// Tokens containing at least one letter or digit.
std::size_t count_words(std::string_view text);

class Vocabulary {
 public:
  Vocabulary();

  // Corpus-derived vocabulary: words seen at least `min_freq` times, most
  // frequent first, ties in byte order.
  static Vocabulary build(const std::vector<std::string>& texts, std::size_t min_freq = 2);
  static Vocabulary from_tokens(const std::vector<std::string>& words);

  std::size_t size() const { return tokens_.size(); }
  TokenId id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(TokenId id) const;
  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }
  // FNV-1a over the id-ordered token list; changes iff the token set/order does.
  std::uint64_t hash() const { return hash_; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Plain text, one token per line, first line "# rlqfs-vocab hash=<16 hex>".
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  void index();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::uint64_t hash_ = 0;
};

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab);
// Space-joined tokens; PAD/BOS/EOS are dropped.
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);

// BOS query SEP document EOS, truncating the document to fit.
std::vector<TokenId> make_encoder_input(std::span<const TokenId> query, std::span<const TokenId> document,
                                        std::size_t max_positions);

}  // namespace rlqfs::corpus
