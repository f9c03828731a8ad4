#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rlm/numeric_codec.hpp"

namespace rlm {

/// Byte-level merge vocabulary for encoder text.
///
/// Id layout: 0..2 are PAD/EOS/UNK, 3..258 are the 256 single bytes, and every later id
/// is the result of one merge rule in training order. Numeric decoder tokens live after
/// the last text id (see numeric_format()).
class Vocabulary {
 public:
  static constexpr std::size_t kSpecialCount = 3;
  static constexpr TokenId kByteBase = 3;
  static constexpr std::size_t kBaseSize = kSpecialCount + 256;

  struct Merge {
    TokenId left;
    TokenId right;
  };

  /// Specials plus the 256 bytes, no merges.
  static Vocabulary byte_level(NumericFormat fmt = {});

  std::size_t size() const noexcept { return pieces_.size(); }
  const std::string& piece(TokenId id) const;
  std::span<const Merge> merges() const noexcept { return merges_; }
  bool is_special(TokenId id) const noexcept {
    return id >= 0 && static_cast<std::size_t>(id) < kSpecialCount;
  }

  /// Numeric format whose token base is size(); the stored digit counts are kept.
  const NumericFormat& numeric_format() const noexcept { return numeric_; }
  void set_numeric_digits(int mantissa_digits, int exponent_digits);

  /// Merge id for an adjacent pair, or -1.
  TokenId merged(TokenId left, TokenId right) const;

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  /// FNV-1a of serialize(); checkpoints record it to refuse mismatched vocabularies.
  std::uint64_t hash() const;

 private:
  friend Vocabulary train_vocab(std::span<const std::string>, std::size_t, NumericFormat);
  void add_merge(TokenId left, TokenId right);

  std::vector<std::string> pieces_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, TokenId> merge_index_;
  NumericFormat numeric_;
};

/// Greedy pair merging from bytes: each round merges the most frequent adjacent pair
/// (ties to the lexicographically smaller pair of piece strings) until `target_size`
/// pieces exist or no pair occurs at least twice. Each document is one sequence.
Vocabulary train_vocab(std::span<const std::string> corpus, std::size_t target_size,
                       NumericFormat fmt = {});

/// Applies merges in training order; keeps the first `max_len` ids.
std::vector<TokenId> encode_text(std::string_view text, const Vocabulary& vocab,
                                 std::size_t max_len);

/// Concatenated pieces (specials contribute nothing). Throws ParseError on unknown ids.
std::string decode_text(std::span<const TokenId> ids, const Vocabulary& vocab);

}  // namespace rlm
