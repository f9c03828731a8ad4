#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace rlm {

using TokenId = std::int32_t;

// Special ids shared by the text vocabulary and the decoder vocabulary.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kEosId = 1;
inline constexpr TokenId kUnkId = 2;

/// Fixed-length decimal layout of one metric value:
///   <mantissa sign> <exponent sign> <E exponent digits> <M mantissa digits>
/// value = sign * 10^(exponent sign * exponent) * mantissa, mantissa an M-digit integer.
/// Numeric token ids occupy [base, base + 12) and are placed after the text vocabulary.
struct NumericFormat {
  int mantissa_digits = 3;
  int exponent_digits = 1;
  TokenId base = 0;

  static constexpr int kTokenCount = 12;

  std::size_t length() const noexcept {
    return static_cast<std::size_t>(2 + exponent_digits + mantissa_digits);
  }
  TokenId plus() const noexcept { return base; }
  TokenId minus() const noexcept { return base + 1; }
  TokenId digit(int d) const noexcept { return base + 2 + d; }
  bool is_sign(TokenId t) const noexcept { return t == plus() || t == minus(); }
  bool is_digit(TokenId t) const noexcept { return t >= digit(0) && t <= digit(9); }
  int digit_value(TokenId t) const noexcept { return t - digit(0); }

  /// Largest exponent magnitude, 10^E - 1.
  int max_exponent() const noexcept;
  /// Largest mantissa integer, 10^M - 1.
  std::int64_t max_mantissa() const noexcept;
  /// (10^M - 1) * 10^Emax
  double max_magnitude() const noexcept;
  /// 10^-Emax, the smallest nonzero magnitude.
  double min_magnitude() const noexcept;

  /// Throws ConfigError unless 1 <= M <= 15 and 1 <= E <= 2 and base >= 0.
  void validate() const;

  friend bool operator==(const NumericFormat&, const NumericFormat&) = default;
};

using NumericTokenSeq = std::vector<TokenId>;

/// Nearest representable value, ties away from zero, normalized mantissa where the
/// exponent range allows it. Magnitudes beyond the range clamp to the largest value;
/// magnitudes below half the smallest step become the canonical zero.
/// Throws DomainError for non-finite input.
NumericTokenSeq encode_number(double y, const NumericFormat& fmt);

/// Exact inverse of the layout. Any all-zero mantissa decodes to +0 regardless of signs.
/// Throws ParseError naming the first offending position.
double decode_number(std::span<const TokenId> seq, const NumericFormat& fmt);

/// Encodes several metrics back to back and appends EOS (decoder target layout).
std::vector<TokenId> encode_targets(std::span<const double> values, const NumericFormat& fmt);

/// Parses `count` consecutive numbers; a trailing EOS after them is accepted.
std::vector<double> decode_targets(std::span<const TokenId> seq, const NumericFormat& fmt,
                                   std::size_t count);

/// Grammar of a decoder stream carrying `total_metrics` numbers followed by EOS.
/// `position` is the absolute index in that stream. `metrics_decoded` is the caller's
/// count of completed numbers; the slot is derived from `position`, which must agree.
std::vector<TokenId> allowed_tokens(std::size_t position, const NumericFormat& fmt,
                                    std::size_t metrics_decoded, std::size_t total_metrics);

}  // namespace rlm
