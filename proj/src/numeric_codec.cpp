#include "rlm/numeric_codec.hpp"

#include <cassert>
#include <cmath>
#include <string>

#include "rlm/common.hpp"

namespace rlm {
namespace {

double pow10_exact(int k) {
  // 10^k is exact in binary64 for k <= 22.
  static const double table[] = {1e0,  1e1,  1e2,  1e3,  1e4,  1e5,  1e6,  1e7,
                                 1e8,  1e9,  1e10, 1e11, 1e12, 1e13, 1e14, 1e15,
                                 1e16, 1e17, 1e18, 1e19, 1e20, 1e21, 1e22};
  if (k >= 0 && k <= 22) return table[k];
  return std::pow(10.0, k);
}

// a * 10^-e, multiplying by the exact integer power where possible.
double scale_down(double a, int e) {
  return e >= 0 ? a / pow10_exact(e) : a * pow10_exact(-e);
}

NumericTokenSeq build(bool negative, int exponent, std::int64_t mantissa,
                      const NumericFormat& fmt) {
  NumericTokenSeq out;
  out.reserve(fmt.length());
  out.push_back(negative ? fmt.minus() : fmt.plus());
  out.push_back(exponent < 0 ? fmt.minus() : fmt.plus());
  int mag = exponent < 0 ? -exponent : exponent;
  for (int i = fmt.exponent_digits - 1; i >= 0; --i) {
    out.push_back(fmt.digit((mag / static_cast<int>(pow10_exact(i))) % 10));
  }
  for (int i = fmt.mantissa_digits - 1; i >= 0; --i) {
    auto p = static_cast<std::int64_t>(pow10_exact(i));
    out.push_back(fmt.digit(static_cast<int>((mantissa / p) % 10)));
  }
  return out;
}

}  // namespace

int NumericFormat::max_exponent() const noexcept {
  return static_cast<int>(pow10_exact(exponent_digits)) - 1;
}

std::int64_t NumericFormat::max_mantissa() const noexcept {
  return static_cast<std::int64_t>(pow10_exact(mantissa_digits)) - 1;
}

double NumericFormat::max_magnitude() const noexcept {
  return static_cast<double>(max_mantissa()) * pow10_exact(max_exponent());
}

double NumericFormat::min_magnitude() const noexcept { return 1.0 / pow10_exact(max_exponent()); }

void NumericFormat::validate() const {
  if (mantissa_digits < 1 || mantissa_digits > 15)
    throw ConfigError("mantissa_digits must be in [1, 15], got " + std::to_string(mantissa_digits));
  if (exponent_digits < 1 || exponent_digits > 2)
    throw ConfigError("exponent_digits must be in [1, 2], got " + std::to_string(exponent_digits));
  if (base < 0) throw ConfigError("numeric token base must be nonnegative");
}

NumericTokenSeq encode_number(double y, const NumericFormat& fmt) {
  if (!std::isfinite(y)) throw DomainError("cannot encode non-finite value");
  const int emax = fmt.max_exponent();
  const std::int64_t mmax = fmt.max_mantissa();
  const auto mmin = static_cast<std::int64_t>(pow10_exact(fmt.mantissa_digits - 1));

  if (y == 0.0) return build(false, 0, 0, fmt);
  const bool negative = y < 0.0;
  const double a = std::fabs(y);
  if (a >= fmt.max_magnitude()) return build(negative, emax, mmax, fmt);

  int e = static_cast<int>(std::floor(std::log10(a))) - (fmt.mantissa_digits - 1);
  if (e < -emax) e = -emax;
  if (e > emax) return build(negative, emax, mmax, fmt);
  auto m = static_cast<std::int64_t>(std::round(scale_down(a, e)));
  // log10 can be off by one next to powers of ten; settle on the normalized exponent.
  if (m > mmax) {
    ++e;
    if (e > emax) return build(negative, emax, mmax, fmt);
    m = static_cast<std::int64_t>(std::round(scale_down(a, e)));
  } else if (m < mmin && e > -emax) {
    auto m_lower = static_cast<std::int64_t>(std::round(scale_down(a, e - 1)));
    if (m_lower <= mmax) {
      --e;
      m = m_lower;
    }
  }
  if (m > mmax) {
    // Rounding carried into an extra digit at the top of the range.
    ++e;
    if (e > emax) return build(negative, emax, mmax, fmt);
    m = static_cast<std::int64_t>(std::round(scale_down(a, e)));
  }
  if (m == 0) return build(false, 0, 0, fmt);
  return build(negative, e, m, fmt);
}

double decode_number(std::span<const TokenId> seq, const NumericFormat& fmt) {
  if (seq.size() != fmt.length())
    throw ParseError("numeric sequence has length " + std::to_string(seq.size()) + ", expected " +
                         std::to_string(fmt.length()),
                     std::min(seq.size(), fmt.length()));
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const bool ok = i < 2 ? fmt.is_sign(seq[i]) : fmt.is_digit(seq[i]);
    if (!ok)
      throw ParseError("position " + std::to_string(i) + ": expected " +
                           (i < 2 ? "sign" : "digit") + " token, got id " + std::to_string(seq[i]),
                       i);
  }
  int exponent = 0;
  for (int i = 0; i < fmt.exponent_digits; ++i)
    exponent = exponent * 10 + fmt.digit_value(seq[2 + static_cast<std::size_t>(i)]);
  std::int64_t mantissa = 0;
  for (int i = 0; i < fmt.mantissa_digits; ++i)
    mantissa = mantissa * 10 +
               fmt.digit_value(seq[2 + static_cast<std::size_t>(fmt.exponent_digits + i)]);
  if (mantissa == 0) return 0.0;
  const double m = static_cast<double>(mantissa);
  const double mag = seq[1] == fmt.minus() ? m / pow10_exact(exponent) : m * pow10_exact(exponent);
  return seq[0] == fmt.minus() ? -mag : mag;
}

std::vector<TokenId> encode_targets(std::span<const double> values, const NumericFormat& fmt) {
  std::vector<TokenId> out;
  out.reserve(values.size() * fmt.length() + 1);
  for (double v : values) {
    auto seq = encode_number(v, fmt);
    out.insert(out.end(), seq.begin(), seq.end());
  }
  out.push_back(kEosId);
  return out;
}

std::vector<double> decode_targets(std::span<const TokenId> seq, const NumericFormat& fmt,
                                   std::size_t count) {
  const std::size_t len = fmt.length();
  const std::size_t need = count * len;
  if (seq.size() < need || seq.size() > need + 1)
    throw ParseError("decoder stream has length " + std::to_string(seq.size()) + ", expected " +
                         std::to_string(need) + " or " + std::to_string(need + 1),
                     std::min(seq.size(), need));
  if (seq.size() == need + 1 && seq[need] != kEosId)
    throw ParseError("position " + std::to_string(need) + ": expected EOS", need);
  std::vector<double> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    try {
      out.push_back(decode_number(seq.subspan(k * len, len), fmt));
    } catch (const ParseError& e) {
      throw ParseError(std::string("metric ") + std::to_string(k) + ": " + e.what(),
                       k * len + e.position());
    }
  }
  return out;
}

std::vector<TokenId> allowed_tokens(std::size_t position, const NumericFormat& fmt,
                                    [[maybe_unused]] std::size_t metrics_decoded,
                                    std::size_t total_metrics) {
  const std::size_t len = fmt.length();
  assert(metrics_decoded <= total_metrics);
  assert(std::min(position / len, total_metrics) == metrics_decoded);
  if (position >= total_metrics * len) return {kEosId};
  const std::size_t slot = position % len;
  if (slot < 2) return {fmt.plus(), fmt.minus()};
  std::vector<TokenId> digits(10);
  for (int d = 0; d < 10; ++d) digits[static_cast<std::size_t>(d)] = fmt.digit(d);
  return digits;
}

}  // namespace rlm
