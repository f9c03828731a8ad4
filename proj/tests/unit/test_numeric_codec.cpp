#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "rlm/common.hpp"
#include "rlm/numeric_codec.hpp"

using namespace rlm;

namespace {

const NumericFormat kFmt{3, 1, 100};

std::vector<TokenId> seq(const NumericFormat& f, bool neg, bool eneg, std::initializer_list<int> digits) {
  std::vector<TokenId> s{neg ? f.minus() : f.plus(), eneg ? f.minus() : f.plus()};
  for (int d : digits) s.push_back(f.digit(d));
  return s;
}

// Every value the M=3, E=1 grammar can express, computed with plain integer arithmetic.
std::vector<double> all_values() {
  std::vector<double> out;
  for (int sign : {1, -1})
    for (int es : {1, -1})
      for (int e = 0; e <= 9; ++e)
        for (int m = 0; m <= 999; ++m) {
          double v = m;
          for (int i = 0; i < e; ++i) v = es > 0 ? v * 10 : v / 10;
          out.push_back(sign * v);
        }
  return out;
}

// Closest representable value; ties go to the larger magnitude.
double brute_force_nearest(double y, const std::vector<double>& values) {
  double best = 0.0;
  double best_err = std::fabs(y);
  for (double v : values) {
    const double err = std::fabs(v - y);
    const double tol = 1e-12 * std::max(std::fabs(y), 1e-300);
    if (err < best_err - tol || (std::fabs(err - best_err) <= tol && std::fabs(v) > std::fabs(best))) {
      best = v;
      best_err = err;
    }
  }
  return best;
}

bool close_rel(double a, double b, double rel = 1e-12) {
  return std::fabs(a - b) <= rel * std::max(std::fabs(a), std::fabs(b)) || a == b;
}

}  // namespace

TEST_CASE("encode: worked example 72.5") {
  CHECK(encode_number(72.5, kFmt) == seq(kFmt, false, true, {1, 7, 2, 5}));
  CHECK(decode_number(seq(kFmt, false, true, {1, 7, 2, 5}), kFmt) == 72.5);
}

TEST_CASE("encode: canonical zero, rounding and saturation") {
  CHECK(encode_number(0.0, kFmt) == seq(kFmt, false, false, {0, 0, 0, 0}));
  CHECK(encode_number(-0.0, kFmt) == seq(kFmt, false, false, {0, 0, 0, 0}));
  CHECK(encode_number(123.456, kFmt) == seq(kFmt, false, false, {0, 1, 2, 3}));
  CHECK(encode_number(1.0e12, kFmt) == seq(kFmt, false, false, {9, 9, 9, 9}));
  CHECK(encode_number(-1.0e12, kFmt) == seq(kFmt, true, false, {9, 9, 9, 9}));
  // ties away from zero
  CHECK(decode_number(encode_number(2.5, NumericFormat{1, 1, 0}), NumericFormat{1, 1, 0}) == 3.0);
  CHECK(decode_number(encode_number(-2.5, NumericFormat{1, 1, 0}), NumericFormat{1, 1, 0}) == -3.0);
  CHECK(decode_number(encode_number(1234.5, NumericFormat{4, 1, 0}), NumericFormat{4, 1, 0}) == 1235.0);
  // rounding up into the next decade renormalizes
  CHECK(encode_number(999.6, kFmt) == seq(kFmt, false, false, {1, 1, 0, 0}));
  // underflow to zero, subnormal kept
  CHECK(encode_number(1e-12, kFmt) == seq(kFmt, false, false, {0, 0, 0, 0}));
  CHECK(encode_number(2.5e-9, kFmt) == seq(kFmt, false, true, {9, 0, 0, 3}));
  CHECK_THROWS_AS(encode_number(std::nan(""), kFmt), DomainError);
  CHECK_THROWS_AS(encode_number(INFINITY, kFmt), DomainError);
}

TEST_CASE("decode: direct formula examples") {
  CHECK(decode_number(seq(kFmt, true, false, {0, 0, 0, 1}), kFmt) == -1.0);
  CHECK(decode_number(seq(kFmt, false, false, {5, 9, 9, 9}), kFmt) == 999.0 * 100000.0);
  // negative exponent sign on zero is accepted
  CHECK(decode_number(seq(kFmt, true, true, {3, 0, 0, 0}), kFmt) == 0.0);
}

TEST_CASE("decode: errors name the first offending position") {
  auto bad = seq(kFmt, false, false, {1, 2, 3, 4});
  bad[3] = kFmt.plus();
  try {
    decode_number(bad, kFmt);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.position() == 3);
  }
  auto bad_sign = seq(kFmt, false, false, {1, 2, 3, 4});
  bad_sign[1] = kFmt.digit(0);
  try {
    decode_number(bad_sign, kFmt);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.position() == 1);
  }
  CHECK_THROWS_AS(decode_number(std::vector<TokenId>(5, kFmt.plus()), kFmt), ParseError);
}

TEST_CASE("encode matches a brute-force nearest-value scan") {
  const auto values = all_values();
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> expo(-11.0, 12.5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> probes = {123.456, 72.5, 0.00999, 1e-9, 4.9e-10, 5.1e-10, 9.995e11, 999.5};
  for (int i = 0; i < 1500; ++i) probes.push_back((unit(rng) < 0.5 ? -1 : 1) * std::pow(10.0, expo(rng)));
  for (double y : probes) {
    CAPTURE(y);
    const double got = decode_number(encode_number(y, kFmt), kFmt);
    const double want = std::fabs(y) >= kFmt.max_magnitude() ? std::copysign(kFmt.max_magnitude(), y)
                                                              : brute_force_nearest(y, values);
    CHECK(close_rel(got, want));
  }
}

TEST_CASE("round trip relative error bound for in-range values") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> expo(-6.0, 11.9);
  for (int i = 0; i < 20000; ++i) {
    const double y = std::pow(10.0, expo(rng)) * (i % 2 ? -1 : 1);
    const double back = decode_number(encode_number(y, kFmt), kFmt);
    CHECK(std::fabs(back - y) <= 0.5 * std::pow(10.0, 1 - kFmt.mantissa_digits) * std::fabs(y) * (1 + 1e-12));
  }
}

TEST_CASE("normalized mantissa unless zero or subnormal") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> expo(-12.0, 13.0);
  for (int i = 0; i < 5000; ++i) {
    const auto s = encode_number(std::pow(10.0, expo(rng)), kFmt);
    const bool zero = kFmt.digit_value(s[3]) == 0 && kFmt.digit_value(s[4]) == 0 && kFmt.digit_value(s[5]) == 0;
    const bool subnormal = s[1] == kFmt.minus() && kFmt.digit_value(s[2]) == 9;
    if (!zero && !subnormal) CHECK(kFmt.digit_value(s[3]) != 0);
    if (zero) CHECK(s == seq(kFmt, false, false, {0, 0, 0, 0}));
  }
}

TEST_CASE("saturation is monotone beyond the range") {
  const auto top = encode_number(kFmt.max_magnitude(), kFmt);
  for (double y = kFmt.max_magnitude(); y < 1e300; y *= 7.3) CHECK(encode_number(y, kFmt) == top);
}

TEST_CASE("every grammar sequence decodes to a finite value") {
  std::size_t count = 0;
  for (int s = 0; s < 2; ++s)
    for (int es = 0; es < 2; ++es)
      for (int e = 0; e < 10; ++e)
        for (int m = 0; m < 1000; ++m) {
          auto v = decode_number(seq(kFmt, s, es, {e, m / 100, m / 10 % 10, m % 10}), kFmt);
          CHECK_MESSAGE(std::isfinite(v), "sequence ", count);
          ++count;
        }
  CHECK(count == 40000);
}

TEST_CASE("targets append EOS and parse back") {
  const std::vector<double> ys = {72.5, -0.031, 4e5};
  const auto t = encode_targets(ys, kFmt);
  CHECK(t.size() == 3 * kFmt.length() + 1);
  CHECK(t.back() == kEosId);
  const auto back = decode_targets(t, kFmt, 3);
  CHECK(back[0] == 72.5);
  CHECK(back[1] == doctest::Approx(-0.031));
  CHECK(back[2] == 4e5);
  CHECK_THROWS_AS(decode_targets(std::vector<TokenId>(t.begin(), t.begin() + 7), kFmt, 3), ParseError);
}

TEST_CASE("allowed_tokens grammar") {
  const std::set<TokenId> signs = {kFmt.plus(), kFmt.minus()};
  std::set<TokenId> digits;
  for (int d = 0; d < 10; ++d) digits.insert(kFmt.digit(d));
  auto as_set = [](const std::vector<TokenId>& v) { return std::set<TokenId>(v.begin(), v.end()); };
  CHECK(as_set(allowed_tokens(0, kFmt, 0, 1)) == signs);
  CHECK(as_set(allowed_tokens(3, kFmt, 0, 1)) == digits);
  CHECK(as_set(allowed_tokens(6, kFmt, 1, 2)) == signs);
  CHECK(as_set(allowed_tokens(6, kFmt, 1, 1)) == std::set<TokenId>{kEosId});

  // Oracle: walk the k-number state machine token by token.
  for (std::size_t k = 1; k <= 4; ++k) {
    for (std::size_t pos = 0; pos <= k * 6; ++pos) {
      const auto got = as_set(allowed_tokens(pos, kFmt, std::min(pos / 6, k), k));
      REQUIRE(!got.empty());
      if (pos == k * 6) CHECK(got == std::set<TokenId>{kEosId});
      else if (pos % 6 < 2) CHECK(got == signs);
      else CHECK(got == digits);
    }
  }
}

TEST_CASE("format validation and ranges") {
  CHECK(kFmt.length() == 6);
  CHECK(kFmt.max_magnitude() == 999e9);
  CHECK(kFmt.min_magnitude() == doctest::Approx(1e-9));
  CHECK_THROWS_AS((NumericFormat{0, 1, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((NumericFormat{3, 3, 0}.validate()), ConfigError);
  const NumericFormat wide{4, 2, 0};
  CHECK(wide.length() == 8);
  CHECK(decode_number(encode_number(3.14159e40, wide), wide) == doctest::Approx(3.142e40));
}
