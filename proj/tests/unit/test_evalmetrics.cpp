#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "rlm/common.hpp"
#include "rlm/evalmetrics.hpp"

using namespace rlm;

namespace {

// O(n^2) rank: 1 + #smaller + (#equal - 1) / 2
std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, eq = 0;
    for (double y : x) {
      less += y < x[i];
      eq += y == x[i];
    }
    r[i] = 1 + less + (eq - 1) / 2;
  }
  return r;
}

std::optional<double> brute_pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n, mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

std::optional<double> brute_spearman(const std::vector<double>& a, const std::vector<double>& b) {
  return brute_pearson(brute_ranks(a), brute_ranks(b));
}

std::optional<double> brute_kendall(const std::vector<double>& a, const std::vector<double>& b) {
  double conc = 0, disc = 0, ta = 0, tb = 0, pairs = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      ++pairs;
      const double s = (a[i] - a[j]) * (b[i] - b[j]);
      if (s > 0) ++conc;
      if (s < 0) ++disc;
      if (a[i] == a[j]) ++ta;
      if (b[i] == b[j]) ++tb;
    }
  const double den = std::sqrt((pairs - ta) * (pairs - tb));
  if (den == 0) return std::nullopt;
  return (conc - disc) / den;
}

void check_same(const MaybeValue& got, const std::optional<double>& want) {
  REQUIRE(got.has_value() == want.has_value());
  if (want) CHECK(*got == doctest::Approx(*want).epsilon(1e-12));
}

}  // namespace

TEST_CASE("rank correlation examples") {
  const std::vector<double> a = {1, 2, 3};
  const std::vector<double> rev = {3, 2, 1};
  CHECK(*spearman(a, a) == doctest::Approx(1.0));
  CHECK(*spearman(a, rev) == doctest::Approx(-1.0));
  CHECK(*spearman(a, std::vector<double>{3, 1, 2}) == doctest::Approx(-0.5));
  CHECK(*kendall(a, a) == doctest::Approx(1.0));
  CHECK(*kendall(a, std::vector<double>{1, 3, 2}) == doctest::Approx(1.0 / 3.0));
  CHECK_FALSE(kendall(a, std::vector<double>{4, 4, 4}).has_value());
  CHECK_FALSE(spearman(a, std::vector<double>{4, 4, 4}).has_value());
  CHECK(average_ranks(std::vector<double>{10, 20, 20, 5}) == std::vector<double>{2, 3.5, 3.5, 1});
  CHECK_THROWS_AS(spearman(a, std::vector<double>{1, 2}), ConfigError);
  CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), ConfigError);
}

TEST_CASE("spearman and kendall match brute force over all permutations up to n = 6") {
  for (std::size_t n = 2; n <= 6; ++n) {
    std::vector<double> base(n);
    std::iota(base.begin(), base.end(), 1.0);
    auto perm = base;
    do {
      const double n3 = static_cast<double>(n * (n * n - 1));
      double d2 = 0;
      for (std::size_t i = 0; i < n; ++i) d2 += (perm[i] - base[i]) * (perm[i] - base[i]);
      CHECK(*spearman(base, perm) == doctest::Approx(1 - 6 * d2 / n3).epsilon(1e-12));
      check_same(kendall(base, perm), brute_kendall(base, perm));
    } while (std::next_permutation(perm.begin(), perm.end()));
  }
}

TEST_CASE("tied inputs match brute force") {
  // every vector over {0, 1, 2} of length 5 against a fixed tied truth
  const std::vector<double> truth = {0, 1, 1, 2, 0};
  for (int code = 0; code < 243; ++code) {
    std::vector<double> pred(5);
    int c = code;
    for (auto& v : pred) v = c % 3, c /= 3;
    check_same(spearman(pred, truth), brute_spearman(pred, truth));
    check_same(kendall(pred, truth), brute_kendall(pred, truth));
  }
}

TEST_CASE("monotone transforms leave rank statistics unchanged") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(20), b(20);
    for (auto& x : a) x = n(rng);
    for (auto& x : b) x = std::round(n(rng) * 2);
    std::vector<double> ta(a.size()), tb(b.size());
    std::transform(a.begin(), a.end(), ta.begin(), [](double x) { return std::exp(3 * x) + 7; });
    std::transform(b.begin(), b.end(), tb.begin(), [](double x) { return x * x * x - 4; });
    CHECK(*spearman(ta, tb) == doctest::Approx(*spearman(a, b)).epsilon(1e-12));
    CHECK(*kendall(ta, tb) == doctest::Approx(*kendall(a, b)).epsilon(1e-12));
    CHECK(std::fabs(*spearman(a, b)) <= 1.0);
  }
}

TEST_CASE("per-group spearman") {
  const std::vector<std::string> g = {"a", "a", "a", "b", "b", "c"};
  const std::vector<double> pred = {1, 2, 3, 5, 9, 4};
  const std::vector<double> truth = {10, 20, 30, 1, 2, 8};
  const auto r = per_group_spearman(g, pred, truth);
  CHECK(r.groups == std::vector<std::string>{"a", "b"});
  CHECK(r.skipped == 1);
  CHECK(*r.fraction_above == 1.0);
  CHECK(r.threshold == 0.54);

  const std::vector<double> flat = {1, 1, 1, 2, 3, 8};
  const auto f = per_group_spearman(g, pred, flat);
  CHECK(f.skipped == 2);
  CHECK(f.groups == std::vector<std::string>{"b"});
}

TEST_CASE("per-group spearman matches a brute-force oracle on 50 groups") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  std::vector<std::string> g;
  std::vector<double> pred, truth;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by;
  for (int grp = 0; grp < 50; ++grp) {
    const int size = 2 + static_cast<int>(rng() % 12);
    for (int i = 0; i < size; ++i) {
      const std::string name = "g" + std::to_string(grp);
      const double t = std::round(n(rng) * 3);
      const double p = t + n(rng) * 2;
      g.push_back(name);
      pred.push_back(p);
      truth.push_back(t);
      by[name].first.push_back(p);
      by[name].second.push_back(t);
    }
  }
  const auto r = per_group_spearman(g, pred, truth, 2, 0.54);
  std::size_t above = 0, used = 0;
  for (std::size_t i = 0; i < r.groups.size(); ++i) {
    const auto& [p, t] = by.at(r.groups[i]);
    const auto want = brute_spearman(p, t);
    REQUIRE(want.has_value());
    CHECK(r.rho[i] == doctest::Approx(*want).epsilon(1e-12));
  }
  for (const auto& [name, pt] : by) {
    const auto want = brute_spearman(pt.first, pt.second);
    if (!want) continue;
    ++used;
    above += *want > 0.54;
  }
  CHECK(r.groups.size() == used);
  CHECK(r.skipped == 50 - used);
  CHECK(*r.fraction_above == doctest::Approx(static_cast<double>(above) / static_cast<double>(used)));
}

TEST_CASE("top-p containment") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  std::vector<std::string> g;
  std::vector<double> truth;
  for (int grp = 0; grp < 40; ++grp)
    for (int i = 0; i < 3 + grp % 9; ++i) {
      g.push_back(std::to_string(grp));
      truth.push_back(n(rng));
    }
  const std::vector<double> ps = {0.01, 0.1, 0.25, 0.5, 1.0};
  const auto perfect = topp_containment(g, truth, truth, ps);
  CHECK(perfect.groups_used == 40);
  for (double c : perfect.containment) CHECK(c == 1.0);

  std::vector<double> junk(truth.size());
  for (auto& x : junk) x = n(rng);
  const auto any = topp_containment(g, junk, truth, ps);
  CHECK(any.containment.back() == 1.0);
  CHECK(any.random_baseline.back() == 1.0);
  for (std::size_t k = 1; k < ps.size(); ++k) CHECK(any.containment[k] >= any.containment[k - 1]);

  // analytic baseline: ceil(p n) / n averaged over groups
  const std::vector<std::string> two = {"x", "x", "x", "x", "y", "y"};
  const std::vector<double> v = {4, 3, 2, 1, 1, 2};
  const std::vector<double> q = {0.3};
  const auto b = topp_containment(two, v, v, q);
  CHECK(b.random_baseline[0] == doctest::Approx((2.0 / 4 + 1.0 / 2) / 2));
}

TEST_CASE("random predictions track the analytic containment baseline") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u;
  std::vector<std::string> g;
  std::vector<double> pred, truth;
  for (int grp = 0; grp < 1000; ++grp) {
    const int size = 9 + grp % 20;
    for (int i = 0; i < size; ++i) {
      g.push_back(std::to_string(grp));
      pred.push_back(u(rng));
      truth.push_back(u(rng));
    }
  }
  const std::vector<double> ps = {0.05, 0.1, 0.2, 0.3, 0.5, 0.75};
  const auto c = topp_containment(g, pred, truth, ps, 9);
  CHECK(c.groups_used == 1000);
  for (std::size_t k = 0; k < ps.size(); ++k)
    CHECK(std::fabs(c.containment[k] - c.random_baseline[k]) <= 0.05);
}

TEST_CASE("coefficient of variation") {
  CHECK(*coefficient_of_variation(std::vector<double>{1, 1, 1}) == 0.0);
  CHECK(*coefficient_of_variation(std::vector<double>{1, 3}) == doctest::Approx(0.5));
  CHECK_FALSE(coefficient_of_variation(std::vector<double>{-1, 1}).has_value());
  const std::vector<double> xs = {2, 7, 1, 8, 2, 8};
  std::vector<double> scaled = xs;
  for (auto& x : scaled) x *= 13.5;
  CHECK(*coefficient_of_variation(scaled) == doctest::Approx(*coefficient_of_variation(xs)));
}

TEST_CASE("pareto front") {
  const std::vector<Direction> maxmin = {Direction::maximize, Direction::minimize};
  CHECK(pareto_front({{1, 1}}, maxmin) == std::vector<std::size_t>{0});
  CHECK(pareto_front({{0.9, 5}, {0.8, 3}, {0.7, 4}}, maxmin) == std::vector<std::size_t>{0, 1});
  CHECK(pareto_front({{1, 1}, {1, 1}, {0, 2}}, maxmin) == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(pareto_front({{1, 1}, {1}}, maxmin), ConfigError);

  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> d(0, 6);
  const std::vector<Direction> dirs = {Direction::maximize, Direction::minimize, Direction::maximize};
  auto dominates = [&](const std::vector<double>& a, const std::vector<double>& b) {
    bool strict = false;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double da = dirs[k] == Direction::maximize ? a[k] : -a[k];
      const double db = dirs[k] == Direction::maximize ? b[k] : -b[k];
      if (da < db) return false;
      strict |= da > db;
    }
    return strict;
  };
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> pts(1 + rng() % 30);
    for (auto& p : pts) p = {double(d(rng)), double(d(rng)), double(d(rng))};
    const auto front = pareto_front(pts, dirs);
    CHECK(!front.empty());
    CHECK(std::is_sorted(front.begin(), front.end()));
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const bool in = std::binary_search(front.begin(), front.end(), i);
      bool dominated = false;
      for (const auto& q : pts) dominated |= dominates(q, pts[i]);
      CHECK(in == !dominated);
      if (!in) {
        bool by_front = false;
        for (auto j : front) by_front |= dominates(pts[j], pts[i]);
        CHECK(by_front);
      }
    }
    std::vector<std::vector<double>> sub;
    for (auto j : front) sub.push_back(pts[j]);
    const auto again = pareto_front(sub, dirs);
    CHECK(again.size() == sub.size());
  }
}

TEST_CASE("evaluate report") {
  EvalInput in;
  in.tasks = {"t", "t", "t", "t", "u", "u", "u"};
  in.groups = {"a", "a", "b", "b", "", "", ""};
  in.pred = {1, 2, 3, 4, 5, 6, 7};
  in.truth = {1, 2, 4, 3, 1, 1, 1};
  const auto r = evaluate(in);
  REQUIRE(r.tasks == std::vector<std::string>{"t", "u"});
  CHECK(*r.spearman[0] == doctest::Approx(0.8));
  CHECK_FALSE(r.spearman[1].has_value());
  CHECK(r.counts == std::vector<std::size_t>{4, 3});
  CHECK(*r.top1_rate == 0.5);
  CHECK(*r.top1_baseline == 0.5);
  const auto text = r.to_text();
  CHECK(text.find("missing") != std::string::npos);
  CHECK(r.containment_csv().rfind("p,containment,random_baseline\n", 0) == 0);
  CHECK(format_value(std::nullopt) == "missing");
  CHECK(format_value(0.5) == "0.500000");
}
