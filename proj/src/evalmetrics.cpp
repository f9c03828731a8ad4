#include "rlm/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "rlm/common.hpp"

namespace rlm {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("correlation inputs differ in length");
  if (a.size() < 2) throw ConfigError("correlation needs at least two points");
}

int sign(double x) { return (x > 0) - (x < 0); }

}  // namespace

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double pearson_raw(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

MaybeValue pearson(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b);
  const auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(a) || constant(b)) return std::nullopt;
  return std::clamp(pearson_raw(a, b), -1.0, 1.0);
}

MaybeValue spearman(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred, truth);
  const auto rp = average_ranks(pred);
  const auto rt = average_ranks(truth);
  return pearson(rp, rt);
}

MaybeValue kendall(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred, truth);
  long long concordant = 0, discordant = 0, tie_pred = 0, tie_truth = 0;
  const std::size_t n = pred.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const int s = sign(pred[i] - pred[j]) * sign(truth[i] - truth[j]);
      if (pred[i] == pred[j]) ++tie_pred;
      if (truth[i] == truth[j]) ++tie_truth;
      if (s > 0) ++concordant;
      if (s < 0) ++discordant;
    }
  const auto pairs = static_cast<long long>(n * (n - 1) / 2);
  const double denom = std::sqrt(static_cast<double>(pairs - tie_pred) * static_cast<double>(pairs - tie_truth));
  if (denom == 0.0) return std::nullopt;
  return static_cast<double>(concordant - discordant) / denom;
}

namespace {

std::map<std::string, std::vector<std::size_t>> group_members(std::span<const std::string> group_ids) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < group_ids.size(); ++i)
    if (!group_ids[i].empty()) groups[group_ids[i]].push_back(i);
  return groups;
}

std::vector<double> gather(std::span<const double> xs, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(xs[i]);
  return out;
}

}  // namespace

GroupSpearman per_group_spearman(std::span<const std::string> group_ids, std::span<const double> pred,
                                 std::span<const double> truth, std::size_t min_size, double threshold) {
  if (group_ids.size() != pred.size() || pred.size() != truth.size())
    throw ConfigError("per_group_spearman: inputs differ in length");
  GroupSpearman out;
  out.threshold = threshold;
  std::size_t above = 0;
  for (const auto& [g, idx] : group_members(group_ids)) {
    if (idx.size() < std::max<std::size_t>(min_size, 2)) {
      ++out.skipped;
      continue;
    }
    const auto rho = spearman(gather(pred, idx), gather(truth, idx));
    if (!rho) {
      ++out.skipped;
      continue;
    }
    out.groups.push_back(g);
    out.rho.push_back(*rho);
    if (*rho > threshold) ++above;
  }
  if (!out.rho.empty()) out.fraction_above = static_cast<double>(above) / static_cast<double>(out.rho.size());
  return out;
}

ContainmentCurve topp_containment(std::span<const std::string> group_ids, std::span<const double> pred,
                                  std::span<const double> truth, std::span<const double> p_values,
                                  std::size_t min_size) {
  if (group_ids.size() != pred.size() || pred.size() != truth.size())
    throw ConfigError("topp_containment: inputs differ in length");
  ContainmentCurve c;
  c.p_values.assign(p_values.begin(), p_values.end());
  c.containment.assign(p_values.size(), 0.0);
  c.random_baseline.assign(p_values.size(), 0.0);
  for (const auto& [g, idx] : group_members(group_ids)) {
    if (idx.size() < std::max<std::size_t>(min_size, 2)) continue;
    ++c.groups_used;
    const auto n = idx.size();
    std::size_t pick = idx.front();
    for (std::size_t i : idx)
      if (pred[i] < pred[pick]) pick = i;
    // Items strictly better than the pick; ties in truth share the better position.
    std::size_t better = 0;
    for (std::size_t i : idx)
      if (truth[i] < truth[pick]) ++better;
    for (std::size_t k = 0; k < p_values.size(); ++k) {
      const auto top = static_cast<std::size_t>(std::ceil(p_values[k] * static_cast<double>(n) - 1e-12));
      if (better < top) c.containment[k] += 1.0;
      c.random_baseline[k] += static_cast<double>(std::min(top, n)) / static_cast<double>(n);
    }
  }
  if (c.groups_used > 0)
    for (std::size_t k = 0; k < p_values.size(); ++k) {
      c.containment[k] /= static_cast<double>(c.groups_used);
      c.random_baseline[k] /= static_cast<double>(c.groups_used);
    }
  return c;
}

MaybeValue coefficient_of_variation(std::span<const double> values) {
  if (values.empty()) return std::nullopt;
  const auto n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (mean == 0.0) return std::nullopt;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / n) / mean;
}

std::vector<std::size_t> pareto_front(const std::vector<std::vector<double>>& points,
                                      std::span<const Direction> directions) {
  for (const auto& p : points)
    if (p.size() != directions.size()) throw ConfigError("pareto_front: dimension mismatch");
  auto better_eq = [&](double a, double b, Direction d) { return d == Direction::maximize ? a >= b : a <= b; };
  auto dominates = [&](const std::vector<double>& a, const std::vector<double>& b) {
    bool strict = false;
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (!better_eq(a[j], b[j], directions[j])) return false;
      if (a[j] != b[j]) strict = true;
    }
    return strict;
  };
  std::vector<std::size_t> front;
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j)
      dominated = j != i && dominates(points[j], points[i]);
    if (!dominated) front.push_back(i);
  }
  return front;
}

std::string format_value(const MaybeValue& v) {
  if (!v) return "missing";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

EvalReport evaluate(const EvalInput& in, std::size_t group_min_size) {
  const std::size_t n = in.pred.size();
  if (in.truth.size() != n || in.tasks.size() != n || in.groups.size() != n)
    throw ConfigError("evaluate: inputs differ in length");
  EvalReport r;
  std::map<std::string, std::vector<std::size_t>> by_task;
  for (std::size_t i = 0; i < n; ++i) by_task[in.tasks[i]].push_back(i);
  for (const auto& [task, idx] : by_task) {
    r.tasks.push_back(task);
    r.counts.push_back(idx.size());
    if (idx.size() < 2) {
      r.spearman.push_back(std::nullopt);
      r.kendall.push_back(std::nullopt);
      continue;
    }
    const auto p = gather(in.pred, idx);
    const auto t = gather(in.truth, idx);
    r.spearman.push_back(spearman(p, t));
    r.kendall.push_back(kendall(p, t));
  }
  r.groups = per_group_spearman(in.groups, in.pred, in.truth, group_min_size);
  const std::vector<double> ps = {0.01, 0.05, 0.10, 0.20, 0.30, 0.50, 1.00};
  r.containment = topp_containment(in.groups, in.pred, in.truth, ps, group_min_size);
  if (r.containment.groups_used > 0) {
    const std::vector<double> tiny = {1e-9};
    const auto top1 = topp_containment(in.groups, in.pred, in.truth, tiny, group_min_size);
    r.top1_rate = top1.containment[0];
    r.top1_baseline = top1.random_baseline[0];
  }
  std::vector<double> cvs;
  for (const auto& [g, idx] : group_members(in.groups))
    if (idx.size() >= std::max<std::size_t>(group_min_size, 2))
      if (auto cv = coefficient_of_variation(gather(in.truth, idx))) cvs.push_back(*cv);
  if (!cvs.empty()) {
    std::sort(cvs.begin(), cvs.end());
    r.median_group_cv = cvs[(cvs.size() - 1) / 2];
  }
  return r;
}

std::string EvalReport::to_text() const {
  std::ostringstream o;
  o << "# rlm evaluation report\n";
  for (std::size_t i = 0; i < tasks.size(); ++i)
    o << "task " << tasks[i] << " n=" << counts[i] << " spearman=" << format_value(spearman[i])
      << " kendall=" << format_value(kendall[i]) << '\n';
  o << "groups contributing=" << groups.rho.size() << " skipped=" << groups.skipped
    << " fraction_above_" << format_value(groups.threshold) << '=' << format_value(groups.fraction_above)
    << '\n';
  for (std::size_t i = 0; i < groups.groups.size(); ++i)
    o << "group " << groups.groups[i] << " spearman=" << format_value(groups.rho[i]) << '\n';
  o << "top1 rate=" << format_value(top1_rate) << " random_baseline=" << format_value(top1_baseline) << '\n';
  o << "median_group_cv=" << format_value(median_group_cv) << '\n';
  o << "containment groups=" << containment.groups_used << '\n';
  o << containment_csv();
  return o.str();
}

std::string EvalReport::containment_csv() const {
  std::ostringstream o;
  o << "p,containment,random_baseline\n";
  char buf[96];
  for (std::size_t k = 0; k < containment.p_values.size(); ++k) {
    if (containment.groups_used == 0) {
      std::snprintf(buf, sizeof buf, "%.4f,missing,missing\n", containment.p_values[k]);
    } else {
      std::snprintf(buf, sizeof buf, "%.4f,%.6f,%.6f\n", containment.p_values[k], containment.containment[k],
                    containment.random_baseline[k]);
    }
    o << buf;
  }
  return o.str();
}

}  // namespace rlm
