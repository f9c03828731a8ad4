#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rlm {

/// Undefined statistics (constant input, zero mean) are std::nullopt, never 0.
using MaybeValue = std::optional<double>;

/// Average ranks starting at 1.
std::vector<double> average_ranks(std::span<const double> xs);

double pearson_raw(std::span<const double> a, std::span<const double> b);
MaybeValue pearson(std::span<const double> a, std::span<const double> b);
MaybeValue spearman(std::span<const double> pred, std::span<const double> truth);
/// Tie-adjusted tau-b.
MaybeValue kendall(std::span<const double> pred, std::span<const double> truth);

struct GroupSpearman {
  std::vector<std::string> groups;
  std::vector<double> rho;
  std::size_t skipped = 0;
  double threshold = 0.54;
  /// Fraction of contributing groups with rho above the threshold; nullopt if none contribute.
  MaybeValue fraction_above;
};

/// Groups with fewer than `min_size` members or constant truth are skipped and counted.
GroupSpearman per_group_spearman(std::span<const std::string> group_ids, std::span<const double> pred,
                                 std::span<const double> truth, std::size_t min_size = 2,
                                 double threshold = 0.54);

struct ContainmentCurve {
  std::vector<double> p_values;
  std::vector<double> containment;
  std::vector<double> random_baseline;
  std::size_t groups_used = 0;
};

/// Lower is better. For each group the item with the smallest prediction (first on ties)
/// counts as contained when its true rank is within ceil(p * n) of the best.
ContainmentCurve topp_containment(std::span<const std::string> group_ids, std::span<const double> pred,
                                  std::span<const double> truth, std::span<const double> p_values,
                                  std::size_t min_size = 2);

/// Population standard deviation over mean.
MaybeValue coefficient_of_variation(std::span<const double> values);

enum class Direction { maximize, minimize };

/// Indices (ascending) of points not dominated by any other point.
std::vector<std::size_t> pareto_front(const std::vector<std::vector<double>>& points,
                                      std::span<const Direction> directions);

struct EvalReport {
  std::vector<std::string> tasks;
  std::vector<MaybeValue> spearman;
  std::vector<MaybeValue> kendall;
  std::vector<std::size_t> counts;
  GroupSpearman groups;
  ContainmentCurve containment;
  MaybeValue top1_rate;
  MaybeValue top1_baseline;
  MaybeValue median_group_cv;

  std::string to_text() const;
  /// p,containment,random_baseline rows.
  std::string containment_csv() const;
};

struct EvalInput {
  std::vector<std::string> tasks;
  std::vector<std::string> groups;  // empty string when absent
  std::vector<double> pred;
  std::vector<double> truth;
};

EvalReport evaluate(const EvalInput& input, std::size_t group_min_size = 2);

std::string format_value(const MaybeValue& v);

}  // namespace rlm
