#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "rlm/dataset.hpp"

namespace rlm {

// Toy straight-line language:
//   program    := (assignment ';')* expression
//   assignment := name '=' expression
//   expression := integer literals, names, + - *, parentheses
// Single-letter names are inputs supplied by the environment; longer names must be
// assigned before use. There are no loops, so evaluation always halts.

struct ToyProgram {
  std::string source;
  std::uint64_t seed = 0;
};

struct SizeParams {
  int min_ops = 1;
  int max_ops = 16;
  int num_vars = 3;
};

/// Random program whose operator count is uniform in [min_ops, max_ops].
ToyProgram gen_program(std::mt19937_64& rng, const SizeParams& size);
ToyProgram gen_program(std::uint64_t seed, const SizeParams& size);

/// Number of binary operator nodes. Throws ParseError on malformed source.
int static_op_count(std::string_view source);

struct ExecMetrics {
  std::int64_t step_count = 0;
  std::int64_t peak_stack = 0;
  std::uint64_t value = 0;
};

/// Stack-machine reference run: operands evaluated left then right, one step per load
/// or operator, stack depth sampled after every push. Inputs get seeded values.
/// Throws ConfigError for a name read before assignment.
ExecMetrics exec_metrics(std::string_view source, std::uint64_t env_seed);

enum class MetricSet { cheap, exec, both };
MetricSet parse_metric_set(std::string_view name);

/// Labeled records: cheap -> op_count; exec -> step_count, peak_stack; both -> all three.
std::vector<RegressionExample> make_synthetic_examples(std::size_t n, std::uint64_t seed,
                                                       MetricSet metrics,
                                                       const SizeParams& size = {},
                                                       std::string task_id = "");

}  // namespace rlm
