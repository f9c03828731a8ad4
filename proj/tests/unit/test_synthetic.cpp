#include <doctest.h>

#include <cmath>
#include <random>

#include "rlm/common.hpp"
#include "rlm/evalmetrics.hpp"
#include "rlm/synthetic.hpp"

using namespace rlm;

TEST_CASE("op count examples") {
  CHECK(static_op_count("(x+y)*z") == 2);
  CHECK(static_op_count("x") == 0);
  CHECK(static_op_count(" ( x +  y ) *\tz ") == 2);
  CHECK(static_op_count("t0 = a * 3; t1 = t0 - b; t1 + t0 * 2") == 4);
  CHECK_THROWS_AS(static_op_count("(x+"), ParseError);
  CHECK_THROWS_AS(static_op_count("x y"), ParseError);
}

TEST_CASE("exec metrics examples") {
  const auto one = exec_metrics("x", 1);
  CHECK(one.step_count == 1);
  CHECK(one.peak_stack == 1);
  const auto three = exec_metrics("(x+y)*z", 1);
  CHECK(three.step_count == 5);
  CHECK(three.peak_stack == 2);
  // right-nested tree needs a deeper stack
  CHECK(exec_metrics("x-(y-(z-w))", 1).peak_stack == 4);
  CHECK(exec_metrics("2*3+4", 0).value == 10);
  CHECK_THROWS_AS(exec_metrics("t9 + 1", 1), ConfigError);
}

TEST_CASE("size forcing and re-parsing") {
  const auto p = gen_program(1, SizeParams{1, 1, 1});
  CHECK(static_op_count(p.source) == 1);
  for (int i = 0; i < 2000; ++i) {
    const auto q = gen_program(derive_seed(77, i), SizeParams{1, 16, 3});
    CHECK_NOTHROW(static_op_count(q.source));
    CHECK_NOTHROW(exec_metrics(q.source, 5));
  }
}

TEST_CASE("op counts are uniform over the size range") {
  const SizeParams size{1, 16, 3};
  std::vector<int> counts(17, 0);
  for (int i = 0; i < 10000; ++i) ++counts[static_op_count(gen_program(derive_seed(123, i), size).source)];
  CHECK(counts[0] == 0);
  double chi2 = 0.0;
  const double expected = 10000.0 / 16.0;
  for (int k = 1; k <= 16; ++k) chi2 += (counts[k] - expected) * (counts[k] - expected) / expected;
  // 15 degrees of freedom, p = 0.001
  CHECK(chi2 < 37.7);
}

TEST_CASE("exec metrics correlate with each other and with op count") {
  const auto ex = make_synthetic_examples(10000, 31, MetricSet::both);
  std::vector<double> ops, steps, peak;
  for (const auto& e : ex) {
    REQUIRE(e.metrics.size() == 3);
    ops.push_back(e.metrics[0].value);
    steps.push_back(e.metrics[1].value);
    peak.push_back(e.metrics[2].value);
  }
  CHECK(*pearson(steps, peak) > 0.0);
  CHECK(*spearman(ops, steps) > 0.5);
}

TEST_CASE("generation is deterministic") {
  const auto a = make_synthetic_examples(50, 9, MetricSet::both);
  const auto b = make_synthetic_examples(50, 9, MetricSet::both);
  CHECK(a == b);
  CHECK(a.front().task_id == "synth");
  CHECK(make_synthetic_examples(1, 9, MetricSet::cheap).front().metrics.front().name == "op_count");
  const auto exec = make_synthetic_examples(1, 9, MetricSet::exec).front();
  CHECK(exec.metrics[0].name == "step_count");
  CHECK(exec.metrics[1].name == "peak_stack");
  CHECK(parse_metric_set("exec") == MetricSet::exec);
  CHECK_THROWS_AS(parse_metric_set("fast"), ConfigError);
}
