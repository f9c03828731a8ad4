#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace rlm {

struct Metric {
  std::string name;
  double value = 0.0;
  friend bool operator==(const Metric&, const Metric&) = default;
};

/// One labeled input: the text x and its ordered metric values y, y', ...
struct RegressionExample {
  std::string task_id;
  std::optional<std::string> group_id;
  std::string input_text;
  std::vector<Metric> metrics;

  std::vector<double> values() const;
  friend bool operator==(const RegressionExample&, const RegressionExample&) = default;
};

/// Throws ConfigError if metrics are empty, names repeat, or a value is non-finite.
void validate_example(const RegressionExample& ex);

/// One JSON object per line: task_id, group_id (optional), input_text, metrics[{name, value}].
std::string to_record_line(const RegressionExample& ex);
RegressionExample parse_record_line(std::string_view line);

enum class OnBadRecord { skip_and_log, abort };

struct RecordError {
  std::size_t line = 0;
  std::string message;
};

/// Streams records from a line-delimited file. Blank lines are ignored.
class RecordReader {
 public:
  explicit RecordReader(const std::filesystem::path& path,
                        OnBadRecord policy = OnBadRecord::abort);

  /// Next valid record, or nullopt at end of file. Under `abort` a malformed line throws
  /// ParseError whose position is the 1-based line number.
  std::optional<RegressionExample> next();
  const std::vector<RecordError>& errors() const noexcept { return errors_; }

 private:
  std::ifstream in_;
  std::string name_;
  OnBadRecord policy_;
  std::size_t line_no_ = 0;
  std::vector<RecordError> errors_;
};

struct LoadResult {
  std::vector<RegressionExample> examples;
  std::vector<RecordError> errors;
};

LoadResult load_examples(const std::filesystem::path& path,
                         OnBadRecord policy = OnBadRecord::abort);
void write_examples(const std::filesystem::path& path, std::span<const RegressionExample> examples);

inline constexpr std::string_view kPromptSeparator = "---";

/// "statement\n---\ninput_text" when the statement is requested and present, else input_text.
std::string assemble_prompt(const RegressionExample& ex, bool include_statement,
                            const std::optional<std::string>& statement);

enum class SplitMode { zero_shot, shared_group };

struct Split {
  std::vector<RegressionExample> train;
  std::vector<RegressionExample> test;
};

/// Hash-based partition. zero_shot keeps each group on one side; shared_group splits
/// inside groups and puts every group of two or more members on both sides.
Split split_examples(std::span<const RegressionExample> examples, double test_fraction,
                     SplitMode mode, std::uint64_t seed);

struct MixtureEntry {
  std::string name;
  std::shared_ptr<const std::vector<RegressionExample>> examples;
  double weight = 1.0;
};

struct TaskMixture {
  std::vector<MixtureEntry> entries;
  std::uint64_t seed = 0;
};

/// Infinite weighted stream: pick a task with probability proportional to its weight,
/// then the next example of that task's current shuffled epoch.
class MixtureStream {
 public:
  explicit MixtureStream(TaskMixture mixture);

  struct Draw {
    std::size_t task;
    const RegressionExample* example;
  };
  Draw next();
  std::vector<Draw> next_batch(std::size_t n);

  const TaskMixture& mixture() const noexcept { return mixture_; }

 private:
  void reshuffle(std::size_t task);

  TaskMixture mixture_;
  std::vector<double> cumulative_;
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::size_t> cursor_;
};

/// Mixture description file: one "weight path" pair per line, '#' comments.
TaskMixture load_mixture_spec(const std::filesystem::path& path, std::uint64_t seed);

}  // namespace rlm
