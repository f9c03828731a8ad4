#include "rlm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "rlm/common.hpp"

namespace rlm {

using nlohmann::json;

std::vector<double> RegressionExample::values() const {
  std::vector<double> out;
  out.reserve(metrics.size());
  for (const auto& m : metrics) out.push_back(m.value);
  return out;
}

void validate_example(const RegressionExample& ex) {
  if (ex.metrics.empty()) throw ConfigError("record has no metrics");
  std::set<std::string_view> names;
  for (const auto& m : ex.metrics) {
    if (!names.insert(m.name).second) throw ConfigError("duplicate metric name '" + m.name + "'");
    if (!std::isfinite(m.value)) throw ConfigError("metric '" + m.name + "' is not finite");
  }
}

std::string to_record_line(const RegressionExample& ex) {
  json j;
  j["task_id"] = ex.task_id;
  if (ex.group_id) j["group_id"] = *ex.group_id;
  j["input_text"] = ex.input_text;
  json metrics = json::array();
  for (const auto& m : ex.metrics) metrics.push_back({{"name", m.name}, {"value", m.value}});
  j["metrics"] = std::move(metrics);
  return j.dump();
}

RegressionExample parse_record_line(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("record is not a JSON object");
  auto require = [&](const char* key) -> const json& {
    auto it = j.find(key);
    if (it == j.end()) throw ConfigError(std::string("missing required field \"") + key + "\"");
    return *it;
  };
  RegressionExample ex;
  const json& task = require("task_id");
  const json& text = require("input_text");
  const json& metrics = require("metrics");
  if (!task.is_string()) throw ConfigError("\"task_id\" must be a string");
  if (!text.is_string()) throw ConfigError("\"input_text\" must be a string");
  if (!metrics.is_array()) throw ConfigError("\"metrics\" must be an array");
  ex.task_id = task.get<std::string>();
  ex.input_text = text.get<std::string>();
  if (auto g = j.find("group_id"); g != j.end() && !g->is_null()) {
    if (!g->is_string()) throw ConfigError("\"group_id\" must be a string");
    ex.group_id = g->get<std::string>();
  }
  for (const auto& m : metrics) {
    if (!m.is_object() || !m.contains("name") || !m.contains("value") || !m["name"].is_string() ||
        !m["value"].is_number())
      throw ConfigError("each metric needs a string \"name\" and a numeric \"value\"");
    ex.metrics.push_back({m["name"].get<std::string>(), m["value"].get<double>()});
  }
  validate_example(ex);
  return ex;
}

RecordReader::RecordReader(const std::filesystem::path& path, OnBadRecord policy)
    : in_(path, std::ios::binary), name_(path.string()), policy_(policy) {
  if (!in_) throw Error("cannot open record file " + name_);
}

std::optional<RegressionExample> RecordReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      return parse_record_line(line);
    } catch (const ConfigError& e) {
      std::string msg = name_ + ":" + std::to_string(line_no_) + ": " + e.what();
      if (policy_ == OnBadRecord::abort) throw ParseError(msg, line_no_);
      log_warn("skipping malformed record " + msg);
      errors_.push_back({line_no_, e.what()});
    }
  }
  return std::nullopt;
}

LoadResult load_examples(const std::filesystem::path& path, OnBadRecord policy) {
  RecordReader reader(path, policy);
  LoadResult out;
  while (auto ex = reader.next()) out.examples.push_back(std::move(*ex));
  out.errors = reader.errors();
  return out;
}

void write_examples(const std::filesystem::path& path,
                    std::span<const RegressionExample> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write records to " + path.string());
  for (const auto& ex : examples) out << to_record_line(ex) << '\n';
  if (!out) throw Error("failed writing records to " + path.string());
}

std::string assemble_prompt(const RegressionExample& ex, bool include_statement,
                            const std::optional<std::string>& statement) {
  if (!include_statement || !statement) return ex.input_text;
  std::string out;
  out.reserve(statement->size() + kPromptSeparator.size() + ex.input_text.size() + 2);
  out += *statement;
  out += '\n';
  out += kPromptSeparator;
  out += '\n';
  out += ex.input_text;
  return out;
}

Split split_examples(std::span<const RegressionExample> examples, double test_fraction,
                     SplitMode mode, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("test_fraction must lie strictly between 0 and 1");
  const std::uint64_t salt = mix64(seed);
  auto hash_of = [&](std::string_view key) { return mix64(fnv1a64(key) ^ salt); };

  std::vector<bool> is_test(examples.size());
  if (mode == SplitMode::zero_shot) {
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (!examples[i].group_id)
        throw ConfigError("zero-shot split needs group_id on every record (record " +
                          std::to_string(i) + ")");
      is_test[i] = unit_interval(hash_of(*examples[i].group_id)) < test_fraction;
    }
  } else {
    std::vector<std::uint64_t> h(examples.size());
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      const auto& ex = examples[i];
      const std::string group = ex.group_id.value_or("");
      h[i] = hash_of(ex.task_id + '\x1f' + group + '\x1f' + ex.input_text);
      is_test[i] = unit_interval(h[i]) < test_fraction;
      if (ex.group_id) groups[group].push_back(i);
    }
    // Every multi-member group must be represented on both sides.
    for (const auto& [name, members] : groups) {
      if (members.size() < 2) continue;
      const auto n_test = static_cast<std::size_t>(
          std::count_if(members.begin(), members.end(), [&](std::size_t i) { return is_test[i]; }));
      auto by_hash = [&](std::size_t a, std::size_t b) { return h[a] < h[b] || (h[a] == h[b] && a < b); };
      if (n_test == 0) is_test[*std::min_element(members.begin(), members.end(), by_hash)] = true;
      if (n_test == members.size())
        is_test[*std::max_element(members.begin(), members.end(), by_hash)] = false;
    }
  }
  Split s;
  for (std::size_t i = 0; i < examples.size(); ++i)
    (is_test[i] ? s.test : s.train).push_back(examples[i]);
  return s;
}

MixtureStream::MixtureStream(TaskMixture mixture) : mixture_(std::move(mixture)), rng_(mixture_.seed) {
  if (mixture_.entries.empty()) throw ConfigError("mixture has no tasks");
  double total = 0.0;
  for (const auto& e : mixture_.entries) {
    if (!(e.weight >= 0.0) || !std::isfinite(e.weight))
      throw ConfigError("mixture weight for '" + e.name + "' must be a finite nonnegative number");
    if (e.weight > 0.0 && (!e.examples || e.examples->empty()))
      throw ConfigError("mixture task '" + e.name + "' has positive weight but no examples");
    total += e.weight;
    cumulative_.push_back(total);
  }
  if (total <= 0.0) throw ConfigError("mixture needs at least one positive weight");
  for (auto& c : cumulative_) c /= total;
  order_.resize(mixture_.entries.size());
  cursor_.assign(mixture_.entries.size(), 0);
  for (std::size_t t = 0; t < mixture_.entries.size(); ++t)
    if (mixture_.entries[t].weight > 0.0) reshuffle(t);
}

void MixtureStream::reshuffle(std::size_t task) {
  auto& order = order_[task];
  order.resize(mixture_.entries[task].examples->size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Fisher-Yates with explicit draws keeps streams identical across standard libraries.
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng_() % i]);
  cursor_[task] = 0;
}

MixtureStream::Draw MixtureStream::next() {
  const double u = unit_interval(rng_());
  std::size_t task = 0;
  while (task + 1 < cumulative_.size() &&
         (u >= cumulative_[task] || mixture_.entries[task].weight == 0.0))
    ++task;
  if (cursor_[task] >= order_[task].size()) reshuffle(task);
  const std::size_t idx = order_[task][cursor_[task]++];
  return {task, &(*mixture_.entries[task].examples)[idx]};
}

std::vector<MixtureStream::Draw> MixtureStream::next_batch(std::size_t n) {
  std::vector<Draw> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(next());
  return out;
}

TaskMixture load_mixture_spec(const std::filesystem::path& path, std::uint64_t seed) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open mixture spec " + path.string());
  TaskMixture mix;
  mix.seed = seed;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    double weight = 0;
    std::string file;
    if (!(ls >> weight)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 'weight path'",
                       line_no);
    }
    if (!(ls >> file))
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": missing path", line_no);
    std::filesystem::path p(file);
    if (p.is_relative()) p = path.parent_path() / p;
    auto loaded = load_examples(p);
    mix.entries.push_back({p.stem().string(),
                           std::make_shared<const std::vector<RegressionExample>>(
                               std::move(loaded.examples)),
                           weight});
  }
  return mix;
}

}  // namespace rlm
