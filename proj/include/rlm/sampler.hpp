#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rlm/model.hpp"
#include "rlm/tokenizer.hpp"

namespace rlm {

enum class Aggregation { median, mean };
std::string_view aggregation_name(Aggregation a);
Aggregation parse_aggregation(std::string_view name);

struct PredictRequest {
  std::size_t num_metrics = 1;
  std::size_t num_samples = 64;
  double temperature = 1.0;
  Aggregation aggregation = Aggregation::median;
  std::uint64_t seed = 0;
  bool keep_samples = false;

  void validate() const;
};

/// One decoded tuple of num_metrics values.
using Sample = std::vector<double>;

/// Softmax at `temperature` restricted to `allowed` (decoder-local ids). Every other
/// entry is exactly zero.
template <class T>
std::vector<double> masked_distribution(const T* logits, std::size_t vocab,
                                        std::span<const TokenId> allowed, double temperature);

/// Token sequences (global ids, ending in EOS) of `num_samples` constrained samples.
/// Identical prefixes share one decoder pass per step.
template <class T>
std::vector<std::vector<TokenId>> sample_sequences(const Model<T>& model,
                                                   std::span<const TokenId> input_ids,
                                                   const PredictRequest& req);

template <class T>
std::vector<Sample> sample_predictions(const Model<T>& model, std::span<const TokenId> input_ids,
                                       const PredictRequest& req);

/// Argmax decoding under the same grammar mask.
template <class T>
std::vector<TokenId> greedy_sequence(const Model<T>& model, std::span<const TokenId> input_ids,
                                     std::size_t num_metrics);

/// Componentwise median (lower middle for even counts) or mean.
Sample aggregate_pointwise(std::span<const Sample> samples, Aggregation mode);

/// Lower empirical quantile: the sorted element at floor(q * (n - 1)).
double lower_quantile(std::vector<double> values, double q);

struct Prediction {
  Sample point;
  std::vector<Sample> samples;
};

/// Encodes each text, samples (or runs the regression head) and aggregates. Per-text
/// random streams are derived from req.seed and the text index.
std::vector<Prediction> predict(const Model<float>& model, const Vocabulary& vocab,
                                std::span<const std::string> texts, std::span<const std::string> tasks,
                                const PredictRequest& req);

}  // namespace rlm
