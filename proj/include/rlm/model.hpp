#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rlm/autograd.hpp"
#include "rlm/numeric_codec.hpp"

namespace rlm {

enum class HeadKind { decoder, mse_head, mse_head_normalized };

std::string_view head_kind_name(HeadKind kind);
HeadKind parse_head_kind(std::string_view name);

struct ModelConfig {
  int encoder_layers = 2;
  int decoder_layers = 2;
  int heads = 4;
  int model_dim = 128;
  int ff_dim = 512;
  int text_vocab_size = 259;
  int numeric_vocab_size = NumericFormat::kTokenCount;
  int max_encoder_len = 256;
  int max_decoder_len = 8;
  HeadKind head_kind = HeadKind::decoder;
  NumericFormat numeric{};

  /// Decoder ids: PAD (also the start token), EOS, then the numeric tokens.
  int decoder_vocab_size() const noexcept { return numeric_vocab_size + 2; }
  bool uses_decoder() const noexcept { return head_kind == HeadKind::decoder; }

  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;
  /// Decoder must fit `metrics` numbers plus EOS.
  void validate_for_metrics(std::size_t metrics) const;

  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Global numeric/EOS/PAD id -> decoder-local id and back.
TokenId to_decoder_id(TokenId global, const NumericFormat& fmt);
TokenId from_decoder_id(TokenId local, const NumericFormat& fmt);

/// Sequences stored back to back.
struct PackedIds {
  std::vector<TokenId> ids;
  Segments segments;

  static PackedIds pack(const std::vector<std::vector<TokenId>>& seqs);
};

/// Rectangular batch with trailing padding; row b holds lengths[b] real tokens.
struct PaddedBatch {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::vector<TokenId> ids;
  std::vector<std::size_t> lengths;

  static PaddedBatch from(const std::vector<std::vector<TokenId>>& seqs);
};

/// (batch, width, dim) encoder states; padded positions are zero.
template <class T>
struct PaddedStates {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::size_t dim = 0;
  std::vector<T> data;
  std::vector<std::size_t> lengths;

  const T* at(std::size_t b, std::size_t pos) const { return data.data() + (b * width + pos) * dim; }
};

/// Encoder-decoder transformer with learned absolute positions and pre-norm residual
/// blocks. With an MSE head kind only the encoder and a pooled affine head exist.
template <class T>
class Model {
 public:
  using Var = typename Graph<T>::Var;

  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  ParameterStore<T>& params() noexcept { return params_; }
  const ParameterStore<T>& params() const noexcept { return params_; }

  /// Per-task (min, max) used by the normalized MSE head.
  std::map<std::string, std::pair<double, double>>& task_ranges() noexcept { return ranges_; }
  const std::map<std::string, std::pair<double, double>>& task_ranges() const noexcept {
    return ranges_;
  }

  void set_encoder_trainable(bool trainable);

  // Graph builders. Non-const overloads record gradients for trainable parameters.
  Var encode(Graph<T>& g, const PackedIds& input);
  Var encode(Graph<T>& g, const PackedIds& input) const;
  /// Logits for every decoder input row. `decoder_ids` are decoder-local.
  Var decode(Graph<T>& g, Var memory, const Segments& memory_segments,
             std::span<const TokenId> decoder_ids, const Segments& decoder_segments);
  Var decode(Graph<T>& g, Var memory, const Segments& memory_segments,
             std::span<const TokenId> decoder_ids, const Segments& decoder_segments) const;
  /// Raw head output (n x 1) from mean-pooled encoder states.
  Var head(Graph<T>& g, const PackedIds& input);
  Var head(Graph<T>& g, const PackedIds& input) const;

  /// Token-mean cross-entropy of decoder targets (global ids ending in EOS).
  Var decoder_loss(Graph<T>& g, const PackedIds& input,
                   const std::vector<std::vector<TokenId>>& targets);
  /// MSE against raw targets; the normalized head rescales per task first.
  Var mse_loss(Graph<T>& g, const PackedIds& input, std::span<const double> targets,
               std::span<const std::string> tasks);

  /// Padded-batch view of the encoder.
  PaddedStates<T> encode_forward(const PaddedBatch& batch) const;
  /// For each prefix (global numeric ids) the logits at positions 0..prefix.size().
  std::vector<Tensor<T>> decode_logits(const PaddedStates<T>& memory,
                                       const std::vector<std::vector<TokenId>>& prefixes) const;
  /// Next-token logits after each prefix, all attending to one encoded input.
  Tensor<T> next_token_logits(const Tensor<T>& memory,
                              const std::vector<std::vector<TokenId>>& prefixes) const;
  /// Encoded single input as a (length x dim) matrix.
  Tensor<T> encode_one(std::span<const TokenId> ids) const;
  /// Scalar prediction of an MSE head, un-scaled for the normalized variant.
  double mse_head_forward(std::span<const TokenId> ids, const std::string& task) const;

  double normalize_target(const std::string& task, double y) const;
  double denormalize(const std::string& task, double raw) const;

  /// Conversion between precisions with identical shapes.
  template <class U>
  void copy_parameters_from(const Model<U>& other);

 private:
  void check_input(const PackedIds& input) const;

  ModelConfig config_;
  ParameterStore<T> params_;
  std::map<std::string, std::pair<double, double>> ranges_;
};

/// Tokens of `targets` shifted right behind the start token, as decoder-local ids.
std::vector<TokenId> decoder_inputs(std::span<const TokenId> targets, const NumericFormat& fmt);

/// Token-mean negative log-likelihood of target ids (< 0 ignored) under row logits.
template <class T>
T ce_loss(const Tensor<T>& logits, std::span<const int> targets) {
  return cross_entropy_value(logits, targets);
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
};

/// Central finite differences against analytic gradients on `samples` random
/// coordinates. Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(ParameterStore<double>& params, const std::function<double()>& loss,
                           const std::function<void()>& compute_gradients, std::size_t samples,
                           std::uint64_t seed, double step = 1e-5, double floor = 1e-6);

}  // namespace rlm
