#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlm/checkpoint.hpp"
#include "rlm/common.hpp"
#include "rlm/dataset.hpp"
#include "rlm/model.hpp"
#include "rlm/tokenizer.hpp"

namespace rlm {

struct TrainConfig {
  static constexpr double kPretrainLr = 1e-3;
  static constexpr double kFinetuneLr = 5e-5;

  std::size_t total_steps = 1000;
  std::size_t batch_size = 32;
  double peak_lr = kPretrainLr;
  double warmup_fraction = 0.10;
  double grad_clip_norm = 2.0;
  std::uint64_t seed = 0;
  /// Validation and checkpoint interval in steps; 0 evaluates only after the last step.
  std::size_t eval_every = 0;
  bool freeze_encoder = false;

  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// First evaluation at or below this validation loss is reported in steps_to_target.
  std::optional<double> target_val_loss;
  bool stop_at_target = false;
  /// When set, a checkpoint is written at every evaluation.
  std::filesystem::path checkpoint_dir;

  void validate() const;
};

/// Linear warmup over ceil(warmup_fraction * total) steps, then cosine decay to zero.
double lr_at(std::size_t step, const TrainConfig& cfg);

struct EncodedExample {
  std::vector<TokenId> input;
  std::vector<TokenId> targets;
  std::vector<double> values;
  std::string task;
};

EncodedExample encode_example(const RegressionExample& ex, const Vocabulary& vocab,
                              const ModelConfig& config);

struct TrainLogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  /// NaN when no evaluation happened at this step.
  double val_loss = 0.0;
  double grad_norm_before_clip = 0.0;
  double grad_norm_after_clip = 0.0;
};

struct TrainResult {
  std::vector<TrainLogEntry> trace;
  std::optional<std::size_t> steps_to_target;
  std::vector<std::filesystem::path> checkpoints;
  AdamState optimizer;
  std::size_t steps_run = 0;
};

class TrainingError : public Error {
 public:
  TrainingError(std::string msg, std::size_t step, std::string digest)
      : Error(std::move(msg)), step_(step), digest_(std::move(digest)) {}
  std::size_t step() const noexcept { return step_; }
  const std::string& batch_digest() const noexcept { return digest_; }

 private:
  std::size_t step_;
  std::string digest_;
};

/// Clips in place and returns the norm before clipping.
double clip_global_norm(ParameterStore<float>& params, double max_norm);
double global_grad_norm(const ParameterStore<float>& params);

/// One bias-corrected Adam update of every trainable parameter.
void adam_update(ParameterStore<float>& params, AdamState& state, double lr, const TrainConfig& cfg);

/// Token-mean cross-entropy (decoder) or mean squared error (heads) over `examples`.
double validation_loss(Model<float>& model, std::span<const EncodedExample> examples,
                       std::size_t batch_size);

/// Optimizer state starts fresh. Batches come from the weighted mixture, shuffled from cfg.seed.
TrainResult train(Model<float>& model, const TaskMixture& mixture, const Vocabulary& vocab,
                  const TrainConfig& cfg, std::span<const RegressionExample> validation = {});

/// Resumes parameters from `checkpoint` with a fresh optimizer. Refuses a checkpoint whose
/// vocabulary hash differs from `vocab`.
TrainResult finetune(Checkpoint& checkpoint, const Vocabulary& vocab, const TaskMixture& mixture,
                     const TrainConfig& cfg, std::span<const RegressionExample> validation = {});

/// CSV with header step,lr,train_loss,val_loss; missing validation values are empty.
void write_loss_trace(const std::filesystem::path& path, std::span<const TrainLogEntry> trace);

}  // namespace rlm
