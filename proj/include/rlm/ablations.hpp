#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rlm/dataset.hpp"
#include "rlm/evalmetrics.hpp"
#include "rlm/model.hpp"
#include "rlm/sampler.hpp"
#include "rlm/tokenizer.hpp"
#include "rlm/trainer.hpp"

namespace rlm {

/// Model config adopting the vocabulary size and numeric format of `vocab`.
ModelConfig config_for(const Vocabulary& vocab, ModelConfig base);

/// BPE vocabulary over the example inputs, or byte level when target_size <= 259.
Vocabulary vocab_for(const std::vector<RegressionExample>& examples, std::size_t target_size);

TaskMixture single_task(std::vector<RegressionExample> examples);

/// Point predictions of metric `metric` for every example (decoder median or head output).
std::vector<double> predict_metric(const Model<float>& model, const Vocabulary& vocab,
                                   const std::vector<RegressionExample>& examples, std::size_t metric,
                                   std::size_t num_metrics, const PredictRequest& req);

MaybeValue heldout_spearman(const Model<float>& model, const Vocabulary& vocab,
                            const std::vector<RegressionExample>& test, const PredictRequest& req);

// --- head comparison ------------------------------------------------------

/// Three tasks over the same program distribution whose op_count label is mapped
/// affinely onto [0, 1], [50, 60] and [80, 100].
std::vector<std::vector<RegressionExample>> make_range_tasks(std::size_t per_task, std::uint64_t seed);

/// MSE heads run encoder-only with encoder_layers + decoder_layers layers.
struct HeadComparisonOptions {
  std::uint64_t seed = 0;
  std::size_t train_per_task = 1200;
  std::size_t test_per_task = 150;
  std::size_t steps = 600;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  std::size_t vocab_size = 384;
  std::size_t samples = 16;
  ModelConfig model{};
};

struct HeadResult {
  HeadKind head;
  std::vector<std::string> tasks;
  std::vector<MaybeValue> rho;
  /// Mean over tasks; missing tasks count as zero.
  double mean_rho = 0.0;
};

std::vector<HeadResult> run_head_comparison(const HeadComparisonOptions& opts);

// --- encoder context length ----------------------------------------------

/// Filler prose followed by a program; the label is the op count of the trailing program.
std::vector<RegressionExample> make_late_signal_examples(std::size_t n, std::uint64_t seed,
                                                         std::size_t filler_bytes);

struct SeqLenOptions {
  std::uint64_t seed = 0;
  std::size_t train_examples = 1500;
  std::size_t test_examples = 200;
  std::size_t filler_bytes = 200;
  std::vector<int> max_lens = {128, 512};
  std::size_t steps = 500;
  std::size_t batch_size = 16;
  double peak_lr = 1e-3;
  std::size_t samples = 9;
  ModelConfig model{};
};

struct SeqLenResult {
  int max_len = 0;
  MaybeValue rho;
};

std::vector<SeqLenResult> run_seq_len(const SeqLenOptions& opts);

// --- pretrain transfer ----------------------------------------------------

struct TransferOptions {
  std::uint64_t seed = 0;
  std::size_t finetune_examples = 1000;
  std::size_t validation_examples = 200;
  std::size_t max_steps = 400;
  std::size_t eval_every = 10;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  double target_val_loss = 0.25;
  bool freeze_encoder = false;
};

struct TransferResult {
  std::optional<std::size_t> pretrained_steps;
  std::optional<std::size_t> random_steps;
  double pretrained_final_val = 0.0;
  double random_final_val = 0.0;
  bool pretrained_faster() const;
};

/// Finetunes a copy of `pretrained` and a freshly initialized model of the same config
/// on the exec step_count task; both stop at the validation target.
TransferResult run_transfer(const Model<float>& pretrained, const Vocabulary& vocab,
                            const TransferOptions& opts);

struct PretrainOptions {
  std::uint64_t seed = 0;
  std::size_t train_examples = 10000;
  std::size_t test_examples = 500;
  std::size_t steps = 1500;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  std::size_t vocab_size = 384;
  std::size_t samples = 16;
  ModelConfig model{};
};

struct PretrainResult {
  Model<float> model;
  Vocabulary vocab;
  MaybeValue heldout_rho;
  TrainResult train;
};

/// Cheap-metric (op_count) pretraining on synthetic programs.
PretrainResult run_cheap_pretrain(const PretrainOptions& opts);

/// Runs a named preset ("head-comparison", "seq-len", "pretrain-transfer") and returns
/// the report text. `quick` shrinks every budget for smoke runs.
std::string run_ablation(std::string_view preset, std::uint64_t seed, bool quick);

}  // namespace rlm
