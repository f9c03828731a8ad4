#include "rlm/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <unordered_map>

#include "rlm/common.hpp"
#include "rlm/simd/kernels.hpp"

namespace rlm {

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
    throw ConfigError("warmup_fraction must lie in (0, 1)");
  if (!(peak_lr >= 0.0)) throw ConfigError("peak_lr must be nonnegative");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("grad_clip_norm must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  const std::size_t total = cfg.total_steps;
  if (total == 0) return 0.0;
  step = std::min(step, total);
  const auto warm = static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total)));
  if (step < warm) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (total == warm) return cfg.peak_lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

EncodedExample encode_example(const RegressionExample& ex, const Vocabulary& vocab,
                              const ModelConfig& config) {
  EncodedExample e;
  e.input = encode_text(ex.input_text, vocab, static_cast<std::size_t>(config.max_encoder_len));
  e.values = ex.values();
  e.task = ex.task_id;
  if (config.uses_decoder()) {
    config.validate_for_metrics(e.values.size());
    e.targets = encode_targets(e.values, config.numeric);
  } else if (e.values.size() != 1) {
    throw ConfigError("MSE heads predict exactly one metric; record has " +
                      std::to_string(e.values.size()));
  }
  return e;
}

double global_grad_norm(const ParameterStore<float>& params) {
  const auto& k = simd::kernels<float>();
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (!p.trainable || p.grad.data.empty()) continue;
    sq += static_cast<double>(k.sum_sq(p.grad.data.data(), p.grad.size()));
  }
  return std::sqrt(sq);
}

double clip_global_norm(ParameterStore<float>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    const auto& k = simd::kernels<float>();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (p.trainable && !p.grad.data.empty()) k.scale(p.grad.size(), s, p.grad.data.data());
    }
  }
  return norm;
}

void adam_update(ParameterStore<float>& params, AdamState& state, double lr, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].value.size(), 0.0f);
      state.v[i].assign(params[i].value.size(), 0.0f);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const auto b1 = static_cast<float>(cfg.beta1);
  const auto b2 = static_cast<float>(cfg.beta2);
  const auto step_size = static_cast<float>(lr / c1);
  const auto inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  const auto eps = static_cast<float>(cfg.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable || p.grad.data.empty()) continue;
    float* w = p.value.data.data();
    const float* g = p.grad.data.data();
    float* m = state.m[i].data();
    float* v = state.v[i].data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_c2 + eps);
    }
  }
}

namespace {

float batch_loss(Model<float>& model, Graph<float>& g, std::span<const EncodedExample* const> batch) {
  std::vector<std::vector<TokenId>> inputs;
  inputs.reserve(batch.size());
  for (const auto* e : batch) inputs.push_back(e->input);
  const PackedIds packed = PackedIds::pack(inputs);
  Graph<float>::Var loss;
  if (model.config().uses_decoder()) {
    std::vector<std::vector<TokenId>> targets;
    for (const auto* e : batch) targets.push_back(e->targets);
    loss = model.decoder_loss(g, packed, targets);
  } else {
    std::vector<double> ys;
    std::vector<std::string> tasks;
    for (const auto* e : batch) {
      ys.push_back(e->values.front());
      tasks.push_back(e->task);
    }
    loss = model.mse_loss(g, packed, ys, tasks);
  }
  if (g.requires_grad(loss)) g.backward(loss);
  return g.value(loss).data[0];
}

std::string batch_digest(std::span<const MixtureStream::Draw> draws) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& d : draws) h = fnv1a64(d.example->input_text, h);
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void fill_task_ranges(Model<float>& model, const TaskMixture& mixture) {
  if (model.config().head_kind != HeadKind::mse_head_normalized) return;
  for (const auto& entry : mixture.entries) {
    for (const auto& ex : *entry.examples) {
      if (model.task_ranges().count(ex.task_id) || ex.metrics.empty()) continue;
      double lo = std::numeric_limits<double>::infinity();
      double hi = -lo;
      for (const auto& other : *entry.examples) {
        if (other.task_id != ex.task_id || other.metrics.empty()) continue;
        lo = std::min(lo, other.metrics.front().value);
        hi = std::max(hi, other.metrics.front().value);
      }
      model.task_ranges()[ex.task_id] = {lo, hi};
    }
  }
}

}  // namespace

double validation_loss(Model<float>& model, std::span<const EncodedExample> examples,
                       std::size_t batch_size) {
  if (examples.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  double weight = 0.0;
  const bool decoder = model.config().uses_decoder();
  for (std::size_t at = 0; at < examples.size(); at += batch_size) {
    const std::size_t end = std::min(examples.size(), at + batch_size);
    std::vector<const EncodedExample*> batch;
    double w = 0.0;
    for (std::size_t i = at; i < end; ++i) {
      batch.push_back(&examples[i]);
      w += decoder ? static_cast<double>(examples[i].targets.size()) : 1.0;
    }
    Graph<float> g(false);
    total += static_cast<double>(batch_loss(model, g, batch)) * w;
    weight += w;
  }
  return total / weight;
}

TrainResult train(Model<float>& model, const TaskMixture& mixture, const Vocabulary& vocab,
                  const TrainConfig& cfg, std::span<const RegressionExample> validation) {
  cfg.validate();
  if (mixture.entries.empty()) throw ConfigError("training mixture has no tasks");
  if (static_cast<std::size_t>(model.config().text_vocab_size) != vocab.size() ||
      model.config().numeric != vocab.numeric_format())
    throw ConfigError("model and vocabulary disagree on vocabulary size or numeric format");

  fill_task_ranges(model, mixture);
  model.set_encoder_trainable(!cfg.freeze_encoder);

  std::unordered_map<const RegressionExample*, EncodedExample> cache;
  for (const auto& entry : mixture.entries)
    for (const auto& ex : *entry.examples) cache.emplace(&ex, encode_example(ex, vocab, model.config()));
  std::vector<EncodedExample> val;
  val.reserve(validation.size());
  for (const auto& ex : validation) val.push_back(encode_example(ex, vocab, model.config()));

  TaskMixture seeded = mixture;
  seeded.seed = derive_seed(cfg.seed, 0x7472);
  MixtureStream stream(std::move(seeded));

  TrainResult result;
  if (!cfg.checkpoint_dir.empty()) std::filesystem::create_directories(cfg.checkpoint_dir);
  auto& params = model.params();
  std::vector<const EncodedExample*> batch;
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    const auto draws = stream.next_batch(cfg.batch_size);
    batch.clear();
    for (const auto& d : draws) batch.push_back(&cache.at(d.example));

    params.zero_grad();
    Graph<float> g(true);
    const float loss = batch_loss(model, g, batch);
    if (!std::isfinite(loss))
      throw TrainingError("non-finite training loss at step " + std::to_string(step) +
                              " (batch digest " + batch_digest(draws) + ")",
                          step, batch_digest(draws));

    TrainLogEntry entry;
    entry.step = step;
    entry.lr = lr_at(step, cfg);
    entry.train_loss = loss;
    entry.grad_norm_before_clip = clip_global_norm(params, cfg.grad_clip_norm);
    entry.grad_norm_after_clip = global_grad_norm(params);
    adam_update(params, result.optimizer, entry.lr, cfg);
    result.steps_run = step;

    entry.val_loss = std::numeric_limits<double>::quiet_NaN();
    const bool eval_now = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.total_steps;
    if (eval_now) {
      if (!val.empty()) entry.val_loss = validation_loss(model, val, std::max<std::size_t>(cfg.batch_size, 64));
      if (!cfg.checkpoint_dir.empty()) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt-%06zu.bin", step);
        const auto path = cfg.checkpoint_dir / name;
        save_checkpoint(path, model, vocab, step, &result.optimizer);
        result.checkpoints.push_back(path);
      }
      log_debug("step " + std::to_string(step) + " train_loss " + std::to_string(loss) +
                " val_loss " + std::to_string(entry.val_loss));
    }
    result.trace.push_back(entry);
    if (eval_now && cfg.target_val_loss && !result.steps_to_target &&
        entry.val_loss <= *cfg.target_val_loss) {
      result.steps_to_target = step;
      if (cfg.stop_at_target) break;
    }
  }
  model.set_encoder_trainable(true);
  return result;
}

TrainResult finetune(Checkpoint& checkpoint, const Vocabulary& vocab, const TaskMixture& mixture,
                     const TrainConfig& cfg, std::span<const RegressionExample> validation) {
  if (checkpoint.vocab_hash != vocab.hash())
    throw ConfigError("refusing to finetune: checkpoint vocabulary hash differs from the data vocabulary");
  checkpoint.optimizer = {};
  TrainResult r = train(checkpoint.model, mixture, vocab, cfg, validation);
  checkpoint.step += r.steps_run;
  checkpoint.optimizer = r.optimizer;
  return r;
}

void write_loss_trace(const std::filesystem::path& path, std::span<const TrainLogEntry> trace) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write loss trace " + path.string());
  out << "step,lr,train_loss,val_loss\n";
  char buf[128];
  for (const auto& e : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,", e.step, e.lr, e.train_loss);
    out << buf;
    if (std::isfinite(e.val_loss)) {
      std::snprintf(buf, sizeof buf, "%.9g", e.val_loss);
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw Error("failed writing loss trace " + path.string());
}

}  // namespace rlm
