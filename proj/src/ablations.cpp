#include "rlm/ablations.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "rlm/common.hpp"
#include "rlm/synthetic.hpp"

namespace rlm {

ModelConfig config_for(const Vocabulary& vocab, ModelConfig base) {
  base.text_vocab_size = static_cast<int>(vocab.size());
  base.numeric = vocab.numeric_format();
  base.validate();
  return base;
}

Vocabulary vocab_for(const std::vector<RegressionExample>& examples, std::size_t target_size) {
  if (target_size <= Vocabulary::kBaseSize) return Vocabulary::byte_level();
  std::vector<std::string> corpus;
  corpus.reserve(examples.size());
  for (const auto& ex : examples) corpus.push_back(ex.input_text);
  return train_vocab(corpus, target_size, NumericFormat{});
}

TaskMixture single_task(std::vector<RegressionExample> examples) {
  TaskMixture m;
  const std::string name = examples.empty() ? "task" : examples.front().task_id;
  m.entries.push_back({name, std::make_shared<const std::vector<RegressionExample>>(std::move(examples)), 1.0});
  return m;
}

std::vector<double> predict_metric(const Model<float>& model, const Vocabulary& vocab,
                                   const std::vector<RegressionExample>& examples, std::size_t metric,
                                   std::size_t num_metrics, const PredictRequest& req) {
  std::vector<std::string> texts, tasks;
  for (const auto& ex : examples) {
    texts.push_back(ex.input_text);
    tasks.push_back(ex.task_id);
  }
  PredictRequest r = req;
  r.num_metrics = model.config().uses_decoder() ? num_metrics : 1;
  const auto preds = predict(model, vocab, texts, tasks, r);
  std::vector<double> out;
  out.reserve(preds.size());
  for (const auto& p : preds) out.push_back(p.point.at(model.config().uses_decoder() ? metric : 0));
  return out;
}

MaybeValue heldout_spearman(const Model<float>& model, const Vocabulary& vocab,
                            const std::vector<RegressionExample>& test, const PredictRequest& req) {
  if (test.size() < 2) return std::nullopt;
  const auto pred = predict_metric(model, vocab, test, 0, test.front().metrics.size(), req);
  std::vector<double> truth;
  for (const auto& ex : test) truth.push_back(ex.metrics.front().value);
  return spearman(pred, truth);
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

double round_sig3(double v) {
  const auto enc = encode_number(v, NumericFormat{});
  return decode_number(enc, NumericFormat{});
}

}  // namespace

// --- head comparison ------------------------------------------------------

std::vector<std::vector<RegressionExample>> make_range_tasks(std::size_t per_task, std::uint64_t seed) {
  struct Range {
    const char* name;
    double lo, hi;
  };
  const Range ranges[] = {{"unit", 0.0, 1.0}, {"mid", 50.0, 60.0}, {"high", 80.0, 100.0}};
  const SizeParams size{};
  std::vector<std::vector<RegressionExample>> tasks;
  for (std::size_t t = 0; t < 3; ++t) {
    auto base = make_synthetic_examples(per_task, derive_seed(seed, 100 + t), MetricSet::cheap, size, ranges[t].name);
    for (auto& ex : base) {
      const double ops = ex.metrics.front().value;
      const double frac = (ops - size.min_ops) / static_cast<double>(size.max_ops - size.min_ops);
      ex.input_text = std::string("task ") + ranges[t].name + "\n" + ex.input_text;
      ex.metrics = {{"score", round_sig3(ranges[t].lo + frac * (ranges[t].hi - ranges[t].lo))}};
    }
    tasks.push_back(std::move(base));
  }
  return tasks;
}

std::vector<HeadResult> run_head_comparison(const HeadComparisonOptions& opts) {
  auto train_tasks = make_range_tasks(opts.train_per_task, derive_seed(opts.seed, 1));
  auto test_tasks = make_range_tasks(opts.test_per_task, derive_seed(opts.seed, 2));
  std::vector<RegressionExample> all;
  for (const auto& t : train_tasks) all.insert(all.end(), t.begin(), t.end());
  const Vocabulary vocab = vocab_for(all, opts.vocab_size);

  TaskMixture mixture;
  for (auto& t : train_tasks) {
    const std::string name = t.front().task_id;
    mixture.entries.push_back({name, std::make_shared<const std::vector<RegressionExample>>(std::move(t)), 1.0});
  }
  std::vector<RegressionExample> validation;
  for (const auto& t : test_tasks) validation.insert(validation.end(), t.begin(), t.begin() + std::min<std::size_t>(t.size(), 32));

  std::vector<HeadResult> results;
  for (HeadKind head : {HeadKind::decoder, HeadKind::mse_head, HeadKind::mse_head_normalized}) {
    ModelConfig mc = opts.model;
    mc.head_kind = head;
    // Encoder-only baselines get the decoder's layers too.
    if (head != HeadKind::decoder) mc.encoder_layers += mc.decoder_layers;
    Model<float> model(config_for(vocab, mc), derive_seed(opts.seed, 3));
    TrainConfig tc;
    tc.total_steps = opts.steps;
    tc.batch_size = opts.batch_size;
    tc.peak_lr = opts.peak_lr;
    tc.seed = derive_seed(opts.seed, 4);
    train(model, mixture, vocab, tc, validation);

    HeadResult r{head, {}, {}, 0.0};
    PredictRequest req;
    req.num_samples = opts.samples;
    req.seed = derive_seed(opts.seed, 5);
    for (const auto& t : test_tasks) {
      r.tasks.push_back(t.front().task_id);
      r.rho.push_back(heldout_spearman(model, vocab, t, req));
      r.mean_rho += r.rho.back().value_or(0.0);
    }
    r.mean_rho /= static_cast<double>(test_tasks.size());
    results.push_back(std::move(r));
  }
  return results;
}

// --- encoder context length ----------------------------------------------

std::vector<RegressionExample> make_late_signal_examples(std::size_t n, std::uint64_t seed,
                                                         std::size_t filler_bytes) {
  static const char* const kWords[] = {"the",   "report", "notes",  "that",  "this", "routine", "was",
                                       "added", "during", "review", "after", "some", "minor",   "cleanup",
                                       "and",   "should", "remain", "quite", "fast", "overall"};
  auto out = make_synthetic_examples(n, seed, MetricSet::cheap, SizeParams{}, "late-signal");
  std::mt19937_64 rng(derive_seed(seed, 0x6c617465));
  std::uniform_int_distribution<std::size_t> pick(0, std::size(kWords) - 1);
  for (auto& ex : out) {
    std::string filler;
    while (filler.size() < filler_bytes) {
      filler += kWords[pick(rng)];
      filler += ' ';
    }
    filler.resize(filler_bytes);
    ex.input_text = filler + "\n" + ex.input_text;
  }
  return out;
}

std::vector<SeqLenResult> run_seq_len(const SeqLenOptions& opts) {
  const auto train_set = make_late_signal_examples(opts.train_examples, derive_seed(opts.seed, 1), opts.filler_bytes);
  const auto test_set = make_late_signal_examples(opts.test_examples, derive_seed(opts.seed, 2), opts.filler_bytes);
  const Vocabulary vocab = Vocabulary::byte_level();
  const std::vector<RegressionExample> validation(test_set.begin(),
                                                  test_set.begin() + std::min<std::size_t>(test_set.size(), 32));
  std::vector<SeqLenResult> out;
  for (int len : opts.max_lens) {
    ModelConfig mc = opts.model;
    mc.max_encoder_len = len;
    Model<float> model(config_for(vocab, mc), derive_seed(opts.seed, 3));
    TrainConfig tc;
    tc.total_steps = opts.steps;
    tc.batch_size = opts.batch_size;
    tc.peak_lr = opts.peak_lr;
    tc.seed = derive_seed(opts.seed, 4);
    train(model, single_task(train_set), vocab, tc, validation);
    PredictRequest req;
    req.num_samples = opts.samples;
    req.seed = derive_seed(opts.seed, 5);
    out.push_back({len, heldout_spearman(model, vocab, test_set, req)});
  }
  return out;
}

// --- pretrain transfer ----------------------------------------------------

bool TransferResult::pretrained_faster() const {
  if (!pretrained_steps) return false;
  return !random_steps || *pretrained_steps < *random_steps;
}

namespace {

std::vector<RegressionExample> step_count_examples(std::size_t n, std::uint64_t seed) {
  auto out = make_synthetic_examples(n, seed, MetricSet::exec, SizeParams{}, "synth-exec");
  for (auto& ex : out) ex.metrics.resize(1);
  return out;
}

double last_val(const TrainResult& r) {
  for (auto it = r.trace.rbegin(); it != r.trace.rend(); ++it)
    if (it->val_loss == it->val_loss) return it->val_loss;
  return std::numeric_limits<double>::quiet_NaN();
}

}  // namespace

TransferResult run_transfer(const Model<float>& pretrained, const Vocabulary& vocab, const TransferOptions& opts) {
  const auto train_set = step_count_examples(opts.finetune_examples, derive_seed(opts.seed, 11));
  const auto validation = step_count_examples(opts.validation_examples, derive_seed(opts.seed, 12));
  TrainConfig tc;
  tc.total_steps = opts.max_steps;
  tc.batch_size = opts.batch_size;
  tc.peak_lr = opts.peak_lr;
  tc.eval_every = opts.eval_every;
  tc.seed = derive_seed(opts.seed, 13);
  tc.freeze_encoder = opts.freeze_encoder;
  tc.target_val_loss = opts.target_val_loss;
  tc.stop_at_target = true;

  TransferResult r;
  Model<float> warm(pretrained.config(), 0);
  warm.copy_parameters_from(pretrained);
  const auto a = train(warm, single_task(train_set), vocab, tc, validation);
  r.pretrained_steps = a.steps_to_target;
  r.pretrained_final_val = last_val(a);

  Model<float> cold(pretrained.config(), derive_seed(opts.seed, 14));
  TrainConfig cold_cfg = tc;
  cold_cfg.freeze_encoder = false;
  const auto b = train(cold, single_task(train_set), vocab, cold_cfg, validation);
  r.random_steps = b.steps_to_target;
  r.random_final_val = last_val(b);
  return r;
}

PretrainResult run_cheap_pretrain(const PretrainOptions& opts) {
  auto train_set = make_synthetic_examples(opts.train_examples, derive_seed(opts.seed, 21), MetricSet::cheap);
  const auto test_set = make_synthetic_examples(opts.test_examples, derive_seed(opts.seed, 22), MetricSet::cheap);
  Vocabulary vocab = vocab_for(train_set, opts.vocab_size);
  PretrainResult r{Model<float>(config_for(vocab, opts.model), derive_seed(opts.seed, 23)), vocab, std::nullopt, {}};
  TrainConfig tc;
  tc.total_steps = opts.steps;
  tc.batch_size = opts.batch_size;
  tc.peak_lr = opts.peak_lr;
  tc.seed = derive_seed(opts.seed, 24);
  const std::vector<RegressionExample> validation(test_set.begin(),
                                                  test_set.begin() + std::min<std::size_t>(test_set.size(), 64));
  r.train = train(r.model, single_task(std::move(train_set)), r.vocab, tc, validation);
  PredictRequest req;
  req.num_samples = opts.samples;
  req.seed = derive_seed(opts.seed, 25);
  r.heldout_rho = heldout_spearman(r.model, r.vocab, test_set, req);
  return r;
}

// --- presets ----------------------------------------------------------------

std::string run_ablation(std::string_view preset, std::uint64_t seed, bool quick) {
  std::ostringstream o;
  o << "# rlm ablation " << preset << " seed=" << seed << (quick ? " quick" : "") << '\n';
  if (preset == "head-comparison") {
    HeadComparisonOptions opts;
    opts.seed = seed;
    if (quick) {
      opts.train_per_task = 64;
      opts.test_per_task = 24;
      opts.steps = 20;
      opts.batch_size = 8;
      opts.vocab_size = 300;
      opts.samples = 3;
      opts.model.model_dim = 32;
      opts.model.ff_dim = 64;
      opts.model.heads = 2;
      opts.model.encoder_layers = opts.model.decoder_layers = 1;
    }
    o << "head,task,spearman\n";
    for (const auto& r : run_head_comparison(opts)) {
      for (std::size_t i = 0; i < r.tasks.size(); ++i)
        o << head_kind_name(r.head) << ',' << r.tasks[i] << ',' << format_value(r.rho[i]) << '\n';
      o << head_kind_name(r.head) << ",mean," << fmt(r.mean_rho) << '\n';
    }
  } else if (preset == "seq-len") {
    SeqLenOptions opts;
    opts.seed = seed;
    if (quick) {
      opts.train_examples = 48;
      opts.test_examples = 16;
      opts.filler_bytes = 100;
      opts.max_lens = {64, 192};
      opts.steps = 10;
      opts.batch_size = 4;
      opts.samples = 3;
      opts.model.model_dim = 32;
      opts.model.ff_dim = 64;
      opts.model.heads = 2;
      opts.model.encoder_layers = opts.model.decoder_layers = 1;
    }
    o << "max_len,spearman\n";
    for (const auto& r : run_seq_len(opts)) o << r.max_len << ',' << format_value(r.rho) << '\n';
  } else if (preset == "pretrain-transfer") {
    PretrainOptions pre;
    pre.seed = seed;
    TransferOptions tr;
    tr.seed = seed;
    if (quick) {
      pre.train_examples = 64;
      pre.test_examples = 16;
      pre.steps = 20;
      pre.batch_size = 8;
      pre.vocab_size = 300;
      pre.samples = 3;
      pre.model.model_dim = 32;
      pre.model.ff_dim = 64;
      pre.model.heads = 2;
      pre.model.encoder_layers = pre.model.decoder_layers = 1;
      tr.finetune_examples = 64;
      tr.validation_examples = 16;
      tr.max_steps = 20;
      tr.eval_every = 5;
      tr.batch_size = 8;
    }
    auto p = run_cheap_pretrain(pre);
    o << "pretrain_heldout_spearman," << format_value(p.heldout_rho) << '\n';
    const auto t = run_transfer(p.model, p.vocab, tr);
    auto steps = [](const std::optional<std::size_t>& s) { return s ? std::to_string(*s) : std::string("not_reached"); };
    o << "target_val_loss," << fmt(tr.target_val_loss) << '\n';
    o << "arm,steps_to_target,final_val_loss\n";
    o << "pretrained," << steps(t.pretrained_steps) << ',' << fmt(t.pretrained_final_val) << '\n';
    o << "random_init," << steps(t.random_steps) << ',' << fmt(t.random_final_val) << '\n';
  } else {
    throw ConfigError("unknown ablation preset '" + std::string(preset) +
                      "' (expected head-comparison, seq-len or pretrain-transfer)");
  }
  return o.str();
}

}  // namespace rlm
