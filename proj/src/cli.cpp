#include "rlm/cli.hpp"

#include <glob.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "rlm/ablations.hpp"
#include "rlm/checkpoint.hpp"
#include "rlm/common.hpp"
#include "rlm/dataset.hpp"
#include "rlm/evalmetrics.hpp"
#include "rlm/sampler.hpp"
#include "rlm/synthetic.hpp"
#include "rlm/tokenizer.hpp"
#include "rlm/trainer.hpp"

namespace rlm {

namespace fs = std::filesystem;

std::map<std::string, std::string> parse_config_file(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("config line " + std::to_string(no) + " has no '='", no);
    std::string key = trim(line.substr(0, eq));
    while (!key.empty() && key.front() == '-') key.erase(key.begin());
    if (key.empty()) throw ParseError("config line " + std::to_string(no) + " has an empty key", no);
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

namespace {

struct Options {
  std::uint64_t seed = 0;
  std::string config;
  std::string out_dir = ".";
  std::string log_level = "info";

  // tokenizer-train
  std::vector<std::string> corpus;
  std::size_t vocab_size = 8192;
  int mantissa_digits = 3;
  int exponent_digits = 1;

  // synth-gen
  std::size_t n = 1000;
  std::string metrics = "cheap";
  int min_ops = 1;
  int max_ops = 16;
  int num_vars = 3;
  std::string task_id;

  // train / finetune
  std::string mixture;
  std::vector<std::string> data;
  std::string validation;
  std::size_t val_per_task = 32;
  std::string vocab;
  std::string checkpoint;
  std::size_t steps = 1000;
  std::size_t batch_size = 32;
  double lr = -1.0;
  double warmup_fraction = 0.10;
  double clip_norm = 2.0;
  std::size_t eval_every = 0;
  bool freeze_encoder = false;
  std::string head = "decoder";
  int encoder_layers = 2;
  int decoder_layers = 2;
  int heads = 4;
  int model_dim = 128;
  int ff_dim = 512;
  int max_encoder_len = 256;
  int max_decoder_len = 0;  // 0: fit the widest training record
  std::string trace;

  // predict
  std::string input;
  std::size_t num_metrics = 1;
  std::size_t samples = 64;
  std::string agg = "median";
  double temperature = 1.0;
  bool keep_samples = false;
  double quantile = -1.0;

  // evaluate
  std::string pred;
  std::string truth;
  std::size_t group_min_size = 2;
  std::string report;

  // ablate
  std::string preset;
  bool quick = false;

  std::string out;
};

std::string output_path(const Options& o, const std::string& explicit_path, const std::string& fallback) {
  if (!explicit_path.empty()) return explicit_path;
  fs::create_directories(o.out_dir);
  return (fs::path(o.out_dir) / fallback).string();
}

std::vector<std::string> expand_globs(const std::vector<std::string>& patterns) {
  std::vector<std::string> files;
  for (const auto& pat : patterns) {
    glob_t g{};
    const int rc = ::glob(pat.c_str(), 0, nullptr, &g);
    if (rc == 0)
      for (std::size_t i = 0; i < g.gl_pathc; ++i) files.emplace_back(g.gl_pathv[i]);
    globfree(&g);
    if (rc == GLOB_NOMATCH) throw Error("corpus pattern matched no files: " + pat);
    if (rc != 0 && rc != GLOB_NOMATCH) throw Error("cannot expand corpus pattern " + pat);
  }
  return files;
}

std::vector<std::string> read_corpus(const std::vector<std::string>& files) {
  std::vector<std::string> docs;
  for (const auto& f : files) {
    if (fs::path(f).extension() == ".jsonl") {
      for (auto& ex : load_examples(f).examples) docs.push_back(std::move(ex.input_text));
      continue;
    }
    std::ifstream in(f, std::ios::binary);
    if (!in) throw Error("cannot read corpus file " + f);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) docs.push_back(line);
  }
  return docs;
}

std::vector<RegressionExample> read_records(const std::string& path) {
  if (path == "-") {
    std::vector<RegressionExample> out;
    std::string line;
    std::size_t no = 0;
    while (std::getline(std::cin, line)) {
      ++no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        out.push_back(parse_record_line(line));
      } catch (const ConfigError& e) {
        throw ParseError("<stdin>:" + std::to_string(no) + ": " + e.what(), no);
      }
    }
    return out;
  }
  return load_examples(path).examples;
}

ModelConfig model_config_from(const Options& o, const Vocabulary& vocab, const TaskMixture& mixture) {
  ModelConfig mc;
  mc.encoder_layers = o.encoder_layers;
  mc.decoder_layers = o.decoder_layers;
  mc.heads = o.heads;
  mc.model_dim = o.model_dim;
  mc.ff_dim = o.ff_dim;
  mc.max_encoder_len = o.max_encoder_len;
  mc.max_decoder_len = o.max_decoder_len;
  if (mc.max_decoder_len == 0) {
    std::size_t widest = 1;
    for (const auto& e : mixture.entries)
      for (const auto& ex : *e.examples) widest = std::max(widest, ex.metrics.size());
    mc.max_decoder_len = static_cast<int>(widest * vocab.numeric_format().length() + 1);
  }
  mc.head_kind = parse_head_kind(o.head);
  return config_for(vocab, mc);
}

TrainConfig train_config_from(const Options& o, double default_lr) {
  TrainConfig tc;
  tc.total_steps = o.steps;
  tc.batch_size = o.batch_size;
  tc.peak_lr = o.lr >= 0 ? o.lr : default_lr;
  tc.warmup_fraction = o.warmup_fraction;
  tc.grad_clip_norm = o.clip_norm;
  tc.seed = o.seed;
  tc.eval_every = o.eval_every;
  tc.freeze_encoder = o.freeze_encoder;
  tc.validate();
  return tc;
}

/// Mixture plus the validation slice; without --validation the first val_per_task
/// examples of every task are held out.
std::pair<TaskMixture, std::vector<RegressionExample>> load_training_data(const Options& o) {
  TaskMixture mixture;
  if (!o.mixture.empty()) {
    mixture = load_mixture_spec(o.mixture, o.seed);
  } else {
    for (const auto& path : o.data) {
      auto ex = load_examples(path).examples;
      if (ex.empty()) throw Error("no records in " + path);
      mixture.entries.push_back({path, std::make_shared<const std::vector<RegressionExample>>(std::move(ex)), 1.0});
    }
  }
  if (mixture.entries.empty()) throw ConfigError("training needs --mixture or --data");
  std::vector<RegressionExample> validation;
  if (!o.validation.empty()) {
    validation = load_examples(o.validation).examples;
  } else if (o.val_per_task > 0) {
    for (auto& e : mixture.entries) {
      const std::size_t hold = std::min(o.val_per_task, e.examples->size() / 5);
      if (hold == 0) continue;
      validation.insert(validation.end(), e.examples->begin(), e.examples->begin() + static_cast<std::ptrdiff_t>(hold));
      e.examples = std::make_shared<const std::vector<RegressionExample>>(
          e.examples->begin() + static_cast<std::ptrdiff_t>(hold), e.examples->end());
    }
  }
  return {std::move(mixture), std::move(validation)};
}

void report_training(const TrainResult& r, const std::string& ckpt, const std::string& trace, std::ostream& out) {
  write_loss_trace(trace, r.trace);
  out << "steps " << r.steps_run << '\n';
  if (!r.trace.empty()) {
    out << "final_train_loss " << r.trace.back().train_loss << '\n';
    out << "final_val_loss " << format_value(r.trace.back().val_loss == r.trace.back().val_loss
                                                 ? MaybeValue(r.trace.back().val_loss)
                                                 : std::nullopt)
        << '\n';
  }
  out << "checkpoint " << ckpt << '\n' << "loss_trace " << trace << '\n';
}

int cmd_tokenizer_train(const Options& o, std::ostream& out) {
  const auto docs = read_corpus(expand_globs(o.corpus));
  const Vocabulary v = train_vocab(docs, o.vocab_size, NumericFormat{o.mantissa_digits, o.exponent_digits, 0});
  const auto path = output_path(o, o.out, "vocab.txt");
  v.save(path);
  out << "vocab " << path << " size " << v.size() << " merges " << v.merges().size() << " hash " << v.hash()
      << '\n';
  return 0;
}

int cmd_synth_gen(const Options& o, std::ostream& out) {
  const SizeParams size{o.min_ops, o.max_ops, o.num_vars};
  const auto ex = make_synthetic_examples(o.n, o.seed, parse_metric_set(o.metrics), size, o.task_id);
  const auto path = output_path(o, o.out, "synth.jsonl");
  write_examples(path, ex);
  out << "wrote " << ex.size() << " records to " << path << '\n';
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  auto [mixture, validation] = load_training_data(o);
  const Vocabulary vocab = o.vocab.empty() ? Vocabulary::byte_level() : Vocabulary::load(o.vocab);
  Model<float> model(model_config_from(o, vocab, mixture), derive_seed(o.seed, 1));
  const TrainConfig tc = train_config_from(o, TrainConfig::kPretrainLr);
  const auto r = train(model, mixture, vocab, tc, validation);
  const auto ckpt = output_path(o, o.out, "model.ckpt");
  save_checkpoint(ckpt, model, vocab, r.steps_run, &r.optimizer);
  report_training(r, ckpt, output_path(o, o.trace, "loss.csv"), out);
  return 0;
}

int cmd_finetune(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("finetune needs --checkpoint");
  Checkpoint ck = load_checkpoint(o.checkpoint);
  const Vocabulary vocab = o.vocab.empty() ? ck.vocab : Vocabulary::load(o.vocab);
  auto [mixture, validation] = load_training_data(o);
  const TrainConfig tc = train_config_from(o, TrainConfig::kFinetuneLr);
  const auto r = finetune(ck, vocab, mixture, tc, validation);
  const auto ckpt = output_path(o, o.out, "finetuned.ckpt");
  save_checkpoint(ckpt, ck.model, ck.vocab, ck.step, &ck.optimizer);
  report_training(r, ckpt, output_path(o, o.trace, "finetune_loss.csv"), out);
  return 0;
}

int cmd_predict(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("predict needs --checkpoint");
  if (o.input.empty()) throw ConfigError("predict needs --input");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const auto records = read_records(o.input);
  PredictRequest req;
  req.num_metrics = o.num_metrics;
  req.num_samples = o.samples;
  req.temperature = o.temperature;
  req.aggregation = parse_aggregation(o.agg);
  req.seed = o.seed;
  req.keep_samples = o.keep_samples || o.quantile >= 0.0;
  std::vector<std::string> texts, tasks;
  for (const auto& r : records) {
    texts.push_back(r.input_text);
    tasks.push_back(r.task_id);
  }
  const auto preds = predict(ck.model, ck.vocab, texts, tasks, req);

  std::ofstream file;
  std::ostream* sink = &out;
  if (!o.out.empty() && o.out != "-") {
    file.open(o.out, std::ios::binary);
    if (!file) throw Error("cannot write predictions to " + o.out);
    sink = &file;
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    RegressionExample ex = records[i];
    const auto& p = preds[i];
    ex.metrics.resize(p.point.size());
    for (std::size_t j = 0; j < p.point.size(); ++j) {
      if (ex.metrics[j].name.empty()) ex.metrics[j].name = "metric" + std::to_string(j);
      ex.metrics[j].value = p.point[j];
    }
    auto j = nlohmann::json::parse(to_record_line(ex));
    if (o.keep_samples) j["samples"] = p.samples;
    if (o.quantile >= 0.0) {
      std::vector<double> qs;
      for (std::size_t m = 0; m < p.point.size() && !p.samples.empty(); ++m) {
        std::vector<double> col;
        for (const auto& s : p.samples) col.push_back(s[m]);
        qs.push_back(lower_quantile(col, o.quantile));
      }
      j["quantile"] = {{"q", o.quantile}, {"values", qs}};
    }
    *sink << j.dump() << '\n';
  }
  if (file.is_open() && !file) throw Error("failed writing predictions to " + o.out);
  return 0;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  if (o.pred.empty() || o.truth.empty()) throw ConfigError("evaluate needs --pred and --truth");
  const auto pred = load_examples(o.pred).examples;
  const auto truth = load_examples(o.truth).examples;
  if (pred.size() != truth.size())
    throw Error("prediction and truth files differ in record count (" + std::to_string(pred.size()) + " vs " +
                std::to_string(truth.size()) + ")");
  EvalInput in;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    in.tasks.push_back(truth[i].task_id);
    in.groups.push_back(truth[i].group_id.value_or(""));
    in.pred.push_back(pred[i].metrics.front().value);
    in.truth.push_back(truth[i].metrics.front().value);
  }
  const EvalReport r = evaluate(in, o.group_min_size);
  const std::string text = r.to_text();
  const auto path = output_path(o, o.report, "report.txt");
  {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot write report " + path);
    f << text;
  }
  std::ofstream csv(path + ".csv", std::ios::binary);
  csv << r.containment_csv();
  out << text;
  return 0;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const std::string text = run_ablation(o.preset, o.seed, o.quick);
  const auto path = output_path(o, o.report, "ablation-" + o.preset + ".txt");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write report " + path);
  f << text;
  out << text;
  return 0;
}

void add_model_flags(CLI::App* c, Options& o) {
  c->add_option("--head", o.head, "decoder | mse | mse-normalized")->capture_default_str();
  c->add_option("--encoder-layers", o.encoder_layers)->capture_default_str();
  c->add_option("--decoder-layers", o.decoder_layers)->capture_default_str();
  c->add_option("--heads", o.heads)->capture_default_str();
  c->add_option("--model-dim", o.model_dim)->capture_default_str();
  c->add_option("--ff-dim", o.ff_dim)->capture_default_str();
  c->add_option("--max-encoder-len", o.max_encoder_len)->capture_default_str();
  c->add_option("--max-decoder-len", o.max_decoder_len, "0 sizes it from the training records")->capture_default_str();
}

void add_train_flags(CLI::App* c, Options& o) {
  c->add_option("--mixture", o.mixture, "mixture spec file of 'weight path' lines");
  c->add_option("--data", o.data, "record files, one task each (equal weights)");
  c->add_option("--validation", o.validation, "held-out records");
  c->add_option("--val-per-task", o.val_per_task, "held-out examples per task when --validation is absent")
      ->capture_default_str();
  c->add_option("--vocab", o.vocab, "vocabulary file");
  c->add_option("--steps", o.steps)->capture_default_str();
  c->add_option("--batch-size", o.batch_size)->capture_default_str();
  c->add_option("--lr", o.lr, "peak learning rate (default 1e-3 train, 5e-5 finetune)");
  c->add_option("--warmup-fraction", o.warmup_fraction)->capture_default_str();
  c->add_option("--clip-norm", o.clip_norm)->capture_default_str();
  c->add_option("--eval-every", o.eval_every)->capture_default_str();
  c->add_flag("--freeze-encoder", o.freeze_encoder);
  c->add_option("--trace", o.trace, "loss trace CSV path");
  c->add_option("--out", o.out, "checkpoint path");
}

bool is_flag(const CLI::Option* opt) { return opt->get_type_size() == 0; }

/// Appends "--key value" for config keys whose flag is not already on the command line.
std::vector<std::string> inject_config(const std::vector<std::string>& args, CLI::App& app,
                                       CLI::App* sub, const std::map<std::string, std::string>& config) {
  std::vector<std::string> result = args;
  for (const auto& [key, value] : config) {
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub ? sub->get_option_no_throw(flag) : nullptr;
    if (!opt) opt = app.get_option_no_throw(flag);
    if (!opt || key == "config") throw CLI::ExtrasError("unknown config key '" + key + "'", CLI::ExitCodes::ExtrasError);
    bool present = false;
    for (const auto& a : args)
      if (a == flag || a.rfind(flag + "=", 0) == 0) present = true;
    if (present) continue;
    if (is_flag(opt)) {
      if (value == "true" || value == "1") result.push_back(flag);
      else if (value != "false" && value != "0")
        throw CLI::ValidationError(flag, "config value '" + value + "' is not a boolean");
      continue;
    }
    std::istringstream vs(value);
    std::string item;
    while (vs >> item) {
      result.push_back(flag);
      result.push_back(item);
    }
  }
  return result;
}

std::string describe(const CLI::Option* opt) {
  if (opt->count() == 0) return opt->get_default_str();
  std::string v;
  for (const auto& r : opt->results()) v += (v.empty() ? "" : " ") + r;
  return is_flag(opt) && v.empty() ? "true" : v;
}

/// key=value lines for the global flags and the chosen subcommand, reusable as --config.
std::string resolved_config(const CLI::App& app, const CLI::App& sub) {
  std::string out = "# command " + sub.get_name() + "\n";
  for (const CLI::App* a : {&app, &sub})
    for (const CLI::Option* opt : a->get_options()) {
      if (opt->get_lnames().empty() || opt->get_lnames().front() == "help" || opt->get_lnames().front() == "config") continue;
      out += opt->get_lnames().front() + "=" + describe(opt) + "\n";
    }
  if (const auto* p = sub.get_option_no_throw("preset")) out += "# preset " + describe(p) + "\n";
  return out;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Regression language model toolkit", "rlm"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.add_option("--seed", o.seed, "seed for all randomness")->capture_default_str();
  app.add_option("--config", o.config, "flat key=value file; command-line flags override it");
  app.add_option("--out-dir", o.out_dir, "directory for default output paths")->capture_default_str();
  app.add_option("--log-level", o.log_level, "error | warn | info | debug")->capture_default_str();

  auto* tok = app.add_subcommand("tokenizer-train", "learn a BPE vocabulary");
  tok->add_option("--corpus", o.corpus, "corpus files or glob patterns (.jsonl uses input_text)")->required();
  tok->add_option("--size", o.vocab_size, "target vocabulary size")->capture_default_str();
  tok->add_option("--mantissa-digits", o.mantissa_digits)->capture_default_str();
  tok->add_option("--exponent-digits", o.exponent_digits)->capture_default_str();
  tok->add_option("--out", o.out, "vocabulary path");

  auto* syn = app.add_subcommand("synth-gen", "generate labeled toy programs");
  syn->add_option("--n", o.n)->capture_default_str();
  syn->add_option("--metrics", o.metrics, "cheap | exec | both")->capture_default_str();
  syn->add_option("--min-ops", o.min_ops)->capture_default_str();
  syn->add_option("--max-ops", o.max_ops)->capture_default_str();
  syn->add_option("--num-vars", o.num_vars)->capture_default_str();
  syn->add_option("--task-id", o.task_id);
  syn->add_option("--out", o.out, "record path");

  auto* trn = app.add_subcommand("train", "train a model from scratch");
  add_train_flags(trn, o);
  add_model_flags(trn, o);

  auto* fin = app.add_subcommand("finetune", "continue training a checkpoint");
  add_train_flags(fin, o);
  fin->add_option("--checkpoint", o.checkpoint)->required();

  auto* pre = app.add_subcommand("predict", "sample predictions for records");
  pre->add_option("--checkpoint", o.checkpoint)->required();
  pre->add_option("--input", o.input, "records path or - for stdin")->required();
  pre->add_option("--metrics", o.num_metrics, "metrics per record")->capture_default_str();
  pre->add_option("--samples", o.samples)->capture_default_str();
  pre->add_option("--agg", o.agg, "median | mean")->capture_default_str();
  pre->add_option("--temperature", o.temperature)->capture_default_str();
  pre->add_flag("--keep-samples", o.keep_samples, "add raw samples to each output record");
  pre->add_option("--quantile", o.quantile, "also report this lower quantile of the samples");
  pre->add_option("--out", o.out, "output records (default stdout)");

  auto* ev = app.add_subcommand("evaluate", "rank metrics of predictions against truth");
  ev->add_option("--pred", o.pred)->required();
  ev->add_option("--truth", o.truth)->required();
  ev->add_option("--group-min-size", o.group_min_size)->capture_default_str();
  ev->add_option("--report", o.report, "report path; curves go to <report>.csv");

  auto* abl = app.add_subcommand("ablate", "run an ablation preset");
  abl->add_option("preset", o.preset, "head-comparison | seq-len | pretrain-transfer")
      ->required()
      ->check(CLI::IsMember({"head-comparison", "seq-len", "pretrain-transfer"}));
  abl->add_flag("--quick", o.quick, "tiny budgets for smoke runs");
  abl->add_option("--report", o.report, "report path");

  std::vector<std::string> argv = args;
  try {
    // Locate --config and the subcommand before the real parse so file keys can be injected.
    std::string config_path;
    CLI::App* sub = nullptr;
    for (std::size_t i = 0; i < argv.size(); ++i) {
      if (argv[i] == "--config" && i + 1 < argv.size()) config_path = argv[i + 1];
      if (argv[i].rfind("--config=", 0) == 0) config_path = argv[i].substr(9);
      if (!sub) {
        auto* s = app.get_subcommand_no_throw(argv[i]);
        if (s) sub = s;
      }
    }
    if (!config_path.empty()) {
      std::ifstream f(config_path, std::ios::binary);
      if (!f) throw CLI::FileError::Missing(config_path);
      std::ostringstream ss;
      ss << f.rdbuf();
      argv = inject_config(argv, app, sub, parse_config_file(ss.str()));
    }
    std::vector<std::string> reversed(argv.rbegin(), argv.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    set_log_level(parse_log_level(o.log_level));
    const CLI::App* chosen = app.get_subcommands().front();
    const std::string name = chosen->get_name();
    log_info("resolved configuration:\n" + resolved_config(app, *chosen));
    if (name == "tokenizer-train") return cmd_tokenizer_train(o, out);
    if (name == "synth-gen") return cmd_synth_gen(o, out);
    if (name == "train") return cmd_train(o, out);
    if (name == "finetune") return cmd_finetune(o, out);
    if (name == "predict") return cmd_predict(o, out);
    if (name == "evaluate") return cmd_evaluate(o, out);
    if (name == "ablate") return cmd_ablate(o, out);
    err << "error: unhandled command " << name << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int run_command(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_command(args, std::cout, std::cerr);
}

}  // namespace rlm
