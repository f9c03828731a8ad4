#include "rlm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "rlm/common.hpp"

namespace rlm {

std::string_view aggregation_name(Aggregation a) {
  return a == Aggregation::median ? "median" : "mean";
}

Aggregation parse_aggregation(std::string_view name) {
  if (name == "median") return Aggregation::median;
  if (name == "mean") return Aggregation::mean;
  throw ConfigError("unknown aggregation '" + std::string(name) + "' (expected median or mean)");
}

void PredictRequest::validate() const {
  if (num_metrics == 0) throw ConfigError("num_metrics must be at least 1");
  if (num_samples == 0) throw ConfigError("num_samples must be at least 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
}

template <class T>
std::vector<double> masked_distribution(const T* logits, std::size_t vocab,
                                        std::span<const TokenId> allowed, double temperature) {
  std::vector<double> p(vocab, 0.0);
  double top = -std::numeric_limits<double>::infinity();
  for (TokenId id : allowed) top = std::max(top, static_cast<double>(logits[id]));
  double z = 0.0;
  for (TokenId id : allowed) {
    const double e = std::exp((static_cast<double>(logits[id]) - top) / temperature);
    p[static_cast<std::size_t>(id)] = e;
    z += e;
  }
  for (TokenId id : allowed) p[static_cast<std::size_t>(id)] /= z;
  return p;
}

namespace {

constexpr std::size_t kPrefixChunk = 512;

std::vector<TokenId> local_allowed(std::size_t pos, const NumericFormat& fmt, std::size_t k) {
  auto global = allowed_tokens(pos, fmt, std::min(pos / fmt.length(), k), k);
  for (auto& t : global) t = to_decoder_id(t, fmt);
  return global;
}

template <class T>
Tensor<T> logits_for(const Model<T>& model, const Tensor<T>& memory,
                     const std::vector<std::vector<TokenId>>& prefixes) {
  if (prefixes.size() <= kPrefixChunk) return model.next_token_logits(memory, prefixes);
  Tensor<T> out(prefixes.size(), static_cast<std::size_t>(model.config().decoder_vocab_size()));
  for (std::size_t at = 0; at < prefixes.size(); at += kPrefixChunk) {
    const std::size_t end = std::min(prefixes.size(), at + kPrefixChunk);
    std::vector<std::vector<TokenId>> chunk(prefixes.begin() + static_cast<std::ptrdiff_t>(at),
                                            prefixes.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor<T> part = model.next_token_logits(memory, chunk);
    std::copy(part.data.begin(), part.data.end(), out.row(at));
  }
  return out;
}

void check_decoder(const ModelConfig& config, std::size_t k) {
  if (!config.uses_decoder()) throw ConfigError("sampling requires a decoder head");
  config.validate_for_metrics(k);
}

}  // namespace

template <class T>
std::vector<std::vector<TokenId>> sample_sequences(const Model<T>& model,
                                                   std::span<const TokenId> input_ids,
                                                   const PredictRequest& req) {
  req.validate();
  check_decoder(model.config(), req.num_metrics);
  const NumericFormat& fmt = model.config().numeric;
  const std::size_t steps = req.num_metrics * fmt.length();
  const Tensor<T> memory = model.encode_one(input_ids);
  std::mt19937_64 rng(req.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  std::vector<std::vector<TokenId>> seqs(req.num_samples);
  for (std::size_t pos = 0; pos < steps; ++pos) {
    std::map<std::vector<TokenId>, std::size_t> unique;
    std::vector<std::size_t> slot(seqs.size());
    std::vector<std::vector<TokenId>> prefixes;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      auto [it, fresh] = unique.try_emplace(seqs[i], prefixes.size());
      if (fresh) prefixes.push_back(seqs[i]);
      slot[i] = it->second;
    }
    const Tensor<T> logits = logits_for(model, memory, prefixes);
    const auto allowed = local_allowed(pos, fmt, req.num_metrics);
    std::vector<std::vector<double>> dists;
    dists.reserve(prefixes.size());
    for (std::size_t u = 0; u < prefixes.size(); ++u)
      dists.push_back(masked_distribution(logits.row(u), logits.cols, allowed, req.temperature));
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const auto& p = dists[slot[i]];
      const double r = unif(rng);
      double acc = 0.0;
      TokenId pick = allowed.back();
      for (TokenId id : allowed) {
        acc += p[static_cast<std::size_t>(id)];
        if (r < acc) {
          pick = id;
          break;
        }
      }
      seqs[i].push_back(from_decoder_id(pick, fmt));
    }
  }
  for (auto& s : seqs) s.push_back(kEosId);
  return seqs;
}

template <class T>
std::vector<Sample> sample_predictions(const Model<T>& model, std::span<const TokenId> input_ids,
                                       const PredictRequest& req) {
  const auto seqs = sample_sequences(model, input_ids, req);
  std::vector<Sample> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs)
    out.push_back(decode_targets(s, model.config().numeric, req.num_metrics));
  return out;
}

template <class T>
std::vector<TokenId> greedy_sequence(const Model<T>& model, std::span<const TokenId> input_ids,
                                     std::size_t num_metrics) {
  check_decoder(model.config(), num_metrics);
  const NumericFormat& fmt = model.config().numeric;
  const Tensor<T> memory = model.encode_one(input_ids);
  std::vector<TokenId> seq;
  for (std::size_t pos = 0; pos < num_metrics * fmt.length(); ++pos) {
    const Tensor<T> logits = model.next_token_logits(memory, {seq});
    const auto allowed = local_allowed(pos, fmt, num_metrics);
    TokenId best = allowed.front();
    for (TokenId id : allowed)
      if (logits.data[static_cast<std::size_t>(id)] > logits.data[static_cast<std::size_t>(best)]) best = id;
    seq.push_back(from_decoder_id(best, fmt));
  }
  seq.push_back(kEosId);
  return seq;
}

Sample aggregate_pointwise(std::span<const Sample> samples, Aggregation mode) {
  if (samples.empty()) throw ConfigError("aggregate_pointwise: no samples");
  const std::size_t k = samples.front().size();
  Sample out(k);
  std::vector<double> column(samples.size());
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].size() != k) throw ConfigError("aggregate_pointwise: ragged samples");
      column[i] = samples[i][j];
    }
    if (mode == Aggregation::mean) {
      double s = 0.0;
      for (double v : column) s += v;
      out[j] = s / static_cast<double>(column.size());
    } else {
      out[j] = lower_quantile(column, 0.5);
    }
  }
  return out;
}

double lower_quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ConfigError("lower_quantile: no values");
  if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile must lie in [0, 1]");
  const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1)));
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(idx), values.end());
  return values[idx];
}

std::vector<Prediction> predict(const Model<float>& model, const Vocabulary& vocab,
                                std::span<const std::string> texts, std::span<const std::string> tasks,
                                const PredictRequest& req) {
  req.validate();
  if (!tasks.empty() && tasks.size() != texts.size())
    throw ConfigError("predict: one task id per text required");
  std::vector<Prediction> out;
  out.reserve(texts.size());
  const auto max_len = static_cast<std::size_t>(model.config().max_encoder_len);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    const auto ids = encode_text(texts[i], vocab, max_len);
    Prediction p;
    if (model.config().uses_decoder()) {
      PredictRequest r = req;
      r.seed = derive_seed(req.seed, i);
      auto samples = sample_predictions(model, ids, r);
      p.point = aggregate_pointwise(samples, req.aggregation);
      if (req.keep_samples) p.samples = std::move(samples);
    } else {
      if (req.num_metrics != 1) throw ConfigError("MSE heads predict exactly one metric");
      p.point = {model.mse_head_forward(ids, tasks.empty() ? std::string() : tasks[i])};
    }
    out.push_back(std::move(p));
  }
  return out;
}

#define RLM_INSTANTIATE(T)                                                                        \
  template std::vector<double> masked_distribution<T>(const T*, std::size_t,                      \
                                                      std::span<const TokenId>, double);          \
  template std::vector<std::vector<TokenId>> sample_sequences<T>(                                 \
      const Model<T>&, std::span<const TokenId>, const PredictRequest&);                          \
  template std::vector<Sample> sample_predictions<T>(const Model<T>&, std::span<const TokenId>,   \
                                                     const PredictRequest&);                      \
  template std::vector<TokenId> greedy_sequence<T>(const Model<T>&, std::span<const TokenId>,     \
                                                   std::size_t);
RLM_INSTANTIATE(float)
RLM_INSTANTIATE(double)
#undef RLM_INSTANTIATE

}  // namespace rlm
