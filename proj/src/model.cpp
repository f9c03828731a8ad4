#include "rlm/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "rlm/common.hpp"

namespace rlm {

std::string_view head_kind_name(HeadKind kind) {
  switch (kind) {
    case HeadKind::decoder:
      return "decoder";
    case HeadKind::mse_head:
      return "mse_head";
    case HeadKind::mse_head_normalized:
      return "mse_head_normalized";
  }
  return "decoder";
}

HeadKind parse_head_kind(std::string_view name) {
  if (name == "decoder") return HeadKind::decoder;
  if (name == "mse_head") return HeadKind::mse_head;
  if (name == "mse_head_normalized") return HeadKind::mse_head_normalized;
  throw ConfigError("unknown head kind '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(encoder_layers, "encoder_layers");
  positive(heads, "heads");
  positive(model_dim, "model_dim");
  positive(ff_dim, "ff_dim");
  positive(text_vocab_size, "text_vocab_size");
  positive(max_encoder_len, "max_encoder_len");
  if (model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
  if (uses_decoder()) {
    positive(decoder_layers, "decoder_layers");
    positive(max_decoder_len, "max_decoder_len");
    if (numeric_vocab_size != NumericFormat::kTokenCount)
      throw ConfigError("numeric_vocab_size must be 12");
    numeric.validate();
    if (numeric.base != text_vocab_size)
      throw ConfigError("numeric token base must follow the text vocabulary");
    validate_for_metrics(1);
  }
}

void ModelConfig::validate_for_metrics(std::size_t metrics) const {
  if (!uses_decoder()) {
    if (metrics != 1) throw ConfigError("regression heads predict exactly one metric");
    return;
  }
  const std::size_t need = metrics * numeric.length() + 1;
  if (static_cast<std::size_t>(max_decoder_len) < need)
    throw ConfigError("max_decoder_len " + std::to_string(max_decoder_len) + " cannot hold " +
                      std::to_string(metrics) + " metrics (needs " + std::to_string(need) + ")");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "encoder_layers=" << encoder_layers << '\n'
     << "decoder_layers=" << decoder_layers << '\n'
     << "heads=" << heads << '\n'
     << "model_dim=" << model_dim << '\n'
     << "ff_dim=" << ff_dim << '\n'
     << "text_vocab_size=" << text_vocab_size << '\n'
     << "numeric_vocab_size=" << numeric_vocab_size << '\n'
     << "max_encoder_len=" << max_encoder_len << '\n'
     << "max_decoder_len=" << max_decoder_len << '\n'
     << "head_kind=" << head_kind_name(head_kind) << '\n'
     << "mantissa_digits=" << numeric.mantissa_digits << '\n'
     << "exponent_digits=" << numeric.exponent_digits << '\n'
     << "numeric_base=" << numeric.base << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig c;
  std::istringstream is{std::string(text)};
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("model config line without '='", 0);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    auto as_int = [&]() { return std::stoi(val); };
    if (key == "encoder_layers") c.encoder_layers = as_int();
    else if (key == "decoder_layers") c.decoder_layers = as_int();
    else if (key == "heads") c.heads = as_int();
    else if (key == "model_dim") c.model_dim = as_int();
    else if (key == "ff_dim") c.ff_dim = as_int();
    else if (key == "text_vocab_size") c.text_vocab_size = as_int();
    else if (key == "numeric_vocab_size") c.numeric_vocab_size = as_int();
    else if (key == "max_encoder_len") c.max_encoder_len = as_int();
    else if (key == "max_decoder_len") c.max_decoder_len = as_int();
    else if (key == "head_kind") c.head_kind = parse_head_kind(val);
    else if (key == "mantissa_digits") c.numeric.mantissa_digits = as_int();
    else if (key == "exponent_digits") c.numeric.exponent_digits = as_int();
    else if (key == "numeric_base") c.numeric.base = as_int();
    else throw ParseError("unknown model config key '" + key + "'", 0);
  }
  return c;
}

TokenId to_decoder_id(TokenId global, const NumericFormat& fmt) {
  if (global == kPadId) return 0;
  if (global == kEosId) return 1;
  if (global >= fmt.base && global < fmt.base + NumericFormat::kTokenCount)
    return 2 + (global - fmt.base);
  throw ConfigError("token id " + std::to_string(global) + " is not a decoder token");
}

TokenId from_decoder_id(TokenId local, const NumericFormat& fmt) {
  if (local == 0) return kPadId;
  if (local == 1) return kEosId;
  if (local >= 2 && local < 2 + NumericFormat::kTokenCount) return fmt.base + (local - 2);
  throw ConfigError("decoder id " + std::to_string(local) + " out of range");
}

PackedIds PackedIds::pack(const std::vector<std::vector<TokenId>>& seqs) {
  PackedIds p;
  std::size_t at = 0;
  for (const auto& s : seqs) {
    p.ids.insert(p.ids.end(), s.begin(), s.end());
    p.segments.push_back({at, at + s.size()});
    at += s.size();
  }
  return p;
}

PaddedBatch PaddedBatch::from(const std::vector<std::vector<TokenId>>& seqs) {
  PaddedBatch b;
  b.batch = seqs.size();
  for (const auto& s : seqs) b.width = std::max(b.width, s.size());
  b.ids.assign(b.batch * b.width, kPadId);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::copy(seqs[i].begin(), seqs[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.width));
    b.lengths.push_back(seqs[i].size());
  }
  return b;
}

std::vector<TokenId> decoder_inputs(std::span<const TokenId> targets, const NumericFormat& fmt) {
  std::vector<TokenId> in;
  in.reserve(targets.size());
  in.push_back(0);
  for (std::size_t i = 0; i + 1 < targets.size(); ++i) in.push_back(to_decoder_id(targets[i], fmt));
  return in;
}

namespace {

// Builds the network on a graph. Store is ParameterStore<T> (trainable leaves) or
// const ParameterStore<T> (read-only leaves).
template <class T, class Store>
struct Builder {
  using Var = typename Graph<T>::Var;
  const ModelConfig& cfg;
  Store& ps;
  Graph<T>& g;

  Var p(const std::string& name) { return g.param(ps.get(name)); }
  Var ln(Var x, const std::string& pre) { return g.layer_norm(x, p(pre + ".g"), p(pre + ".b")); }
  Var lin(Var x, const std::string& pre) { return g.linear(x, p(pre + ".w"), p(pre + ".b")); }

  Var mha(Var xq, Var xkv, const Segments& qs, const Segments& ks, const std::string& pre,
          bool causal) {
    Var q = lin(xq, pre + ".q");
    Var k = lin(xkv, pre + ".k");
    Var v = lin(xkv, pre + ".v");
    Var a = g.attention(q, k, v, qs, ks, static_cast<std::size_t>(cfg.heads), causal);
    return lin(a, pre + ".o");
  }
  Var ffn(Var x, const std::string& pre) { return lin(g.gelu(lin(x, pre + ".fc1")), pre + ".fc2"); }

  Var encoder(const PackedIds& in) {
    Var x = g.embedding(p("enc.tok"), in.ids);
    x = g.add_positions(x, p("enc.pos"), in.segments);
    for (int l = 0; l < cfg.encoder_layers; ++l) {
      const std::string pre = "enc." + std::to_string(l);
      Var h = ln(x, pre + ".ln1");
      x = g.add(x, mha(h, h, in.segments, in.segments, pre + ".attn", false));
      h = ln(x, pre + ".ln2");
      x = g.add(x, ffn(h, pre + ".ffn"));
    }
    return ln(x, "enc.ln_f");
  }

  Var decoder(Var memory, const Segments& ms, std::span<const TokenId> ids, const Segments& ds) {
    Var y = g.embedding(p("dec.tok"), ids);
    y = g.add_positions(y, p("dec.pos"), ds);
    for (int l = 0; l < cfg.decoder_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      Var h = ln(y, pre + ".ln1");
      y = g.add(y, mha(h, h, ds, ds, pre + ".self", true));
      h = ln(y, pre + ".ln2");
      y = g.add(y, mha(h, memory, ds, ms, pre + ".cross", false));
      h = ln(y, pre + ".ln3");
      y = g.add(y, ffn(h, pre + ".ffn"));
    }
    return lin(ln(y, "dec.ln_f"), "dec.out");
  }

  Var head(const PackedIds& in) { return lin(g.mean_pool(encoder(in), in.segments), "head"); }
};

template <class T>
void add_linear(ParameterStore<T>& ps, const std::string& pre, std::size_t in, std::size_t out) {
  ps.add(pre + ".w", in, out);
  ps.add(pre + ".b", 1, out);
}

template <class T>
void add_norm(ParameterStore<T>& ps, const std::string& pre, std::size_t d) {
  ps.add(pre + ".g", 1, d).value.data.assign(d, T(1));
  ps.add(pre + ".b", 1, d);
}

template <class T>
void add_attention(ParameterStore<T>& ps, const std::string& pre, std::size_t d) {
  for (const char* part : {".q", ".k", ".v", ".o"}) add_linear(ps, pre + part, d, d);
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

template <class T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.model_dim);
  const auto ff = static_cast<std::size_t>(config_.ff_dim);

  params_.add("enc.tok", static_cast<std::size_t>(config_.text_vocab_size), d);
  params_.add("enc.pos", static_cast<std::size_t>(config_.max_encoder_len), d);
  for (int l = 0; l < config_.encoder_layers; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    add_norm(params_, pre + ".ln1", d);
    add_attention(params_, pre + ".attn", d);
    add_norm(params_, pre + ".ln2", d);
    add_linear(params_, pre + ".ffn.fc1", d, ff);
    add_linear(params_, pre + ".ffn.fc2", ff, d);
  }
  add_norm(params_, "enc.ln_f", d);

  int residual_blocks = 2 * config_.encoder_layers;
  if (config_.uses_decoder()) {
    params_.add("dec.tok", static_cast<std::size_t>(config_.decoder_vocab_size()), d);
    params_.add("dec.pos", static_cast<std::size_t>(config_.max_decoder_len), d);
    for (int l = 0; l < config_.decoder_layers; ++l) {
      const std::string pre = "dec." + std::to_string(l);
      add_norm(params_, pre + ".ln1", d);
      add_attention(params_, pre + ".self", d);
      add_norm(params_, pre + ".ln2", d);
      add_attention(params_, pre + ".cross", d);
      add_norm(params_, pre + ".ln3", d);
      add_linear(params_, pre + ".ffn.fc1", d, ff);
      add_linear(params_, pre + ".ffn.fc2", ff, d);
    }
    add_norm(params_, "dec.ln_f", d);
    add_linear(params_, "dec.out", d, static_cast<std::size_t>(config_.decoder_vocab_size()));
    residual_blocks = std::max(residual_blocks, 3 * config_.decoder_layers);
  } else {
    add_linear(params_, "head", d, 1);
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_scale = 1.0 / std::sqrt(static_cast<double>(residual_blocks));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter<T>& p = params_[i];
    double stddev = 0.0;
    if (ends_with(p.name, ".tok") || ends_with(p.name, ".pos")) {
      stddev = 1.0 / std::sqrt(static_cast<double>(d));
    } else if (ends_with(p.name, ".w")) {
      stddev = 1.0 / std::sqrt(static_cast<double>(p.value.rows));
      if (ends_with(p.name, ".o.w") || ends_with(p.name, ".fc2.w")) stddev *= residual_scale;
    }
    if (stddev > 0.0)
      for (auto& x : p.value.data) x = static_cast<T>(stddev * normal(rng));
  }
}

template <class T>
void Model<T>::set_encoder_trainable(bool trainable) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name.rfind("enc.", 0) == 0) params_[i].trainable = trainable;
}

template <class T>
void Model<T>::check_input(const PackedIds& input) const {
  for (TokenId id : input.ids)
    if (id < 0 || id >= config_.text_vocab_size)
      throw ConfigError("encoder id " + std::to_string(id) + " outside text vocabulary of " +
                        std::to_string(config_.text_vocab_size));
  for (const auto& s : input.segments)
    if (s.size() > static_cast<std::size_t>(config_.max_encoder_len))
      throw ConfigError("encoder input of length " + std::to_string(s.size()) +
                        " exceeds max_encoder_len " + std::to_string(config_.max_encoder_len));
}

template <class T>
typename Model<T>::Var Model<T>::encode(Graph<T>& g, const PackedIds& input) {
  check_input(input);
  return Builder<T, ParameterStore<T>>{config_, params_, g}.encoder(input);
}

template <class T>
typename Model<T>::Var Model<T>::encode(Graph<T>& g, const PackedIds& input) const {
  check_input(input);
  return Builder<T, const ParameterStore<T>>{config_, params_, g}.encoder(input);
}

template <class T>
typename Model<T>::Var Model<T>::decode(Graph<T>& g, Var memory, const Segments& ms,
                                        std::span<const TokenId> ids, const Segments& ds) {
  if (!config_.uses_decoder()) throw ConfigError("model has no decoder");
  return Builder<T, ParameterStore<T>>{config_, params_, g}.decoder(memory, ms, ids, ds);
}

template <class T>
typename Model<T>::Var Model<T>::decode(Graph<T>& g, Var memory, const Segments& ms,
                                        std::span<const TokenId> ids, const Segments& ds) const {
  if (!config_.uses_decoder()) throw ConfigError("model has no decoder");
  return Builder<T, const ParameterStore<T>>{config_, params_, g}.decoder(memory, ms, ids, ds);
}

template <class T>
typename Model<T>::Var Model<T>::head(Graph<T>& g, const PackedIds& input) {
  if (config_.uses_decoder()) throw ConfigError("model has no regression head");
  check_input(input);
  return Builder<T, ParameterStore<T>>{config_, params_, g}.head(input);
}

template <class T>
typename Model<T>::Var Model<T>::head(Graph<T>& g, const PackedIds& input) const {
  if (config_.uses_decoder()) throw ConfigError("model has no regression head");
  check_input(input);
  return Builder<T, const ParameterStore<T>>{config_, params_, g}.head(input);
}

template <class T>
typename Model<T>::Var Model<T>::decoder_loss(Graph<T>& g, const PackedIds& input,
                                              const std::vector<std::vector<TokenId>>& targets) {
  if (targets.size() != input.segments.size())
    throw ConfigError("decoder_loss: one target sequence per input required");
  std::vector<TokenId> dec_ids;
  std::vector<int> dec_targets;
  Segments ds;
  for (const auto& t : targets) {
    if (t.size() > static_cast<std::size_t>(config_.max_decoder_len))
      throw ConfigError("target sequence longer than max_decoder_len");
    const std::size_t start = dec_ids.size();
    auto in = decoder_inputs(t, config_.numeric);
    dec_ids.insert(dec_ids.end(), in.begin(), in.end());
    for (TokenId id : t) dec_targets.push_back(to_decoder_id(id, config_.numeric));
    ds.push_back({start, dec_ids.size()});
  }
  Var memory = encode(g, input);
  Var logits = decode(g, memory, input.segments, dec_ids, ds);
  return g.cross_entropy(logits, dec_targets);
}

template <class T>
double Model<T>::normalize_target(const std::string& task, double y) const {
  if (config_.head_kind != HeadKind::mse_head_normalized) return y;
  auto it = ranges_.find(task);
  if (it == ranges_.end()) throw ConfigError("normalized head has no range for task '" + task + "'");
  const double span = it->second.second - it->second.first;
  return span > 0 ? (y - it->second.first) / span : y - it->second.first;
}

template <class T>
double Model<T>::denormalize(const std::string& task, double raw) const {
  if (config_.head_kind != HeadKind::mse_head_normalized) return raw;
  auto it = ranges_.find(task);
  if (it == ranges_.end()) throw ConfigError("normalized head has no range for task '" + task + "'");
  const double span = it->second.second - it->second.first;
  return it->second.first + (span > 0 ? raw * span : raw);
}

template <class T>
typename Model<T>::Var Model<T>::mse_loss(Graph<T>& g, const PackedIds& input,
                                          std::span<const double> targets,
                                          std::span<const std::string> tasks) {
  if (targets.size() != input.segments.size() || tasks.size() != targets.size())
    throw ConfigError("mse_loss: one target and task per input required");
  std::vector<T> scaled(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    scaled[i] = static_cast<T>(normalize_target(tasks[i], targets[i]));
  Var pred = head(g, input);
  return g.mse(pred, scaled);
}

template <class T>
PaddedStates<T> Model<T>::encode_forward(const PaddedBatch& batch) const {
  if (batch.lengths.size() != batch.batch || batch.ids.size() != batch.batch * batch.width)
    throw ConfigError("encode_forward: inconsistent padded batch");
  std::vector<std::vector<TokenId>> seqs(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    if (batch.lengths[b] > batch.width) throw ConfigError("encode_forward: length exceeds width");
    auto first = batch.ids.begin() + static_cast<std::ptrdiff_t>(b * batch.width);
    seqs[b].assign(first, first + static_cast<std::ptrdiff_t>(batch.lengths[b]));
  }
  const PackedIds packed = PackedIds::pack(seqs);
  Graph<T> g(false);
  const Tensor<T>& states = g.value(encode(g, packed));
  PaddedStates<T> out;
  out.batch = batch.batch;
  out.width = batch.width;
  out.dim = static_cast<std::size_t>(config_.model_dim);
  out.lengths = batch.lengths;
  out.data.assign(out.batch * out.width * out.dim, T(0));
  for (std::size_t b = 0; b < batch.batch; ++b) {
    const RowRange r = packed.segments[b];
    for (std::size_t i = 0; i < r.size(); ++i)
      std::copy_n(states.row(r.begin + i), out.dim, out.data.data() + (b * out.width + i) * out.dim);
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> Model<T>::decode_logits(
    const PaddedStates<T>& memory, const std::vector<std::vector<TokenId>>& prefixes) const {
  if (prefixes.size() != memory.batch) throw ConfigError("decode_logits: one prefix per input");
  Graph<T> g(false);
  std::size_t total = 0;
  for (auto len : memory.lengths) total += len;
  Tensor<T> mem(total, memory.dim);
  Segments ms;
  std::size_t at = 0;
  for (std::size_t b = 0; b < memory.batch; ++b) {
    for (std::size_t i = 0; i < memory.lengths[b]; ++i)
      std::copy_n(memory.at(b, i), memory.dim, mem.row(at + i));
    ms.push_back({at, at + memory.lengths[b]});
    at += memory.lengths[b];
  }
  std::vector<TokenId> ids;
  Segments ds;
  for (const auto& pre : prefixes) {
    if (pre.size() + 1 > static_cast<std::size_t>(config_.max_decoder_len))
      throw ConfigError("decoder prefix exceeds max_decoder_len");
    const std::size_t start = ids.size();
    ids.push_back(0);
    for (TokenId t : pre) ids.push_back(to_decoder_id(t, config_.numeric));
    ds.push_back({start, ids.size()});
  }
  const Tensor<T>& logits = g.value(decode(g, g.constant(std::move(mem)), ms, ids, ds));
  std::vector<Tensor<T>> out;
  for (const auto& s : ds) {
    Tensor<T> t(s.size(), logits.cols);
    std::copy_n(logits.row(s.begin), s.size() * logits.cols, t.data.data());
    out.push_back(std::move(t));
  }
  return out;
}

template <class T>
Tensor<T> Model<T>::encode_one(std::span<const TokenId> ids) const {
  PackedIds packed;
  packed.ids.assign(ids.begin(), ids.end());
  packed.segments = {{0, ids.size()}};
  Graph<T> g(false);
  return g.value(encode(g, packed));
}

template <class T>
Tensor<T> Model<T>::next_token_logits(const Tensor<T>& memory,
                                      const std::vector<std::vector<TokenId>>& prefixes) const {
  Graph<T> g(false);
  std::vector<TokenId> ids;
  Segments ds, ms;
  for (const auto& pre : prefixes) {
    if (pre.size() + 1 > static_cast<std::size_t>(config_.max_decoder_len))
      throw ConfigError("decoder prefix exceeds max_decoder_len");
    const std::size_t start = ids.size();
    ids.push_back(0);
    for (TokenId t : pre) ids.push_back(to_decoder_id(t, config_.numeric));
    ds.push_back({start, ids.size()});
    ms.push_back({0, memory.rows});
  }
  const Tensor<T>& logits = g.value(decode(g, g.constant(memory), ms, ids, ds));
  Tensor<T> out(prefixes.size(), logits.cols);
  for (std::size_t i = 0; i < ds.size(); ++i)
    std::copy_n(logits.row(ds[i].end - 1), logits.cols, out.row(i));
  return out;
}

template <class T>
double Model<T>::mse_head_forward(std::span<const TokenId> ids, const std::string& task) const {
  if (config_.head_kind == HeadKind::mse_head_normalized && !ranges_.count(task))
    throw ConfigError("normalized head has no range for task '" + task + "'");
  PackedIds packed;
  packed.ids.assign(ids.begin(), ids.end());
  packed.segments = {{0, ids.size()}};
  Graph<T> g(false);
  const double raw = static_cast<double>(g.value(head(g, packed)).data[0]);
  return denormalize(task, raw);
}

template <class T>
template <class U>
void Model<T>::copy_parameters_from(const Model<U>& other) {
  if (!(other.config() == config_)) throw ConfigError("copy_parameters_from: config mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& src = other.params()[i].value.data;
    auto& dst = params_[i].value.data;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(src[j]);
  }
  ranges_ = other.task_ranges();
}

GradCheckResult grad_check(ParameterStore<double>& params, const std::function<double()>& loss,
                           const std::function<void()>& compute_gradients, std::size_t samples,
                           std::uint64_t seed, double step, double floor) {
  params.zero_grad();
  compute_gradients();
  const std::size_t total = params.element_count();
  if (total == 0) return {};
  std::mt19937_64 rng(seed);
  GradCheckResult result;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = rng() % total;
    std::size_t pi = 0;
    while (flat >= params[pi].value.size()) flat -= params[pi++].value.size();
    Parameter<double>& p = params[pi];
    double& x = p.value.data[flat];
    const double saved = x;
    x = saved + step;
    const double up = loss();
    x = saved - step;
    const double down = loss();
    x = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double analytic = p.grad.data[flat];
    const double denom = std::max({std::fabs(analytic), std::fabs(numeric), floor});
    const double rel = std::fabs(analytic - numeric) / denom;
    if (rel > result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_parameter = p.name;
    }
    ++result.coordinates;
  }
  return result;
}

template class Model<float>;
template class Model<double>;
template void Model<float>::copy_parameters_from<double>(const Model<double>&);
template void Model<double>::copy_parameters_from<float>(const Model<float>&);
template void Model<float>::copy_parameters_from<float>(const Model<float>&);
template void Model<double>::copy_parameters_from<double>(const Model<double>&);

}  // namespace rlm
