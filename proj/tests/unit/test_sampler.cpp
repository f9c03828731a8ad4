#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "rlm/common.hpp"
#include "rlm/numeric_codec.hpp"
#include "rlm/sampler.hpp"

using namespace rlm;

namespace {

ModelConfig sampler_config() {
  ModelConfig c;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.heads = 2;
  c.model_dim = 16;
  c.ff_dim = 32;
  c.text_vocab_size = static_cast<int>(Vocabulary::kBaseSize);
  c.numeric = Vocabulary::byte_level().numeric_format();
  c.max_encoder_len = 32;
  c.max_decoder_len = 13;
  return c;
}

std::vector<TokenId> some_input() { return encode_text("t0 = a + b; t0 * c", Vocabulary::byte_level(), 32); }

bool is_valid_stream(const std::vector<TokenId>& seq, const NumericFormat& f, std::size_t k) {
  if (seq.size() != k * f.length() + 1 || seq.back() != kEosId) return false;
  for (std::size_t pos = 0; pos < seq.size(); ++pos) {
    const auto allowed = allowed_tokens(pos, f, std::min(pos / f.length(), k), k);
    if (std::find(allowed.begin(), allowed.end(), seq[pos]) == allowed.end()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("masked distribution puts exactly zero mass outside the allowed set") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 3.0);
  std::vector<float> logits(14);
  for (int trial = 0; trial < 200; ++trial) {
    for (auto& x : logits) x = static_cast<float>(n(rng));
    std::vector<TokenId> allowed;
    for (TokenId t = 0; t < 14; ++t)
      if (rng() % 3 == 0) allowed.push_back(t);
    if (allowed.empty()) allowed.push_back(5);
    const double temp = 0.25 + static_cast<double>(trial % 7) * 0.5;
    const auto p = masked_distribution(logits.data(), logits.size(), allowed, temp);
    double total = 0.0;
    for (TokenId t = 0; t < 14; ++t) {
      const bool in = std::find(allowed.begin(), allowed.end(), t) != allowed.end();
      if (!in) CHECK(p[static_cast<std::size_t>(t)] == 0.0);
      total += p[static_cast<std::size_t>(t)];
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    // ratio of two allowed entries follows exp(delta / T)
    if (allowed.size() >= 2) {
      const auto a = static_cast<std::size_t>(allowed[0]);
      const auto b = static_cast<std::size_t>(allowed[1]);
      CHECK(p[a] / p[b] == doctest::Approx(std::exp((double(logits[a]) - double(logits[b])) / temp)).epsilon(1e-9));
    }
  }
}

TEST_CASE("untrained model samples are always well formed") {
  Model<float> model(sampler_config(), 3);
  const auto f = model.config().numeric;
  for (std::size_t k : {1u, 2u}) {
    PredictRequest req;
    req.num_metrics = k;
    req.num_samples = 1000;
    req.seed = 17 + k;
    const auto seqs = sample_sequences(model, some_input(), req);
    REQUIRE(seqs.size() == 1000);
    std::size_t bad = 0;
    for (const auto& s : seqs) bad += !is_valid_stream(s, f, k);
    CHECK(bad == 0);
    const auto samples = sample_predictions(model, some_input(), req);
    for (const auto& s : samples) {
      CHECK(s.size() == k);
      for (double v : s) CHECK(std::isfinite(v));
    }
  }
}

TEST_CASE("first-token frequencies follow the masked distribution") {
  Model<double> model(sampler_config(), 4);
  const auto f = model.config().numeric;
  const auto input = some_input();
  const auto logits = model.next_token_logits(model.encode_one(input), {{}});
  std::vector<TokenId> allowed;
  for (auto t : allowed_tokens(0, f, 0, 1)) allowed.push_back(to_decoder_id(t, f));
  const auto p = masked_distribution(logits.row(0), logits.cols, allowed, 1.0);
  PredictRequest req;
  req.num_samples = 4000;
  req.seed = 5;
  const auto seqs = sample_sequences(model, input, req);
  const double n = static_cast<double>(seqs.size());
  for (TokenId local : allowed) {
    const TokenId global = from_decoder_id(local, f);
    const double count =
        static_cast<double>(std::count_if(seqs.begin(), seqs.end(), [&](const auto& s) { return s[0] == global; }));
    const double expect = n * p[static_cast<std::size_t>(local)];
    const double sd = std::sqrt(n * p[static_cast<std::size_t>(local)] * (1 - p[static_cast<std::size_t>(local)]));
    CHECK(std::fabs(count - expect) <= 4.5 * sd + 1.0);
  }
}

TEST_CASE("near-zero temperature reproduces greedy decoding") {
  Model<float> model(sampler_config(), 6);
  const auto input = some_input();
  const auto greedy = greedy_sequence(model, input, 1);
  PredictRequest req;
  req.num_samples = 20;
  req.temperature = 1e-6;
  for (const auto& s : sample_sequences(model, input, req)) CHECK(s == greedy);
}

TEST_CASE("seeded sampling is reproducible and order preserving") {
  Model<float> model(sampler_config(), 7);
  const auto vocab = Vocabulary::byte_level();
  PredictRequest req;
  req.num_samples = 16;
  req.seed = 99;
  req.keep_samples = true;
  const std::vector<std::string> texts = {"a + b", "t0 = a * b; t0 - c", "(a + b) * c"};
  const std::vector<std::string> tasks(3, "t");
  const auto p1 = predict(model, vocab, texts, tasks, req);
  const auto p2 = predict(model, vocab, texts, tasks, req);
  REQUIRE(p1.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(p1[i].point == p2[i].point);
    CHECK(p1[i].samples == p2[i].samples);
    CHECK(p1[i].samples.size() == 16);
  }
  // a text's prediction does not depend on its neighbours beyond its index
  const std::vector<std::string> reversed = {texts[2], texts[1], texts[0]};
  const auto p3 = predict(model, vocab, reversed, tasks, req);
  CHECK(p3[1].samples == p1[1].samples);
  req.seed = 100;
  const auto p4 = predict(model, vocab, texts, tasks, req);
  CHECK(p4[0].samples != p1[0].samples);
}

TEST_CASE("aggregation") {
  const std::vector<Sample> s = {{1.0}, {2.0}, {100.0}};
  CHECK(aggregate_pointwise(s, Aggregation::median) == Sample{2.0});
  CHECK(aggregate_pointwise(s, Aggregation::mean)[0] == doctest::Approx(34.333333).epsilon(1e-6));
  const std::vector<Sample> one = {{3.5, -1.0}};
  CHECK(aggregate_pointwise(one, Aggregation::median) == one[0]);
  CHECK(aggregate_pointwise(one, Aggregation::mean) == one[0]);
  const std::vector<Sample> even = {{4.0, 1.0}, {1.0, 2.0}, {3.0, 4.0}, {2.0, 3.0}};
  CHECK(aggregate_pointwise(even, Aggregation::median) == Sample{2.0, 2.0});
  CHECK_THROWS_AS(aggregate_pointwise(std::vector<Sample>{}, Aggregation::mean), ConfigError);

  CHECK(parse_aggregation("median") == Aggregation::median);
  CHECK(aggregation_name(Aggregation::mean) == "mean");
  CHECK_THROWS_AS(parse_aggregation("mode"), ConfigError);
}

TEST_CASE("lower quantile") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (std::size_t size : {1u, 2u, 5u, 64u, 65u}) {
    std::vector<double> v(size);
    for (auto& x : v) x = n(rng);
    std::vector<Sample> as_samples;
    for (double x : v) as_samples.push_back({x});
    CHECK(lower_quantile(v, 0.5) == aggregate_pointwise(as_samples, Aggregation::median)[0]);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    CHECK(lower_quantile(v, 0.0) == sorted.front());
    CHECK(lower_quantile(v, 1.0) == sorted.back());
    CHECK(lower_quantile(v, 0.9) == sorted[static_cast<std::size_t>(std::floor(0.9 * (size - 1)))]);
  }
  CHECK_THROWS_AS(lower_quantile({1.0}, 1.5), ConfigError);
}

TEST_CASE("request validation") {
  PredictRequest req;
  CHECK_NOTHROW(req.validate());
  req.num_samples = 0;
  CHECK_THROWS_AS(req.validate(), ConfigError);
  req = {};
  req.temperature = 0.0;
  CHECK_THROWS_AS(req.validate(), ConfigError);
  req = {};
  req.num_metrics = 3;
  Model<float> model(sampler_config(), 8);
  CHECK_THROWS_AS(sample_sequences(model, some_input(), req), ConfigError);
}
