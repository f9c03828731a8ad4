#include <doctest.h>

#include <cmath>
#include <random>

#include "rlm/checkpoint.hpp"
#include "rlm/common.hpp"
#include "rlm/model.hpp"
#include "rlm/tokenizer.hpp"
#include "test_support.hpp"

using namespace rlm;

namespace {

ModelConfig tiny(HeadKind head = HeadKind::decoder) {
  ModelConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.heads = 2;
  c.model_dim = 16;
  c.ff_dim = 32;
  c.text_vocab_size = 40;
  c.numeric.base = 40;
  c.max_encoder_len = 24;
  c.max_decoder_len = 13;
  c.head_kind = head;
  return c;
}

std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n, int vocab) {
  std::uniform_int_distribution<int> d(3, vocab - 1);
  std::vector<TokenId> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

std::vector<TokenId> random_digits(std::mt19937_64& rng, std::size_t n, const NumericFormat& f) {
  std::uniform_int_distribution<int> d(0, 11);
  std::vector<TokenId> v(n);
  for (auto& x : v) x = f.base + d(rng);
  return v;
}

}  // namespace

TEST_CASE("config validation and text round trip") {
  CHECK_NOTHROW(tiny().validate());
  auto bad = tiny();
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny();
  bad.max_decoder_len = 6;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny();
  bad.numeric.base = 12;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(tiny().validate_for_metrics(3), ConfigError);
  CHECK_NOTHROW(tiny().validate_for_metrics(2));
  CHECK(ModelConfig::from_text(tiny().to_text()) == tiny());
  CHECK(ModelConfig::from_text(tiny(HeadKind::mse_head_normalized).to_text()) == tiny(HeadKind::mse_head_normalized));
  CHECK_THROWS_AS(ModelConfig::from_text("colour=red\n"), ParseError);
}

TEST_CASE("decoder id mapping") {
  const NumericFormat f{3, 1, 300};
  CHECK(to_decoder_id(kPadId, f) == 0);
  CHECK(to_decoder_id(kEosId, f) == 1);
  CHECK(to_decoder_id(f.plus(), f) == 2);
  CHECK(to_decoder_id(f.digit(9), f) == 13);
  for (TokenId l = 0; l < 14; ++l) CHECK(to_decoder_id(from_decoder_id(l, f), f) == l);
  CHECK_THROWS_AS(to_decoder_id(17, f), ConfigError);
}

TEST_CASE("encode_forward shape and padding") {
  Model<double> m(tiny(), 1);
  std::mt19937_64 rng(4);
  const auto a = random_ids(rng, 5, 40);
  const auto b = random_ids(rng, 7, 40);
  const auto batch = PaddedBatch::from({a, b});
  const auto st = m.encode_forward(batch);
  CHECK(st.batch == 2);
  CHECK(st.width == 7);
  CHECK(st.dim == 16);
  for (std::size_t pos = 5; pos < 7; ++pos)
    for (std::size_t j = 0; j < 16; ++j) CHECK(st.at(0, pos)[j] == 0.0);

  // PAD-tail content does not reach real positions.
  auto scrambled = batch;
  scrambled.ids[5] = 17;
  scrambled.ids[6] = 29;
  const auto st2 = m.encode_forward(scrambled);
  for (std::size_t pos = 0; pos < 5; ++pos)
    for (std::size_t j = 0; j < 16; ++j) CHECK(st2.at(0, pos)[j] == st.at(0, pos)[j]);

  // batch composition does not change a row
  const auto alone = m.encode_forward(PaddedBatch::from({a}));
  for (std::size_t pos = 0; pos < 5; ++pos)
    for (std::size_t j = 0; j < 16; ++j) CHECK(alone.at(0, pos)[j] == doctest::Approx(st.at(0, pos)[j]).epsilon(1e-12));
}

TEST_CASE("encoder input errors") {
  Model<double> m(tiny(), 1);
  CHECK_THROWS_AS(m.encode_one(std::vector<TokenId>{41}), ConfigError);
  CHECK_THROWS_AS(m.encode_one(std::vector<TokenId>(25, 5)), ConfigError);
}

TEST_CASE("doubling input embeddings changes outputs") {
  Model<double> m(tiny(), 2);
  std::mt19937_64 rng(5);
  const auto ids = random_ids(rng, 6, 40);
  const auto before = m.encode_one(ids);
  for (auto& x : m.params().get("enc.tok").value.data) x *= 2.0;
  const auto after = m.encode_one(ids);
  double diff = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) diff += std::fabs(before.data[i] - after.data[i]);
  CHECK(diff > 1e-3);
}

TEST_CASE("decoder logits: positions, causality, finiteness") {
  Model<double> m(tiny(), 3);
  std::mt19937_64 rng(6);
  const auto ids = random_ids(rng, 9, 40);
  const auto memory = m.encode_forward(PaddedBatch::from({ids}));
  const auto f = m.config().numeric;

  const auto empty = m.decode_logits(memory, {{}});
  REQUIRE(empty.size() == 1);
  CHECK(empty[0].rows == 1);
  CHECK(empty[0].cols == 14);

  auto prefix = random_digits(rng, 8, f);
  auto changed = prefix;
  changed[5] = f.digit(7) == changed[5] ? f.digit(3) : f.digit(7);
  changed[7] = f.plus();
  const auto l1 = m.decode_logits(memory, {prefix})[0];
  const auto l2 = m.decode_logits(memory, {changed})[0];
  REQUIRE(l1.rows == 9);
  for (std::size_t r = 0; r <= 5; ++r)
    for (std::size_t c = 0; c < l1.cols; ++c) CHECK(l1.at(r, c) == l2.at(r, c));
  double later = 0.0;
  for (std::size_t c = 0; c < l1.cols; ++c) later += std::fabs(l1.at(6, c) - l2.at(6, c));
  CHECK(later > 0.0);
  for (double v : l1.data) CHECK(std::isfinite(v));

  // next_token_logits agrees with the last row of decode_logits
  const auto one = m.encode_one(ids);
  const auto next = m.next_token_logits(one, {prefix});
  for (std::size_t c = 0; c < l1.cols; ++c) CHECK(next.at(0, c) == doctest::Approx(l1.at(8, c)).epsilon(1e-12));
}

TEST_CASE("cross-entropy values") {
  Tensor<double> logits(2, 5);
  logits.at(0, 3) = 40.0;
  logits.at(1, 1) = 40.0;
  const std::vector<int> targets = {3, 1};
  CHECK(ce_loss(logits, std::span<const int>(targets)) < 1e-6);
  Tensor<double> uniform(3, 7, 0.25);
  const std::vector<int> t3 = {0, 6, 2};
  CHECK(ce_loss(uniform, std::span<const int>(t3)) == doctest::Approx(std::log(7.0)).epsilon(1e-14));

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 2.0);
  Tensor<double> r(4, 6);
  for (auto& x : r.data) x = n(rng);
  const std::vector<int> tr = {1, 5, 0, 2};
  Tensor<double> twice(8, 6);
  std::copy(r.data.begin(), r.data.end(), twice.data.begin());
  std::copy(r.data.begin(), r.data.end(), twice.data.begin() + 24);
  const std::vector<int> tt = {1, 5, 0, 2, 1, 5, 0, 2};
  CHECK(ce_loss(twice, std::span<const int>(tt)) == doctest::Approx(ce_loss(r, std::span<const int>(tr))).epsilon(1e-14));
  const std::vector<int> ignored = {1, -1, 0, -1};
  const std::vector<int> kept = {1, 0};
  Tensor<double> sub(2, 6);
  std::copy_n(r.row(0), 6, sub.row(0));
  std::copy_n(r.row(2), 6, sub.row(1));
  CHECK(ce_loss(r, std::span<const int>(ignored)) == doctest::Approx(ce_loss(sub, std::span<const int>(kept))).epsilon(1e-14));
}

TEST_CASE("regression heads") {
  Model<double> m(tiny(HeadKind::mse_head), 4);
  std::mt19937_64 rng(7);
  const auto ids = random_ids(rng, 6, 40);
  m.params().get("head.w").value.zero();
  m.params().get("head.b").value.zero();
  CHECK(m.mse_head_forward(ids, "any") == 0.0);

  Model<double> n(tiny(HeadKind::mse_head_normalized), 4);
  n.task_ranges()["t"] = {50.0, 60.0};
  n.params().get("head.w").value.zero();
  n.params().get("head.b").value.data[0] = 0.5;
  CHECK(n.mse_head_forward(ids, "t") == doctest::Approx(55.0));
  CHECK(n.normalize_target("t", 55.0) == doctest::Approx(0.5));
  CHECK_THROWS_AS(n.mse_head_forward(ids, "unknown"), ConfigError);
}

TEST_CASE("pooled head ignores batch neighbours") {
  Model<double> m(tiny(HeadKind::mse_head), 5);
  std::mt19937_64 rng(8);
  const auto a = random_ids(rng, 4, 40);
  const auto b = random_ids(rng, 11, 40);
  Graph<double> g(false);
  const auto& out = g.value(m.head(g, PackedIds::pack({a, b})));
  CHECK(out.data[0] == doctest::Approx(m.mse_head_forward(a, "")).epsilon(1e-12));
  CHECK(out.data[1] == doctest::Approx(m.mse_head_forward(b, "")).epsilon(1e-12));
}

TEST_CASE("grad_check: linear toy model is exact") {
  ParameterStore<double> ps;
  auto& w = ps.add("w", 3, 2);
  auto& b = ps.add("b", 1, 2);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& x : w.value.data) x = n(rng);
  for (auto& x : b.value.data) x = n(rng);
  Tensor<double> x(4, 3);
  for (auto& v : x.data) v = n(rng);
  auto run = [&](bool grad) {
    Graph<double> g(grad);
    auto out = g.linear(g.constant(x), g.param(w), g.param(b));
    // pooled output summed through a constant projection: linear in the parameters
    auto loss = g.mean_pool(out, {{0, 4}});
    auto l2 = g.linear(loss, g.constant(Tensor<double>(2, 1, 1.0)), g.constant(Tensor<double>(1, 1)));
    if (grad) g.backward(l2);
    return g.value(l2).data[0];
  };
  const auto r = grad_check(ps, [&] { return run(false); }, [&] { run(true); }, 6, 1);
  CHECK(r.coordinates == 6);
  CHECK(r.max_relative_error < 1e-9);
}

TEST_CASE("grad_check: tiny encoder-decoder and regression head") {
  std::mt19937_64 rng(10);
  const auto a = random_ids(rng, 5, 40);
  const auto b = random_ids(rng, 3, 40);
  SUBCASE("decoder") {
    Model<double> m(tiny(), 11);
    const auto f = m.config().numeric;
    const std::vector<std::vector<TokenId>> targets = {encode_targets(std::vector<double>{72.5}, f),
                                                       encode_targets(std::vector<double>{-3.0, 0.01}, f)};
    const auto packed = PackedIds::pack({a, b});
    auto loss = [&](bool grad) {
      Graph<double> g(grad);
      auto l = m.decoder_loss(g, packed, targets);
      if (grad) g.backward(l);
      return g.value(l).data[0];
    };
    const auto r = grad_check(m.params(), [&] { return loss(false); }, [&] { loss(true); }, 300, 12);
    CHECK(r.coordinates == 300);
    CHECK(r.max_relative_error < 1e-3);
  }
  SUBCASE("normalized head") {
    Model<double> m(tiny(HeadKind::mse_head_normalized), 13);
    m.task_ranges()["t"] = {0.0, 10.0};
    const std::vector<double> ys = {3.0, 8.0};
    const std::vector<std::string> tasks = {"t", "t"};
    const auto packed = PackedIds::pack({a, b});
    auto loss = [&](bool grad) {
      Graph<double> g(grad);
      auto l = m.mse_loss(g, packed, ys, tasks);
      if (grad) g.backward(l);
      return g.value(l).data[0];
    };
    const auto r = grad_check(m.params(), [&] { return loss(false); }, [&] { loss(true); }, 200, 14);
    CHECK(r.max_relative_error < 1e-3);
  }
}

TEST_CASE("frozen encoder receives no gradient") {
  Model<double> m(tiny(), 15);
  m.set_encoder_trainable(false);
  std::mt19937_64 rng(16);
  const auto packed = PackedIds::pack({random_ids(rng, 4, 40)});
  const std::vector<std::vector<TokenId>> targets = {encode_targets(std::vector<double>{1.0}, m.config().numeric)};
  m.params().zero_grad();
  Graph<double> g(true);
  g.backward(m.decoder_loss(g, packed, targets));
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& p = m.params()[i];
    if (p.name.rfind("enc.", 0) == 0) {
      for (double v : p.grad.data) CHECK(v == 0.0);
    }
  }
  double dec = 0.0;
  for (double v : m.params().get("dec.out.w").grad.data) dec += std::fabs(v);
  CHECK(dec > 0.0);
}

TEST_CASE("seeded construction is deterministic; precision conversion") {
  Model<float> a(tiny(), 21), b(tiny(), 21), c(tiny(), 22);
  CHECK(a.params().get("enc.0.attn.q.w").value.data == b.params().get("enc.0.attn.q.w").value.data);
  CHECK(a.params().get("enc.0.attn.q.w").value.data != c.params().get("enc.0.attn.q.w").value.data);
  Model<double> d(tiny(), 0);
  d.copy_parameters_from(a);
  std::mt19937_64 rng(3);
  const auto ids = random_ids(rng, 7, 40);
  const auto lf = a.next_token_logits(a.encode_one(ids), {{}});
  const auto ld = d.next_token_logits(d.encode_one(ids), {{}});
  for (std::size_t i = 0; i < lf.size(); ++i) CHECK(lf.data[i] == doctest::Approx(ld.data[i]).epsilon(1e-4));
}

TEST_CASE("checkpoint round trip gives bit-identical logits") {
  rlm::test::TempDir dir;
  auto vocab = Vocabulary::byte_level();
  ModelConfig c = tiny();
  c.text_vocab_size = static_cast<int>(vocab.size());
  c.numeric = vocab.numeric_format();
  Model<float> m(c, 31);
  m.task_ranges()["x"] = {1.0, 2.0};
  AdamState opt;
  opt.step = 7;
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    opt.m.emplace_back(m.params()[i].value.size(), 0.25f);
    opt.v.emplace_back(m.params()[i].value.size(), 0.5f);
  }
  save_checkpoint(dir / "m.ckpt", m, vocab, 99, &opt);
  const auto ck = load_checkpoint(dir / "m.ckpt", vocab.hash());
  CHECK(ck.step == 99);
  CHECK(ck.optimizer.step == 7);
  CHECK(ck.optimizer.m == opt.m);
  CHECK(ck.model.task_ranges() == m.task_ranges());
  CHECK(ck.vocab.serialize() == vocab.serialize());
  const std::vector<TokenId> ids = encode_text("t0 = x * 3; t0 + y", vocab, 24);
  const auto l1 = m.next_token_logits(m.encode_one(ids), {{}, {c.numeric.plus()}});
  const auto l2 = ck.model.next_token_logits(ck.model.encode_one(ids), {{}, {c.numeric.plus()}});
  CHECK(l1.data == l2.data);

  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", vocab.hash() + 1), ConfigError);
  rlm::test::write_file(dir / "junk.ckpt", "definitely not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), ParseError);
  const auto bytes = rlm::test::read_file(dir / "m.ckpt");
  rlm::test::write_file(dir / "cut.ckpt", bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), ParseError);
}

TEST_CASE("empty input text still decodes") {
  Model<double> m(tiny(), 41);
  const auto mem = m.encode_one(std::vector<TokenId>{});
  const auto l = m.next_token_logits(mem, {{}});
  for (double v : l.data) CHECK(std::isfinite(v));
}
