#include "rlm/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "rlm/common.hpp"

namespace rlm {
namespace {

constexpr char kMagic[8] = {'R', 'L', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw Error("cannot write checkpoint " + path.string());
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  template <class U>
  void pod(U v) {
    bytes(&v, sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void floats(const std::vector<float>& v) {
    pod<std::uint64_t>(v.size());
    bytes(v.data(), v.size() * sizeof(float));
  }
  void finish() {
    out_.flush();
    if (!out_) throw Error("failed writing checkpoint " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw Error("cannot read checkpoint " + path.string());
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw ParseError("truncated checkpoint " + path_.string(), static_cast<std::size_t>(in_.gcount()));
  }
  template <class U>
  U pod() {
    U v{};
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ULL << 32)) throw ParseError("corrupt string length in checkpoint", 0);
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::vector<float> floats(std::size_t expected) {
    const auto n = pod<std::uint64_t>();
    if (n != expected) throw ParseError("tensor size mismatch in checkpoint", 0);
    std::vector<float> v(n);
    bytes(v.data(), n * sizeof(float));
    return v;
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const Vocabulary& vocab, std::uint64_t step, const AdamState* optimizer) {
  Writer w(path);
  w.bytes(kMagic, sizeof kMagic);
  w.pod(kVersion);
  w.str(model.config().to_text());
  const std::string vocab_text = vocab.serialize();
  w.pod<std::uint64_t>(fnv1a64(vocab_text));
  w.str(vocab_text);
  w.pod<std::uint64_t>(step);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(model.task_ranges().size()));
  for (const auto& [task, range] : model.task_ranges()) {
    w.str(task);
    w.pod(range.first);
    w.pod(range.second);
  }
  const auto& ps = model.params();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(ps.size()));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    w.str(ps[i].name);
    w.pod<std::uint64_t>(ps[i].value.rows);
    w.pod<std::uint64_t>(ps[i].value.cols);
    w.floats(ps[i].value.data);
  }
  const bool has_opt = optimizer != nullptr && !optimizer->empty();
  w.pod<std::uint8_t>(has_opt ? 1 : 0);
  if (has_opt) {
    w.pod<std::uint64_t>(optimizer->step);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      w.floats(optimizer->m[i]);
      w.floats(optimizer->v[i]);
    }
  }
  w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_vocab_hash) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw ParseError(path.string() + " is not a checkpoint", 0);
  if (r.pod<std::uint32_t>() != kVersion) throw ParseError("unsupported checkpoint version", 8);
  const ModelConfig config = ModelConfig::from_text(r.str());
  const auto vocab_hash = r.pod<std::uint64_t>();
  if (expected_vocab_hash && *expected_vocab_hash != vocab_hash)
    throw ConfigError("vocabulary hash mismatch: checkpoint " + path.string() +
                      " was trained with a different vocabulary");
  const std::string vocab_text = r.str();
  if (fnv1a64(vocab_text) != vocab_hash) throw ParseError("checkpoint vocabulary is corrupt", 0);

  Checkpoint ck{Model<float>(config, 0), Vocabulary::parse(vocab_text), vocab_hash, 0, {}};
  ck.step = r.pod<std::uint64_t>();
  const auto n_ranges = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_ranges; ++i) {
    std::string task = r.str();
    const auto lo = r.pod<double>();
    const auto hi = r.pod<double>();
    ck.model.task_ranges()[task] = {lo, hi};
  }
  auto& ps = ck.model.params();
  if (r.pod<std::uint32_t>() != ps.size()) throw ParseError("checkpoint tensor count mismatch", 0);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::string name = r.str();
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    if (name != ps[i].name || rows != ps[i].value.rows || cols != ps[i].value.cols)
      throw ParseError("checkpoint tensor '" + name + "' does not match the model layout", i);
    ps[i].value.data = r.floats(rows * cols);
  }
  if (r.pod<std::uint8_t>() != 0) {
    ck.optimizer.step = r.pod<std::uint64_t>();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      ck.optimizer.m.push_back(r.floats(ps[i].value.size()));
      ck.optimizer.v.push_back(r.floats(ps[i].value.size()));
    }
  }
  return ck;
}

}  // namespace rlm
