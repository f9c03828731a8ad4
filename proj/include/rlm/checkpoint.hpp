#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "rlm/model.hpp"
#include "rlm/tokenizer.hpp"

namespace rlm {

/// First and second moment estimates, one buffer per parameter in store order.
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  bool empty() const noexcept { return m.empty(); }
};

struct Checkpoint {
  Model<float> model;
  Vocabulary vocab;
  std::uint64_t vocab_hash = 0;
  std::uint64_t step = 0;
  AdamState optimizer;
};

/// Binary container "RLMCKPT1": model config, vocabulary text and hash, training step,
/// task ranges, named float32 tensors and the optional optimizer moments.
void save_checkpoint(const std::filesystem::path& path, const Model<float>& model,
                     const Vocabulary& vocab, std::uint64_t step, const AdamState* optimizer);

/// Throws ConfigError when `expected_vocab_hash` is given and differs from the stored one.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

}  // namespace rlm
