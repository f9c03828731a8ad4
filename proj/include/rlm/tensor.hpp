#pragma once

#include <cassert>
#include <cstddef>
#include <span>
#include <vector>

namespace rlm {

/// Dense row-major matrix.
template <class T>
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}

  std::size_t size() const noexcept { return data.size(); }
  T* row(std::size_t r) noexcept { return data.data() + r * cols; }
  const T* row(std::size_t r) const noexcept { return data.data() + r * cols; }
  T& at(std::size_t r, std::size_t c) noexcept {
    assert(r < rows && c < cols);
    return data[r * cols + c];
  }
  const T& at(std::size_t r, std::size_t c) const noexcept {
    assert(r < rows && c < cols);
    return data[r * cols + c];
  }
  void zero() noexcept { std::fill(data.begin(), data.end(), T(0)); }
  bool same_shape(const Tensor& o) const noexcept { return rows == o.rows && cols == o.cols; }
};

/// Row ranges [begin, end) of a packed batch, one per sequence.
struct RowRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const noexcept { return end - begin; }
};
using Segments = std::vector<RowRange>;

/// Back-to-back ranges for sequences of the given lengths.
inline Segments contiguous_segments(std::span<const std::size_t> lengths) {
  Segments s;
  s.reserve(lengths.size());
  std::size_t at = 0;
  for (std::size_t len : lengths) {
    s.push_back({at, at + len});
    at += len;
  }
  return s;
}

}  // namespace rlm
