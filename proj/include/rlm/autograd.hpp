#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rlm/numeric_codec.hpp"
#include "rlm/tensor.hpp"

namespace rlm {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

/// Named parameters in insertion order. Addresses are stable.
template <class T>
class ParameterStore {
 public:
  Parameter<T>& add(const std::string& name, std::size_t rows, std::size_t cols);
  Parameter<T>& get(const std::string& name);
  const Parameter<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const noexcept { return items_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *items_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *items_[i]; }
  std::size_t element_count() const;

  void zero_grad();

 private:
  std::vector<std::unique_ptr<Parameter<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Tape of dense operations for reverse-mode differentiation. A graph built with
/// record = false keeps only forward values (inference).
template <class T>
class Graph {
 public:
  struct Var {
    int id = -1;
    bool valid() const noexcept { return id >= 0; }
  };

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> value);
  /// Leaf bound to a parameter; gradients accumulate into parameter.grad when the
  /// graph records and the parameter is trainable.
  Var param(Parameter<T>& p);
  /// Read-only leaf; never receives gradients.
  Var param(const Parameter<T>& p);

  const Tensor<T>& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 for a 1x1 loss and runs the tape backwards.
  void backward(Var loss);

  // x (n x in) * w (in x out) + b (1 x out); b may be invalid.
  Var linear(Var x, Var w, Var b);
  Var add(Var a, Var b);
  Var gelu(Var x);
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5));
  /// Rows of `table` selected by ids.
  Var embedding(Var table, std::span<const TokenId> ids);
  /// x[r] += table[r - segment.begin] for every row of every segment.
  Var add_positions(Var x, Var table, const Segments& segments);
  /// Multi-head scaled dot-product attention between matching query/key segments.
  Var attention(Var q, Var k, Var v, const Segments& q_seg, const Segments& k_seg,
                std::size_t heads, bool causal);
  /// Mean of each segment's rows (empty segments give zeros).
  Var mean_pool(Var x, const Segments& segments);
  /// Mean token negative log-likelihood; targets < 0 are ignored.
  Var cross_entropy(Var logits, std::span<const int> targets);
  /// Mean squared error of an n x 1 prediction.
  Var mse(Var pred, std::span<const T> targets);

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    const Parameter<T>* const_param = nullptr;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  Var push(Tensor<T> value, bool requires_grad);
  Tensor<T>& grad_of(int id);
  const Tensor<T>& val(int id) const;
  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }

  bool record_;
  std::vector<Node> nodes_;
};

/// Same numerics as Graph::cross_entropy for a plain logits matrix.
template <class T>
T cross_entropy_value(const Tensor<T>& logits, std::span<const int> targets);

}  // namespace rlm
