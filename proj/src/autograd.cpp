#include "rlm/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "rlm/common.hpp"
#include "rlm/simd/kernels.hpp"

namespace rlm {

// ---------------------------------------------------------------------------
// ParameterStore

template <class T>
Parameter<T>& ParameterStore<T>::add(const std::string& name, std::size_t rows, std::size_t cols) {
  if (index_.count(name)) throw ConfigError("duplicate parameter '" + name + "'");
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->value = Tensor<T>(rows, cols);
  p->grad = Tensor<T>(rows, cols);
  index_.emplace(name, items_.size());
  items_.push_back(std::move(p));
  return *items_.back();
}

template <class T>
Parameter<T>& ParameterStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return *items_[it->second];
}

template <class T>
const Parameter<T>& ParameterStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return *items_[it->second];
}

template <class T>
std::size_t ParameterStore<T>::element_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p->value.size();
  return n;
}

template <class T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : items_) p->grad.zero();
}

// ---------------------------------------------------------------------------
// Graph plumbing

template <class T>
typename Graph<T>::Var Graph<T>::push(Tensor<T> value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <class T>
typename Graph<T>::Var Graph<T>::constant(Tensor<T> value) {
  return push(std::move(value), false);
}

template <class T>
typename Graph<T>::Var Graph<T>::param(Parameter<T>& p) {
  Node n;
  n.param = &p;
  n.requires_grad = record_ && p.trainable;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <class T>
typename Graph<T>::Var Graph<T>::param(const Parameter<T>& p) {
  Node n;
  n.const_param = &p;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <class T>
const Tensor<T>& Graph<T>::val(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.param) return n.param->value;
  if (n.const_param) return n.const_param->value;
  return n.value;
}

template <class T>
const Tensor<T>& Graph<T>::value(Var v) const {
  return val(v.id);
}

template <class T>
bool Graph<T>::requires_grad(Var v) const {
  return v.valid() && nodes_[static_cast<std::size_t>(v.id)].requires_grad;
}

template <class T>
Tensor<T>& Graph<T>::grad_of(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.param) {
    if (!n.param->grad.same_shape(n.param->value))
      n.param->grad = Tensor<T>(n.param->value.rows, n.param->value.cols);
    return n.param->grad;
  }
  if (!n.grad.same_shape(n.value)) n.grad = Tensor<T>(n.value.rows, n.value.cols);
  return n.grad;
}

template <class T>
void Graph<T>::backward(Var loss) {
  if (!record_) throw ConfigError("backward() on a graph built without recording");
  const Tensor<T>& lv = val(loss.id);
  if (lv.rows != 1 || lv.cols != 1) throw ConfigError("backward() needs a 1x1 loss");
  if (!node(loss).requires_grad) return;
  grad_of(loss.id).data[0] = T(1);
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && n.requires_grad && n.grad.size() != 0) n.backward();
  }
}

// ---------------------------------------------------------------------------
// Operations

template <class T>
typename Graph<T>::Var Graph<T>::linear(Var x, Var w, Var b) {
  const auto& K = simd::kernels<T>();
  const Tensor<T>& X = value(x);
  const Tensor<T>& W = value(w);
  if (X.cols != W.rows) throw ConfigError("linear: shape mismatch");
  Tensor<T> y(X.rows, W.cols);
  if (b.valid()) {
    const Tensor<T>& B = value(b);
    for (std::size_t r = 0; r < y.rows; ++r) std::copy(B.data.begin(), B.data.end(), y.row(r));
  }
  K.gemm(false, false, X.rows, W.cols, X.cols, X.data.data(), X.cols, W.data.data(), W.cols,
         y.data.data(), y.cols);
  const bool rg = requires_grad(x) || requires_grad(w) || requires_grad(b);
  Var out = push(std::move(y), rg);
  if (node(out).requires_grad) {
    node(out).backward = [this, x, w, b, out]() {
      const auto& K = simd::kernels<T>();
      const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
      const Tensor<T>& X = val(x.id);
      const Tensor<T>& W = val(w.id);
      if (requires_grad(x)) {
        Tensor<T>& dx = grad_of(x.id);
        K.gemm(false, true, dy.rows, W.rows, dy.cols, dy.data.data(), dy.cols, W.data.data(),
               W.cols, dx.data.data(), dx.cols);
      }
      if (requires_grad(w)) {
        Tensor<T>& dw = grad_of(w.id);
        K.gemm(true, false, X.cols, dy.cols, X.rows, X.data.data(), X.cols, dy.data.data(),
               dy.cols, dw.data.data(), dw.cols);
      }
      if (requires_grad(b)) {
        Tensor<T>& db = grad_of(b.id);
        for (std::size_t r = 0; r < dy.rows; ++r) K.axpy(dy.cols, T(1), dy.row(r), db.data.data());
      }
    };
  }
  return out;
}

template <class T>
typename Graph<T>::Var Graph<T>::add(Var a, Var b) {
  const Tensor<T>& A = value(a);
  const Tensor<T>& B = value(b);
  if (!A.same_shape(B)) throw ConfigError("add: shape mismatch");
  Tensor<T> y = A;
  simd::kernels<T>().axpy(y.size(), T(1), B.data.data(), y.data.data());
  Var out = push(std::move(y), requires_grad(a) || requires_grad(b));
  if (node(out).requires_grad) {
    node(out).backward = [this, a, b, out]() {
      const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
      const auto& K = simd::kernels<T>();
      if (requires_grad(a)) K.axpy(dy.size(), T(1), dy.data.data(), grad_of(a.id).data.data());
      if (requires_grad(b)) K.axpy(dy.size(), T(1), dy.data.data(), grad_of(b.id).data.data());
    };
  }
  return out;
}

namespace {
template <class T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2/pi)
template <class T>
constexpr T kGeluA = T(0.044715);
}  // namespace

template <class T>
typename Graph<T>::Var Graph<T>::gelu(Var x) {
  const Tensor<T>& X = value(x);
  Tensor<T> y(X.rows, X.cols);
  for (std::size_t i = 0; i < X.size(); ++i) {
    const T v = X.data[i];
    const T t = std::tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
    y.data[i] = T(0.5) * v * (T(1) + t);
  }
  Var out = push(std::move(y), requires_grad(x));
  if (node(out).requires_grad) {
    node(out).backward = [this, x, out]() {
      const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
      const Tensor<T>& X = val(x.id);
      Tensor<T>& dx = grad_of(x.id);
      for (std::size_t i = 0; i < X.size(); ++i) {
        const T v = X.data[i];
        const T t = std::tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
        const T dt = (T(1) - t * t) * kGeluC<T> * (T(1) + T(3) * kGeluA<T> * v * v);
        dx.data[i] += dy.data[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
      }
    };
  }
  return out;
}

template <class T>
typename Graph<T>::Var Graph<T>::layer_norm(Var x, Var gamma, Var beta, T eps) {
  const Tensor<T>& X = value(x);
  const Tensor<T>& G = value(gamma);
  const Tensor<T>& B = value(beta);
  const std::size_t n = X.rows, d = X.cols;
  if (G.size() != d || B.size() != d) throw ConfigError("layer_norm: parameter width mismatch");
  Tensor<T> y(n, d);
  auto xhat = std::make_shared<Tensor<T>>(n, d);
  auto inv_std = std::make_shared<std::vector<T>>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = X.row(r);
    T mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    T* hr = xhat->row(r);
    T* yr = y.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      hr[c] = (xr[c] - mean) * is;
      yr[c] = hr[c] * G.data[c] + B.data[c];
    }
  }
  Var out = push(std::move(y), requires_grad(x) || requires_grad(gamma) || requires_grad(beta));
  if (node(out).requires_grad) {
    node(out).backward = [this, x, gamma, beta, out, xhat, inv_std]() {
      const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
      const Tensor<T>& G = val(gamma.id);
      const std::size_t n = dy.rows, d = dy.cols;
      if (requires_grad(gamma) || requires_grad(beta)) {
        Tensor<T>* dg = requires_grad(gamma) ? &grad_of(gamma.id) : nullptr;
        Tensor<T>* db = requires_grad(beta) ? &grad_of(beta.id) : nullptr;
        for (std::size_t r = 0; r < n; ++r) {
          const T* dyr = dy.row(r);
          const T* hr = xhat->row(r);
          for (std::size_t c = 0; c < d; ++c) {
            if (dg) dg->data[c] += dyr[c] * hr[c];
            if (db) db->data[c] += dyr[c];
          }
        }
      }
      if (requires_grad(x)) {
        Tensor<T>& dx = grad_of(x.id);
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < n; ++r) {
          const T* dyr = dy.row(r);
          const T* hr = xhat->row(r);
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t c = 0; c < d; ++c) {
            dh[c] = dyr[c] * G.data[c];
            mean_dh += dh[c];
            mean_dh_h += dh[c] * hr[c];
          }
          mean_dh /= T(d);
          mean_dh_h /= T(d);
          T* dxr = dx.row(r);
          const T is = (*inv_std)[r];
          for (std::size_t c = 0; c < d; ++c) dxr[c] += is * (dh[c] - mean_dh - hr[c] * mean_dh_h);
        }
      }
    };
  }
  return out;
}

template <class T>
typename Graph<T>::Var Graph<T>::embedding(Var table, std::span<const TokenId> ids) {
  const Tensor<T>& E = value(table);
  Tensor<T> y(ids.size(), E.cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= E.rows)
      throw ConfigError("embedding: id " + std::to_string(ids[r]) + " outside table of " +
                        std::to_string(E.rows));
    std::copy_n(E.row(static_cast<std::size_t>(ids[r])), E.cols, y.row(r));
  }
  Var out = push(std::move(y), requires_grad(table));
  if (node(out).requires_grad) {
    std::vector<TokenId> idv(ids.begin(), ids.end());
    node(out).backward = [this, table, out, idv = std::move(idv)]() {
      const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
      Tensor<T>& dE = grad_of(table.id);
      const auto& K = simd::kernels<T>();
      for (std::size_t r = 0; r < idv.size(); ++r)
        K.axpy(dy.cols, T(1), dy.row(r), dE.row(static_cast<std::size_t>(idv[r])));
    };
  }
  return out;
}

template <class T>
typename Graph<T>::Var Graph<T>::add_positions(Var x, Var table, const Segments& segments) {
  const Tensor<T>& P = value(table);
  Tensor<T> y = value(x);
  if (P.cols != y.cols) throw ConfigError("add_positions: width mismatch");
  const auto& K = simd::kernels<T>();
  for (const auto& s : segments) {
    if (s.size() > P.rows)
      throw ConfigError("sequence of length " + std::to_string(s.size()) +
                        " exceeds the position table (" + std::to_string(P.rows) + ")");
    for (std::size_t r = s.begin; r < s.end; ++r) K.axpy(y.cols, T(1), P.row(r - s.begin), y.row(r));
  }
  Var out = push(std::move(y), requires_grad(x) || requires_grad(table));
  if (node(out).requires_grad) {
    node(out).backward = [this, x, table, out, segments]() {
      const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
      const auto& K = simd::kernels<T>();
      if (requires_grad(x)) K.axpy(dy.size(), T(1), dy.data.data(), grad_of(x.id).data.data());
      if (requires_grad(table)) {
        Tensor<T>& dP = grad_of(table.id);
        for (const auto& s : segments)
          for (std::size_t r = s.begin; r < s.end; ++r)
            K.axpy(dy.cols, T(1), dy.row(r), dP.row(r - s.begin));
      }
    };
  }
  return out;
}

template <class T>
typename Graph<T>::Var Graph<T>::attention(Var q, Var k, Var v, const Segments& q_seg,
                                           const Segments& k_seg, std::size_t heads, bool causal) {
  const Tensor<T>& Q = value(q);
  const Tensor<T>& Kt = value(k);
  const Tensor<T>& V = value(v);
  const std::size_t d = Q.cols;
  if (Kt.cols != d || V.cols != d || Kt.rows != V.rows || heads == 0 || d % heads != 0)
    throw ConfigError("attention: shape mismatch");
  if (q_seg.size() != k_seg.size()) throw ConfigError("attention: segment count mismatch");
  const std::size_t dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const auto& K = simd::kernels<T>();

  // Softmax weights per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<Tensor<T>>>();
  probs->reserve(q_seg.size() * heads);
  Tensor<T> y(Q.rows, d);
  for (std::size_t s = 0; s < q_seg.size(); ++s) {
    const RowRange qs = q_seg[s], ks = k_seg[s];
    const std::size_t nq = qs.size(), nk = ks.size();
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor<T> P(nq, nk);
      if (nq > 0 && nk > 0) {
        K.gemm(false, true, nq, nk, dh, Q.row(qs.begin) + h * dh, d, Kt.row(ks.begin) + h * dh, d,
               P.data.data(), nk);
        for (std::size_t i = 0; i < nq; ++i) {
          T* pr = P.row(i);
          const std::size_t visible = causal ? std::min(nk, i + 1) : nk;
          T mx = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, pr[j] * scale);
          T sum = 0;
          for (std::size_t j = 0; j < visible; ++j) {
            pr[j] = std::exp(pr[j] * scale - mx);
            sum += pr[j];
          }
          const T inv = T(1) / sum;
          for (std::size_t j = 0; j < visible; ++j) pr[j] *= inv;
          for (std::size_t j = visible; j < nk; ++j) pr[j] = 0;
        }
        K.gemm(false, false, nq, dh, nk, P.data.data(), nk, V.row(ks.begin) + h * dh, d,
               y.row(qs.begin) + h * dh, d);
      }
      probs->push_back(std::move(P));
    }
  }
  Var out = push(std::move(y), requires_grad(q) || requires_grad(k) || requires_grad(v));
  if (node(out).requires_grad) {
    node(out).backward = [this, q, k, v, out, q_seg, k_seg, heads, probs, scale]() {
      const auto& K = simd::kernels<T>();
      const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
      const Tensor<T>& Q = val(q.id);
      const Tensor<T>& Kt = val(k.id);
      const Tensor<T>& V = val(v.id);
      const std::size_t d = Q.cols, dh = d / heads;
      Tensor<T>* dq = requires_grad(q) ? &grad_of(q.id) : nullptr;
      Tensor<T>* dk = requires_grad(k) ? &grad_of(k.id) : nullptr;
      Tensor<T>* dv = requires_grad(v) ? &grad_of(v.id) : nullptr;
      std::size_t idx = 0;
      for (std::size_t s = 0; s < q_seg.size(); ++s) {
        const RowRange qs = q_seg[s], ks = k_seg[s];
        const std::size_t nq = qs.size(), nk = ks.size();
        for (std::size_t h = 0; h < heads; ++h, ++idx) {
          if (nq == 0 || nk == 0) continue;
          const Tensor<T>& P = (*probs)[idx];
          const T* dyh = dy.row(qs.begin) + h * dh;
          if (dv)
            K.gemm(true, false, nk, dh, nq, P.data.data(), nk, dyh, d, dv->row(ks.begin) + h * dh,
                   d);
          if (!dq && !dk) continue;
          Tensor<T> dS(nq, nk);
          K.gemm(false, true, nq, nk, dh, dyh, d, V.row(ks.begin) + h * dh, d, dS.data.data(), nk);
          for (std::size_t i = 0; i < nq; ++i) {
            T* g = dS.row(i);
            const T* p = P.row(i);
            const T dot = K.dot(g, p, nk);
            for (std::size_t j = 0; j < nk; ++j) g[j] = p[j] * (g[j] - dot) * scale;
          }
          if (dq)
            K.gemm(false, false, nq, dh, nk, dS.data.data(), nk, Kt.row(ks.begin) + h * dh, d,
                   dq->row(qs.begin) + h * dh, d);
          if (dk)
            K.gemm(true, false, nk, dh, nq, dS.data.data(), nk, Q.row(qs.begin) + h * dh, d,
                   dk->row(ks.begin) + h * dh, d);
        }
      }
    };
  }
  return out;
}

template <class T>
typename Graph<T>::Var Graph<T>::mean_pool(Var x, const Segments& segments) {
  const Tensor<T>& X = value(x);
  Tensor<T> y(segments.size(), X.cols);
  const auto& K = simd::kernels<T>();
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const RowRange r = segments[s];
    if (r.size() == 0) continue;
    const T w = T(1) / T(r.size());
    for (std::size_t i = r.begin; i < r.end; ++i) K.axpy(X.cols, w, X.row(i), y.row(s));
  }
  Var out = push(std::move(y), requires_grad(x));
  if (node(out).requires_grad) {
    node(out).backward = [this, x, out, segments]() {
      const Tensor<T>& dy = nodes_[static_cast<std::size_t>(out.id)].grad;
      Tensor<T>& dx = grad_of(x.id);
      const auto& K = simd::kernels<T>();
      for (std::size_t s = 0; s < segments.size(); ++s) {
        const RowRange r = segments[s];
        if (r.size() == 0) continue;
        const T w = T(1) / T(r.size());
        for (std::size_t i = r.begin; i < r.end; ++i) K.axpy(dy.cols, w, dy.row(s), dx.row(i));
      }
    };
  }
  return out;
}

namespace {

// Row-wise log-softmax NLL; fills `probs` with the softmax when given.
template <class T>
T nll_rows(const Tensor<T>& logits, std::span<const int> targets, Tensor<T>* probs,
           std::size_t& counted) {
  T total = 0;
  counted = 0;
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const T* lr = logits.row(r);
    T mx = *std::max_element(lr, lr + logits.cols);
    T sum = 0;
    for (std::size_t c = 0; c < logits.cols; ++c) sum += std::exp(lr[c] - mx);
    const T lse = mx + std::log(sum);
    if (probs)
      for (std::size_t c = 0; c < logits.cols; ++c) probs->at(r, c) = std::exp(lr[c] - lse);
    const int t = targets[r];
    if (t < 0) continue;
    total += lse - lr[t];
    ++counted;
  }
  return total;
}

}  // namespace

template <class T>
T cross_entropy_value(const Tensor<T>& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows) throw ConfigError("cross_entropy: target count mismatch");
  for (int t : targets)
    if (t >= static_cast<int>(logits.cols)) throw ConfigError("cross_entropy: target out of range");
  std::size_t counted = 0;
  const T total = nll_rows(logits, targets, static_cast<Tensor<T>*>(nullptr), counted);
  return counted ? total / T(counted) : T(0);
}

template <class T>
typename Graph<T>::Var Graph<T>::cross_entropy(Var logits, std::span<const int> targets) {
  const Tensor<T>& L = value(logits);
  if (targets.size() != L.rows) throw ConfigError("cross_entropy: target count mismatch");
  for (int t : targets)
    if (t >= static_cast<int>(L.cols)) throw ConfigError("cross_entropy: target out of range");
  auto probs = std::make_shared<Tensor<T>>(L.rows, L.cols);
  std::size_t counted = 0;
  const T total = nll_rows(L, targets, probs.get(), counted);
  Tensor<T> y(1, 1, counted ? total / T(counted) : T(0));
  Var out = push(std::move(y), requires_grad(logits));
  if (node(out).requires_grad && counted > 0) {
    std::vector<int> tv(targets.begin(), targets.end());
    node(out).backward = [this, logits, out, probs, tv = std::move(tv), counted]() {
      const T g = nodes_[static_cast<std::size_t>(out.id)].grad.data[0] / T(counted);
      Tensor<T>& dl = grad_of(logits.id);
      for (std::size_t r = 0; r < dl.rows; ++r) {
        if (tv[r] < 0) continue;
        T* dr = dl.row(r);
        const T* pr = probs->row(r);
        for (std::size_t c = 0; c < dl.cols; ++c) dr[c] += g * pr[c];
        dr[tv[r]] -= g;
      }
    };
  }
  return out;
}

template <class T>
typename Graph<T>::Var Graph<T>::mse(Var pred, std::span<const T> targets) {
  const Tensor<T>& P = value(pred);
  if (P.cols != 1 || P.rows != targets.size()) throw ConfigError("mse: shape mismatch");
  T total = 0;
  for (std::size_t i = 0; i < P.rows; ++i) total += (P.data[i] - targets[i]) * (P.data[i] - targets[i]);
  const std::size_t n = P.rows;
  Var out = push(Tensor<T>(1, 1, n ? total / T(n) : T(0)), requires_grad(pred));
  if (node(out).requires_grad && n > 0) {
    std::vector<T> tv(targets.begin(), targets.end());
    node(out).backward = [this, pred, out, tv = std::move(tv)]() {
      const T g = nodes_[static_cast<std::size_t>(out.id)].grad.data[0];
      const Tensor<T>& P = val(pred.id);
      Tensor<T>& dp = grad_of(pred.id);
      const T n = T(tv.size());
      for (std::size_t i = 0; i < tv.size(); ++i) dp.data[i] += g * T(2) * (P.data[i] - tv[i]) / n;
    };
  }
  return out;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Graph<float>;
template class Graph<double>;
template float cross_entropy_value<float>(const Tensor<float>&, std::span<const int>);
template double cross_entropy_value<double>(const Tensor<double>&, std::span<const int>);

}  // namespace rlm
