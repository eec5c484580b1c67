#ifndef CAMLOSS_OPS_HPP_
#define CAMLOSS_OPS_HPP_

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "camloss/autodiff.hpp"

namespace camloss {

enum class ReduceKind { Sum, Mean, Min, Max };

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
void check_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("ops: operands recorded on different tapes");
}

template <typename T>
Node<T> make_node(OpKind op, std::initializer_list<Var<T>> parents, Tensor<T> value, BackwardFn<T> fn) {
  Node<T> n;
  n.op = op;
  n.value = std::move(value);
  n.backward = fn;
  int k = 0;
  for (const auto& p : parents) {
    n.parents[k++] = static_cast<std::int64_t>(p.index());
    n.requires_grad = n.requires_grad || p.requires_grad();
  }
  return n;
}

template <typename T>
const Tensor<T>& parent_value(const Tape<T>& tape, const Node<T>& n, int k) {
  return tape.node(static_cast<std::size_t>(n.parents[k])).value;
}

// Output columns [lo, hi) whose input index ox * stride - pad + kj lies inside [0, W).
inline void valid_range(std::size_t W, std::size_t Wo, int stride, int pad, std::size_t kj, std::size_t& lo,
                        std::size_t& hi) {
  const long off = static_cast<long>(kj) - pad;
  long a = off >= 0 ? 0 : (-off + stride - 1) / stride;
  long b = (static_cast<long>(W) - 1 - off) / stride + 1;
  if (static_cast<long>(W) - 1 - off < 0) b = 0;
  a = std::min<long>(a, static_cast<long>(Wo));
  b = std::clamp<long>(b, a, static_cast<long>(Wo));
  lo = static_cast<std::size_t>(a);
  hi = static_cast<std::size_t>(b);
}

// Unfolds one [C,H,W] image into columns [C*kh*kw, Ho*Wo].
template <typename T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
            int stride, int pad, std::size_t Ho, std::size_t Wo, T* col) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        std::size_t lo, hi;
        valid_range(W, Wo, stride, pad, kj, lo, hi);
        const long off = static_cast<long>(kj) - pad;
        T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ki);
          T* dst = row + oy * Wo;
          if (iy < 0 || iy >= static_cast<long>(H)) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + Wo, T(0));
          if (lo == hi) continue;
          const T* src = img + (c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(static_cast<long>(lo) * stride + off);
          const std::size_t n = hi - lo;
          if (stride == 1)
            std::copy(src, src + n, dst + lo);
          else if (stride == 2)
            for (std::size_t j = 0; j < n; ++j) dst[lo + j] = src[2 * j];
          else
            for (std::size_t j = 0; j < n; ++j) dst[lo + j] = src[j * static_cast<std::size_t>(stride)];
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh, std::size_t kw,
                int stride, int pad, std::size_t Ho, std::size_t Wo, T* img) {
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        std::size_t lo, hi;
        valid_range(W, Wo, stride, pad, kj, lo, hi);
        const long off = static_cast<long>(kj) - pad;
        const T* row = col + ((c * kh + ki) * kw + kj) * Ho * Wo;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          long iy = static_cast<long>(oy) * stride - pad + static_cast<long>(ki);
          if (iy < 0 || iy >= static_cast<long>(H) || lo == hi) continue;
          const T* src = row + oy * Wo + lo;
          T* dst = img + (c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(static_cast<long>(lo) * stride + off);
          const std::size_t n = hi - lo, st = static_cast<std::size_t>(stride);
          for (std::size_t j = 0; j < n; ++j) dst[j * st] += src[j];
        }
      }
}

// Maps every input element of a reduction to its output slot.
inline std::vector<std::size_t> reduce_targets(const Shape& in, const std::vector<bool>& reduced) {
  std::vector<std::size_t> target(shape_size(in));
  std::vector<std::size_t> idx(in.size(), 0);
  for (std::size_t lin = 0; lin < target.size(); ++lin) {
    std::size_t out = 0;
    for (std::size_t d = 0; d < in.size(); ++d)
      if (!reduced[d]) out = out * in[d] + idx[d];
    target[lin] = out;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (++idx[d] < in[d]) break;
      idx[d] = 0;
    }
  }
  return target;
}

inline std::vector<bool> reduced_axes(const Shape& shape, std::size_t mask) {
  std::vector<bool> r(shape.size());
  for (std::size_t d = 0; d < shape.size(); ++d) r[d] = (mask >> d) & 1u;
  return r;
}

// ---- backward kernels ----

template <typename T>
void conv2d_backward(const Tape<T>& tape, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const auto& x = parent_value(tape, n, 0);
  const auto& k = parent_value(tape, n, 1);
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const std::size_t K = k.extent(0), kh = k.extent(2), kw = k.extent(3);
  const std::size_t Ho = g.extent(2), Wo = g.extent(3), P = Ho * Wo, R = C * kh * kw;
  AlignedVector<T> col(pg[1] ? R * P : 0), dcol(pg[0] ? R * P : 0);
  CMapMat<T> km(k.data(), K, R);
  for (std::size_t s = 0; s < N; ++s) {
    CMapMat<T> gs(g.data() + s * K * P, K, P);
    if (pg[1]) {
      im2col(x.data() + s * C * H * W, C, H, W, kh, kw, n.stride, n.padding, Ho, Wo, col.data());
      CMapMat<T> cm(col.data(), R, P);
      MapMat<T> dk(pg[1]->data(), K, R);
      dk.noalias() += gs * cm.transpose();
    }
    if (pg[2]) {
      T* db = pg[2]->data();
      for (std::size_t o = 0; o < K; ++o) db[o] += gs.row(o).sum();
    }
    if (pg[0]) {
      MapMat<T> dc(dcol.data(), R, P);
      dc.noalias() = km.transpose() * gs;
      col2im_add(dcol.data(), C, H, W, kh, kw, n.stride, n.padding, Ho, Wo, pg[0]->data() + s * C * H * W);
    }
  }
}

template <typename T>
void relu_backward(const Tape<T>& tape, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const auto& x = parent_value(tape, n, 0);
  T* d = pg[0]->data();
  const T* xs = x.data();
  const T* gs = g.data();
  for (std::size_t i = 0; i < x.size(); ++i) d[i] += xs[i] > T(0) ? gs[i] : T(0);
}

template <typename T>
void gap_backward(const Tape<T>&, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const std::size_t rows = g.size();
  const std::size_t area = pg[0]->size() / rows;
  const T inv = T(1) / static_cast<T>(area);
  T* d = pg[0]->data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T v = g[r] * inv;
    for (std::size_t j = 0; j < area; ++j) d[r * area + j] += v;
  }
  (void)n;
}

template <typename T>
void linear_backward(const Tape<T>& tape, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const auto& x = parent_value(tape, n, 0);
  const auto& w = parent_value(tape, n, 1);
  const std::size_t N = x.extent(0), K = x.extent(1), M = w.extent(0);
  CMapMat<T> gm(g.data(), N, M);
  if (pg[0]) MapMat<T>(pg[0]->data(), N, K).noalias() += gm * CMapMat<T>(w.data(), M, K);
  if (pg[1]) MapMat<T>(pg[1]->data(), M, K).noalias() += gm.transpose() * CMapMat<T>(x.data(), N, K);
  if (pg[2]) {
    T* db = pg[2]->data();
    for (std::size_t s = 0; s < N; ++s)
      for (std::size_t m = 0; m < M; ++m) db[m] += g[s * M + m];
  }
}

template <typename T>
void add_backward(const Tape<T>&, const Node<T>&, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  for (int k = 0; k < 2; ++k)
    if (pg[k])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[k])[i] += g[i];
}

template <typename T>
void sub_backward(const Tape<T>&, const Node<T>&, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  if (pg[0])
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
  if (pg[1])
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
}

template <typename T>
void mul_backward(const Tape<T>& tape, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const auto& a = parent_value(tape, n, 0);
  const auto& b = parent_value(tape, n, 1);
  if (pg[0])
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * b[i];
  if (pg[1])
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * a[i];
}

template <typename T>
void div_backward(const Tape<T>& tape, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const auto& b = parent_value(tape, n, 1);
  if (pg[0])
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / b[i];
  if (pg[1])
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i] * n.value[i] / b[i];
}

template <typename T>
void abs_backward(const Tape<T>& tape, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const auto& x = parent_value(tape, n, 0);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (x[i] > T(0))
      (*pg[0])[i] += g[i];
    else if (x[i] < T(0))
      (*pg[0])[i] -= g[i];
  }
}

template <typename T>
void add_scalar_backward(const Tape<T>&, const Node<T>&, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
}

template <typename T>
void mul_scalar_backward(const Tape<T>&, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * n.scalar;
}

template <typename T>
void div_scalar_backward(const Tape<T>&, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / n.scalar;
}

template <typename T>
void reduce_backward(const Tape<T>& tape, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const auto kind = static_cast<ReduceKind>(n.stride);
  T* d = pg[0]->data();
  if (kind == ReduceKind::Min || kind == ReduceKind::Max) {
    for (std::size_t o = 0; o < n.index.size(); ++o) d[n.index[o]] += g[o];
    return;
  }
  const T scale = kind == ReduceKind::Mean ? n.scalar : T(1);
  if (g.size() == 1) {
    const T v = g[0] * scale;
    for (std::size_t i = 0; i < pg[0]->size(); ++i) d[i] += v;
    return;
  }
  const auto& x = parent_value(tape, n, 0);
  auto target = reduce_targets(x.shape(), reduced_axes(x.shape(), static_cast<std::size_t>(n.padding)));
  for (std::size_t i = 0; i < target.size(); ++i) d[i] += g[target[i]] * scale;
}

template <typename T>
void reshape_backward(const Tape<T>&, const Node<T>&, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
}

template <typename T>
void select_backward(const Tape<T>&, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  T* d = pg[0]->data() + n.index[0] * g.size();
  for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
}

template <typename T>
void gather_rows_backward(const Tape<T>&, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const std::size_t K = g.extent(1);
  for (std::size_t s = 0; s < n.index.size(); ++s)
    for (std::size_t k = 0; k < K; ++k) (*pg[0])[n.index[s] * K + k] += g[s * K + k];
}

template <typename T>
void channel_weighted_sum_backward(const Tape<T>& tape, const Node<T>& n, const Tensor<T>& g,
                                   const std::array<Tensor<T>*, 3>& pg) {
  const auto& f = parent_value(tape, n, 0);
  const auto& w = parent_value(tape, n, 1);
  const std::size_t N = f.extent(0), K = f.extent(1), P = f.extent(2) * f.extent(3);
  for (std::size_t s = 0; s < N; ++s) {
    const T* gs = g.data() + s * P;
    for (std::size_t k = 0; k < K; ++k) {
      const T* fk = f.data() + (s * K + k) * P;
      if (pg[0]) {
        T* dk = pg[0]->data() + (s * K + k) * P;
        const T wk = w[s * K + k];
        for (std::size_t p = 0; p < P; ++p) dk[p] += wk * gs[p];
      }
      if (pg[1]) {
        T acc = 0;
        for (std::size_t p = 0; p < P; ++p) acc += fk[p] * gs[p];
        (*pg[1])[s * K + k] += acc;
      }
    }
  }
}

template <typename T>
void normalize_maps_backward(const Tape<T>& tape, const Node<T>& n, const Tensor<T>& g,
                             const std::array<Tensor<T>*, 3>& pg) {
  const auto& x = parent_value(tape, n, 0);
  const std::size_t N = x.extent(0), P = x.size() / N;
  T* d = pg[0]->data();
  for (std::size_t s = 0; s < N; ++s) {
    const T range = n.saved[s];
    if (!(range > T(0))) continue;  // constant map: output is identically zero
    const T* ys = n.value.data() + s * P;
    const T* gs = g.data() + s * P;
    T* ds = d + s * P;
    T to_min = 0, to_max = 0;
    for (std::size_t p = 0; p < P; ++p) {
      ds[p] += gs[p] / range;
      to_min += gs[p] * (ys[p] - T(1));
      to_max -= gs[p] * ys[p];
    }
    d[n.index[2 * s]] += to_min / range;
    d[n.index[2 * s + 1]] += to_max / range;
  }
}

template <typename T>
void log_softmax_backward(const Tape<T>&, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const std::size_t N = g.extent(0), C = g.extent(1);
  for (std::size_t s = 0; s < N; ++s) {
    T gsum = 0;
    for (std::size_t c = 0; c < C; ++c) gsum += g[s * C + c];
    for (std::size_t c = 0; c < C; ++c)
      (*pg[0])[s * C + c] += (g[s * C + c] - std::exp(n.value[s * C + c]) * gsum) / n.scalar;
  }
}

template <typename T>
void cross_entropy_backward(const Tape<T>&, const Node<T>& n, const Tensor<T>& g, const std::array<Tensor<T>*, 3>& pg) {
  const std::size_t N = n.saved.extent(0), C = n.saved.extent(1);
  const T scale = g[0] / static_cast<T>(N);
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t c = 0; c < C; ++c) {
      T p = n.saved[s * C + c] - (c == n.index[s] ? T(1) : T(0));
      (*pg[0])[s * C + c] += p * scale;
    }
}

}  // namespace detail

// ---- forward operators ----

/// Cross-correlation with zero padding. input [N,C,H,W], kernels [K,C,kh,kw], bias [K].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernels, const Var<T>& bias, int stride, int padding) {
  detail::check_same_tape(input, kernels);
  detail::check_same_tape(input, bias);
  const auto& x = input.value();
  const auto& k = kernels.value();
  if (x.rank() != 4 || k.rank() != 4 || bias.value().rank() != 1)
    throw std::invalid_argument("conv2d: expected input [N,C,H,W], kernels [K,C,kh,kw], bias [K]");
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
  const std::size_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const std::size_t K = k.extent(0), kh = k.extent(2), kw = k.extent(3);
  if (k.extent(1) != C || bias.value().extent(0) != K)
    throw std::invalid_argument("conv2d: shape mismatch input " + shape_str(x.shape()) + " kernels " +
                                shape_str(k.shape()) + " bias " + shape_str(bias.value().shape()));
  const std::size_t Hp = H + 2 * static_cast<std::size_t>(padding), Wp = W + 2 * static_cast<std::size_t>(padding);
  if (kh > Hp || kw > Wp) throw std::invalid_argument("conv2d: kernel larger than padded input");
  if ((Hp - kh) % static_cast<std::size_t>(stride) || (Wp - kw) % static_cast<std::size_t>(stride))
    throw std::invalid_argument("conv2d: output size is not exact for stride " + std::to_string(stride));
  const std::size_t Ho = (Hp - kh) / stride + 1, Wo = (Wp - kw) / stride + 1, P = Ho * Wo, R = C * kh * kw;

  Tensor<T> out(Shape{N, K, Ho, Wo});
  AlignedVector<T> col(R * P);
  detail::CMapMat<T> km(k.data(), K, R);
  const T* b = bias.value().data();
  for (std::size_t s = 0; s < N; ++s) {
    detail::im2col(x.data() + s * C * H * W, C, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
    detail::MapMat<T> om(out.data() + s * K * P, K, P);
    om.noalias() = km * detail::CMapMat<T>(col.data(), R, P);
    for (std::size_t o = 0; o < K; ++o) om.row(o).array() += b[o];
  }
  auto node = detail::make_node<T>(OpKind::Conv2d, {input, kernels, bias}, std::move(out), &detail::conv2d_backward<T>);
  node.stride = stride;
  node.padding = padding;
  return input.tape().push(std::move(node));
}

/// max(x, 0); the subgradient at 0 is 0.
template <typename T>
Var<T> relu(const Var<T>& x) {
  const auto& v = x.value();
  Tensor<T> out(v.shape());
  T kink = std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > T(0) ? v[i] : T(0);
  if (x.tape().tracks_kinks())
    for (std::size_t i = 0; i < v.size(); ++i) kink = std::min(kink, std::abs(v[i]));
  auto node = detail::make_node<T>(OpKind::Relu, {x}, std::move(out), &detail::relu_backward<T>);
  node.kink = kink;
  return x.tape().push(std::move(node));
}

/// [N,K,H,W] -> [N,K] spatial mean.
template <typename T>
Var<T> global_average_pool(const Var<T>& features) {
  const auto& f = features.value();
  if (f.rank() != 4 || f.extent(2) == 0 || f.extent(3) == 0)
    throw std::invalid_argument("global_average_pool: expected [N,K,H,W] with H,W >= 1");
  const std::size_t rows = f.extent(0) * f.extent(1), area = f.extent(2) * f.extent(3);
  Tensor<T> out(Shape{f.extent(0), f.extent(1)});
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = 0;
    for (std::size_t j = 0; j < area; ++j) acc += f[r * area + j];
    out[r] = acc / static_cast<T>(area);
  }
  return features.tape().push(
      detail::make_node<T>(OpKind::GlobalAvgPool, {features}, std::move(out), &detail::gap_backward<T>));
}

/// pooled [N,K] times weights [n,K] transposed, plus optional bias [n].
template <typename T>
Var<T> linear(const Var<T>& pooled, const Var<T>& weights, const Var<T>* bias = nullptr) {
  detail::check_same_tape(pooled, weights);
  const auto& x = pooled.value();
  const auto& w = weights.value();
  if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(1))
    throw std::invalid_argument("linear: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const std::size_t N = x.extent(0), K = x.extent(1), M = w.extent(0);
  // Plain loops: each output is a fixed-order dot product, independent of the batch size.
  Tensor<T> out(Shape{N, M});
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t m = 0; m < M; ++m) {
      T acc = 0;
      for (std::size_t k = 0; k < K; ++k) acc += x[s * K + k] * w[m * K + k];
      out[s * M + m] = acc;
    }
  if (bias) {
    detail::check_same_tape(pooled, *bias);
    if (bias->value().rank() != 1 || bias->value().extent(0) != M)
      throw std::invalid_argument("linear: bias shape mismatch");
    for (std::size_t s = 0; s < N; ++s)
      for (std::size_t m = 0; m < M; ++m) out[s * M + m] += bias->value()[m];
    return pooled.tape().push(
        detail::make_node<T>(OpKind::Linear, {pooled, weights, *bias}, std::move(out), &detail::linear_backward<T>));
  }
  return pooled.tape().push(
      detail::make_node<T>(OpKind::Linear, {pooled, weights}, std::move(out), &detail::linear_backward<T>));
}

namespace detail {
template <typename T, typename F>
Var<T> binary(OpKind op, const Var<T>& a, const Var<T>& b, F f, BackwardFn<T> fn, const char* name) {
  check_same_tape(a, b);
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  return a.tape().push(make_node<T>(op, {a, b}, std::move(out), fn));
}

template <typename T, typename F>
Var<T> unary_scalar(OpKind op, const Var<T>& a, T s, F f, BackwardFn<T> fn) {
  const auto& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto node = make_node<T>(op, {a}, std::move(out), fn);
  node.scalar = s;
  return a.tape().push(std::move(node));
}
}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(OpKind::Add, a, b, [](T x, T y) { return x + y; }, &detail::add_backward<T>, "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(OpKind::Sub, a, b, [](T x, T y) { return x - y; }, &detail::sub_backward<T>, "sub");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return detail::binary<T>(OpKind::Mul, a, b, [](T x, T y) { return x * y; }, &detail::mul_backward<T>, "mul");
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  for (auto v : b.value().values())
    if (v == T(0)) throw std::domain_error("div: division by zero");
  return detail::binary<T>(OpKind::Div, a, b, [](T x, T y) { return x / y; }, &detail::div_backward<T>, "div");
}

template <typename T>
Var<T> add(const Var<T>& a, T s) {
  return detail::unary_scalar<T>(OpKind::AddScalar, a, s, [s](T x) { return x + s; }, &detail::add_scalar_backward<T>);
}

template <typename T>
Var<T> sub(const Var<T>& a, T s) {
  return detail::unary_scalar<T>(OpKind::AddScalar, a, -s, [s](T x) { return x - s; },
                                 &detail::add_scalar_backward<T>);
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  return detail::unary_scalar<T>(OpKind::MulScalar, a, s, [s](T x) { return x * s; }, &detail::mul_scalar_backward<T>);
}

template <typename T>
Var<T> mul(const Var<T>& a, T s) {
  return scale(a, s);
}

template <typename T>
Var<T> div(const Var<T>& a, T s) {
  if (s == T(0)) throw std::domain_error("div: division by zero");
  return detail::unary_scalar<T>(OpKind::DivScalar, a, s, [s](T x) { return x / s; }, &detail::div_scalar_backward<T>);
}

/// |x|; the subgradient at 0 is 0.
template <typename T>
Var<T> abs(const Var<T>& x) {
  const auto& v = x.value();
  Tensor<T> out(v.shape());
  T kink = std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::abs(v[i]);
  if (x.tape().tracks_kinks())
    for (std::size_t i = 0; i < v.size(); ++i) kink = std::min(kink, out[i]);
  auto node = detail::make_node<T>(OpKind::Abs, {x}, std::move(out), &detail::abs_backward<T>);
  node.kink = kink;
  return x.tape().push(std::move(node));
}

/// Reduction over `axes` (all axes when empty); reduced axes are dropped from the result.
/// Min/max route the gradient to the first attaining element in row-major order.
template <typename T>
Var<T> reduce(ReduceKind kind, const Var<T>& x, std::vector<std::size_t> axes = {}) {
  const auto& v = x.value();
  if (v.size() == 0) throw std::invalid_argument("reduce: empty reduction");
  if (axes.empty())
    for (std::size_t d = 0; d < v.rank(); ++d) axes.push_back(d);
  std::size_t mask = 0;
  for (auto a : axes) {
    if (a >= v.rank()) throw std::invalid_argument("reduce: axis " + std::to_string(a) + " out of range");
    if (mask & (std::size_t{1} << a)) throw std::invalid_argument("reduce: duplicate axis");
    mask |= std::size_t{1} << a;
  }
  const auto reduced = detail::reduced_axes(v.shape(), mask);
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t d = 0; d < v.rank(); ++d) {
    if (reduced[d])
      count *= v.extent(d);
    else
      out_shape.push_back(v.extent(d));
  }
  const auto target = detail::reduce_targets(v.shape(), reduced);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> arg;
  T kink = std::numeric_limits<T>::infinity();
  if (kind == ReduceKind::Min || kind == ReduceKind::Max) {
    const bool is_max = kind == ReduceKind::Max;
    arg.assign(out.size(), std::numeric_limits<std::size_t>::max());
    std::vector<T> second(out.size(), std::numeric_limits<T>::infinity());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::size_t o = target[i];
      if (arg[o] == std::numeric_limits<std::size_t>::max()) {
        arg[o] = i;
        out[o] = v[i];
        continue;
      }
      const bool better = is_max ? v[i] > out[o] : v[i] < out[o];
      const T gap = std::abs(v[i] - out[o]);
      if (better) {
        second[o] = std::min(second[o], gap);
        arg[o] = i;
        out[o] = v[i];
      } else {
        second[o] = std::min(second[o], gap);
      }
    }
    for (auto s : second) kink = std::min(kink, s);
  } else {
    for (std::size_t i = 0; i < v.size(); ++i) out[target[i]] += v[i];
    if (kind == ReduceKind::Mean)
      for (auto& o : out.values()) o /= static_cast<T>(count);
  }
  auto node = detail::make_node<T>(OpKind::Reduce, {x}, std::move(out), &detail::reduce_backward<T>);
  node.stride = static_cast<int>(kind);
  node.padding = static_cast<int>(mask);
  node.scalar = T(1) / static_cast<T>(count);
  node.index = std::move(arg);
  node.kink = kink;
  return x.tape().push(std::move(node));
}

template <typename T>
Var<T> sum(const Var<T>& x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceKind::Sum, x, std::move(axes));
}

template <typename T>
Var<T> mean(const Var<T>& x, std::vector<std::size_t> axes = {}) {
  return reduce(ReduceKind::Mean, x, std::move(axes));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  return x.tape().push(
      detail::make_node<T>(OpKind::Reshape, {x}, x.value().reshaped(std::move(shape)), &detail::reshape_backward<T>));
}

/// Slice `i` along axis 0: [N, ...] -> [...].
template <typename T>
Var<T> select(const Var<T>& x, std::size_t i) {
  const auto& v = x.value();
  if (v.rank() == 0 || i >= v.extent(0)) throw std::out_of_range("select: index out of range");
  Shape s(v.shape().begin() + 1, v.shape().end());
  const std::size_t inner = shape_size(s);
  std::vector<T> vals(v.data() + i * inner, v.data() + (i + 1) * inner);
  auto node = detail::make_node<T>(OpKind::Select, {x}, Tensor<T>(std::move(s), std::move(vals)),
                                   &detail::select_backward<T>);
  node.index = {i};
  return x.tape().push(std::move(node));
}

/// Rows of `weights` [n,K] picked by `rows`: result [rows.size(), K].
template <typename T>
Var<T> gather_rows(const Var<T>& weights, const std::vector<std::size_t>& rows) {
  const auto& w = weights.value();
  if (w.rank() != 2) throw std::invalid_argument("gather_rows: expected [n,K]");
  const std::size_t K = w.extent(1);
  Tensor<T> out(Shape{rows.size(), K});
  for (std::size_t s = 0; s < rows.size(); ++s) {
    if (rows[s] >= w.extent(0)) throw std::out_of_range("gather_rows: row " + std::to_string(rows[s]) + " out of range");
    std::copy_n(w.data() + rows[s] * K, K, out.data() + s * K);
  }
  auto node = detail::make_node<T>(OpKind::GatherRows, {weights}, std::move(out), &detail::gather_rows_backward<T>);
  node.index = rows;
  return weights.tape().push(std::move(node));
}

/// out[n,y,x] = sum_k weights[n,k] * features[n,k,y,x].
template <typename T>
Var<T> channel_weighted_sum(const Var<T>& features, const Var<T>& weights) {
  detail::check_same_tape(features, weights);
  const auto& f = features.value();
  const auto& w = weights.value();
  if (f.rank() != 4 || w.rank() != 2 || w.extent(0) != f.extent(0) || w.extent(1) != f.extent(1))
    throw std::invalid_argument("channel_weighted_sum: features " + shape_str(f.shape()) + " vs weights " +
                                shape_str(w.shape()));
  const std::size_t N = f.extent(0), K = f.extent(1), P = f.extent(2) * f.extent(3);
  Tensor<T> out(Shape{N, f.extent(2), f.extent(3)});
  for (std::size_t s = 0; s < N; ++s) {
    T* os = out.data() + s * P;
    for (std::size_t k = 0; k < K; ++k) {
      const T wk = w[s * K + k];
      const T* fk = f.data() + (s * K + k) * P;
      for (std::size_t p = 0; p < P; ++p) os[p] += wk * fk[p];
    }
  }
  return features.tape().push(detail::make_node<T>(OpKind::ChannelWeightedSum, {features, weights}, std::move(out),
                                                   &detail::channel_weighted_sum_backward<T>));
}

/// Per-sample min-max normalization of maps [N,H,W] to [0,1]. A constant map becomes all zeros.
template <typename T>
Var<T> normalize_maps(const Var<T>& maps) {
  const auto& v = maps.value();
  if (v.rank() != 3 || v.size() == 0) throw std::invalid_argument("normalize_maps: expected non-empty [N,H,W]");
  const std::size_t N = v.extent(0), P = v.size() / N;
  Tensor<T> out(v.shape());
  Tensor<T> range(Shape{N});
  std::vector<std::size_t> arg(2 * N);
  T kink = std::numeric_limits<T>::infinity();
  for (std::size_t s = 0; s < N; ++s) {
    const T* xs = v.data() + s * P;
    std::size_t imin = 0, imax = 0;
    for (std::size_t p = 1; p < P; ++p) {
      if (xs[p] < xs[imin]) imin = p;
      if (xs[p] > xs[imax]) imax = p;
    }
    const T lo = xs[imin], hi = xs[imax];
    range[s] = hi - lo;
    arg[2 * s] = s * P + imin;
    arg[2 * s + 1] = s * P + imax;
    if (range[s] > T(0)) {
      T* ys = out.data() + s * P;
      for (std::size_t p = 0; p < P; ++p) ys[p] = (xs[p] - lo) / range[s];
      if (maps.tape().tracks_kinks())
        for (std::size_t p = 0; p < P; ++p) {
          if (p != imin) kink = std::min(kink, xs[p] - lo);
          if (p != imax) kink = std::min(kink, hi - xs[p]);
        }
    } else {
      kink = T(0);
    }
  }
  auto node = detail::make_node<T>(OpKind::NormalizeMaps, {maps}, std::move(out), &detail::normalize_maps_backward<T>);
  node.saved = std::move(range);
  node.index = std::move(arg);
  node.kink = kink;
  return maps.tape().push(std::move(node));
}

/// Row-wise log softmax of logits [N,C] divided by `temperature`.
template <typename T>
Var<T> log_softmax(const Var<T>& logits, T temperature = T(1)) {
  const auto& z = logits.value();
  if (z.rank() != 2) throw std::invalid_argument("log_softmax: expected [N,C]");
  if (!(temperature > T(0))) throw std::invalid_argument("log_softmax: temperature must be positive");
  const std::size_t N = z.extent(0), C = z.extent(1);
  Tensor<T> out(z.shape());
  for (std::size_t s = 0; s < N; ++s) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, z[s * C + c] / temperature);
    T acc = 0;
    for (std::size_t c = 0; c < C; ++c) acc += std::exp(z[s * C + c] / temperature - mx);
    const T lse = mx + std::log(acc);
    for (std::size_t c = 0; c < C; ++c) out[s * C + c] = z[s * C + c] / temperature - lse;
  }
  auto node = detail::make_node<T>(OpKind::LogSoftmax, {logits}, std::move(out), &detail::log_softmax_backward<T>);
  node.scalar = temperature;
  return logits.tape().push(std::move(node));
}

/// Mean over the batch of -log softmax(z)[target].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& targets) {
  const auto& z = logits.value();
  if (z.rank() != 2 || z.extent(0) != targets.size())
    throw std::invalid_argument("cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                                std::to_string(targets.size()) + " targets");
  const std::size_t N = z.extent(0), C = z.extent(1);
  Tensor<T> probs(z.shape());
  T total = 0;
  for (std::size_t s = 0; s < N; ++s) {
    if (targets[s] >= C) throw std::out_of_range("cross_entropy: target " + std::to_string(targets[s]) + " out of range");
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, z[s * C + c]);
    T acc = 0;
    for (std::size_t c = 0; c < C; ++c) acc += std::exp(z[s * C + c] - mx);
    const T lse = mx + std::log(acc);
    for (std::size_t c = 0; c < C; ++c) probs[s * C + c] = std::exp(z[s * C + c] - lse);
    total += lse - z[s * C + targets[s]];
  }
  auto node = detail::make_node<T>(OpKind::CrossEntropy, {logits}, Tensor<T>::scalar(total / static_cast<T>(N)),
                                   &detail::cross_entropy_backward<T>);
  node.saved = std::move(probs);
  node.index = targets;
  return logits.tape().push(std::move(node));
}

/// Constant copy of `x`: gradients do not flow through the result.
template <typename T>
Var<T> detach(const Var<T>& x) {
  return x.tape().constant(x.value());
}

}  // namespace camloss

#endif  // CAMLOSS_OPS_HPP_
