#ifndef CAMLOSS_AUTODIFF_HPP_
#define CAMLOSS_AUTODIFF_HPP_

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "camloss/tensor.hpp"

namespace camloss {

/// Identifier of a differentiable leaf (a network parameter or a test input).
using ParamId = std::uint32_t;

/// Parameters whose gradient accumulation is suppressed for one backward pass.
class GradMask {
 public:
  GradMask() = default;
  GradMask(std::initializer_list<ParamId> ids) : ids_(ids) {}
  template <typename Range>
  explicit GradMask(const Range& ids) : ids_(ids.begin(), ids.end()) {}

  void insert(ParamId id) { ids_.insert(id); }
  bool contains(ParamId id) const { return ids_.count(id) != 0; }
  bool empty() const { return ids_.empty(); }

 private:
  std::set<ParamId> ids_;
};

/// Accumulated gradients per leaf id. Successive backward passes add into it until clear().
template <typename T>
class GradientMap {
 public:
  void accumulate(ParamId id, const Tensor<T>& grad) {
    auto it = grads_.find(id);
    if (it == grads_.end()) {
      grads_.emplace(id, grad);
      return;
    }
    if (it->second.shape() != grad.shape())
      throw std::invalid_argument("gradient: shape mismatch for leaf " + std::to_string(id));
    T* dst = it->second.data();
    const T* src = grad.data();
    for (std::size_t i = 0; i < grad.size(); ++i) dst[i] += src[i];
  }

  const Tensor<T>* find(ParamId id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
  }

  /// Gradient for `id`, or zeros of `shape` when nothing was accumulated.
  Tensor<T> get_or_zero(ParamId id, const Shape& shape) const {
    const auto* g = find(id);
    return g ? *g : Tensor<T>(shape);
  }

  bool contains(ParamId id) const { return grads_.count(id) != 0; }
  std::size_t size() const { return grads_.size(); }
  void clear() { grads_.clear(); }

  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::map<ParamId, Tensor<T>> grads_;
};

enum class OpKind {
  Constant,
  Variable,
  Conv2d,
  Relu,
  GlobalAvgPool,
  Linear,
  Add,
  Sub,
  Mul,
  Div,
  Abs,
  AddScalar,
  MulScalar,
  DivScalar,
  Reduce,
  Reshape,
  Select,
  GatherRows,
  ChannelWeightedSum,
  NormalizeMaps,
  LogSoftmax,
  CrossEntropy,
};

template <typename T>
class Tape;

template <typename T>
struct Node;

/// Backward kernel: adds the contribution of `grad_out` into each parent gradient that is not null.
template <typename T>
using BackwardFn = void (*)(const Tape<T>& tape, const Node<T>& node, const Tensor<T>& grad_out,
                            const std::array<Tensor<T>*, 3>& parent_grads);

template <typename T>
struct Node {
  OpKind op = OpKind::Constant;
  std::array<std::int64_t, 3> parents{-1, -1, -1};
  Tensor<T> value;
  bool requires_grad = false;
  std::optional<ParamId> param;
  BackwardFn<T> backward = nullptr;

  // Saved forward context.
  Tensor<T> saved;
  std::vector<std::size_t> index;
  T scalar{};
  int stride = 1;
  int padding = 0;
  // Distance of the forward point to the nearest non-differentiable configuration
  // (relu/abs at zero, min/max ties). Infinity for smooth operators.
  T kink = std::numeric_limits<T>::infinity();
};

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t index) : tape_(tape), index_(index) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape<T>& tape() const { return *tape_; }
  std::size_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t index_ = 0;
};

/// Ordered record of a forward computation; nodes are appended so parents always precede children.
/// Single owner: a tape and its handles must not be shared between threads while recording.
template <typename T>
class Tape {
 public:
  Tape() = default;
  /// With `track_kinks`, non-smooth operators record their distance to a kink (see kink_margin()).
  explicit Tape(bool track_kinks) : track_kinks_(track_kinks) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    Node<T> n;
    n.op = OpKind::Constant;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var<T> variable(Tensor<T> value, ParamId id) {
    Node<T> n;
    n.op = OpKind::Variable;
    n.value = std::move(value);
    n.requires_grad = true;
    n.param = id;
    return push(std::move(n));
  }

  Var<T> push(Node<T> node) {
    for (auto p : node.parents)
      if (p >= static_cast<std::int64_t>(nodes_.size())) throw std::logic_error("tape: parent recorded after child");
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
  }

  const Node<T>& node(std::size_t i) const { return nodes_.at(i); }
  std::size_t size() const { return nodes_.size(); }

  bool owns(const Var<T>& v) const { return &v.tape() == this && v.index() < nodes_.size(); }

  /// Reverse-mode sweep from a scalar `loss`, adding d loss / d leaf into `grads` for every
  /// variable leaf not in `mask`. Each ancestor of `loss` is visited exactly once.
  void backward(const Var<T>& loss, GradientMap<T>& grads, const GradMask& mask = {}) const {
    if (!loss.valid() || !owns(loss)) throw std::invalid_argument("backward: loss is not on this tape");
    const auto& root = nodes_[loss.index()];
    if (root.value.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(root.value.shape()));
    if (!root.requires_grad) return;

    std::vector<Tensor<T>> adj(loss.index() + 1);
    std::vector<char> present(loss.index() + 1, 0);
    adj[loss.index()] = Tensor<T>(root.value.shape(), T(1));
    present[loss.index()] = 1;

    for (std::size_t i = loss.index() + 1; i-- > 0;) {
      if (!present[i]) continue;
      const Node<T>& n = nodes_[i];
      if (!n.requires_grad) continue;
      if (n.op == OpKind::Variable) {
        if (!mask.contains(*n.param)) grads.accumulate(*n.param, adj[i]);
        continue;
      }
      std::array<Tensor<T>*, 3> pg{nullptr, nullptr, nullptr};
      for (int k = 0; k < 3; ++k) {
        auto p = n.parents[k];
        if (p < 0 || !nodes_[p].requires_grad) continue;
        if (!present[p]) {
          adj[p] = Tensor<T>(nodes_[p].value.shape());
          present[p] = 1;
        }
        pg[k] = &adj[p];
      }
      n.backward(*this, n, adj[i], pg);
      adj[i] = Tensor<T>();  // release early
    }
  }

  GradientMap<T> gradients(const Var<T>& loss, const GradMask& mask = {}) const {
    GradientMap<T> g;
    backward(loss, g, mask);
    return g;
  }

  bool tracks_kinks() const { return track_kinks_; }

  /// Smallest kink distance over all recorded nodes; infinity unless kinks are tracked.
  T kink_margin() const {
    T m = std::numeric_limits<T>::infinity();
    for (const auto& n : nodes_) m = std::min(m, n.kink);
    return m;
  }

 private:
  std::vector<Node<T>> nodes_;
  bool track_kinks_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->node(index_).value;
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->node(index_).requires_grad;
}

}  // namespace camloss

#endif  // CAMLOSS_AUTODIFF_HPP_
