#ifndef CAMLOSS_NETWORK_HPP_
#define CAMLOSS_NETWORK_HPP_

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "camloss/checkpoint.hpp"
#include "camloss/ops.hpp"
#include "camloss/random.hpp"

namespace camloss {

/// One convolution + ReLU block. Stride-1 blocks use 3x3 kernels with padding 1; stride-2 blocks
/// use 4x4 kernels with padding 1 so even extents halve exactly.
/// Conv kernels are drawn from U(-g/sqrt(fan_in), g/sqrt(fan_in)). g = sqrt(6) keeps the
/// activation scale roughly constant through ReLU layers without normalization.
inline const double kConvInitGain = std::sqrt(6.0);

struct BlockSpec {
  std::size_t out_channels = 0;
  int stride = 1;

  int kernel() const { return stride == 1 ? 3 : 2 * stride; }
  int padding() const { return 1; }
};

struct NetworkConfig {
  std::size_t input_channels = 3;
  std::size_t input_size = 64;
  std::size_t class_count = 4;
  std::vector<BlockSpec> blocks{{8, 1}, {16, 2}, {32, 2}, {64, 2}};

  std::size_t final_channels() const { return blocks.empty() ? 0 : blocks.back().out_channels; }

  /// Spatial extent of the last feature maps; throws when a block does not divide exactly.
  std::size_t final_size() const {
    std::size_t s = input_size;
    for (const auto& b : blocks) {
      const long span = static_cast<long>(s) + 2 * b.padding() - b.kernel();
      if (b.stride < 1 || span < 0 || span % b.stride)
        throw std::invalid_argument("network config: block stride " + std::to_string(b.stride) +
                                    " does not divide extent " + std::to_string(s));
      s = static_cast<std::size_t>(span / b.stride + 1);
    }
    return s;
  }

  void validate() const {
    if (input_channels == 0 || input_size == 0) throw std::invalid_argument("network config: empty input");
    if (class_count < 2) throw std::invalid_argument("network config: need at least 2 classes");
    if (blocks.empty()) throw std::invalid_argument("network config: no blocks");
    for (const auto& b : blocks)
      if (b.out_channels == 0) throw std::invalid_argument("network config: block with zero channels");
    if (final_size() < 2) throw std::invalid_argument("network config: final feature map must be at least 2x2");
  }

  /// Same layout with every block's width halved (rounded up).
  NetworkConfig half_width() const {
    NetworkConfig c = *this;
    for (auto& b : c.blocks) b.out_channels = (b.out_channels + 1) / 2;
    return c;
  }
};

enum class ParamGroup { Backbone, Head, All };

template <typename T>
struct Parameter {
  std::string name;
  ParamGroup group = ParamGroup::Backbone;
  Tensor<T> value;
};

/// Taped outputs of one forward pass.
template <typename T>
struct ForwardResult {
  Var<T> features;  // [N,K,H,W], last convolution after ReLU
  Var<T> pooled;    // [N,K]
  Var<T> logits;    // [N,n]
};

/// Convolutional backbone, global average pooling and a bias-free linear head.
/// Parameter i has ParamId i; the head weight is always the last parameter.
template <typename T>
class Network {
 public:
  static Network build(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    Network net;
    net.config_ = config;
    Rng rng(seed);
    std::size_t in = config.input_channels;
    for (std::size_t b = 0; b < config.blocks.size(); ++b) {
      const auto& spec = config.blocks[b];
      const auto k = static_cast<std::size_t>(spec.kernel());
      Tensor<T> w(Shape{spec.out_channels, in, k, k});
      const double bound = kConvInitGain / std::sqrt(static_cast<double>(in * k * k));
      for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
      const std::string prefix = "conv" + std::to_string(b);
      net.params_.push_back({prefix + ".weight", ParamGroup::Backbone, std::move(w)});
      net.params_.push_back({prefix + ".bias", ParamGroup::Backbone, Tensor<T>(Shape{spec.out_channels})});
      in = spec.out_channels;
    }
    Tensor<T> head(Shape{config.class_count, in});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : head.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    net.params_.push_back({"head.weight", ParamGroup::Head, std::move(head)});
    return net;
  }

  const NetworkConfig& config() const { return config_; }
  std::size_t class_count() const { return config_.class_count; }

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }

  ParamId head_id() const { return static_cast<ParamId>(params_.size() - 1); }
  const Tensor<T>& head() const { return params_.back().value; }
  Tensor<T>& head() { return params_.back().value; }

  std::vector<ParamId> parameters(ParamGroup group) const {
    std::vector<ParamId> ids;
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (group == ParamGroup::All || params_[i].group == group) ids.push_back(static_cast<ParamId>(i));
    return ids;
  }

  /// Places every parameter on `tape`: as differentiable leaves when `trainable`, else as constants.
  std::vector<Var<T>> bind(Tape<T>& tape, bool trainable = true) const {
    std::vector<Var<T>> vars;
    vars.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i)
      vars.push_back(trainable ? tape.variable(params_[i].value, static_cast<ParamId>(i))
                               : tape.constant(params_[i].value));
    return vars;
  }

  ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& batch, bool trainable = true) const {
    check_batch(batch.shape());
    auto vars = bind(tape, trainable);
    return forward(tape.constant(batch), vars);
  }

  /// Forward with caller-supplied parameter handles (one per parameter, in registry order).
  ForwardResult<T> forward(const Var<T>& batch, std::span<const Var<T>> vars) const {
    check_batch(batch.shape());
    if (vars.size() != params_.size()) throw std::invalid_argument("network: parameter handle count mismatch");
    Var<T> h = batch;
    for (std::size_t b = 0; b < config_.blocks.size(); ++b) {
      const auto& spec = config_.blocks[b];
      h = relu(conv2d(h, vars[2 * b], vars[2 * b + 1], spec.stride, spec.padding()));
    }
    ForwardResult<T> r;
    r.features = h;
    r.pooled = global_average_pool(h);
    r.logits = linear(r.pooled, vars.back());
    return r;
  }

  template <typename U>
  Network<U> cast() const {
    Network<U> out;
    out.config_ = config_;
    for (const auto& p : params_) out.params_.push_back({p.name, p.group, p.value.template cast<U>()});
    return out;
  }

  std::vector<NamedTensor> to_tensors() const {
    std::vector<NamedTensor> out;
    const std::size_t B = config_.blocks.size();
    Tensor<float> strides(Shape{B}), meta(Shape{2});
    for (std::size_t b = 0; b < B; ++b) strides[b] = static_cast<float>(config_.blocks[b].stride);
    meta[0] = static_cast<float>(config_.input_size);
    meta[1] = static_cast<float>(config_.input_channels);
    out.push_back({"meta.input", std::move(meta)});
    out.push_back({"meta.strides", std::move(strides)});
    for (const auto& p : params_) out.push_back({p.name, p.value.template cast<float>()});
    return out;
  }

  static Network from_tensors(const std::vector<NamedTensor>& tensors) {
    const auto& meta = find_tensor(tensors, "meta.input");
    const auto& strides = find_tensor(tensors, "meta.strides");
    if (meta.size() != 2 || strides.rank() != 1) throw FormatError("checkpoint: malformed metadata");
    NetworkConfig cfg;
    cfg.input_size = static_cast<std::size_t>(meta[0]);
    cfg.input_channels = static_cast<std::size_t>(meta[1]);
    cfg.blocks.clear();
    for (std::size_t b = 0; b < strides.size(); ++b) {
      const auto& w = find_tensor(tensors, "conv" + std::to_string(b) + ".weight");
      if (w.rank() != 4) throw FormatError("checkpoint: malformed kernel for block " + std::to_string(b));
      cfg.blocks.push_back({w.extent(0), static_cast<int>(strides[b])});
    }
    const auto& head = find_tensor(tensors, "head.weight");
    if (head.rank() != 2) throw FormatError("checkpoint: malformed head");
    cfg.class_count = head.extent(0);
    try {
      cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
    Network net = build(cfg, 0);
    for (auto& p : net.params_) {
      const auto& t = find_tensor(tensors, p.name);
      if (t.shape() != p.value.shape())
        throw FormatError("checkpoint: tensor " + p.name + " has shape " + shape_str(t.shape()) + ", expected " +
                          shape_str(p.value.shape()));
      p.value = t.template cast<T>();
    }
    return net;
  }

  /// Values are stored as f32; float networks round-trip bitwise.
  void save(const std::filesystem::path& path) const { write_container(path, to_tensors()); }

  static Network load(const std::filesystem::path& path) { return from_tensors(read_container(path)); }

 private:
  template <typename U>
  friend class Network;

  void check_batch(const Shape& s) const {
    if (s.size() != 4 || s[1] != config_.input_channels || s[2] != config_.input_size || s[3] != config_.input_size)
      throw std::invalid_argument("network: batch shape " + shape_str(s) + " does not match [N," +
                                  std::to_string(config_.input_channels) + "," + std::to_string(config_.input_size) +
                                  "," + std::to_string(config_.input_size) + "]");
  }

  NetworkConfig config_;
  std::vector<Parameter<T>> params_;
};

}  // namespace camloss

#endif  // CAMLOSS_NETWORK_HPP_
