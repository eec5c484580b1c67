#ifndef CAMLOSS_ACTIVATION_MAPS_HPP_
#define CAMLOSS_ACTIVATION_MAPS_HPP_

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "camloss/ops.hpp"

namespace camloss {

enum class MapKind { Cam, Caam };
enum class DistanceMetric { L1, L2 };

/// A single spatial map [H,W]: a class activation map (CAM) for one class, or the
/// class-agnostic activation map (CAAM).
template <typename T>
struct ActivationMap {
  Tensor<T> values;
  MapKind kind = MapKind::Caam;
  std::optional<std::size_t> class_index;  // set for CAMs
  bool normalized = false;
};

// ---- batched, differentiable forms ----

/// CAM_i(x,y) = sum_k w_k^i f_k(x,y) per sample. features [N,K,H,W], rows [N,K] -> [N,H,W].
template <typename T>
Var<T> cam_maps(const Var<T>& features, const Var<T>& rows) {
  return channel_weighted_sum(features, rows);
}

/// CAAM(x,y) = sum_k f_k(x,y) per sample, computed as a CAM with all-ones weights.
template <typename T>
Var<T> caam_maps(const Var<T>& features) {
  const auto& s = features.shape();
  if (s.size() != 4) throw std::invalid_argument("caam: expected features [N,K,H,W]");
  return channel_weighted_sum(features, features.tape().constant(Tensor<T>(Shape{s[0], s[1]}, T(1))));
}

/// Mean over all pixels (and samples) of |a-b| or (a-b)^2.
template <typename T>
Var<T> map_distance(const Var<T>& a, const Var<T>& b, DistanceMetric metric) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("map_distance: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto d = sub(a, b);
  return mean(metric == DistanceMetric::L1 ? abs(d) : mul(d, d));
}

// ---- single-map forms ----

namespace detail {
template <typename T>
void check_features(const Tensor<T>& features, std::size_t sample) {
  if (features.rank() != 4) throw std::invalid_argument("activation map: expected features [N,K,H,W]");
  if (sample >= features.extent(0)) throw std::out_of_range("activation map: sample index out of range");
}

template <typename T>
Tensor<T> sample_slice(const Tensor<T>& features, std::size_t sample) {
  const auto& s = features.shape();
  const std::size_t inner = s[1] * s[2] * s[3];
  std::vector<T> v(features.data() + sample * inner, features.data() + (sample + 1) * inner);
  return Tensor<T>(Shape{1, s[1], s[2], s[3]}, std::move(v));
}
}  // namespace detail

/// CAM of one sample for the class whose head row is `head_row` (length K).
template <typename T>
ActivationMap<T> compute_cam(const Tensor<T>& features, const Tensor<T>& head_row, std::size_t sample,
                             std::optional<std::size_t> class_index = std::nullopt) {
  detail::check_features(features, sample);
  if (head_row.size() != features.extent(1))
    throw std::invalid_argument("compute_cam: head row has " + std::to_string(head_row.size()) + " weights for " +
                                std::to_string(features.extent(1)) + " channels");
  Tape<T> tape;
  auto f = tape.constant(detail::sample_slice(features, sample));
  auto w = tape.constant(head_row.reshaped(Shape{1, head_row.size()}));
  auto m = cam_maps(f, w);
  return {m.value().reshaped(Shape{features.extent(2), features.extent(3)}), MapKind::Cam, class_index, false};
}

/// CAM of one sample for class `class_index`, taking the row from head weights [n,K].
template <typename T>
ActivationMap<T> compute_cam_for_class(const Tensor<T>& features, const Tensor<T>& head, std::size_t class_index,
                                       std::size_t sample) {
  if (head.rank() != 2 || class_index >= head.extent(0))
    throw std::out_of_range("compute_cam: class index " + std::to_string(class_index) + " out of range");
  const std::size_t K = head.extent(1);
  Tensor<T> row(Shape{K}, std::vector<T>(head.data() + class_index * K, head.data() + (class_index + 1) * K));
  return compute_cam(features, row, sample, class_index);
}

template <typename T>
ActivationMap<T> compute_caam(const Tensor<T>& features, std::size_t sample) {
  detail::check_features(features, sample);
  Tape<T> tape;
  auto m = caam_maps(tape.constant(detail::sample_slice(features, sample)));
  return {m.value().reshaped(Shape{features.extent(2), features.extent(3)}), MapKind::Caam, std::nullopt, false};
}

template <typename T>
ActivationMap<T> minmax_normalize(const ActivationMap<T>& map) {
  if (map.values.rank() != 2) throw std::invalid_argument("minmax_normalize: expected [H,W] map");
  Tape<T> tape;
  const auto& s = map.values.shape();
  auto n = normalize_maps(tape.constant(map.values.reshaped(Shape{1, s[0], s[1]})));
  ActivationMap<T> out = map;
  out.values = n.value().reshaped(s);
  out.normalized = true;
  return out;
}

template <typename T>
T map_distance(const ActivationMap<T>& a, const ActivationMap<T>& b, DistanceMetric metric) {
  Tape<T> tape;
  return map_distance(tape.constant(a.values), tape.constant(b.values), metric).value().item();
}

/// IoU between {map >= threshold} and a binary mask. Both empty counts as a perfect match.
template <typename T, typename M>
double threshold_iou(const Tensor<T>& map, const Tensor<M>& mask, T threshold) {
  if (map.shape() != mask.shape())
    throw std::invalid_argument("threshold_iou: map " + shape_str(map.shape()) + " vs mask " + shape_str(mask.shape()));
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    const bool p = map[i] >= threshold;
    const bool m = mask[i] != M(0);
    inter += p && m;
    uni += p || m;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

template <typename T, typename M>
double threshold_iou(const ActivationMap<T>& map, const Tensor<M>& mask, T threshold) {
  if (!map.normalized) throw std::invalid_argument("threshold_iou: map must be normalized");
  return threshold_iou(map.values, mask, threshold);
}

/// Bilinear resize of a [H,W] map to [out_h,out_w] with half-pixel centers and edge clamping.
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& map, std::size_t out_h, std::size_t out_w) {
  if (map.rank() != 2) throw std::invalid_argument("resize_bilinear: expected [H,W]");
  const std::size_t H = map.extent(0), W = map.extent(1);
  Tensor<T> out(Shape{out_h, out_w});
  auto coord = [](std::size_t o, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1, double& t) {
    double c = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    c = std::clamp(c, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(c));
    i1 = std::min(i0 + 1, in - 1);
    t = c - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double ty;
    coord(y, H, out_h, y0, y1, ty);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double tx;
      coord(x, W, out_w, x0, x1, tx);
      const double top = (1 - tx) * map[y0 * W + x0] + tx * map[y0 * W + x1];
      const double bot = (1 - tx) * map[y1 * W + x0] + tx * map[y1 * W + x1];
      out[y * out_w + x] = static_cast<T>((1 - ty) * top + ty * bot);
    }
  }
  return out;
}

/// IoU of a raw map against a (possibly larger) mask: the map is resized bilinearly to the mask
/// resolution, min-max normalized, then thresholded.
template <typename T, typename M>
double localization_iou(const ActivationMap<T>& raw, const Tensor<M>& mask, T threshold = T(0.5)) {
  if (mask.rank() != 2) throw std::invalid_argument("localization_iou: expected [H,W] mask");
  ActivationMap<T> up = raw;
  up.values = resize_bilinear(raw.values, mask.extent(0), mask.extent(1));
  return threshold_iou(minmax_normalize(up), mask, threshold);
}

}  // namespace camloss

#endif  // CAMLOSS_ACTIVATION_MAPS_HPP_
