#ifndef CAMLOSS_DATA_HPP_
#define CAMLOSS_DATA_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "camloss/checkpoint.hpp"
#include "camloss/random.hpp"
#include "camloss/tensor.hpp"

namespace camloss {

using Mask = Tensor<std::uint8_t>;

struct Sample {
  Tensor<float> image;  // [C,H,W], values in [0,1]
  std::size_t label = 0;
  std::optional<Mask> mask;  // [H,W], 1 on the discriminative object
};

struct Dataset {
  std::string name;
  std::size_t class_count = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool has_masks() const { return !samples.empty() && samples.front().mask.has_value(); }
  const Shape& image_shape() const { return samples.at(0).image.shape(); }

  void validate() const {
    if (samples.empty()) throw std::invalid_argument("dataset " + name + ": empty");
    const auto shape = samples.front().image.shape();
    const bool masks = has_masks();
    for (const auto& s : samples) {
      if (s.image.shape() != shape) throw std::invalid_argument("dataset " + name + ": inconsistent image shapes");
      if (s.label >= class_count) throw std::invalid_argument("dataset " + name + ": label out of range");
      if (s.mask.has_value() != masks) throw std::invalid_argument("dataset " + name + ": masks on some samples only");
    }
  }
};

// ---- synthetic shapes ----

enum class ShapeClass { Circle = 0, Square = 1, Triangle = 2, Cross = 3 };

namespace detail {

// Footprint test for a class shape of scale s centred at (cx, cy).
inline bool inside_shape(ShapeClass cls, double x, double y, double cx, double cy, double s) {
  const double dx = x - cx, dy = y - cy;
  switch (cls) {
    case ShapeClass::Circle:
      return dx * dx + dy * dy <= s * s;
    case ShapeClass::Square:
      return std::abs(dx) <= 0.85 * s && std::abs(dy) <= 0.85 * s;
    case ShapeClass::Triangle: {
      // Upright equilateral triangle with circumradius 1.4 s.
      const double r = 1.4 * s;
      const double top = cy - r, base = cy + 0.5 * r;
      if (y < top || y > base) return false;
      const double half = (y - top) / (base - top) * (r * std::sqrt(3.0) / 2);
      return std::abs(dx) <= half;
    }
    case ShapeClass::Cross: {
      const double t = s / 3;
      return (std::abs(dx) <= s && std::abs(dy) <= t) || (std::abs(dy) <= s && std::abs(dx) <= t);
    }
  }
  return false;
}

inline double shape_extent(ShapeClass cls, double s) {
  return cls == ShapeClass::Triangle ? 1.4 * s : s;
}

}  // namespace detail

/// Seeded noise background, `clutter` soft distractor blobs (class independent), and one
/// hard-edged class shape whose exact footprint is the mask. Shape area lies in [4%, 25%] of the
/// image. Labels cycle through the classes, so per-class counts differ by at most one.
inline Dataset gen_shapes(std::size_t count, std::size_t class_count, std::size_t image_size, std::size_t clutter,
                          std::uint64_t seed) {
  if (class_count < 2 || class_count > 4) throw std::invalid_argument("gen_shapes: class count must be 2, 3 or 4");
  if (image_size < 32) throw std::invalid_argument("gen_shapes: image size must be at least 32");
  if (count == 0) throw std::invalid_argument("gen_shapes: empty dataset requested");
  constexpr std::size_t C = 3;
  const std::size_t S = image_size;
  const double sz = static_cast<double>(S);
  Dataset ds;
  ds.name = "shapes";
  ds.class_count = class_count;
  ds.samples.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(stream_seed(seed, 0x5a4e, i));
    Sample smp;
    smp.label = i % class_count;
    smp.image = Tensor<float>(Shape{C, S, S});
    auto& img = smp.image;
    for (auto& v : img.values()) v = static_cast<float>(rng.uniform(0.0, 0.35));

    for (std::size_t b = 0; b < clutter; ++b) {
      const double bx = rng.uniform(0, sz), by = rng.uniform(0, sz);
      const double sigma = rng.uniform(0.03, 0.06) * sz;
      double color[C];
      for (auto& c : color) c = rng.uniform(0.5, 1.0);
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const double d2 = (x + 0.5 - bx) * (x + 0.5 - bx) + (y + 0.5 - by) * (y + 0.5 - by);
          const double a = std::exp(-d2 / (2 * sigma * sigma));
          if (a < 1e-3) continue;
          for (std::size_t c = 0; c < C; ++c) {
            float& v = img[(c * S + y) * S + x];
            v = static_cast<float>(v * (1 - a) + color[c] * a);
          }
        }
    }

    const auto cls = static_cast<ShapeClass>(smp.label);
    Mask mask(Shape{S, S});
    const std::size_t lo = (S * S * 4 + 99) / 100, hi = S * S / 4;
    for (;;) {
      const double s = rng.uniform(0.12, 0.26) * sz;
      const double ext = detail::shape_extent(cls, s) + 1;
      const double cx = rng.uniform(ext, sz - ext), cy = rng.uniform(ext, sz - ext);
      std::size_t area = 0;
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const bool in = detail::inside_shape(cls, x + 0.5, y + 0.5, cx, cy, s);
          mask[y * S + x] = in ? 1 : 0;
          area += in;
        }
      if (area >= lo && area <= hi) break;
    }
    double color[C];
    for (auto& c : color) c = rng.uniform(0.55, 1.0);
    for (std::size_t p = 0; p < S * S; ++p)
      if (mask[p])
        for (std::size_t c = 0; c < C; ++c) img[c * S * S + p] = static_cast<float>(color[c]);
    smp.mask = std::move(mask);
    ds.samples.push_back(std::move(smp));
  }
  return ds;
}

// ---- CIFAR-10 binary batches ----

inline constexpr std::size_t kCifarRecord = 3073;
inline constexpr std::size_t kCifarSide = 32;

/// Parses 3073-byte records: one label byte, then 3x1024 plane-major pixel bytes scaled to [0,1].
inline Dataset parse_cifar10(const std::vector<unsigned char>& bytes, const std::string& name = "cifar10") {
  if (bytes.size() % kCifarRecord != 0)
    throw FormatError("cifar10: " + name + " has a truncated record at offset " +
                      std::to_string(bytes.size() / kCifarRecord * kCifarRecord) + " (length " +
                      std::to_string(bytes.size()) + " is not a multiple of 3073)");
  Dataset ds;
  ds.name = name;
  ds.class_count = 10;
  const std::size_t n = bytes.size() / kCifarRecord;
  ds.samples.reserve(n);
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecord;
    if (rec[0] > 9)
      throw FormatError("cifar10: label byte " + std::to_string(rec[0]) + " at offset " +
                        std::to_string(r * kCifarRecord));
    Sample s;
    s.label = rec[0];
    s.image = Tensor<float>(Shape{3, kCifarSide, kCifarSide});
    for (std::size_t i = 0; i < kCifarRecord - 1; ++i) s.image[i] = static_cast<float>(rec[1 + i]) / 255.0f;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline std::vector<unsigned char> serialize_cifar10(const Dataset& ds) {
  std::vector<unsigned char> out;
  out.reserve(ds.size() * kCifarRecord);
  for (const auto& s : ds.samples) {
    if (s.image.shape() != Shape{3, kCifarSide, kCifarSide} || s.label > 9)
      throw std::invalid_argument("cifar10: sample is not a CIFAR-10 record");
    out.push_back(static_cast<unsigned char>(s.label));
    for (float v : s.image.values())
      out.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  return out;
}

inline Dataset load_cifar10_file(const std::filesystem::path& path) {
  return parse_cifar10(read_file_bytes(path), path.filename().string());
}

/// Training split = data_batch_1..5.bin, test split = test_batch.bin.
inline Dataset load_cifar10(const std::filesystem::path& dir, bool train) {
  Dataset ds;
  ds.name = train ? "cifar10-train" : "cifar10-test";
  ds.class_count = 10;
  std::vector<std::string> files;
  if (train)
    for (int b = 1; b <= 5; ++b) files.push_back("data_batch_" + std::to_string(b) + ".bin");
  else
    files.push_back("test_batch.bin");
  for (const auto& f : files) {
    auto part = load_cifar10_file(dir / f);
    for (auto& s : part.samples) ds.samples.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

// ---- dataset cache (tensor container) ----

inline std::vector<NamedTensor> dataset_to_tensors(const Dataset& ds) {
  ds.validate();
  const auto& is = ds.image_shape();
  const std::size_t N = ds.size(), per = shape_size(is);
  Tensor<float> images(Shape{N, is[0], is[1], is[2]}), labels(Shape{N});
  for (std::size_t i = 0; i < N; ++i) {
    std::copy(ds.samples[i].image.values().begin(), ds.samples[i].image.values().end(), images.data() + i * per);
    labels[i] = static_cast<float>(ds.samples[i].label);
  }
  std::vector<NamedTensor> out;
  out.push_back({"meta.class_count", Tensor<float>(Shape{1}, {static_cast<float>(ds.class_count)})});
  out.push_back({"images", std::move(images)});
  out.push_back({"labels", std::move(labels)});
  if (ds.has_masks()) {
    Tensor<float> masks(Shape{N, is[1], is[2]});
    const std::size_t area = is[1] * is[2];
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t p = 0; p < area; ++p) masks[i * area + p] = (*ds.samples[i].mask)[p];
    out.push_back({"masks", std::move(masks)});
  }
  return out;
}

inline Dataset dataset_from_tensors(const std::vector<NamedTensor>& tensors, std::string name) {
  const auto& meta = find_tensor(tensors, "meta.class_count");
  const auto& images = find_tensor(tensors, "images");
  const auto& labels = find_tensor(tensors, "labels");
  if (meta.size() != 1 || images.rank() != 4 || labels.rank() != 1 || labels.extent(0) != images.extent(0))
    throw FormatError("dataset cache: malformed tensors");
  const Tensor<float>* masks = nullptr;
  for (const auto& t : tensors)
    if (t.name == "masks") masks = &t.tensor;
  const std::size_t N = images.extent(0), C = images.extent(1), H = images.extent(2), W = images.extent(3);
  if (masks && masks->shape() != Shape{N, H, W}) throw FormatError("dataset cache: mask shape mismatch");
  Dataset ds;
  ds.name = std::move(name);
  ds.class_count = static_cast<std::size_t>(meta[0]);
  for (std::size_t i = 0; i < N; ++i) {
    Sample s;
    s.label = static_cast<std::size_t>(labels[i]);
    std::vector<float> px(images.data() + i * C * H * W, images.data() + (i + 1) * C * H * W);
    s.image = Tensor<float>(Shape{C, H, W}, std::move(px));
    if (masks) {
      Mask m(Shape{H, W});
      for (std::size_t p = 0; p < H * W; ++p) m[p] = (*masks)[i * H * W + p] != 0.0f ? 1 : 0;
      s.mask = std::move(m);
    }
    ds.samples.push_back(std::move(s));
  }
  try {
    ds.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("dataset cache: ") + e.what());
  }
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  write_container(path, dataset_to_tensors(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return dataset_from_tensors(read_container(path), path.stem().string());
}

// ---- augmentation and batching ----

inline constexpr int kAugmentPad = 4;

struct AugmentParams {
  int dx = kAugmentPad;  // crop offset into the padded image, 0..2*pad
  int dy = kAugmentPad;
  bool flip = false;
};

inline AugmentParams draw_augment(Rng& rng) {
  AugmentParams p;
  p.dx = static_cast<int>(rng.below(2 * kAugmentPad + 1));
  p.dy = static_cast<int>(rng.below(2 * kAugmentPad + 1));
  p.flip = rng.coin();
  return p;
}

/// Zero-pad by 4, crop back to the original size at (dx, dy), then optionally mirror left-right.
/// The mask undergoes the same geometric transform.
inline Sample augment(const Sample& in, const AugmentParams& p) {
  const std::size_t C = in.image.extent(0), H = in.image.extent(1), W = in.image.extent(2);
  auto src_of = [&](std::size_t y, std::size_t x, long& sy, long& sx) {
    const std::size_t xc = p.flip ? W - 1 - x : x;
    sy = static_cast<long>(y) + p.dy - kAugmentPad;
    sx = static_cast<long>(xc) + p.dx - kAugmentPad;
    return sy >= 0 && sy < static_cast<long>(H) && sx >= 0 && sx < static_cast<long>(W);
  };
  Sample out;
  out.label = in.label;
  out.image = Tensor<float>(in.image.shape());
  if (in.mask) out.mask = Mask(in.mask->shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      long sy, sx;
      if (!src_of(y, x, sy, sx)) continue;
      const std::size_t src = static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx);
      for (std::size_t c = 0; c < C; ++c) out.image[(c * H + y) * W + x] = in.image[c * H * W + src];
      if (in.mask) (*out.mask)[y * W + x] = (*in.mask)[src];
    }
  return out;
}

inline Sample augment(const Sample& in, Rng& rng) { return augment(in, draw_augment(rng)); }

/// Seeded permutation of [0, n) for (seed, epoch), cut into batches; the last batch may be short.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::size_t epoch,
                                                     std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("batches: batch size must be >= 1");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(stream_seed(seed, 0xba7c, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < n; at += batch_size)
    out.emplace_back(perm.begin() + static_cast<long>(at), perm.begin() + static_cast<long>(std::min(n, at + batch_size)));
  return out;
}

template <typename T>
inline constexpr T kInputShift = T(0.5);

/// Network input [B,C,H,W]: pixel values shifted by -0.5 so that they are centered on zero. With
/// `augment_seed`, each sample is augmented from its own stream keyed by (seed, epoch, sample index).
template <typename T>
Tensor<T> stack_images(const Dataset& ds, const std::vector<std::size_t>& indices,
                       std::optional<std::uint64_t> augment_seed = std::nullopt, std::size_t epoch = 0) {
  const auto& is = ds.image_shape();
  const std::size_t per = shape_size(is);
  Tensor<T> out(Shape{indices.size(), is[0], is[1], is[2]});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Sample& s = ds.samples.at(indices[b]);
    const float* src = s.image.data();
    Sample aug;
    if (augment_seed) {
      Rng rng(stream_seed(*augment_seed, 0xa06, epoch, indices[b]));
      aug = augment(s, rng);
      src = aug.image.data();
    }
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] = static_cast<T>(src[i]) - kInputShift<T>;
  }
  return out;
}

inline std::vector<std::size_t> labels_of(const Dataset& ds, const std::vector<std::size_t>& indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(ds.samples.at(i).label);
  return out;
}

}  // namespace camloss

#endif  // CAMLOSS_DATA_HPP_
