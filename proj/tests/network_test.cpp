#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "camloss/activation_maps.hpp"
#include "camloss/network.hpp"
#include "support.hpp"

using namespace camloss;
using camloss::testing::random_small_config;
using camloss::testing::random_tensor;

namespace {

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
bool same_params(const Network<T>& a, const Network<T>& b) {
  if (a.params().size() != b.params().size()) return false;
  for (std::size_t i = 0; i < a.params().size(); ++i)
    if (a.params()[i].name != b.params()[i].name || !bitwise_equal(a.params()[i].value, b.params()[i].value))
      return false;
  return true;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("camloss_network_" + name);
}

// Largest |logit_i - mean_xy CAM_i| over every sample and class of one random draw.
template <typename T>
double cam_mean_gap(Rng& rng) {
  const auto cfg = random_small_config(rng);
  const auto net = Network<T>::build(cfg, rng.next());
  const std::size_t N = 1 + rng.below(3);
  const auto x = random_tensor<T>(Shape{N, cfg.input_channels, cfg.input_size, cfg.input_size}, rng);
  Tape<T> tape;
  const auto fw = net.forward(tape, x, false);
  double worst = 0;
  for (std::size_t s = 0; s < N; ++s)
    for (std::size_t i = 0; i < cfg.class_count; ++i) {
      const auto cam = compute_cam_for_class(fw.features.value(), net.head(), i, s);
      long double m = 0;
      for (T v : cam.values.values()) m += v;
      m /= static_cast<long double>(cam.values.size());
      worst = std::max(worst, static_cast<double>(std::abs(fw.logits.value()[s * cfg.class_count + i] - m)));
    }
  return worst;
}

}  // namespace

TEST(Network, LogitIsSpatialMeanOfItsCamSingle) {
  Rng rng(101);
  for (int trial = 0; trial < 100; ++trial) EXPECT_LE(cam_mean_gap<float>(rng), 1e-5) << "trial " << trial;
}

TEST(Network, LogitIsSpatialMeanOfItsCamDouble) {
  Rng rng(102);
  for (int trial = 0; trial < 100; ++trial) EXPECT_LE(cam_mean_gap<double>(rng), 1e-12) << "trial " << trial;
}

TEST(Network, BuildIsDeterministicPerSeed) {
  NetworkConfig cfg;
  EXPECT_TRUE(same_params(Network<float>::build(cfg, 7), Network<float>::build(cfg, 7)));
  EXPECT_FALSE(same_params(Network<float>::build(cfg, 7), Network<float>::build(cfg, 8)));
}

TEST(Network, DefaultShape) {
  NetworkConfig cfg;
  EXPECT_EQ(cfg.final_size(), 8u);
  EXPECT_EQ(cfg.final_channels(), 64u);
  const auto net = Network<float>::build(cfg, 1);
  Tape<float> tape;
  const auto fw = net.forward(tape, Tensor<float>(Shape{2, 3, 64, 64}), false);
  EXPECT_EQ(fw.features.shape(), (Shape{2, 64, 8, 8}));
  EXPECT_EQ(fw.pooled.shape(), (Shape{2, 64}));
  EXPECT_EQ(fw.logits.shape(), (Shape{2, 4}));
}

TEST(Network, InitBiasesZeroAndKernelsBounded) {
  NetworkConfig cfg;
  const auto net = Network<double>::build(cfg, 3);
  for (const auto& p : net.params()) {
    if (p.name.ends_with(".bias")) {
      for (double v : p.value.values()) EXPECT_EQ(v, 0.0);
      continue;
    }
    const double fan_in = static_cast<double>(p.value.size() / p.value.extent(0));
    const double bound = (p.group == ParamGroup::Head ? 1.0 : kConvInitGain) / std::sqrt(fan_in);
    double mean = 0;
    for (double v : p.value.values()) {
      EXPECT_LE(std::abs(v), bound);
      mean += v;
    }
    EXPECT_LT(std::abs(mean / static_cast<double>(p.value.size())), 0.2 * bound) << p.name;
  }
}

TEST(Network, RejectsOneByOneFinalMap) {
  NetworkConfig cfg;
  cfg.input_size = 8;  // 8 -> 8 -> 4 -> 2 -> 1
  EXPECT_THROW(Network<float>::build(cfg, 1), std::invalid_argument);
  cfg.input_size = 16;
  EXPECT_NO_THROW(Network<float>::build(cfg, 1));
  cfg.class_count = 1;
  EXPECT_THROW(Network<float>::build(cfg, 1), std::invalid_argument);
}

TEST(Network, RejectsMismatchedBatch) {
  const auto net = Network<float>::build(NetworkConfig{}, 1);
  Tape<float> tape;
  EXPECT_THROW(net.forward(tape, Tensor<float>(Shape{1, 1, 64, 64}), false), std::invalid_argument);
  EXPECT_THROW(net.forward(tape, Tensor<float>(Shape{1, 3, 32, 32}), false), std::invalid_argument);
}

TEST(Network, ParameterGroupsPartition) {
  const auto net = Network<float>::build(NetworkConfig{}, 1);
  const auto all = net.parameters(ParamGroup::All);
  const auto bb = net.parameters(ParamGroup::Backbone);
  const auto head = net.parameters(ParamGroup::Head);
  ASSERT_EQ(head.size(), 1u);
  EXPECT_EQ(net.params()[head[0]].value.shape(), (Shape{4, 64}));
  EXPECT_EQ(head[0], net.head_id());
  std::vector<ParamId> joined = bb;
  joined.insert(joined.end(), head.begin(), head.end());
  std::sort(joined.begin(), joined.end());
  EXPECT_EQ(joined, all);
  for (auto id : bb) EXPECT_NE(id, head[0]);
}

TEST(Network, ZeroInputWithZeroBiasesGivesZeros) {
  const auto net = Network<float>::build(NetworkConfig{}, 5);
  Tape<float> tape;
  const auto fw = net.forward(tape, Tensor<float>(Shape{2, 3, 64, 64}), false);
  for (float v : fw.features.value().values()) EXPECT_EQ(v, 0.0f);
  for (float v : fw.logits.value().values()) EXPECT_EQ(v, 0.0f);
}

TEST(Network, SamplesAreIndependentOfTheirBatch) {
  Rng rng(9);
  NetworkConfig cfg;
  cfg.input_size = 32;
  const auto net = Network<float>::build(cfg, 2);
  const auto x = random_tensor<float>(Shape{3, 3, 32, 32}, rng, 0, 1);
  Tape<float> tape;
  const auto all = net.forward(tape, x, false).logits.value();
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t per = 3 * 32 * 32;
    Tensor<float> one(Shape{1, 3, 32, 32}, std::vector<float>(x.data() + s * per, x.data() + (s + 1) * per));
    const auto l = net.forward(tape, one, false).logits.value();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(l[i], all[s * 4 + i]);
  }
}

TEST(Network, ForwardIsPure) {
  Rng rng(4);
  const auto net = Network<float>::build(NetworkConfig{}, 2);
  const auto x = random_tensor<float>(Shape{2, 3, 64, 64}, rng, 0, 1);
  Tape<float> a, b;
  EXPECT_TRUE(bitwise_equal(net.forward(a, x, false).features.value(), net.forward(b, x, false).features.value()));
}

TEST(Network, ShiftByStrideShiftsFeatures) {
  NetworkConfig cfg;
  cfg.input_channels = 1;
  cfg.input_size = 16;
  cfg.blocks = {{3, 2}};
  const auto net = Network<double>::build(cfg, 12);
  Rng rng(13);
  const auto patch = random_tensor<double>(Shape{3, 3}, rng, 0.2, 1.0);
  auto place = [&](std::size_t y0, std::size_t x0) {
    Tensor<double> img(Shape{1, 1, 16, 16});
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) img[(y0 + y) * 16 + x0 + x] = patch[y * 3 + x];
    return img;
  };
  Tape<double> tape;
  const auto a = net.forward(tape, place(4, 4), false).features.value();
  const auto b = net.forward(tape, place(6, 4), false).features.value();  // one output row down
  const std::size_t S = 8;
  double energy = 0;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t y = 0; y + 1 < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        EXPECT_EQ(b[(k * S + y + 1) * S + x], a[(k * S + y) * S + x]);
        energy += a[(k * S + y) * S + x];
      }
  EXPECT_GT(energy, 0.0);
}

TEST(Network, SaveLoadRoundTripIsBitwise) {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const auto net = Network<float>::build(random_small_config(rng), rng.next());
    const auto path = temp_path("roundtrip.ckpt");
    net.save(path);
    const auto back = Network<float>::load(path);
    EXPECT_TRUE(same_params(net, back));
    EXPECT_EQ(back.config().final_size(), net.config().final_size());
    EXPECT_EQ(back.config().class_count, net.config().class_count);
    std::filesystem::remove(path);
  }
}

TEST(Network, LoadRejectsCorruptFiles) {
  const auto net = Network<float>::build(NetworkConfig{}, 1);
  const auto path = temp_path("corrupt.ckpt");
  net.save(path);
  auto bytes = read_file_bytes(path);

  auto with = [&](auto mutate) {
    auto b = bytes;
    mutate(b);
    write_file_bytes(path, b);
  };
  with([](auto& b) { b[0] = 'X'; });
  EXPECT_THROW(Network<float>::load(path), FormatError);
  with([](auto& b) { b[4] = 2; });
  try {
    Network<float>::load(path);
    ADD_FAILURE() << "version 2 accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }
  with([](auto& b) { b.resize(b.size() - 7); });
  EXPECT_THROW(Network<float>::load(path), FormatError);
  // First tensor is "meta.input": its single extent sits after magic, version, count, name and rank.
  with([](auto& b) {
    for (int i = 0; i < 4; ++i) b[12 + 2 + 10 + 1 + i] = 0xff;
  });
  try {
    Network<float>::load(path);
    ADD_FAILURE() << "oversized extent accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("overflow"), std::string::npos) << e.what();
  }
  with([](auto& b) { b.resize(10); });
  EXPECT_THROW(Network<float>::load(path), FormatError);
  EXPECT_THROW(Network<float>::load(temp_path("missing.ckpt")), std::runtime_error);
  std::filesystem::remove(path);
}
