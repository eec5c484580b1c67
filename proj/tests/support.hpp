// Shared fixtures for the unit tests and the acceptance runner: random instances, brute-force
// oracles and the finite-difference suites.
#ifndef CAMLOSS_TESTS_SUPPORT_HPP_
#define CAMLOSS_TESTS_SUPPORT_HPP_

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "camloss/gradcheck.hpp"
#include "camloss/losses.hpp"
#include "camloss/network.hpp"
#include "camloss/random.hpp"

namespace camloss::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

inline std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<std::size_t> out(n);
  for (auto& v : out) v = rng.below(classes);
  return out;
}

// Quadruple loop cross-correlation with zero padding; no shared code with conv2d.
inline Tensor<double> conv2d_oracle(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b,
                                    int stride, int pad) {
  const long N = static_cast<long>(x.extent(0)), C = static_cast<long>(x.extent(1));
  const long H = static_cast<long>(x.extent(2)), W = static_cast<long>(x.extent(3));
  const long K = static_cast<long>(k.extent(0)), kh = static_cast<long>(k.extent(2)), kw = static_cast<long>(k.extent(3));
  const long Ho = (H + 2 * pad - kh) / stride + 1, Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor<double> out(Shape{static_cast<std::size_t>(N), static_cast<std::size_t>(K), static_cast<std::size_t>(Ho),
                           static_cast<std::size_t>(Wo)});
  for (long n = 0; n < N; ++n)
    for (long o = 0; o < K; ++o)
      for (long y = 0; y < Ho; ++y)
        for (long xx = 0; xx < Wo; ++xx) {
          double acc = b[static_cast<std::size_t>(o)];
          for (long c = 0; c < C; ++c)
            for (long i = 0; i < kh; ++i)
              for (long j = 0; j < kw; ++j) {
                const long iy = y * stride - pad + i, ix = xx * stride - pad + j;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += x[static_cast<std::size_t>(((n * C + c) * H + iy) * W + ix)] *
                       k[static_cast<std::size_t>(((o * C + c) * kh + i) * kw + j)];
              }
          out[static_cast<std::size_t>(((n * K + o) * Ho + y) * Wo + xx)] = acc;
        }
  return out;
}

// Term-by-term evaluation of the KD objective for one batch, in long double:
// mean over samples of (1/n) sum_i tau^2 p_t,i (log p_t,i - log p_s,i).
inline long double kd_oracle(const Tensor<double>& student, const Tensor<double>& teacher, double tau) {
  const std::size_t N = student.extent(0), n = student.extent(1);
  auto softmax = [&](const Tensor<double>& z, std::size_t s) {
    std::vector<long double> p(n);
    long double mx = -INFINITY, total = 0;
    for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<long double>(z[s * n + i]) / tau);
    for (std::size_t i = 0; i < n; ++i) total += p[i] = std::exp(static_cast<long double>(z[s * n + i]) / tau - mx);
    for (auto& v : p) v /= total;
    return p;
  };
  long double acc = 0;
  for (std::size_t s = 0; s < N; ++s) {
    const auto pt = softmax(teacher, s), ps = softmax(student, s);
    long double row = 0;
    for (std::size_t i = 0; i < n; ++i) row += static_cast<long double>(tau) * tau * pt[i] * (std::log(pt[i]) - std::log(ps[i]));
    acc += row / static_cast<long double>(n);
  }
  return acc / static_cast<long double>(N);
}

// ---- finite-difference suites ----

// Reduces any tensor to a scalar through a fixed random weighting so every output coordinate
// contributes a distinct gradient.
inline Var<double> project(const Var<double>& y, Rng& rng) {
  auto w = y.tape().constant(random_tensor(y.shape(), rng, 0.5, 1.5));
  return sum(mul(y, w));
}

struct GradCase {
  std::string name;
  // Draws one random instance (inputs and a function on them) and checks it.
  std::function<GradCheckReport(Rng&)> run;
};

struct GradSuiteResult {
  std::string name;
  int accepted = 0;
  int rejected = 0;
  double worst_rel = 0;
};

// A draw is rejected when the forward point sits closer than this to a kink (relu/abs at 0,
// min/max ties); there central differences do not estimate the one-sided derivative.
inline constexpr double kKinkMargin = 1e-3;

inline GradSuiteResult run_grad_case(const GradCase& c, std::uint64_t seed, int instances = 100) {
  GradSuiteResult r;
  r.name = c.name;
  Rng rng(stream_seed(seed, std::hash<std::string>{}(c.name)));
  while (r.accepted < instances && r.rejected < 20 * instances) {
    const auto rep = c.run(rng);
    if (rep.kink_margin < kKinkMargin) {
      ++r.rejected;
      continue;
    }
    ++r.accepted;
    r.worst_rel = std::max(r.worst_rel, rep.max_rel_err);
  }
  return r;
}

using Builder = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

inline GradCheckReport check(const Builder& b, const std::vector<Tensor<double>>& inputs) {
  return check_gradients(b, inputs, 1e-5);
}

inline std::vector<GradCase> operator_cases() {
  std::vector<GradCase> cases;
  auto conv = [](std::size_t C, std::size_t K, std::size_t H, std::size_t k, int stride, int pad) {
    return [=](Rng& rng) {
      const std::size_t N = 1 + rng.below(2);
      auto x = random_tensor(Shape{N, C, H, H}, rng), w = random_tensor(Shape{K, C, k, k}, rng),
           b = random_tensor(Shape{K}, rng);
      const std::uint64_t ws = rng.next();
      return check(
          [=](Tape<double>&, std::vector<Var<double>>& v) {
            Rng r(ws);
            return project(conv2d(v[0], v[1], v[2], stride, pad), r);
          },
          {x, w, b});
    };
  };
  cases.push_back({"conv2d 3x3 stride 1 pad 1", conv(2, 3, 5, 3, 1, 1)});
  cases.push_back({"conv2d 4x4 stride 2 pad 1", conv(2, 2, 6, 4, 2, 1)});
  cases.push_back({"conv2d 2x2 stride 1 pad 0", conv(1, 2, 4, 2, 1, 0)});

  // Unary operators on a random [2,3,2,2] input, projected to a scalar.
  auto unary = [&](std::string name, std::function<Var<double>(const Var<double>&)> op, double lo = -1,
                   double hi = 1, Shape shape = Shape{2, 3, 2, 2}) {
    cases.push_back({std::move(name), [=](Rng& rng) {
                       auto x = random_tensor(shape, rng, lo, hi);
                       const std::uint64_t ws = rng.next();
                       return check(
                           [=](Tape<double>&, std::vector<Var<double>>& v) {
                             Rng r(ws);
                             return project(op(v[0]), r);
                           },
                           {x});
                     }});
  };
  unary("relu", [](const Var<double>& x) { return relu(x); });
  unary("global_average_pool", [](const Var<double>& x) { return global_average_pool(x); });
  unary("abs", [](const Var<double>& x) { return abs(x); });
  unary("add scalar", [](const Var<double>& x) { return add(x, 0.7); });
  unary("sub scalar", [](const Var<double>& x) { return sub(x, 0.7); });
  unary("scale", [](const Var<double>& x) { return scale(x, -1.3); });
  unary("mul scalar", [](const Var<double>& x) { return mul(x, 2.5); });
  unary("div scalar", [](const Var<double>& x) { return div(x, 0.4); });
  unary("sum all", [](const Var<double>& x) { return sum(x); });
  unary("mean all", [](const Var<double>& x) { return mean(x); });
  unary("sum axes 1,3", [](const Var<double>& x) { return sum(x, {1, 3}); });
  unary("mean axis 0", [](const Var<double>& x) { return mean(x, {0}); });
  unary("min all", [](const Var<double>& x) { return reduce(ReduceKind::Min, x); });
  unary("max axes 2,3", [](const Var<double>& x) { return reduce(ReduceKind::Max, x, {2, 3}); });
  unary("min axis 1", [](const Var<double>& x) { return reduce(ReduceKind::Min, x, {1}); });
  unary("reshape", [](const Var<double>& x) { return reshape(x, Shape{6, 4}); });
  unary("select", [](const Var<double>& x) { return select(x, 1); });
  unary("gather_rows", [](const Var<double>& x) { return gather_rows(x, {2, 0, 2, 1}); }, -1, 1, Shape{3, 4});
  unary("normalize_maps", [](const Var<double>& x) { return normalize_maps(x); }, -1, 1, Shape{2, 3, 3});
  unary("log_softmax", [](const Var<double>& x) { return log_softmax(x); }, -2, 2, Shape{3, 4});
  unary("log_softmax tau 2.5", [](const Var<double>& x) { return log_softmax(x, 2.5); }, -2, 2, Shape{3, 4});

  auto binary = [&](std::string name, std::function<Var<double>(const Var<double>&, const Var<double>&)> op,
                    bool positive_b = false) {
    cases.push_back({std::move(name), [=](Rng& rng) {
                       const Shape s{2, 3, 2};
                       auto a = random_tensor(s, rng);
                       auto b = random_tensor(s, rng, 0.5, 1.5);
                       if (!positive_b)
                         for (auto& v : b.values()) v *= rng.coin() ? 1 : -1;
                       const std::uint64_t ws = rng.next();
                       return check(
                           [=](Tape<double>&, std::vector<Var<double>>& v) {
                             Rng r(ws);
                             return project(op(v[0], v[1]), r);
                           },
                           {a, b});
                     }});
  };
  binary("add", [](const Var<double>& a, const Var<double>& b) { return add(a, b); });
  binary("sub", [](const Var<double>& a, const Var<double>& b) { return sub(a, b); });
  binary("mul", [](const Var<double>& a, const Var<double>& b) { return mul(a, b); });
  binary("div", [](const Var<double>& a, const Var<double>& b) { return div(a, b); });

  cases.push_back({"linear", [](Rng& rng) {
                     auto x = random_tensor(Shape{3, 4}, rng), w = random_tensor(Shape{2, 4}, rng);
                     const std::uint64_t ws = rng.next();
                     return check(
                         [=](Tape<double>&, std::vector<Var<double>>& v) {
                           Rng r(ws);
                           return project(linear(v[0], v[1]), r);
                         },
                         {x, w});
                   }});
  cases.push_back({"linear with bias", [](Rng& rng) {
                     auto x = random_tensor(Shape{3, 4}, rng), w = random_tensor(Shape{2, 4}, rng),
                          b = random_tensor(Shape{2}, rng);
                     const std::uint64_t ws = rng.next();
                     return check(
                         [=](Tape<double>&, std::vector<Var<double>>& v) {
                           Rng r(ws);
                           return project(linear(v[0], v[1], &v[2]), r);
                         },
                         {x, w, b});
                   }});
  cases.push_back({"channel_weighted_sum", [](Rng& rng) {
                     auto f = random_tensor(Shape{2, 3, 2, 3}, rng), w = random_tensor(Shape{2, 3}, rng);
                     const std::uint64_t ws = rng.next();
                     return check(
                         [=](Tape<double>&, std::vector<Var<double>>& v) {
                           Rng r(ws);
                           return project(channel_weighted_sum(v[0], v[1]), r);
                         },
                         {f, w});
                   }});
  return cases;
}

inline std::vector<GradCase> loss_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"cross_entropy", [](Rng& rng) {
                     const std::size_t N = 1 + rng.below(4), n = 2 + rng.below(4);
                     auto z = random_tensor(Shape{N, n}, rng, -3, 3);
                     const auto t = random_labels(N, n, rng);
                     return check([=](Tape<double>&, std::vector<Var<double>>& v) { return cross_entropy(v[0], t); }, {z});
                   }});
  // Features are non-negative like ReLU outputs; head rows are signed.
  cases.push_back({"L_cam detach off", [](Rng& rng) {
                     const std::size_t N = 1 + rng.below(3), K = 2 + rng.below(3), n = 3;
                     auto f = random_tensor(Shape{N, K, 3, 3}, rng, 0, 1);
                     auto head = random_tensor(Shape{n, K}, rng);
                     const auto t = random_labels(N, n, rng);
                     return check([=](Tape<double>&, std::vector<Var<double>>& v) { return cam_term(v[0], v[1], t); },
                                  {f, head});
                   }});
  // With the target detached the backward pass is the derivative of L_cam with the CAM side
  // frozen at the current point, so that frozen function is what the differences probe.
  cases.push_back({"L_cam detach on", [](Rng& rng) {
                     const std::size_t N = 1 + rng.below(3), K = 2 + rng.below(3), n = 3;
                     const auto f = random_tensor(Shape{N, K, 3, 3}, rng, 0, 1);
                     const auto head = random_tensor(Shape{n, K}, rng);
                     const auto t = random_labels(N, n, rng);
                     Tape<double> tape(true);
                     auto fv = tape.variable(f, 0);
                     auto hv = tape.variable(head, 1);
                     auto out = cam_term(fv, hv, t, true);
                     GradientMap<double> grads;
                     tape.backward(out, grads);
                     if (grads.find(1)) throw std::logic_error("detached target still reaches the head");
                     const auto target = normalize_maps(cam_maps(tape.constant(f), gather_rows(tape.constant(head), t))).value();
                     double margin = tape.kink_margin();
                     auto frozen = [&](const std::vector<double>& p) {
                       Tape<double> ft(true);
                       auto x = ft.constant(Tensor<double>(f.shape(), p));
                       const double v = map_distance(normalize_maps(caam_maps(x)), ft.constant(target), DistanceMetric::L1)
                                            .value()
                                            .item();
                       margin = std::min(margin, static_cast<double>(ft.kink_margin()));
                       return v;
                     };
                     const auto g = grads.get_or_zero(0, f.shape());
                     auto report = finite_difference_check(frozen, std::vector<double>(f.values().begin(), f.values().end()),
                                                           std::vector<double>(g.values().begin(), g.values().end()));
                     report.kink_margin = margin;
                     return report;
                   }});
  cases.push_back({"CAM-loss", [](Rng& rng) {
                     const std::size_t N = 2, K = 3, n = 3;
                     auto f = random_tensor(Shape{N, K, 3, 3}, rng, 0, 1);
                     auto head = random_tensor(Shape{n, K}, rng);
                     const auto t = random_labels(N, n, rng);
                     return check(
                         [=](Tape<double>&, std::vector<Var<double>>& v) {
                           auto logits = linear(global_average_pool(v[0]), v[1]);
                           return cam_loss(cross_entropy(logits, t), cam_term(v[0], v[1], t), 3.0);
                         },
                         {f, head});
                   }});
  cases.push_back({"KD", [](Rng& rng) {
                     const std::size_t N = 1 + rng.below(3), n = 2 + rng.below(4);
                     auto s = random_tensor(Shape{N, n}, rng, -3, 3);
                     const auto t = random_tensor(Shape{N, n}, rng, -3, 3);
                     const double tau = 1.0 + 3.0 * rng.uniform();
                     return check([=](Tape<double>&, std::vector<Var<double>>& v) { return kd_loss(v[0], t, tau); }, {s});
                   }});
  for (auto metric : {DistanceMetric::L2, DistanceMetric::L1}) {
    cases.push_back({std::string("AT ") + (metric == DistanceMetric::L2 ? "l2" : "l1"), [=](Rng& rng) {
                       const std::size_t N = 1 + rng.below(2), Ks = 2, Kt = 3, n = 3;
                       auto sf = random_tensor(Shape{N, Ks, 3, 3}, rng, 0, 1);
                       auto sh = random_tensor(Shape{n, Ks}, rng);
                       const auto tf = random_tensor(Shape{N, Kt, 3, 3}, rng, 0, 1);
                       const auto th = random_tensor(Shape{n, Kt}, rng);
                       const auto t = random_labels(N, n, rng);
                       Tensor<double> trows(Shape{N, Kt});
                       for (std::size_t s = 0; s < N; ++s)
                         for (std::size_t k = 0; k < Kt; ++k) trows[s * Kt + k] = th[t[s] * Kt + k];
                       return check(
                           [=](Tape<double>&, std::vector<Var<double>>& v) {
                             return at_loss(v[0], gather_rows(v[1], t), tf, trows, metric);
                           },
                           {sf, sh});
                     }});
  }
  cases.push_back({"CCM", [](Rng& rng) {
                     const std::size_t N = 1 + rng.below(2), Ks = 2, Kt = 3;
                     auto sf = random_tensor(Shape{N, Ks, 3, 3}, rng, 0, 1);
                     const auto tf = random_tensor(Shape{N, Kt, 3, 3}, rng, 0, 1);
                     const auto trows = random_tensor(Shape{N, Kt}, rng);
                     return check([=](Tape<double>&, std::vector<Var<double>>& v) { return ccm_loss(v[0], tf, trows); },
                                  {sf});
                   }});
  cases.push_back({"distillation total", [](Rng& rng) {
                     const std::size_t N = 2, K = 2, n = 3;
                     auto sf = random_tensor(Shape{N, K, 3, 3}, rng, 0, 1);
                     auto sh = random_tensor(Shape{n, K}, rng);
                     const auto tl = random_tensor(Shape{N, n}, rng, -2, 2);
                     const auto tf = random_tensor(Shape{N, 3, 3, 3}, rng, 0, 1);
                     const auto trows = random_tensor(Shape{N, 3}, rng);
                     const auto t = random_labels(N, n, rng);
                     return check(
                         [=](Tape<double>&, std::vector<Var<double>>& v) {
                           auto logits = linear(global_average_pool(v[0]), v[1]);
                           return distill_total(cross_entropy(logits, t), kd_loss(logits, tl, 4.0),
                                                std::optional<Var<double>>(ccm_loss(v[0], tf, trows)), 0.5, 1.0);
                         },
                         {sf, sh});
                   }});
  return cases;
}

// Small networks for property checks; widths and depth vary with the draw.
inline NetworkConfig random_small_config(Rng& rng, std::size_t input_size = 16) {
  NetworkConfig c;
  c.input_size = input_size;
  c.class_count = 2 + rng.below(3);
  c.blocks = {{2 + rng.below(4), 1}, {2 + rng.below(6), 2}};
  if (rng.coin()) c.blocks.push_back({2 + rng.below(6), 2});
  return c;
}

}  // namespace camloss::testing

#endif  // CAMLOSS_TESTS_SUPPORT_HPP_
