#ifndef CAMLOSS_GRADCHECK_HPP_
#define CAMLOSS_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "camloss/autodiff.hpp"

namespace camloss {

struct GradCheckReport {
  double max_abs_err = 0;
  double max_rel_err = 0;
  // Smallest kink distance seen over all evaluations; results are only meaningful when this
  // clearly exceeds the step.
  double kink_margin = std::numeric_limits<double>::infinity();
  std::size_t coordinates = 0;
};

/// Relative error with the denominator floored at `floor`, so coordinates whose true gradient
/// is near zero are judged on absolute error.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate of `point`.
inline std::vector<double> central_differences(const std::function<double(const std::vector<double>&)>& f,
                                               std::vector<double> point, double step) {
  std::vector<double> grad(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double orig = point[i];
    point[i] = orig + step;
    const double up = f(point);
    point[i] = orig - step;
    const double down = f(point);
    point[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::domain_error("finite difference: non-finite function value");
    grad[i] = (up - down) / (2 * step);
  }
  return grad;
}

/// Compares an analytic gradient at `point` with central differences of `f`.
inline GradCheckReport finite_difference_check(const std::function<double(const std::vector<double>&)>& f,
                                               const std::vector<double>& point, const std::vector<double>& analytic,
                                               double step = 1e-5) {
  if (analytic.size() != point.size()) throw std::invalid_argument("finite difference: gradient size mismatch");
  const auto numeric = central_differences(f, point, step);
  GradCheckReport r;
  r.coordinates = point.size();
  for (std::size_t i = 0; i < point.size(); ++i) {
    r.max_abs_err = std::max(r.max_abs_err, std::abs(analytic[i] - numeric[i]));
    r.max_rel_err = std::max(r.max_rel_err, relative_error(analytic[i], numeric[i]));
  }
  return r;
}

/// Checks backward() of a taped scalar function against central differences, w.r.t. every
/// input tensor. `build(tape, vars)` records the function on `tape` from leaves `vars`
/// (leaf i carries ParamId i) and returns the scalar result.
template <typename Builder>
GradCheckReport check_gradients(Builder&& build, const std::vector<Tensor<double>>& inputs, double step = 1e-5) {
  GradCheckReport report;
  auto evaluate = [&](const std::vector<Tensor<double>>& ins, GradientMap<double>* grads) {
    Tape<double> tape(true);
    std::vector<Var<double>> vars;
    for (std::size_t i = 0; i < ins.size(); ++i) vars.push_back(tape.variable(ins[i], static_cast<ParamId>(i)));
    Var<double> out = build(tape, vars);
    if (out.value().size() != 1) throw std::invalid_argument("check_gradients: function is not scalar");
    report.kink_margin = std::min(report.kink_margin, static_cast<double>(tape.kink_margin()));
    const double v = out.value()[0];
    if (!std::isfinite(v)) throw std::domain_error("check_gradients: non-finite function value");
    if (grads) tape.backward(out, *grads);
    return v;
  };

  GradientMap<double> grads;
  evaluate(inputs, &grads);

  std::vector<double> point, analytic;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto g = grads.get_or_zero(static_cast<ParamId>(i), inputs[i].shape());
    point.insert(point.end(), inputs[i].values().begin(), inputs[i].values().end());
    analytic.insert(analytic.end(), g.values().begin(), g.values().end());
  }
  auto f = [&](const std::vector<double>& p) {
    std::vector<Tensor<double>> ins = inputs;
    std::size_t off = 0;
    for (auto& t : ins)
      for (auto& v : t.values()) v = p[off++];
    return evaluate(ins, nullptr);
  };
  auto r = finite_difference_check(f, point, analytic, step);
  r.kink_margin = report.kink_margin;
  return r;
}

}  // namespace camloss

#endif  // CAMLOSS_GRADCHECK_HPP_
