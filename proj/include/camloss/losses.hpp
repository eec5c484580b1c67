#ifndef CAMLOSS_LOSSES_HPP_
#define CAMLOSS_LOSSES_HPP_

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "camloss/activation_maps.hpp"

namespace camloss {

// ---- CAM-loss ----

/// Mean l1 distance between the normalized CAAM and the normalized target-class CAM.
/// `target_rows` [N,K] are the head rows of each sample's target class. With
/// `detach_cam_target` the CAM side is a constant target.
template <typename T>
Var<T> cam_term(const Var<T>& features, const Var<T>& target_rows, bool detach_cam_target = false) {
  auto caam = normalize_maps(caam_maps(features));
  auto cam = normalize_maps(cam_maps(features, target_rows));
  if (detach_cam_target) cam = detach(cam);
  return map_distance(caam, cam, DistanceMetric::L1);
}

template <typename T>
Var<T> cam_term(const Var<T>& features, const Var<T>& head, const std::vector<std::size_t>& targets,
                bool detach_cam_target = false) {
  return cam_term(features, gather_rows(head, targets), detach_cam_target);
}

/// alpha * l_cam + l_ce
template <typename T>
Var<T> cam_loss(const Var<T>& l_ce, const Var<T>& l_cam, T alpha) {
  return add(scale(l_cam, alpha), l_ce);
}

template <typename T>
T cam_loss(T l_ce, T l_cam, T alpha) {
  return alpha * l_cam + l_ce;
}

/// Step schedule for the L_cam weight: 0 before the jump epoch, c from it on. In adaptive mode
/// the jump epoch is the first epoch whose previous epoch had training accuracy above 0.5; once
/// found it never changes.
struct AlphaSchedule {
  int t = 20;
  double c = 3.0;
  bool adaptive = false;
  std::optional<int> triggered_epoch;

  std::optional<int> jump_epoch() const { return adaptive ? triggered_epoch : std::optional<int>(t); }
};

inline double alpha(AlphaSchedule& schedule, int epoch, std::optional<double> prev_train_accuracy) {
  if (epoch < 0) throw std::invalid_argument("alpha: negative epoch");
  if (schedule.adaptive && !schedule.triggered_epoch && epoch > 0 && prev_train_accuracy &&
      *prev_train_accuracy > 0.5)
    schedule.triggered_epoch = epoch;
  const auto jump = schedule.jump_epoch();
  return jump && epoch >= *jump ? schedule.c : 0.0;
}

// ---- distillation ----

enum class DistillMethod { KD, AT, CCM };

struct DistillConfig {
  double tau = 4.0;
  double beta = 0.5;
  double gamma = 1.0;
  DistillMethod method = DistillMethod::CCM;
  DistanceMetric at_metric = DistanceMetric::L2;

  /// Published settings per method: KD (tau 4, beta 0.5), AT (l2, gamma 10), CCM (gamma 1).
  static DistillConfig defaults(DistillMethod method) {
    DistillConfig c;
    c.method = method;
    c.gamma = method == DistillMethod::AT ? 10.0 : method == DistillMethod::CCM ? 1.0 : 0.0;
    return c;
  }

  void validate() const {
    if (!(tau > 0) || !std::isfinite(tau)) throw std::invalid_argument("distill: temperature must be positive");
    if (!(beta >= 0 && beta <= 1)) throw std::invalid_argument("distill: beta must lie in [0,1]");
    if (!(gamma >= 0) || !std::isfinite(gamma)) throw std::invalid_argument("distill: gamma must be >= 0");
  }
};

/// Row-wise softmax(z / tau).
template <typename T>
Tensor<T> soft_targets(const Tensor<T>& logits, T tau) {
  if (!(tau > T(0))) throw std::invalid_argument("soft_targets: temperature must be positive");
  Tape<T> tape;
  auto lp = log_softmax(tape.constant(logits), tau).value();
  for (auto& v : lp.values()) v = std::exp(v);
  return lp;
}

/// (1/n) sum_i tau^2 (p_t log p_t - p_t log p_s) with tau-softened distributions, averaged over
/// the batch. The 1/n class-count factor is kept as in the original formulation, which most KD
/// implementations drop. The teacher enters as a constant.
template <typename T>
Var<T> kd_loss(const Var<T>& student_logits, const Tensor<T>& teacher_logits, T tau) {
  if (student_logits.shape() != teacher_logits.shape())
    throw std::invalid_argument("kd_loss: student " + shape_str(student_logits.shape()) + " vs teacher " +
                                shape_str(teacher_logits.shape()));
  auto& tape = student_logits.tape();
  const std::size_t N = teacher_logits.extent(0), n = teacher_logits.extent(1);
  Tape<T> scratch;
  const Tensor<T> log_pt = log_softmax(scratch.constant(teacher_logits), tau).value();
  Tensor<T> pt = log_pt;
  for (auto& v : pt.values()) v = std::exp(v);
  auto log_ps = log_softmax(student_logits, tau);
  auto terms = mul(tape.constant(pt), sub(tape.constant(log_pt), log_ps));
  return scale(sum(terms), tau * tau / static_cast<T>(n * N));
}

namespace detail {
template <typename T>
Tensor<T> normalized_cam_values(const Tensor<T>& features, const Tensor<T>& rows) {
  Tape<T> scratch;
  return normalize_maps(cam_maps(scratch.constant(features), scratch.constant(rows))).value();
}

template <typename T>
void check_spatial(const Shape& student, const Shape& teacher) {
  if (student.size() != 4 || teacher.size() != 4 || student[0] != teacher[0] || student[2] != teacher[2] ||
      student[3] != teacher[3])
    throw std::invalid_argument("distill: spatial mismatch student " + shape_str(student) + " vs teacher " +
                                shape_str(teacher));
}
}  // namespace detail

/// Distance between the student's and the teacher's normalized target-class CAMs.
template <typename T>
Var<T> at_loss(const Var<T>& student_features, const Var<T>& student_rows, const Tensor<T>& teacher_features,
               const Tensor<T>& teacher_rows, DistanceMetric metric) {
  detail::check_spatial<T>(student_features.shape(), teacher_features.shape());
  auto& tape = student_features.tape();
  auto teacher = tape.constant(detail::normalized_cam_values(teacher_features, teacher_rows));
  return map_distance(normalize_maps(cam_maps(student_features, student_rows)), teacher, metric);
}

/// l1 distance between the student's normalized CAAM and the teacher's normalized target-class CAM.
template <typename T>
Var<T> ccm_loss(const Var<T>& student_features, const Tensor<T>& teacher_features, const Tensor<T>& teacher_rows) {
  detail::check_spatial<T>(student_features.shape(), teacher_features.shape());
  auto& tape = student_features.tape();
  auto teacher = tape.constant(detail::normalized_cam_values(teacher_features, teacher_rows));
  return map_distance(normalize_maps(caam_maps(student_features)), teacher, DistanceMetric::L1);
}

/// beta * l_ce + (1 - beta) * l_kd + gamma * l_distill (the last term is absent for plain KD).
template <typename T>
Var<T> distill_total(const Var<T>& l_ce, const Var<T>& l_kd, const std::optional<Var<T>>& l_distill, T beta,
                     T gamma) {
  auto total = add(scale(l_ce, beta), scale(l_kd, T(1) - beta));
  if (l_distill) total = add(total, scale(*l_distill, gamma));
  return total;
}

}  // namespace camloss

#endif  // CAMLOSS_LOSSES_HPP_
