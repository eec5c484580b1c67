#ifndef CAMLOSS_TRAINER_HPP_
#define CAMLOSS_TRAINER_HPP_

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <type_traits>
#include <vector>

#include "camloss/data.hpp"
#include "camloss/losses.hpp"
#include "camloss/network.hpp"

namespace camloss {

enum class LossMode { CE, CamLoss };

struct TrainConfig {
  int epochs = 40;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  AlphaSchedule alpha;
  std::uint64_t seed = 0;
  LossMode mode = LossMode::CamLoss;
  bool detach_cam_target = false;
  bool augment = true;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch size must be >= 1");
    if (!(lr > 0)) throw std::invalid_argument("train config: learning rate must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("train config: momentum must lie in [0,1)");
    if (!(weight_decay >= 0)) throw std::invalid_argument("train config: weight decay must be >= 0");
  }
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double alpha = 0;
  double loss_ce = 0;
  double loss_cam = 0;
  double train_acc = 0;
  double test_acc = 0;
};

struct EvalResult {
  double accuracy = 0;
  double loss_ce = 0;
  double loss_cam = 0;
  std::optional<double> iou;  // mean CAAM/mask IoU, only for datasets with masks
};

/// lr0 * (1 + cos(pi * e / E)) / 2
inline double cosine_lr(int epoch, int epochs, double lr0) {
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(epochs)));
}

/// v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v.
/// `velocity` is resized on first use; parameters without a gradient entry see g = 0.
template <typename T>
void sgd_step(std::vector<Parameter<T>>& params, const GradientMap<T>& grads, std::vector<Tensor<T>>& velocity, T lr,
              T momentum, T weight_decay) {
  if (velocity.empty())
    for (const auto& p : params) velocity.emplace_back(p.value.shape());
  if (velocity.size() != params.size()) throw std::invalid_argument("sgd_step: velocity state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].value;
    auto& v = velocity[i];
    const auto* g = grads.find(static_cast<ParamId>(i));
    if (v.shape() != p.shape() || (g && g->shape() != p.shape()))
      throw std::invalid_argument("sgd_step: shape mismatch for " + params[i].name);
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum * v[j] + ((g ? (*g)[j] : T(0)) + weight_decay * p[j]);
      p[j] = p[j] - lr * v[j];
    }
  }
}

struct StepResult {
  double loss_ce = 0;
  double loss_cam = 0;
  std::size_t correct = 0;
};

namespace detail {
template <typename T>
std::size_t count_correct(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  const std::size_t n = logits.extent(1);
  std::size_t correct = 0;
  for (std::size_t s = 0; s < targets.size(); ++s) {
    const T* row = logits.data() + s * n;
    correct += static_cast<std::size_t>(std::max_element(row, row + n) - row) == targets[s];
  }
  return correct;
}

inline void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw std::runtime_error(std::string("training diverged: non-finite ") + what);
}
}  // namespace detail

/// Gradients of one CAM-loss step: the head receives grad L_ce only while the backbone receives
/// grad(L_ce + alpha * L_cam). Done in one sweep: L_cam reads the head through a separate alias
/// leaf that is masked, which yields the same sums as backpropagating L_ce into everything and
/// then alpha * L_cam with the head masked. With alpha == 0 only L_ce is backpropagated.
template <typename T>
StepResult camloss_gradients(const Network<T>& net, const Tensor<T>& batch, const std::vector<std::size_t>& targets,
                             T alpha_value, bool detach_cam_target, GradientMap<T>& grads) {
  Tape<T> tape;
  auto vars = net.bind(tape, true);
  const auto alias_id = static_cast<ParamId>(net.params().size());
  auto head_alias = tape.variable(net.head(), alias_id);
  auto fw = net.forward(tape.constant(batch), vars);
  auto l_ce = cross_entropy(fw.logits, targets);
  auto l_cam = cam_term(fw.features, head_alias, targets, detach_cam_target);
  StepResult r;
  r.loss_ce = l_ce.value().item();
  r.loss_cam = l_cam.value().item();
  r.correct = detail::count_correct(fw.logits.value(), targets);
  detail::check_finite(r.loss_ce, "cross entropy");
  detail::check_finite(r.loss_cam, "L_cam");
  if (alpha_value == T(0))
    tape.backward(l_ce, grads);
  else
    tape.backward(add(l_ce, scale(l_cam, alpha_value)), grads, GradMask{alias_id});
  return r;
}

/// Optimizer state for momentum SGD.
template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;
};

template <typename T>
StepResult train_step_camloss(Network<T>& net, const Tensor<T>& batch, const std::vector<std::size_t>& targets,
                              T alpha_value, T lr, const TrainConfig& cfg, SgdState<T>& state) {
  if (alpha_value < T(0)) throw std::invalid_argument("train_step: alpha must be >= 0");
  GradientMap<T> grads;
  auto r = camloss_gradients(net, batch, targets, alpha_value, cfg.detach_cam_target, grads);
  sgd_step(net.params(), grads, state.velocity, lr, static_cast<T>(cfg.momentum), static_cast<T>(cfg.weight_decay));
  return r;
}

/// Deterministic pass without augmentation. IoU compares the thresholded (0.5), normalized,
/// upsampled CAAM with each sample's mask.
template <typename T>
EvalResult evaluate(const Network<T>& net, const Dataset& ds, std::size_t batch_size = 100) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  EvalResult r;
  double iou_sum = 0;
  std::size_t correct = 0;
  const bool masks = ds.has_masks();
  for (std::size_t at = 0; at < ds.size(); at += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = at; i < std::min(ds.size(), at + batch_size); ++i) idx.push_back(i);
    const auto targets = labels_of(ds, idx);
    Tape<T> tape;
    auto vars = net.bind(tape, false);
    auto fw = net.forward(tape.constant(stack_images<T>(ds, idx)), vars);
    const double w = static_cast<double>(idx.size());
    r.loss_ce += cross_entropy(fw.logits, targets).value().item() * w;
    r.loss_cam += cam_term(fw.features, vars.back(), targets).value().item() * w;
    correct += detail::count_correct(fw.logits.value(), targets);
    if (masks) {
      const auto& f = fw.features.value();
      for (std::size_t b = 0; b < idx.size(); ++b)
        iou_sum += localization_iou(compute_caam(f, b), *ds.samples[idx[b]].mask, T(0.5));
    }
  }
  const double n = static_cast<double>(ds.size());
  r.accuracy = static_cast<double>(correct) / n;
  r.loss_ce /= n;
  r.loss_cam /= n;
  if (masks) r.iou = iou_sum / n;
  return r;
}

template <typename T>
using EpochCallback = std::function<void(const EpochMetrics&, const Network<T>&)>;

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  std::optional<int> triggered_epoch;
};

/// Epoch loop: shuffled batches, cosine learning rate, alpha from the schedule (constant within
/// an epoch, adaptive trigger fed with the previous epoch's training accuracy). Deterministic for
/// a fixed seed.
template <typename T>
TrainResult train(Network<T>& net, const Dataset& train_set, const Dataset& test_set, TrainConfig cfg,
                  const std::type_identity_t<EpochCallback<T>>& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() == 0 || test_set.size() == 0) throw std::invalid_argument("train: empty dataset");
  SgdState<T> state;
  TrainResult result;
  std::optional<double> prev_acc;
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochMetrics m;
    m.epoch = e;
    m.lr = cosine_lr(e, cfg.epochs, cfg.lr);
    m.alpha = cfg.mode == LossMode::CamLoss ? alpha(cfg.alpha, e, prev_acc) : 0.0;
    std::size_t correct = 0;
    for (const auto& idx : batches(train_set.size(), cfg.batch_size, static_cast<std::size_t>(e), cfg.seed)) {
      const auto batch = stack_images<T>(train_set, idx, cfg.augment ? std::optional<std::uint64_t>(cfg.seed) : std::nullopt,
                                         static_cast<std::size_t>(e));
      const auto targets = labels_of(train_set, idx);
      auto r = train_step_camloss(net, batch, targets, static_cast<T>(m.alpha), static_cast<T>(m.lr), cfg, state);
      m.loss_ce += r.loss_ce * static_cast<double>(idx.size());
      m.loss_cam += r.loss_cam * static_cast<double>(idx.size());
      correct += r.correct;
    }
    const double n = static_cast<double>(train_set.size());
    m.loss_ce /= n;
    m.loss_cam /= n;
    m.train_acc = static_cast<double>(correct) / n;
    m.test_acc = evaluate(net, test_set).accuracy;
    prev_acc = m.train_acc;
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(m, net);
  }
  result.triggered_epoch = cfg.alpha.triggered_epoch;
  return result;
}

/// Per-batch losses of one distillation step.
template <typename T>
struct DistillStep {
  double loss_ce = 0;
  double loss_kd = 0;
  double loss_distill = 0;
  double loss_cam = 0;
  double total = 0;
  std::size_t correct = 0;
};

/// Records beta L_ce + (1 - beta) L_kd + gamma L_distill for the student and backpropagates it
/// into every student parameter. The teacher runs untaped.
template <typename T>
DistillStep<T> distill_gradients(const Network<T>& teacher, const Network<T>& student, const Tensor<T>& batch,
                                 const std::vector<std::size_t>& targets, const DistillConfig& dc,
                                 GradientMap<T>& grads) {
  Tape<T> teacher_tape;
  auto tfw = teacher.forward(teacher_tape, batch, false);
  const Tensor<T>& t_features = tfw.features.value();
  Tape<T> rows_tape;
  const Tensor<T> t_rows = gather_rows(rows_tape.constant(teacher.head()), targets).value();

  Tape<T> tape;
  auto vars = student.bind(tape, true);
  auto fw = student.forward(tape.constant(batch), vars);
  detail::check_spatial<T>(fw.features.shape(), t_features.shape());
  const T tau = static_cast<T>(dc.tau);
  auto l_ce = cross_entropy(fw.logits, targets);
  auto l_kd = kd_loss(fw.logits, tfw.logits.value(), tau);
  auto s_rows = gather_rows(vars.back(), targets);
  std::optional<Var<T>> l_distill;
  if (dc.method == DistillMethod::AT)
    l_distill = at_loss(fw.features, s_rows, t_features, t_rows, dc.at_metric);
  else if (dc.method == DistillMethod::CCM)
    l_distill = ccm_loss(fw.features, t_features, t_rows);
  auto total = distill_total(l_ce, l_kd, l_distill, static_cast<T>(dc.beta), static_cast<T>(dc.gamma));

  DistillStep<T> r;
  r.loss_ce = l_ce.value().item();
  r.loss_kd = l_kd.value().item();
  r.loss_distill = l_distill ? l_distill->value().item() : 0.0;
  r.total = total.value().item();
  {
    Tape<T> report;
    r.loss_cam = cam_term(report.constant(fw.features.value()), report.constant(s_rows.value())).value().item();
  }
  r.correct = detail::count_correct(fw.logits.value(), targets);
  detail::check_finite(r.total, "distillation loss");
  tape.backward(total, grads);
  return r;
}

template <typename T>
TrainResult distill_train(const Network<T>& teacher, Network<T>& student, const Dataset& train_set,
                          const Dataset& test_set, TrainConfig cfg, const DistillConfig& dc,
                          const std::type_identity_t<EpochCallback<T>>& on_epoch = {}) {
  cfg.validate();
  dc.validate();
  if (train_set.size() == 0 || test_set.size() == 0) throw std::invalid_argument("distill: empty dataset");
  if (teacher.config().final_size() != student.config().final_size())
    throw std::invalid_argument("distill: teacher and student final maps differ in spatial extent");
  SgdState<T> state;
  TrainResult result;
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochMetrics m;
    m.epoch = e;
    m.lr = cosine_lr(e, cfg.epochs, cfg.lr);
    std::size_t correct = 0;
    for (const auto& idx : batches(train_set.size(), cfg.batch_size, static_cast<std::size_t>(e), cfg.seed)) {
      const auto batch = stack_images<T>(train_set, idx, cfg.augment ? std::optional<std::uint64_t>(cfg.seed) : std::nullopt,
                                         static_cast<std::size_t>(e));
      const auto targets = labels_of(train_set, idx);
      GradientMap<T> grads;
      auto r = distill_gradients(teacher, student, batch, targets, dc, grads);
      sgd_step(student.params(), grads, state.velocity, static_cast<T>(m.lr), static_cast<T>(cfg.momentum),
               static_cast<T>(cfg.weight_decay));
      m.loss_ce += r.loss_ce * static_cast<double>(idx.size());
      m.loss_cam += r.loss_cam * static_cast<double>(idx.size());
      correct += r.correct;
    }
    const double n = static_cast<double>(train_set.size());
    m.loss_ce /= n;
    m.loss_cam /= n;
    m.train_acc = static_cast<double>(correct) / n;
    m.test_acc = evaluate(student, test_set).accuracy;
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(m, student);
  }
  return result;
}

}  // namespace camloss

#endif  // CAMLOSS_TRAINER_HPP_
