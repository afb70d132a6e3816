#pragma once

// Loss functions (pixel binary cross-entropy and the adversarial
// instructor/generator objectives), the single-round training step that
// updates both parameter sets, and evaluation metrics.

#include <cmath>
#include <optional>
#include <random>

#include "vapaad/model.hpp"
#include "vapaad/optim.hpp"

namespace vapaad {

struct NonFiniteLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class LossMode { reconstruction, adversarial, combined };
enum class OptimizerKind { adam, sgd };

template <typename T>
struct SequenceBatch {
  Tensor<T> x, y;  // (B,T,1,H,W) each; y is x shifted one frame ahead
};

template <typename T>
struct TrainSettings {
  int64_t batch_size = 4;
  int64_t steps = 200;
  LossMode loss_mode = LossMode::reconstruction;
  T adversarial_weight = T(0.01);  // combined-mode weight on the adversarial term
  OptimizerKind optimizer = OptimizerKind::adam;
  AdamConfig<T> adam;
  T sgd_eta = T(0.01);
  uint64_t seed = 7;
  int64_t log_every = 1;
  int64_t checkpoint_every = 50;
};

struct StepMetrics {
  double total_loss = 0;
  double bce = 0;
  double mse = 0;
  double accuracy = 0;
  double instructor_loss = 0;  // adversarial modes only
  double adversarial_loss = 0;
};

struct EvalMetrics {
  double bce = 0;
  double mse = 0;
  double accuracy = 0;
  int64_t sequences = 0;
};

namespace detail {

template <typename T>
constexpr T loss_eps() {
  return T(1e-7);
}

template <typename T>
void check_scores_in_unit_interval(const Tensor<T>& s, const char* what) {
  for (int64_t i = 0; i < s.numel(); ++i) {
    const T v = s.data()[i];
    if (!(v >= T(0) && v <= T(1)))
      fail(std::string(what) + ": score outside [0,1] at element " + std::to_string(i));
  }
}

template <typename T>
Tensor<T> one_minus(const Tensor<T>& x) {
  return add_scalar(neg(x), T(1));
}

}  // namespace detail

// Mean log-score of real sequences plus mean log-counterscore of generated
// ones; maximal (zero) for a perfect instructor, always <= 0 after the
// epsilon clamp.
template <typename T>
Tensor<T> minimax_loss(const Tensor<T>& real_scores, const Tensor<T>& fake_scores) {
  require(real_scores.numel() == fake_scores.numel(),
          "minimax_loss: real and fake score counts differ");
  detail::check_scores_in_unit_interval(real_scores, "minimax_loss real");
  detail::check_scores_in_unit_interval(fake_scores, "minimax_loss fake");
  const T eps = detail::loss_eps<T>();
  auto r = clamp(real_scores, eps, T(1) - eps);
  auto f = clamp(fake_scores, eps, T(1) - eps);
  return mean_all(log_(r)) + mean_all(log_(detail::one_minus(f)));
}

// Instructor descent objective: the negated minimax value. fake_batch must
// already be cut off from the generator (detached) so backward touches only
// instructor parameters.
template <typename T>
Tensor<T> instructor_objective(const InstructorModel<T>& inst, const Tensor<T>& real_batch,
                               const Tensor<T>& fake_batch) {
  require(real_batch.shape()[0] == fake_batch.shape()[0],
          "instructor_objective: real and fake batch sizes differ");
  auto s_real = instructor_score(inst, real_batch);
  auto s_fake = instructor_score(inst, fake_batch);
  return neg(minimax_loss(s_real, s_fake));
}

// Generator loss on an already-generated batch: mean log(1 - I(V(x))) with
// the instructor frozen, so backward reaches only generator parameters.
template <typename T>
Tensor<T> vapaad_score_loss(const InstructorModel<T>& inst, const Tensor<T>& fake_batch) {
  auto s = instructor_score(inst, fake_batch, /*freeze_params=*/true);
  const T eps = detail::loss_eps<T>();
  return mean_all(log_(detail::one_minus(clamp(s, eps, T(1) - eps))));
}

// Convenience form that runs the generator itself (used by gradient checks).
template <typename T>
Tensor<T> vapaad_objective(const InstructorModel<T>& inst, VapaadModel<T>& model,
                           const Tensor<T>& input_batch, Mode mode = Mode::infer,
                           std::mt19937* rng = nullptr) {
  return vapaad_score_loss(inst, vapaad_forward(model, input_batch, mode, rng));
}

// Mean pixel binary cross-entropy with epsilon-clamped predictions.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  require(pred.shape() == target.shape(),
          "reconstruction_loss: prediction " + shape_str(pred.shape()) + " vs target " +
              shape_str(target.shape()));
  const T eps = detail::loss_eps<T>();
  auto p = clamp(pred, eps, T(1) - eps);
  auto term = target * log_(p) + detail::one_minus(target) * log_(detail::one_minus(p));
  return neg(mean_all(term));
}

namespace detail {

// Plain double-precision metric accumulation; binarization threshold is 0.5
// with ties (exactly 0.5) mapping to 0.
template <typename T>
void accumulate_metrics(const Tensor<T>& pred, const Tensor<T>& target, double& bce_sum,
                        double& mse_sum, int64_t& correct, int64_t& total) {
  const double eps = 1e-7;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    const double p = std::min(1.0 - eps, std::max(eps, static_cast<double>(pred.data()[i])));
    const double y = static_cast<double>(target.data()[i]);
    bce_sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    const double d = static_cast<double>(pred.data()[i]) - y;
    mse_sum += d * d;
    correct += ((pred.data()[i] > T(0.5)) == (target.data()[i] > T(0.5))) ? 1 : 0;
  }
  total += pred.numel();
}

template <typename T>
double checked_loss_value(const Tensor<T>& loss, const char* term) {
  const double v = static_cast<double>(loss.item());
  if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite ") + term + "; step aborted");
  return v;
}

}  // namespace detail

// Optimizer choice plus its state for one parameter set.
template <typename T>
struct OptBundle {
  OptimizerKind kind = OptimizerKind::adam;
  SgdConfig<T> sgd;
  AdamState<T> adam;

  static OptBundle make(OptimizerKind kind, const std::vector<Tensor<T>>& params,
                        AdamConfig<T> acfg, T eta) {
    OptBundle b;
    b.kind = kind;
    b.sgd.eta = eta;
    b.adam = AdamState<T>::init(params, acfg);
    return b;
  }

  void step(std::vector<Tensor<T>>& params) {
    if (kind == OptimizerKind::adam)
      adam_step(params, adam);
    else
      sgd_step(params, sgd);
  }
};

// One training round: forward, backward per objective into each side's own
// gradients, then both parameter sets updated before any new forward.
template <typename T>
StepMetrics train_step(VapaadModel<T>& model, InstructorModel<T>* inst,
                       const SequenceBatch<T>& batch, const TrainSettings<T>& settings,
                       OptBundle<T>& gen_opt, OptBundle<T>* inst_opt, std::mt19937& rng) {
  const bool adversarial = settings.loss_mode != LossMode::reconstruction;
  require(!adversarial || (inst != nullptr && inst_opt != nullptr),
          "train_step: adversarial modes need an instructor and its optimizer");

  auto gen_params = model.parameters();
  for (auto& p : gen_params) p.zero_grad();
  std::vector<Tensor<T>> inst_params;
  if (adversarial) {
    inst_params = inst->parameters();
    for (auto& p : inst_params) p.zero_grad();
  }

  StepMetrics met;
  Tape<T> tape;
  auto pred = vapaad_forward(model, batch.x, Mode::train, &rng);
  {
    double bce = 0, mse = 0;
    int64_t correct = 0, total = 0;
    detail::accumulate_metrics(pred, batch.y, bce, mse, correct, total);
    met.bce = bce / static_cast<double>(total);
    met.mse = mse / static_cast<double>(total);
    met.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  }

  Tensor<T> gen_loss;
  if (adversarial) {
    auto inst_loss = instructor_objective(*inst, batch.y, detach(pred));
    met.instructor_loss = detail::checked_loss_value(inst_loss, "instructor objective");
    tape.backward(inst_loss);
    auto adv = vapaad_score_loss(*inst, pred);
    met.adversarial_loss = detail::checked_loss_value(adv, "adversarial generator objective");
    gen_loss = settings.loss_mode == LossMode::adversarial
                   ? adv
                   : reconstruction_loss(pred, batch.y) + scale(adv, settings.adversarial_weight);
  } else {
    gen_loss = reconstruction_loss(pred, batch.y);
  }
  met.total_loss = detail::checked_loss_value(gen_loss, "generator loss");
  tape.backward(gen_loss);

  gen_opt.step(gen_params);
  if (adversarial) inst_opt->step(inst_params);
  return met;
}

template <typename T>
StepMetrics train_step(VapaadModel<T>& model, const SequenceBatch<T>& batch,
                       const TrainSettings<T>& settings, OptBundle<T>& gen_opt, std::mt19937& rng) {
  return train_step(model, static_cast<InstructorModel<T>*>(nullptr), batch, settings, gen_opt,
                    static_cast<OptBundle<T>*>(nullptr), rng);
}

// Deterministic infer-mode metrics over a full (N,T,1,H,W) split, one
// sequence at a time.
template <typename T>
EvalMetrics evaluate(VapaadModel<T>& model, const Tensor<T>& xs, const Tensor<T>& ys) {
  require(xs.shape() == ys.shape(), "evaluate: input and target splits differ in shape");
  EvalMetrics m;
  double bce = 0, mse = 0;
  int64_t correct = 0, total = 0;
  for (int64_t i = 0; i < xs.shape()[0]; ++i) {
    auto x = slice0(xs, i);
    auto y = slice0(ys, i);
    Shape batched = x.shape();
    batched.insert(batched.begin(), 1);
    auto pred = vapaad_forward(model, reshape(x, batched), Mode::infer);
    detail::accumulate_metrics(pred, reshape(y, batched), bce, mse, correct, total);
    m.sequences += 1;
  }
  m.bce = bce / static_cast<double>(total);
  m.mse = mse / static_cast<double>(total);
  m.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  return m;
}

// Uniform batch sampling with replacement; the only source of data-order
// randomness, so restoring the generator state reproduces the batch stream.
template <typename T>
SequenceBatch<T> draw_batch(const Tensor<T>& xs, const Tensor<T>& ys, int64_t batch_size,
                            std::mt19937& rng) {
  require(batch_size >= 1, "draw_batch: batch size must be >= 1");
  std::uniform_int_distribution<int64_t> pick(0, xs.shape()[0] - 1);
  Shape shape = xs.shape();
  shape[0] = batch_size;
  const int64_t block = shape_numel(Shape(xs.shape().begin() + 1, xs.shape().end()));
  std::vector<T> bx(static_cast<size_t>(batch_size * block));
  std::vector<T> by(static_cast<size_t>(batch_size * block));
  for (int64_t b = 0; b < batch_size; ++b) {
    const int64_t i = pick(rng);
    std::copy(xs.data() + i * block, xs.data() + (i + 1) * block, bx.data() + b * block);
    std::copy(ys.data() + i * block, ys.data() + (i + 1) * block, by.data() + b * block);
  }
  return {Tensor<T>::from(shape, std::move(bx)), Tensor<T>::from(shape, std::move(by))};
}

}  // namespace vapaad
