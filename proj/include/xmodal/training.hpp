#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xmodal/checkpoint.hpp"
#include "xmodal/model.hpp"

namespace xmodal {

enum class Precision { f32, f64 };
enum class OptimizerKind { sgd, adam };

struct TrainConfig {
  double learning_rate = 3e-3;
  int batch_size = 4;
  int max_steps = 20000;
  std::uint64_t rng_seed = 0;
  int eval_every = 500;
  double gradient_clip_norm = 5.0;
  Precision precision = Precision::f32;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainReport {
  std::vector<int> steps;
  std::vector<double> total;
  std::vector<double> recon;  // summed over t, batch mean
  std::vector<double> kl;     // summed over t, batch mean
  std::vector<int> eval_steps;
  std::vector<double> eval_kl;  // mean KL[q_f || q_a] per step over the validation set
  double wall_seconds = 0.0;
  std::string checkpoint_path;
};

/// Raised when a step produces a non-finite loss or gradient. Carries the
/// step index and the last finite parameters.
class TrainingAborted : public NumericalFailure {
 public:
  TrainingAborted(int step, ModelParams<float> last_finite, const std::string& what)
      : NumericalFailure("train", "step " + std::to_string(step) + ": " + what),
        step_(step),
        last_finite_(std::move(last_finite)) {}
  int step() const { return step_; }
  const ModelParams<float>& last_finite() const { return last_finite_; }

 private:
  int step_;
  ModelParams<float> last_finite_;
};

/// Clips `g` in place to global L2 norm `max_norm`; returns the norm before
/// clipping.
template <typename Scalar>
double clip_global_norm(Vec<Scalar>& g, double max_norm);

/// SGD with momentum (v <- mu v + g; w <- w - lr v) or Adam, over the flat
/// parameter vector.
template <typename Scalar>
class Optimizer {
 public:
  Optimizer(const TrainConfig& config, Eigen::Index size);

  void apply(Vec<Scalar>& weights, const Vec<Scalar>& gradient);
  std::int64_t updates() const { return updates_; }

  void save_state(CheckpointExtras& extras) const;
  void load_state(const CheckpointExtras& extras);

 private:
  TrainConfig config_;
  Vec<Scalar> first_;   // momentum / Adam first moment
  Vec<Scalar> second_;  // Adam second moment
  std::int64_t updates_ = 0;
};

/// Single-threaded training loop over a fixed dataset. Step s draws its batch
/// (with replacement) and its reparameterization noise from seeds derived
/// from (rng_seed, s), so a run resumed at step s continues exactly.
template <typename Scalar>
class Trainer {
 public:
  Trainer(const ModelConfig& model, const TrainConfig& train, std::span<const SequenceRef> data);
  Trainer(ModelParams<Scalar> params, const TrainConfig& train, std::span<const SequenceRef> data);

  /// One optimizer step; throws TrainingAborted on a non-finite loss.
  LossReport step();
  int next_step() const { return next_step_; }
  const ModelParams<Scalar>& params() const { return params_; }

  /// Parameters plus optimizer state and step counter.
  void save(const std::filesystem::path& path) const;
  /// Restores optimizer state and step counter saved by save().
  void restore(const CheckpointExtras& extras);

 private:
  std::vector<SequenceRef> sample_batch(int step) const;

  ModelParams<Scalar> params_;
  TrainConfig config_;
  std::span<const SequenceRef> data_;
  Optimizer<Scalar> optimizer_;
  ModelParams<Scalar> grad_;
  int next_step_ = 0;
  ModelParams<float> last_finite_;
};

struct TrainOptions {
  std::span<const SequenceRef> validation;
  std::ostream* log = nullptr;  // line-delimited JSON {step, total, recon, kl}
  std::string checkpoint_path;  // written at the end (and on abort, as <path>.last_finite)
  int log_every = 1;
  const CheckpointExtras* resume = nullptr;
  std::optional<ModelParams<float>> initial_params;
};

template <typename Scalar>
struct TrainResult {
  ModelParams<Scalar> params;
  TrainReport report;
};

/// Trains until train_config.max_steps total steps have been taken.
template <typename Scalar>
TrainResult<Scalar> train(const ModelConfig& model_config, const TrainConfig& train_config,
                          std::span<const SequenceRef> dataset, const TrainOptions& options = {});

/// Mean over sequences of the summed per-step KL[q_f || q_a].
template <typename Scalar>
double mean_alignment_kl(const ModelParams<Scalar>& params, std::span<const SequenceRef> data);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct CoordinateCheck {
  Eigen::Index index;
  std::string tensor;
  ParamGroup group;
  double analytic;
  double numeric;
  double relative_error;
};

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::vector<CoordinateCheck> coordinates;

  double max_relative_error_in(ParamGroup g) const;
};

/// |a - n| / max(|a|, |n|, floor); 0 when both vanish. The floor keeps
/// gradients below the resolution of a central difference (about
/// ulp(L) / 2 eps) from reporting pure roundoff as error.
inline constexpr double kGradcheckFloor = 1e-6;
double relative_error(double analytic, double numeric, double floor = kGradcheckFloor);

/// Loss with optional analytic gradient, over a flat parameter vector.
using DifferentiableLoss = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* gradient)>;

/// Central differences (L(x + eps e_i) - L(x - eps e_i)) / (2 eps) against the
/// analytic gradient at the given coordinates. Throws ContractViolation when
/// two evaluations at the same point disagree.
GradcheckResult gradcheck(const DifferentiableLoss& loss, const Eigen::VectorXd& x, double epsilon,
                          std::span<const Eigen::Index> coordinates);

/// `count` coordinates drawn round-robin across parameter groups so every
/// sub-network is covered.
std::vector<Eigen::Index> sample_coordinates(const ParamLayout& layout, int count, std::uint64_t seed);

/// Gradient check of the full model loss in 64-bit on one sample with fixed
/// reparameterization noise.
GradcheckResult finite_difference_gradcheck(const ModelConfig& config, const SequenceRef& sample, double epsilon,
                                            int num_coordinates, std::uint64_t rng_seed);

}  // namespace xmodal
