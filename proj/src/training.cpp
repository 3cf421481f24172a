#include "xmodal/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "xmodal/config_io.hpp"

namespace xmodal {

namespace {

constexpr std::uint64_t kTagInit = 0x1a17;
constexpr std::uint64_t kTagBatch = 0xba7c;
constexpr std::uint64_t kTagEps = 0xe95;
constexpr std::uint64_t kTagCoords = 0xc00d;
constexpr std::uint64_t kTagCheckNoise = 0xc4e;
constexpr std::uint64_t kTagCheckBias = 0xc4b;

const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (!(learning_rate >= 0)) fail("learning_rate must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_steps < 0) fail("max_steps must be >= 0");
  if (eval_every < 1) fail("eval_every must be >= 1");
  if (!(gradient_clip_norm > 0)) fail("gradient_clip_norm must be > 0");
  if (!(momentum >= 0 && momentum < 1)) fail("momentum must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"max_steps", c.max_steps},
                     {"rng_seed", c.rng_seed},
                     {"eval_every", c.eval_every},
                     {"gradient_clip_norm", c.gradient_clip_norm},
                     {"precision", c.precision == Precision::f32 ? "f32" : "f64"},
                     {"optimizer", to_string(c.optimizer)},
                     {"momentum", c.momentum},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_epsilon", c.adam_epsilon}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const char* known[] = {"learning_rate", "batch_size", "max_steps",  "rng_seed",   "eval_every",
                                "gradient_clip_norm", "precision", "optimizer", "momentum", "adam_beta1",
                                "adam_beta2", "adam_epsilon"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("TrainConfig: unknown key '" + key + "'");
    }
  }
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.rng_seed = j.value("rng_seed", c.rng_seed);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.gradient_clip_norm = j.value("gradient_clip_norm", c.gradient_clip_norm);
  const std::string precision = j.value("precision", c.precision == Precision::f32 ? "f32" : "f64");
  if (precision == "f32" || precision == "32") {
    c.precision = Precision::f32;
  } else if (precision == "f64" || precision == "64") {
    c.precision = Precision::f64;
  } else {
    throw std::invalid_argument("TrainConfig: unknown precision '" + precision + "'");
  }
  const std::string opt = j.value("optimizer", std::string(to_string(c.optimizer)));
  if (opt == "sgd") {
    c.optimizer = OptimizerKind::sgd;
  } else if (opt == "adam") {
    c.optimizer = OptimizerKind::adam;
  } else {
    throw std::invalid_argument("TrainConfig: unknown optimizer '" + opt + "'");
  }
  c.momentum = j.value("momentum", c.momentum);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
}

// ---------------------------------------------------------------------------
// Optimizer

template <typename Scalar>
double clip_global_norm(Vec<Scalar>& g, double max_norm) {
  const double norm = std::sqrt(static_cast<double>(g.squaredNorm()));
  if (norm > max_norm) g *= static_cast<Scalar>(max_norm / norm);
  return norm;
}

template <typename Scalar>
Optimizer<Scalar>::Optimizer(const TrainConfig& config, Eigen::Index size)
    : config_(config), first_(Vec<Scalar>::Zero(size)) {
  if (config_.optimizer == OptimizerKind::adam) second_ = Vec<Scalar>::Zero(size);
}

template <typename Scalar>
void Optimizer<Scalar>::apply(Vec<Scalar>& weights, const Vec<Scalar>& gradient) {
  ++updates_;
  const auto lr = static_cast<Scalar>(config_.learning_rate);
  if (config_.optimizer == OptimizerKind::sgd) {
    first_ = static_cast<Scalar>(config_.momentum) * first_ + gradient;
    weights -= lr * first_;
    return;
  }
  const auto b1 = static_cast<Scalar>(config_.adam_beta1), b2 = static_cast<Scalar>(config_.adam_beta2);
  first_ = b1 * first_ + (Scalar(1) - b1) * gradient;
  second_ = b2 * second_ + (Scalar(1) - b2) * gradient.cwiseAbs2();
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(config_.adam_beta1, static_cast<double>(updates_)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(config_.adam_beta2, static_cast<double>(updates_)));
  weights.array() -= lr * (first_.array() / c1) /
                     ((second_.array() / c2).sqrt() + static_cast<Scalar>(config_.adam_epsilon));
}

template <typename Scalar>
void Optimizer<Scalar>::save_state(CheckpointExtras& extras) const {
  extras.metadata["optimizer"] = to_string(config_.optimizer);
  extras.metadata["optimizer_updates"] = updates_;
  extras.state.emplace_back("optimizer.first_moment", first_.template cast<float>());
  if (second_.size() > 0) extras.state.emplace_back("optimizer.second_moment", second_.template cast<float>());
}

template <typename Scalar>
void Optimizer<Scalar>::load_state(const CheckpointExtras& extras) {
  if (extras.metadata.value("optimizer", std::string()) != to_string(config_.optimizer)) {
    throw std::invalid_argument("resume: checkpoint optimizer differs from the configured one");
  }
  const auto* first = extras.find_state("optimizer.first_moment");
  if (first == nullptr || first->size() != first_.size()) {
    throw std::invalid_argument("resume: checkpoint lacks a matching optimizer state");
  }
  first_ = first->cast<Scalar>();
  if (config_.optimizer == OptimizerKind::adam) {
    const auto* second = extras.find_state("optimizer.second_moment");
    if (second == nullptr || second->size() != second_.size()) {
      throw std::invalid_argument("resume: checkpoint lacks the Adam second moment");
    }
    second_ = second->cast<Scalar>();
  }
  updates_ = extras.metadata.value("optimizer_updates", std::int64_t{0});
}

// ---------------------------------------------------------------------------
// Trainer

template <typename Scalar>
Trainer<Scalar>::Trainer(const ModelConfig& model, const TrainConfig& train, std::span<const SequenceRef> data)
    : Trainer(init_params<Scalar>(model, derive_seed(train.rng_seed, kTagInit)), train, data) {}

template <typename Scalar>
Trainer<Scalar>::Trainer(ModelParams<Scalar> params, const TrainConfig& train, std::span<const SequenceRef> data)
    : params_(std::move(params)),
      config_(train),
      data_(data),
      optimizer_(train, params_.layout().size()),
      grad_(params_.zeros_like()),
      last_finite_(params_.template cast<float>()) {
  config_.validate();
  if (data_.empty()) throw std::invalid_argument("train: dataset is empty");
  const auto& first = data_.front();
  for (const auto& s : data_) {
    check_pair(*s.frames, *s.audio, params_.config());
    if (s.frames->length() != first.frames->length()) {
      throw std::invalid_argument("train: all sequences must share the same length");
    }
  }
}

template <typename Scalar>
std::vector<SequenceRef> Trainer<Scalar>::sample_batch(int step) const {
  NoiseSource rng(derive_seed(config_.rng_seed, kTagBatch, static_cast<std::uint64_t>(step)));
  std::vector<SequenceRef> batch;
  for (int i = 0; i < config_.batch_size; ++i) batch.push_back(data_[rng.below(data_.size())]);
  return batch;
}

template <typename Scalar>
LossReport Trainer<Scalar>::step() {
  const int s = next_step_;
  const auto batch = sample_batch(s);
  NoiseSource noise(derive_seed(config_.rng_seed, kTagEps, static_cast<std::uint64_t>(s)));
  grad_.values().setZero();
  LossReport report;
  try {
    report = elbo_loss_batch<Scalar>(batch, params_, noise, &grad_);
  } catch (const NumericalFailure& e) {
    throw TrainingAborted(s, last_finite_, e.what());
  }
  if (!grad_.all_finite()) throw TrainingAborted(s, last_finite_, "non-finite gradient");
  clip_global_norm(grad_.values(), config_.gradient_clip_norm);
  optimizer_.apply(params_.values(), grad_.values());
  if (!params_.all_finite()) throw TrainingAborted(s, last_finite_, "non-finite parameters after update");
  last_finite_.values() = params_.values().template cast<float>();
  ++next_step_;
  return report;
}

template <typename Scalar>
void Trainer<Scalar>::save(const std::filesystem::path& path) const {
  CheckpointExtras extras;
  extras.metadata["step"] = next_step_;
  extras.metadata["train_config"] = config_;
  optimizer_.save_state(extras);
  save_checkpoint(params_, path, extras);
}

template <typename Scalar>
void Trainer<Scalar>::restore(const CheckpointExtras& extras) {
  optimizer_.load_state(extras);
  next_step_ = extras.metadata.value("step", 0);
}

template <typename Scalar>
double mean_alignment_kl(const ModelParams<Scalar>& params, std::span<const SequenceRef> data) {
  if (data.empty()) throw std::invalid_argument("mean_alignment_kl: no sequences");
  double sum = 0.0;
  for (const auto& s : data) {
    for (double k : alignment_kl(*s.frames, *s.audio, params)) sum += k;
  }
  return sum / static_cast<double>(data.size());
}

template <typename Scalar>
TrainResult<Scalar> train(const ModelConfig& model_config, const TrainConfig& train_config,
                          std::span<const SequenceRef> dataset, const TrainOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  Trainer<Scalar> trainer = options.initial_params
                                ? Trainer<Scalar>(options.initial_params->template cast<Scalar>(), train_config, dataset)
                                : Trainer<Scalar>(model_config, train_config, dataset);
  if (options.resume != nullptr) trainer.restore(*options.resume);

  TrainReport report;
  auto evaluate = [&](int step) {
    if (options.validation.empty()) return;
    report.eval_steps.push_back(step);
    report.eval_kl.push_back(mean_alignment_kl(trainer.params(), options.validation));
  };
  if (trainer.next_step() == 0) evaluate(0);

  while (trainer.next_step() < train_config.max_steps) {
    const int s = trainer.next_step();
    LossReport loss;
    try {
      loss = trainer.step();
    } catch (const TrainingAborted& e) {
      if (!options.checkpoint_path.empty()) save_checkpoint(e.last_finite(), options.checkpoint_path + ".last_finite");
      throw;
    }
    report.steps.push_back(s);
    report.total.push_back(loss.total);
    report.recon.push_back(loss.recon_sum());
    report.kl.push_back(loss.kl_sum());
    if (options.log != nullptr && (s % std::max(options.log_every, 1) == 0)) {
      *options.log << nlohmann::json{{"step", s}, {"total", loss.total}, {"recon", loss.recon_sum()},
                                     {"kl", loss.kl_sum()}}
                          .dump()
                   << '\n';
      options.log->flush();
    }
    if ((s + 1) % train_config.eval_every == 0) evaluate(s + 1);
  }
  if (!options.checkpoint_path.empty()) {
    trainer.save(options.checkpoint_path);
    report.checkpoint_path = options.checkpoint_path;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {trainer.params(), std::move(report)};
}

// ---------------------------------------------------------------------------
// Gradient checking

double GradcheckResult::max_relative_error_in(ParamGroup g) const {
  double m = 0.0;
  for (const auto& c : coordinates) {
    if (c.group == g) m = std::max(m, c.relative_error);
  }
  return m;
}

double relative_error(double analytic, double numeric, double floor) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  const double diff = std::abs(analytic - numeric);
  return diff == 0.0 ? 0.0 : diff / scale;
}

GradcheckResult gradcheck(const DifferentiableLoss& loss, const Eigen::VectorXd& x, double epsilon,
                          std::span<const Eigen::Index> coordinates) {
  if (!(epsilon > 0)) throw std::invalid_argument("gradcheck: epsilon must be > 0");
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(x.size());
  const double base = loss(x, &grad);
  const double again = loss(x, nullptr);
  if (base != again) {
    throw ContractViolation("gradcheck: loss is not deterministic in the parameters (" + std::to_string(base) +
                            " vs " + std::to_string(again) + ")");
  }
  GradcheckResult result;
  Eigen::VectorXd probe = x;
  for (const Eigen::Index i : coordinates) {
    if (i < 0 || i >= x.size()) throw std::out_of_range("gradcheck: coordinate out of range");
    probe(i) = x(i) + epsilon;
    const double plus = loss(probe, nullptr);
    probe(i) = x(i) - epsilon;
    const double minus = loss(probe, nullptr);
    probe(i) = x(i);
    const double numeric = (plus - minus) / (2.0 * epsilon);
    CoordinateCheck c{i, "", ParamGroup::decoder, grad(i), numeric, relative_error(grad(i), numeric)};
    result.max_relative_error = std::max(result.max_relative_error, c.relative_error);
    result.coordinates.push_back(std::move(c));
  }
  return result;
}

std::vector<Eigen::Index> sample_coordinates(const ParamLayout& layout, int count, std::uint64_t seed) {
  std::vector<std::vector<const TensorSpec*>> by_group(std::size(kAllParamGroups));
  for (const auto& s : layout.tensors()) by_group[static_cast<std::size_t>(s.group)].push_back(&s);
  NoiseSource rng(derive_seed(seed, kTagCoords));
  std::vector<Eigen::Index> out;
  for (int i = 0; i < count; ++i) {
    const auto& tensors = by_group[static_cast<std::size_t>(i) % by_group.size()];
    const TensorSpec* t = tensors[rng.below(tensors.size())];
    out.push_back(t->offset + static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(t->size()))));
  }
  return out;
}

GradcheckResult finite_difference_gradcheck(const ModelConfig& config, const SequenceRef& sample, double epsilon,
                                            int num_coordinates, std::uint64_t rng_seed) {
  if (num_coordinates < 1) throw std::invalid_argument("gradcheck: need at least one coordinate");
  ModelParams<double> params = init_params<double>(config, derive_seed(rng_seed, kTagInit));
  // At initialization both posteriors coincide and the KL gradients vanish;
  // random biases move the check to a generic point.
  NoiseSource bias_rng(derive_seed(rng_seed, kTagCheckBias));
  for (std::size_t i = 0; i < params.layout().tensors().size(); ++i) {
    const auto& s = params.layout().tensors()[i];
    if (!s.name.ends_with(".bias")) continue;
    auto t = params.tensor(i);
    for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] += bias_rng.uniform() - 0.5;
  }
  NoiseSource noise_rng(derive_seed(rng_seed, kTagCheckNoise));
  const Mat<double> noise = noise_rng.normal_matrix<double>(config.latent_dim, sample.frames->length());
  const SequenceRef batch[] = {sample};

  ModelParams<double> probe = params;
  ModelParams<double> grad = params.zeros_like();
  const DifferentiableLoss loss = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    probe.values() = x;
    if (g == nullptr) return elbo_loss_with_noise<double>(batch, probe, noise, nullptr).total;
    grad.values().setZero();
    const double total = elbo_loss_with_noise<double>(batch, probe, noise, &grad).total;
    *g = grad.values();
    return total;
  };
  const auto coords = sample_coordinates(params.layout(), num_coordinates, rng_seed);
  GradcheckResult result = gradcheck(loss, params.values(), epsilon, coords);
  for (auto& c : result.coordinates) {
    for (const auto& s : params.layout().tensors()) {
      if (c.index >= s.offset && c.index < s.offset + s.size()) {
        c.tensor = s.name;
        c.group = s.group;
        break;
      }
    }
  }
  return result;
}

#define XMODAL_INSTANTIATE_TRAINING(S)                                                                  \
  template double clip_global_norm<S>(Vec<S>&, double);                                                 \
  template class Optimizer<S>;                                                                          \
  template class Trainer<S>;                                                                            \
  template double mean_alignment_kl<S>(const ModelParams<S>&, std::span<const SequenceRef>);            \
  template TrainResult<S> train<S>(const ModelConfig&, const TrainConfig&, std::span<const SequenceRef>, \
                                   const TrainOptions&);

XMODAL_INSTANTIATE_TRAINING(float)
XMODAL_INSTANTIATE_TRAINING(double)

}  // namespace xmodal
