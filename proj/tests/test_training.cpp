#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "xmodal/training.hpp"

using namespace xmodal;
using namespace xmodal::testing;
namespace fs = std::filesystem;

namespace {

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.latent_dim = 2;
  c.frame_hidden_dim = 8;
  c.audio_hidden_dim = 8;
  c.recurrent_hidden_dim = 8;
  c.height = 8;
  c.width = 8;
  c.audio_dim = 3;
  c.beta = 1.0;
  c.encoder_channels = {4, 8, 8};
  c.decoder_output_channels = 4;
  return c;
}

struct Data {
  std::vector<FrameStream> frames;
  std::vector<AudioStream> audio;
  std::vector<SequenceRef> refs;

  Data(const ModelConfig& c, int n, int T, std::uint64_t seed) {
    NoiseSource rng(seed);
    for (int i = 0; i < n; ++i) {
      frames.push_back(random_frames(rng, T, c.height, c.width, c.channels));
      audio.push_back(random_audio(rng, T, c.audio_dim));
    }
    for (int i = 0; i < n; ++i) refs.push_back({&frames[i], &audio[i]});
  }
};

TrainConfig quick_train(int steps) {
  TrainConfig t;
  t.learning_rate = 0.01;
  t.batch_size = 2;
  t.max_steps = steps;
  t.rng_seed = 3;
  t.eval_every = 2;
  return t;
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("xmodal_train_" + std::to_string(::getpid()))) {
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("gradcheck on the D=2, 8x8, T=3 model covers every parameter group") {
  const auto c = gradcheck_config();
  const Data d(c, 1, 3, 11);
  const auto r = finite_difference_gradcheck(c, d.refs[0], 1e-5, 200, 5);
  CHECK(r.coordinates.size() == 200);
  for (const auto g : kAllParamGroups) {
    INFO(to_string(g));
    CHECK(r.max_relative_error_in(g) > 0.0);
    CHECK(r.max_relative_error_in(g) < 1e-4);
  }
  CHECK(r.max_relative_error < 1e-4);

  SUBCASE("another coordinate seed gives the same verdict") {
    const auto again = finite_difference_gradcheck(c, d.refs[0], 1e-5, 200, 6);
    CHECK(again.max_relative_error < 1e-4);
  }
}

TEST_CASE("gradcheck is exact for a quadratic") {
  NoiseSource rng(1);
  const Eigen::MatrixXd m = rng.normal_matrix<double>(6, 6);
  const Eigen::MatrixXd a = m * m.transpose();
  const Eigen::VectorXd b = rng.normal_matrix<double>(6, 1);
  const DifferentiableLoss loss = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g != nullptr) *g = a * x + b;
    return 0.5 * x.dot(a * x) + b.dot(x);
  };
  const Eigen::VectorXd x = rng.normal_matrix<double>(6, 1);
  const Eigen::Index coords[] = {0, 1, 2, 3, 4, 5};
  const auto r = gradcheck(loss, x, 1e-3, coords);
  CHECK(r.max_relative_error < 1e-9);
}

TEST_CASE("gradcheck rejects a loss that is not deterministic") {
  int calls = 0;
  const DifferentiableLoss loss = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    if (g != nullptr) *g = x;
    return 0.5 * x.squaredNorm() + 1e-3 * ++calls;
  };
  const Eigen::Index coords[] = {0};
  CHECK_THROWS_AS(gradcheck(loss, Eigen::VectorXd::Ones(2), 1e-4, coords), ContractViolation);
}

TEST_CASE("relative error") {
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1.0, 1.1) == doctest::Approx(0.1 / 1.1));
  CHECK(relative_error(1e-9, 0.0) == doctest::Approx(1e-3));
  CHECK(relative_error(1e-9, 0.0, 0.0) == 1.0);
}

TEST_CASE("coordinates span every group") {
  const ParamLayout layout(gradcheck_config());
  const auto idx = sample_coordinates(layout, 10, 1);
  CHECK(idx.size() == 10);
  std::set<ParamGroup> seen;
  for (const auto i : idx) {
    for (const auto& s : layout.tensors()) {
      if (i >= s.offset && i < s.offset + s.size()) seen.insert(s.group);
    }
  }
  CHECK(seen.size() == 5);
  CHECK(sample_coordinates(layout, 10, 1) == idx);
}

TEST_CASE("global norm clipping") {
  Eigen::VectorXd g(2);
  g << 3.0, 4.0;
  CHECK(clip_global_norm(g, 10.0) == doctest::Approx(5.0));
  CHECK(g(1) == 4.0);
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.norm() == doctest::Approx(1.0));
  CHECK(g(0) == doctest::Approx(0.6));
}

TEST_CASE("optimizer updates") {
  TrainConfig t;
  t.learning_rate = 0.1;
  SUBCASE("sgd with momentum") {
    Optimizer<double> opt(t, 1);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(1), g = Eigen::VectorXd::Ones(1);
    opt.apply(w, g);
    CHECK(w(0) == doctest::Approx(-0.1));
    opt.apply(w, g);
    // v = 0.9 * 1 + 1
    CHECK(w(0) == doctest::Approx(-0.1 - 0.19));
    CHECK(opt.updates() == 2);
  }
  SUBCASE("adam first step moves by the learning rate") {
    t.optimizer = OptimizerKind::adam;
    Optimizer<double> opt(t, 2);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(2), g(2);
    g << 3.0, -0.02;
    opt.apply(w, g);
    CHECK(w(0) == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(w(1) == doctest::Approx(0.1).epsilon(1e-4));
  }
}

TEST_CASE("train config") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  const nlohmann::json j = t;
  CHECK(j.get<TrainConfig>().learning_rate == t.learning_rate);
  CHECK(nlohmann::json{{"precision", "f64"}}.get<TrainConfig>().precision == Precision::f64);
  CHECK(nlohmann::json{{"optimizer", "adam"}}.get<TrainConfig>().optimizer == OptimizerKind::adam);
  CHECK_THROWS_AS(nlohmann::json({{"learning_rte", 1.0}}).get<TrainConfig>(), std::invalid_argument);
  CHECK_THROWS_AS(nlohmann::json({{"optimizer", "rmsprop"}}).get<TrainConfig>(), std::invalid_argument);
  SUBCASE("negative learning rate") { t.learning_rate = -1.0; }
  SUBCASE("batch") { t.batch_size = 0; }
  SUBCASE("clip") { t.gradient_clip_norm = 0.0; }
  SUBCASE("momentum") { t.momentum = 1.0; }
  CHECK_THROWS_AS(t.validate(), std::invalid_argument);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const auto c = tiny_config();
  const Data d(c, 3, 3, 1);
  auto t = quick_train(4);
  t.learning_rate = 0.0;
  const auto r = train<float>(c, t, d.refs);
  Trainer<float> fresh(c, t, d.refs);
  CHECK(r.params.values() == fresh.params().values());
  CHECK(r.report.steps.size() == 4);
}

TEST_CASE("two runs with one seed give identical checkpoints") {
  TempDir dir;
  const auto c = tiny_config();
  const Data d(c, 4, 3, 2);
  TrainOptions o;
  o.checkpoint_path = (dir.path / "a.bin").string();
  train<float>(c, quick_train(5), d.refs, o);
  o.checkpoint_path = (dir.path / "b.bin").string();
  train<float>(c, quick_train(5), d.refs, o);
  CHECK(slurp(dir.path / "a.bin") == slurp(dir.path / "b.bin"));
  auto other = quick_train(5);
  other.rng_seed = 4;
  o.checkpoint_path = (dir.path / "c.bin").string();
  train<float>(c, other, d.refs, o);
  CHECK(slurp(dir.path / "a.bin") != slurp(dir.path / "c.bin"));
}

TEST_CASE("resumed training continues the same trajectory") {
  TempDir dir;
  const auto c = tiny_config();
  const Data d(c, 4, 3, 3);
  for (const auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    auto t = quick_train(6);
    t.optimizer = kind;
    const auto straight = train<float>(c, t, d.refs);

    auto first = t;
    first.max_steps = 3;
    TrainOptions o;
    o.checkpoint_path = (dir.path / "half.bin").string();
    train<float>(c, first, d.refs, o);
    CheckpointExtras extras;
    TrainOptions resume;
    resume.initial_params = load_checkpoint<float>(o.checkpoint_path, &extras);
    resume.resume = &extras;
    CHECK(extras.metadata.at("step") == 3);
    const auto rest = train<float>(c, t, d.refs, resume);
    CHECK(rest.report.steps.front() == 3);
    CHECK(rest.params.values() == straight.params.values());
    CHECK(rest.report.total.back() == straight.report.total.back());
  }
}

TEST_CASE("training log and validation trace") {
  const auto c = tiny_config();
  const Data d(c, 4, 3, 4), v(c, 2, 3, 5);
  std::ostringstream log;
  TrainOptions o;
  o.log = &log;
  o.log_every = 2;
  o.validation = v.refs;
  const auto r = train<float>(c, quick_train(5), d.refs, o);
  std::istringstream lines(log.str());
  std::string line;
  std::vector<int> steps;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    steps.push_back(j.at("step"));
    CHECK(j.contains("total"));
    CHECK(j.contains("recon"));
    CHECK(j.contains("kl"));
  }
  CHECK(steps == std::vector<int>{0, 2, 4});
  CHECK(r.report.eval_steps == std::vector<int>{0, 2, 4});
  const Trainer<float> fresh(c, quick_train(5), d.refs);
  CHECK(r.report.eval_kl.front() == mean_alignment_kl(fresh.params(), v.refs));
  CHECK(r.report.total.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(r.report.total[i] == doctest::Approx(r.report.recon[i] + c.beta * r.report.kl[i]));
  }
}

TEST_CASE("training input errors") {
  const auto c = tiny_config();
  const Data d(c, 2, 3, 6);
  CHECK_THROWS_AS(train<float>(c, quick_train(1), std::span<const SequenceRef>{}), std::invalid_argument);
  const Data shorter(c, 1, 4, 7);
  std::vector<SequenceRef> mixed = d.refs;
  mixed.push_back(shorter.refs[0]);
  CHECK_THROWS_AS(train<float>(c, quick_train(1), mixed), std::invalid_argument);
  auto bad = quick_train(1);
  bad.batch_size = 0;
  CHECK_THROWS_AS(train<float>(c, bad, d.refs), std::invalid_argument);
}

TEST_CASE("divergence aborts with the last finite parameters") {
  TempDir dir;
  const auto c = tiny_config();
  const Data d(c, 2, 3, 8);
  auto t = quick_train(10);
  t.learning_rate = 1e30;
  t.momentum = 0.0;
  TrainOptions o;
  o.checkpoint_path = (dir.path / "run.bin").string();
  Trainer<float> reference(c, t, d.refs);
  reference.step();
  try {
    train<float>(c, t, d.refs, o);
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    CHECK(e.step() == 1);
    CHECK(e.last_finite().all_finite());
    CHECK(e.last_finite().values() == reference.params().values());
  }
  CHECK(fs::exists(dir.path / "run.bin.last_finite"));
  CHECK_FALSE(fs::exists(dir.path / "run.bin"));
}

TEST_CASE("f64 training agrees with f32 at the start") {
  const auto c = tiny_config();
  const Data d(c, 2, 3, 9);
  auto t = quick_train(1);
  const auto a = train<float>(c, t, d.refs);
  t.precision = Precision::f64;
  const auto b = train<double>(c, t, d.refs);
  CHECK(a.report.total[0] == doctest::Approx(b.report.total[0]).epsilon(1e-5));
}
