#include <unistd.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "model_fixtures.hpp"
#include "xmodal/checkpoint.hpp"
#include "xmodal/evaluation.hpp"

using namespace xmodal;
using namespace xmodal::testing;
namespace fs = std::filesystem;

namespace {

struct CorpusDir {
  fs::path path;
  Corpus corpus;
  CorpusDir() : path(fs::temp_directory_path() / ("xmodal_eval_" + std::to_string(::getpid()))) {
    SynthConfig c;
    c.seed = 2;
    c.num_train = 2;
    c.num_test = 6;
    c.length = 4;
    c.height = 16;
    c.width = 16;
    generate_corpus(c, path);
    corpus = Corpus::load(path);
  }
  ~CorpusDir() { fs::remove_all(path); }
};

ModelConfig model_for_corpus() {
  auto c = tiny_config();
  c.height = 16;
  c.width = 16;
  c.audio_dim = 8;
  return c;
}

}  // namespace

TEST_CASE("ground truth scored against itself") {
  NoiseSource rng(1);
  const auto truth = random_frames(rng, 4, 16, 16);
  const FrameStream samples[] = {truth, truth};
  const auto e = score_sequence(samples, truth);
  CHECK(e.ssim == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(e.psnr == kPsnrCap);
  CHECK(e.diversity == 0.0);
}

TEST_CASE("frame 1 is excluded from the scores") {
  NoiseSource rng(2);
  const auto truth = random_frames(rng, 3, 16, 16);
  FrameStream s = truth;
  s.frame(0).setZero();
  const FrameStream samples[] = {s};
  CHECK(score_sequence(samples, truth).psnr == kPsnrCap);
}

TEST_CASE("test sequence selection") {
  CorpusDir d;
  const auto all = select_test_sequences(d.corpus, 100, 0);
  CHECK(all == std::vector<int>{2, 3, 4, 5, 6, 7});
  const auto some = select_test_sequences(d.corpus, 3, 9);
  CHECK(some.size() == 3);
  CHECK(std::is_sorted(some.begin(), some.end()));
  CHECK(std::set<int>(some.begin(), some.end()).size() == 3);
  for (int i : some) CHECK(i >= 2);
  CHECK(select_test_sequences(d.corpus, 3, 9) == some);
  CHECK_THROWS_AS(select_test_sequences(d.corpus, 0, 0), std::invalid_argument);
}

TEST_CASE("evaluation reports are reproducible") {
  CorpusDir d;
  const auto params = generic_params<float>(model_for_corpus(), 3);
  EvalConfig cfg;
  cfg.num_sequences = 4;
  cfg.num_samples = 3;
  cfg.seed = 5;
  const auto a = evaluate_model(params, d.corpus, cfg);
  const auto b = evaluate_model(params, d.corpus, cfg);
  CHECK(nlohmann::json(a).dump() == nlohmann::json(b).dump());
  std::ostringstream pa, pb;
  write_per_sequence(pa, a);
  write_per_sequence(pb, b);
  CHECK(pa.str() == pb.str());
  CHECK(a.num_sequences == 4);
  REQUIRE(a.per_sequence.size() == 4);
  double mean = 0.0;
  for (const auto& s : a.per_sequence) mean += s.ssim / 4;
  CHECK(a.ssim_mean == doctest::Approx(mean));
  CHECK(a.ssim_std >= 0.0);
  CHECK(a.diversity > 0.0);

  SUBCASE("a checkpoint on disk gives the same report") {
    const auto ckpt = d.path / "m.bin";
    save_checkpoint(params, ckpt);
    CHECK(nlohmann::json(evaluate_model(ckpt, d.corpus, cfg)).dump() == nlohmann::json(a).dump());
  }
  SUBCASE("a checkpoint for other frame sizes is rejected with its path") {
    const auto ckpt = d.path / "wrong.bin";
    save_checkpoint(init_params<float>(tiny_config(), 0), ckpt);
    CHECK_THROWS_WITH_AS(evaluate_model(ckpt, d.corpus, cfg), doctest::Contains("wrong.bin"), std::invalid_argument);
  }
}

TEST_CASE("region variances") {
  const auto regions = face_regions(16, 16, 0, 0);
  FrameStream a(3, 16, 16, 1), b(3, 16, 16, 1);
  SUBCASE("identical samples have none") {
    const FrameStream s[] = {a, a};
    const auto v = cross_sample_variance(s, regions);
    CHECK(v.eyes == 0.0);
    CHECK(v.mouth == 0.0);
    CHECK(v.background == 0.0);
  }
  SUBCASE("a difference confined to the eyes") {
    for (int t = 1; t < 3; ++t) {
      for (Eigen::Index p = 0; p < 256; ++p) b.frame(t)(0, p) = regions.eyes(p) ? 1.0f : 0.0f;
    }
    const FrameStream s[] = {a, b};
    const auto v = cross_sample_variance(s, regions);
    // two samples 0 and 1: variance 1/4 on every eye pixel
    CHECK(v.eyes == doctest::Approx(0.25));
    CHECK(v.mouth == 0.0);
    CHECK(v.background == 0.0);
  }
  SUBCASE("temporal variance of the ground truth") {
    a.frame(1).setConstant(0.2f);
    a.frame(2).setConstant(0.6f);
    const auto v = temporal_variance(a, regions);
    CHECK(v.background == doctest::Approx(0.04).epsilon(1e-6));
    CHECK_THROWS_AS(temporal_variance(FrameStream(2, 16, 16, 1), regions), std::invalid_argument);
  }
  SUBCASE("a single sample is rejected") {
    const FrameStream s[] = {a};
    CHECK_THROWS_AS(cross_sample_variance(s, regions), std::invalid_argument);
  }
}
