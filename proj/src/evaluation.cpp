#include "xmodal/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xmodal/checkpoint.hpp"
#include "xmodal/config_io.hpp"

namespace xmodal {

namespace {

constexpr std::uint64_t kTagSelect = 0x5e1;
constexpr std::uint64_t kTagSamples = 0x5a3;

void mean_std(const std::vector<double>& v, double& mean, double& stddev) {
  mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  stddev = std::sqrt(ss / static_cast<double>(v.size()));
}

RegionVariance region_means(const Eigen::ArrayXd& map, const FaceRegions& regions) {
  auto mean_over = [&](const Eigen::Array<bool, Eigen::Dynamic, 1>& mask) {
    if (mask.size() != map.size()) throw std::invalid_argument("region mask does not match the frame size");
    const Eigen::Index n = mask.count();
    if (n == 0) return 0.0;
    return mask.select(map, 0.0).sum() / static_cast<double>(n);
  };
  return {mean_over(regions.eyes), mean_over(regions.mouth), mean_over(regions.background)};
}

}  // namespace

void to_json(nlohmann::json& j, const SequenceEval& s) {
  j = nlohmann::json{{"index", s.index}, {"ssim", s.ssim}, {"psnr", s.psnr}, {"diversity", s.diversity}};
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = nlohmann::json{{"ssim_mean", r.ssim_mean},
                     {"ssim_std", r.ssim_std},
                     {"psnr_mean", r.psnr_mean},
                     {"psnr_std", r.psnr_std},
                     {"diversity", r.diversity},
                     {"num_sequences", r.num_sequences},
                     {"config", r.config}};
}

SequenceEval score_sequence(std::span<const FrameStream> samples, const FrameStream& truth) {
  if (samples.empty()) throw std::invalid_argument("score_sequence: no samples");
  if (truth.length() < 2) throw std::invalid_argument("score_sequence: need at least two frames");
  SequenceEval e;
  for (const auto& s : samples) {
    e.ssim += ssim(s, truth, 1);
    e.psnr += psnr(s, truth, 1.0, 1);
  }
  e.ssim /= static_cast<double>(samples.size());
  e.psnr /= static_cast<double>(samples.size());
  e.diversity = samples.size() >= 2 ? diversity_score(samples) : 0.0;
  return e;
}

std::vector<int> select_test_sequences(const Corpus& corpus, int count, std::uint64_t seed) {
  const int n = corpus.num_test();
  if (n < 1) throw std::invalid_argument("evaluate: corpus has no test split");
  if (count < 1) throw std::invalid_argument("evaluate: num_sequences must be >= 1");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), corpus.num_train());
  if (count < n) {
    NoiseSource rng(derive_seed(seed, kTagSelect));
    for (int i = 0; i < count; ++i) {
      const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - i)));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(static_cast<std::size_t>(count));
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

std::vector<std::uint64_t> evaluation_seeds(std::uint64_t seed, int corpus_index, int num_samples) {
  return sample_seeds(derive_seed(seed, kTagSamples, static_cast<std::uint64_t>(corpus_index)), num_samples);
}

EvalReport evaluate_model(const ModelParams<float>& params, const Corpus& corpus, const EvalConfig& config) {
  if (config.num_samples < 1) throw std::invalid_argument("evaluate: num_samples must be >= 1");
  const auto indices = select_test_sequences(corpus, config.num_sequences, config.seed);
  EvalReport r;
  std::vector<double> ssims, psnrs, divs;
  for (const int i : indices) {
    const auto& s = corpus.at(i);
    check_pair(s.frames, s.audio, params.config());
    const auto seeds = evaluation_seeds(config.seed, i, config.num_samples);
    const auto g = generate(Eigen::MatrixXf(s.frames.frame(0)), s.audio, params, seeds);
    auto e = score_sequence(g.samples, s.frames);
    e.index = i;
    r.per_sequence.push_back(e);
    ssims.push_back(e.ssim);
    psnrs.push_back(e.psnr);
    divs.push_back(e.diversity);
  }
  mean_std(ssims, r.ssim_mean, r.ssim_std);
  mean_std(psnrs, r.psnr_mean, r.psnr_std);
  double div_std = 0.0;
  mean_std(divs, r.diversity, div_std);
  r.num_sequences = static_cast<int>(indices.size());
  r.config = {{"model", params.config()},
              {"corpus", corpus.manifest().config},
              {"num_sequences", config.num_sequences},
              {"num_samples", config.num_samples},
              {"seed", config.seed}};
  return r;
}

EvalReport evaluate_model(const std::filesystem::path& checkpoint, const Corpus& corpus, const EvalConfig& config) {
  const auto params = load_checkpoint<float>(checkpoint);
  const auto& m = params.config();
  const auto& c = corpus.manifest().config;
  if (m.height != c.height || m.width != c.width || m.channels != 1 || m.audio_dim != c.audio_dim) {
    throw std::invalid_argument("checkpoint " + checkpoint.string() + " expects " + std::to_string(m.height) + "x" +
                                std::to_string(m.width) + "x" + std::to_string(m.channels) + " frames with " +
                                std::to_string(m.audio_dim) + "-d audio; corpus has " + std::to_string(c.height) +
                                "x" + std::to_string(c.width) + "x1 with " + std::to_string(c.audio_dim) + "-d audio");
  }
  return evaluate_model(params, corpus, config);
}

void write_per_sequence(std::ostream& out, const EvalReport& report) {
  for (const auto& s : report.per_sequence) out << nlohmann::json(s).dump() << '\n';
}

RegionVariance cross_sample_variance(std::span<const FrameStream> samples, const FaceRegions& regions) {
  if (samples.size() < 2) throw std::invalid_argument("cross_sample_variance: need at least two samples");
  const auto& f = samples.front();
  const int T = f.length();
  if (T < 2) throw std::invalid_argument("cross_sample_variance: need at least two frames");
  Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(f.pixels());
  const double K = static_cast<double>(samples.size());
  for (int t = 1; t < T; ++t) {
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(f.pixels()), sq = Eigen::ArrayXd::Zero(f.pixels());
    for (const auto& s : samples) {
      if (s.data.cols() != f.data.cols() || s.channels != f.channels) {
        throw std::invalid_argument("cross_sample_variance: sample shapes differ");
      }
      const Eigen::ArrayXd v = s.frame(t).cast<double>().colwise().mean().transpose().array();
      sum += v;
      sq += v * v;
    }
    const Eigen::ArrayXd mean = sum / K;
    acc += (sq / K - mean * mean).max(0.0);
  }
  return region_means(acc / (T - 1), regions);
}

RegionVariance temporal_variance(const FrameStream& truth, const FaceRegions& regions) {
  const int T = truth.length();
  if (T < 3) throw std::invalid_argument("temporal_variance: need at least three frames");
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(truth.pixels()), sq = Eigen::ArrayXd::Zero(truth.pixels());
  for (int t = 1; t < T; ++t) {
    const Eigen::ArrayXd v = truth.frame(t).cast<double>().colwise().mean().transpose().array();
    sum += v;
    sq += v * v;
  }
  const Eigen::ArrayXd mean = sum / (T - 1);
  return region_means((sq / (T - 1) - mean * mean).max(0.0), regions);
}

}  // namespace xmodal
