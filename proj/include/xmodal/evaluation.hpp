#pragma once

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <span>
#include <vector>

#include "json.hpp"
#include "xmodal/metrics.hpp"
#include "xmodal/synth.hpp"

namespace xmodal {

struct EvalConfig {
  int num_sequences = 256;  // clamped to the size of the test split
  int num_samples = 5;
  std::uint64_t seed = 0;
};

struct SequenceEval {
  int index = 0;  // corpus index
  double ssim = 0.0;
  double psnr = 0.0;
  double diversity = 0.0;
};

struct EvalReport {
  double ssim_mean = 0.0;
  double ssim_std = 0.0;
  double psnr_mean = 0.0;
  double psnr_std = 0.0;
  double diversity = 0.0;
  int num_sequences = 0;
  nlohmann::json config;
  std::vector<SequenceEval> per_sequence;
};

void to_json(nlohmann::json& j, const EvalReport& r);
void to_json(nlohmann::json& j, const SequenceEval& s);

/// SSIM and PSNR of every sample against the ground truth over frames 2..T,
/// averaged over samples, plus the diversity of the samples.
SequenceEval score_sequence(std::span<const FrameStream> samples, const FrameStream& truth);

/// Test-split indices for an evaluation run: all of them, or a seeded
/// random subset in increasing order.
std::vector<int> select_test_sequences(const Corpus& corpus, int count, std::uint64_t seed);

/// Seeds used to draw the samples for one corpus sequence.
std::vector<std::uint64_t> evaluation_seeds(std::uint64_t seed, int corpus_index, int num_samples);

EvalReport evaluate_model(const ModelParams<float>& params, const Corpus& corpus, const EvalConfig& config);

/// Loads the checkpoint and checks it against the corpus shapes first.
EvalReport evaluate_model(const std::filesystem::path& checkpoint, const Corpus& corpus, const EvalConfig& config);

/// One JSON object per line per sequence.
void write_per_sequence(std::ostream& out, const EvalReport& report);

/// Mean of a per-pixel variance map over the pixels of each face region.
struct RegionVariance {
  double eyes = 0.0;
  double mouth = 0.0;
  double background = 0.0;
};

/// Variance across samples at each pixel, averaged over frames 2..T.
RegionVariance cross_sample_variance(std::span<const FrameStream> samples, const FaceRegions& regions);

/// Variance over frames 2..T of the ground truth at each pixel.
RegionVariance temporal_variance(const FrameStream& truth, const FaceRegions& regions);

}  // namespace xmodal
