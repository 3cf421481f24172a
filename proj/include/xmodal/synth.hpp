#pragma once

// Deterministic paired-modality corpus: a rendered schematic face whose mouth
// opening follows a smooth driver signal, audio features that are a noisy
// linear lift of that driver, and eye blinks drawn independently of it. The
// blinks are the ground-truth source of "one audio track, many videos".

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "xmodal/model.hpp"

namespace xmodal {

inline constexpr int kCorpusVersion = 1;

struct DriverSignal {
  std::vector<double> values;  // d_t in [0.05, 0.95]

  int length() const { return static_cast<int>(values.size()); }
};

struct SceneState {
  double driver = 0.0;  // mouth aperture
  bool blink = false;
  int dx = 0;  // head offset, pixels
  int dy = 0;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  int num_train = 500;
  int num_test = 64;
  int length = 16;
  int height = 32;
  int width = 32;
  int audio_dim = 8;
  double audio_noise = 0.01;
  double blink_rate = 0.15;
  int blink_duration = 2;
  int max_head_offset = 2;

  int num_sequences() const { return num_train + num_test; }
  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

/// Sum of three random-phase sinusoids (periods 8-32 steps) mapped into
/// [0.05, 0.95] and slew-limited to |d_{t+1} - d_t| <= 0.25.
DriverSignal synth_driver(std::uint64_t seed, int length);

/// Per-step Bernoulli(rate) blink onsets, each closing the eyes for
/// `duration` steps.
std::vector<std::uint8_t> synth_blinks(std::uint64_t seed, int length, double rate = 0.15, int duration = 2);

/// Anti-aliased single-channel render, (1, H*W) in [0, 1].
Eigen::MatrixXf render_frame(const SceneState& state, int height, int width);

/// Summed mouth coverage (in pixels) of a render: strictly increasing in the
/// driver for fixed geometry.
double mouth_coverage(const SceneState& state, int height, int width);

/// The fixed (A x 3) lift from a (d_{t-1}, d_t, d_{t+1}) window to audio
/// features; a function of the corpus seed only.
Eigen::MatrixXd audio_lift(std::uint64_t corpus_seed, int audio_dim);

/// a_t = lift * (d_{t-1}, d_t, d_{t+1}) + N(0, noise_std^2), edges clamped.
AudioStream synth_audio_features(const DriverSignal& driver, const Eigen::MatrixXd& lift, std::uint64_t noise_seed,
                                 double noise_std);

/// Convenience form: lift and noise both derived from `seed`, sigma = 0.01.
AudioStream synth_audio_features(const DriverSignal& driver, std::uint64_t seed, int audio_dim);

struct SequenceSeeds {
  std::uint64_t driver = 0;
  std::uint64_t nuisance = 0;
  std::uint64_t audio_noise = 0;
};

SequenceSeeds sequence_seeds(std::uint64_t corpus_seed, int index);

struct SyntheticSequence {
  FrameStream frames;
  AudioStream audio;
  DriverSignal driver;
  std::vector<std::uint8_t> blink;
  int dx = 0;
  int dy = 0;

  SceneState state(int t) const { return {driver.values[t], blink[t] != 0, dx, dy}; }
};

SyntheticSequence synth_sequence(const SequenceSeeds& seeds, const Eigen::MatrixXd& lift, const SynthConfig& config);

/// Boolean pixel masks (H*W) of the regions used by the diversity analysis.
struct FaceRegions {
  Eigen::Array<bool, Eigen::Dynamic, 1> eyes;        // around both eyes
  Eigen::Array<bool, Eigen::Dynamic, 1> mouth;       // around the fully open mouth
  Eigen::Array<bool, Eigen::Dynamic, 1> background;  // clear of the head
};

FaceRegions face_regions(int height, int width, int dx, int dy);

struct CorpusRecord {
  std::uint64_t offset = 0;
  SequenceSeeds seeds;
  int dx = 0;
  int dy = 0;
};

struct CorpusManifest {
  int format_version = kCorpusVersion;
  SynthConfig config;
  std::string data_file = "corpus.bin";
  std::vector<CorpusRecord> records;
};

/// Writes corpus.json + corpus.bin into out_dir and returns the manifest.
CorpusManifest generate_corpus(const SynthConfig& config, const std::filesystem::path& out_dir);

/// A loaded corpus with random access by sequence index. Sequences
/// [0, num_train) form the training split, the rest the test split.
class Corpus {
 public:
  static Corpus load(const std::filesystem::path& manifest_path);

  const CorpusManifest& manifest() const { return manifest_; }
  int size() const { return static_cast<int>(sequences_.size()); }
  int num_train() const { return manifest_.config.num_train; }
  int num_test() const { return manifest_.config.num_test; }
  /// Throws std::out_of_range for a bad index.
  const SyntheticSequence& at(int index) const;
  const SyntheticSequence& train(int i) const;
  const SyntheticSequence& test(int i) const;

 private:
  CorpusManifest manifest_;
  std::vector<SyntheticSequence> sequences_;
};

/// Appends one (T, H, W, C) tensor record.
void write_frame_stream(std::ostream& out, const FrameStream& frames);

/// Every record of a stream file (or of every *.bin file in a directory, in
/// name order). Each record must have rank 4.
std::vector<FrameStream> read_frame_streams(const std::filesystem::path& path);

/// Path of the manifest inside a corpus directory (or the path itself when
/// it already names a file).
std::filesystem::path manifest_path(const std::filesystem::path& corpus);

}  // namespace xmodal
