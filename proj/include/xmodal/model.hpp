#pragma once

// The cross-modal sequence model: a frame encoder and an audio encoder feed
// two recurrent posterior chains; a recurrent, skip-connected decoder turns
// latent draws back into frames. During training latents come from the frame
// posterior and the audio posterior is pulled towards it through a per-step
// KL term; at generation time latents come from the audio posterior.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "xmodal/common.hpp"
#include "xmodal/gaussian.hpp"
#include "xmodal/noise.hpp"

namespace xmodal {

struct ModelConfig {
  int latent_dim = 16;
  int frame_hidden_dim = 128;
  int audio_hidden_dim = 128;
  int recurrent_hidden_dim = 128;
  int height = 32;
  int width = 32;
  int channels = 1;
  int audio_dim = 8;
  double lambda = 1.0;
  double beta = 1e-6;
  // Encoder widths per level; empty selects the default for the image size.
  std::vector<int> encoder_channels;
  int decoder_output_channels = 8;

  /// 4 strided levels for images of at least 64 pixels per side, else 3.
  int levels() const;
  std::vector<int> resolved_encoder_channels() const;
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ParamGroup { frame_encoder, audio_encoder, frame_chain, audio_chain, decoder };
inline constexpr ParamGroup kAllParamGroups[] = {ParamGroup::frame_encoder, ParamGroup::audio_encoder,
                                                  ParamGroup::frame_chain, ParamGroup::audio_chain,
                                                  ParamGroup::decoder};
std::string to_string(ParamGroup g);

struct TensorSpec {
  std::string name;
  Eigen::Index rows;
  Eigen::Index cols;
  ParamGroup group;
  Eigen::Index offset;  // into the flat parameter vector
  Eigen::Index fan_in;

  Eigen::Index size() const { return rows * cols; }
};

/// Named tensors of a model, in a fixed order derived from the config.
class ParamLayout {
 public:
  explicit ParamLayout(const ModelConfig& config);

  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  Eigen::Index size() const { return size_; }
  const TensorSpec& spec(const std::string& name) const;
  std::size_t index(const std::string& name) const;

 private:
  void add(std::string name, Eigen::Index rows, Eigen::Index cols, ParamGroup group, Eigen::Index fan_in);

  std::vector<TensorSpec> tensors_;
  std::unordered_map<std::string, std::size_t> by_name_;
  Eigen::Index size_ = 0;
};

/// All learnable weights in one flat vector; named tensors are views into it.
/// The same type holds gradients and optimizer state.
template <typename Scalar>
class ModelParams {
 public:
  using MapType = Eigen::Map<Mat<Scalar>>;
  using ConstMapType = Eigen::Map<const Mat<Scalar>>;

  explicit ModelParams(const ModelConfig& config)
      : config_(config), layout_(config), values_(Vec<Scalar>::Zero(layout_.size())) {}

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  Vec<Scalar>& values() { return values_; }
  const Vec<Scalar>& values() const { return values_; }

  MapType tensor(std::size_t i) {
    const auto& s = layout_.tensors()[i];
    return MapType(values_.data() + s.offset, s.rows, s.cols);
  }
  ConstMapType tensor(std::size_t i) const {
    const auto& s = layout_.tensors()[i];
    return ConstMapType(values_.data() + s.offset, s.rows, s.cols);
  }
  MapType tensor(const std::string& name) { return tensor(layout_.index(name)); }
  ConstMapType tensor(const std::string& name) const { return tensor(layout_.index(name)); }

  ModelParams zeros_like() const { return ModelParams(config_); }

  template <typename To>
  ModelParams<To> cast() const {
    ModelParams<To> out(config_);
    out.values() = values_.template cast<To>();
    return out;
  }

  bool all_finite() const { return values_.allFinite(); }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  Vec<Scalar> values_;
};

/// Fan-in-scaled uniform weights (leaky-ReLU gain for convolutions), zero
/// biases, forget-gate biases of 1.
template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, std::uint64_t seed);

/// T frames of H x W x C intensities in [0, 1], stored as a (C, T*H*W)
/// matrix (column-major, i.e. T x H x W x C interleaved).
struct FrameStream {
  int height = 0;
  int width = 0;
  int channels = 0;
  Eigen::MatrixXf data;

  FrameStream() = default;
  FrameStream(int length, int height, int width, int channels);

  int length() const;
  Eigen::Index pixels() const { return Eigen::Index{height} * width; }
  auto frame(int t) { return data.middleCols(t * pixels(), pixels()); }
  auto frame(int t) const { return data.middleCols(t * pixels(), pixels()); }
};

/// T audio feature vectors, stored as an (A, T) matrix.
struct AudioStream {
  Eigen::MatrixXf features;

  int length() const { return static_cast<int>(features.cols()); }
  int dim() const { return static_cast<int>(features.rows()); }
};

template <typename Scalar>
struct PosteriorSequence {
  std::vector<DiagonalGaussian<Scalar>> steps;

  std::size_t length() const { return steps.size(); }
  const DiagonalGaussian<Scalar>& operator[](std::size_t t) const { return steps[t]; }
};

/// First-frame feature maps, one per resolution. Level 0 is the frame itself,
/// level l is the encoder output at 1/2^l resolution.
template <typename Scalar>
struct SkipStack {
  std::vector<Mat<Scalar>> levels;
  std::vector<Eigen::Index> heights;
  std::vector<Eigen::Index> widths;
};

template <typename Scalar>
struct RecurrentState {
  Mat<Scalar> h;
  Mat<Scalar> c;

  static RecurrentState zeros(Eigen::Index hidden, Eigen::Index batch = 1) {
    return {Mat<Scalar>::Zero(hidden, batch), Mat<Scalar>::Zero(hidden, batch)};
  }
};

template <typename Scalar>
struct FrameEncoding {
  Vec<Scalar> embedding;
  SkipStack<Scalar> skips;
};

enum class Chain { frame, audio };

template <typename Scalar>
struct ChainResult {
  PosteriorSequence<Scalar> posteriors;
  RecurrentState<Scalar> final_state;
};

template <typename Scalar>
struct DecodeResult {
  Mat<Scalar> frame;  // (C, H*W)
  RecurrentState<Scalar> state;
};

struct LossReport {
  double total = 0.0;
  std::vector<double> recon_per_t;
  std::vector<double> kl_per_t;

  double recon_sum() const;
  double kl_sum() const;
};

struct GenerationResult {
  std::vector<FrameStream> samples;
  /// latents[k] is a (D, T) matrix of the draws that produced sample k.
  std::vector<Eigen::MatrixXd> latents;
  std::vector<double> per_step_kl;
};

struct SequenceRef {
  const FrameStream* frames;
  const AudioStream* audio;
};

/// Frame encoder: one frame (C, H*W) to its embedding and skip maps.
template <typename Scalar>
FrameEncoding<Scalar> encode_frame(const Mat<Scalar>& frame, const ModelParams<Scalar>& params);

/// Audio encoder: one audio feature vector to its embedding.
template <typename Scalar>
Vec<Scalar> encode_audio(const Vec<Scalar>& features, const ModelParams<Scalar>& params);

/// Runs a recurrent posterior chain over (hidden, T) embeddings.
template <typename Scalar>
ChainResult<Scalar> run_posterior_chain(const Mat<Scalar>& embeddings, Chain chain, const ModelParams<Scalar>& params,
                                        const RecurrentState<Scalar>& initial_state);

/// Decoder recurrent state derived from the first frame's embedding.
template <typename Scalar>
RecurrentState<Scalar> decoder_initial_state(const FrameEncoding<Scalar>& first, const ModelParams<Scalar>& params);

/// One decoder step: latent + first-frame skips + recurrent state to a frame.
template <typename Scalar>
DecodeResult<Scalar> decode_frame(const Vec<Scalar>& z, const SkipStack<Scalar>& skips,
                                  const RecurrentState<Scalar>& state, const ModelParams<Scalar>& params);

/// Negated multimodal bound for one sequence:
///   sum_t lambda * 1/2 |f_t - f^_t|^2 + beta * KL[q_f(t) || q_a(t)]
/// with z_t drawn from the frame posterior using `noise`.
template <typename Scalar>
LossReport elbo_loss(const FrameStream& frames, const AudioStream& audio, const ModelParams<Scalar>& params,
                     NoiseSource& noise);

/// Batch mean of elbo_loss. When `gradient` is non-null it receives the
/// gradient of the returned total with respect to every parameter.
template <typename Scalar>
LossReport elbo_loss_batch(std::span<const SequenceRef> batch, const ModelParams<Scalar>& params, NoiseSource& noise,
                           ModelParams<Scalar>* gradient = nullptr);

/// Same as elbo_loss_batch with the standard-normal noise supplied directly
/// as a (D, T*B) matrix, column t*B + b.
template <typename Scalar>
LossReport elbo_loss_with_noise(std::span<const SequenceRef> batch, const ModelParams<Scalar>& params,
                                const Mat<Scalar>& noise, ModelParams<Scalar>* gradient = nullptr);

/// Draws one frame stream per seed. Frame 1 is `first_frame` verbatim and
/// latents come from the audio posterior. When `reference` frames are given
/// per_step_kl holds KL[q_f(t) || q_a(t)] against them, otherwise
/// KL[q_a(t) || N(0, I)].
template <typename Scalar>
GenerationResult generate(const Eigen::MatrixXf& first_frame, const AudioStream& audio,
                          const ModelParams<Scalar>& params, std::span<const std::uint64_t> seeds,
                          const FrameStream* reference = nullptr);

/// K seeds derived from `base` for generate().
std::vector<std::uint64_t> sample_seeds(std::uint64_t base, int count);

/// Per-step KL[q_f(t) || q_a(t)] for a ground-truth pair.
template <typename Scalar>
std::vector<double> alignment_kl(const FrameStream& frames, const AudioStream& audio,
                                 const ModelParams<Scalar>& params);

void check_pair(const FrameStream& frames, const AudioStream& audio, const ModelConfig& config);

}  // namespace xmodal
