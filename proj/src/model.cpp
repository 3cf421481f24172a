#include "xmodal/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "xmodal/config_io.hpp"
#include "xmodal/layers.hpp"

namespace xmodal {

// ---------------------------------------------------------------------------
// Configuration and parameter layout

int ModelConfig::levels() const { return std::min(height, width) >= 64 ? 4 : 3; }

std::vector<int> ModelConfig::resolved_encoder_channels() const {
  if (!encoder_channels.empty()) return encoder_channels;
  return levels() == 4 ? std::vector<int>{8, 16, 32, 64} : std::vector<int>{8, 16, 32};
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
  if (latent_dim < 1) fail("latent_dim must be >= 1");
  if (frame_hidden_dim < 1 || audio_hidden_dim < 1 || recurrent_hidden_dim < 1) fail("hidden dims must be >= 1");
  if (channels < 1) fail("channels must be >= 1");
  if (audio_dim < 1) fail("audio_dim must be >= 1");
  if (!(lambda > 0)) fail("lambda must be > 0");
  if (!(beta >= 0)) fail("beta must be >= 0");
  if (decoder_output_channels < 1) fail("decoder_output_channels must be >= 1");
  const int step = 1 << levels();
  if (height < step || width < step || height % step != 0 || width % step != 0) {
    fail("height and width must be positive multiples of " + std::to_string(step));
  }
  if (!encoder_channels.empty() && static_cast<int>(encoder_channels.size()) != levels()) {
    fail("encoder_channels needs one width per level (" + std::to_string(levels()) + ")");
  }
  for (int c : resolved_encoder_channels()) {
    if (c < 1) fail("encoder channel widths must be >= 1");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"latent_dim", c.latent_dim},
                     {"frame_hidden_dim", c.frame_hidden_dim},
                     {"audio_hidden_dim", c.audio_hidden_dim},
                     {"recurrent_hidden_dim", c.recurrent_hidden_dim},
                     {"height", c.height},
                     {"width", c.width},
                     {"channels", c.channels},
                     {"audio_dim", c.audio_dim},
                     {"lambda", c.lambda},
                     {"beta", c.beta},
                     {"encoder_channels", c.encoder_channels},
                     {"decoder_output_channels", c.decoder_output_channels}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  static const char* known[] = {"latent_dim", "frame_hidden_dim", "audio_hidden_dim", "recurrent_hidden_dim",
                                "height",     "width",            "channels",         "audio_dim",
                                "lambda",     "beta",             "encoder_channels", "decoder_output_channels"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw std::invalid_argument("ModelConfig: unknown key '" + key + "'");
    }
  }
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.frame_hidden_dim = j.value("frame_hidden_dim", c.frame_hidden_dim);
  c.audio_hidden_dim = j.value("audio_hidden_dim", c.audio_hidden_dim);
  c.recurrent_hidden_dim = j.value("recurrent_hidden_dim", c.recurrent_hidden_dim);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.channels = j.value("channels", c.channels);
  c.audio_dim = j.value("audio_dim", c.audio_dim);
  c.lambda = j.value("lambda", c.lambda);
  c.beta = j.value("beta", c.beta);
  c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
  c.decoder_output_channels = j.value("decoder_output_channels", c.decoder_output_channels);
}

std::string to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::frame_encoder: return "frame_encoder";
    case ParamGroup::audio_encoder: return "audio_encoder";
    case ParamGroup::frame_chain: return "frame_chain";
    case ParamGroup::audio_chain: return "audio_chain";
    case ParamGroup::decoder: return "decoder";
  }
  return "unknown";
}

namespace {

constexpr Eigen::Index kKernel = 4;
constexpr Eigen::Index kOutKernel = 3;

// Per-level channel counts and spatial sizes. Index 0 is the input image.
struct Pyramid {
  int levels;
  std::vector<Eigen::Index> channels, height, width;

  explicit Pyramid(const ModelConfig& c) : levels(c.levels()) {
    const auto enc = c.resolved_encoder_channels();
    channels.push_back(c.channels);
    height.push_back(c.height);
    width.push_back(c.width);
    for (int l = 1; l <= levels; ++l) {
      channels.push_back(enc[l - 1]);
      height.push_back(height.back() / 2);
      width.push_back(width.back() / 2);
    }
  }
  Eigen::Index pixels(int l) const { return height[l] * width[l]; }
  Eigen::Index bottleneck() const { return channels[levels] * pixels(levels); }
  // Channels produced by the decoder at level l (l < levels).
  Eigen::Index decoder_channels(int l, const ModelConfig& c) const {
    return l == 0 ? c.decoder_output_channels : channels[l];
  }
  // Stride-2 convolution mapping level l to level l + 1.
  ConvGeometry down(int l) const { return {channels[l], height[l], width[l], kKernel, 2, 1}; }
};

}  // namespace

ParamLayout::ParamLayout(const ModelConfig& c) {
  c.validate();
  const Pyramid p(c);
  const Eigen::Index D = c.latent_dim, R = c.recurrent_hidden_dim;
  const Eigen::Index Hf = c.frame_hidden_dim, Ha = c.audio_hidden_dim;
  using G = ParamGroup;

  for (int l = 1; l <= p.levels; ++l) {
    const Eigen::Index fan = p.channels[l - 1] * kKernel * kKernel;
    add("frame_encoder.conv" + std::to_string(l) + ".weight", p.channels[l], fan, G::frame_encoder, fan);
    add("frame_encoder.conv" + std::to_string(l) + ".bias", p.channels[l], 1, G::frame_encoder, fan);
  }
  add("frame_encoder.fc.weight", Hf, p.bottleneck(), G::frame_encoder, p.bottleneck());
  add("frame_encoder.fc.bias", Hf, 1, G::frame_encoder, p.bottleneck());

  add("audio_encoder.fc1.weight", Ha, c.audio_dim, G::audio_encoder, c.audio_dim);
  add("audio_encoder.fc1.bias", Ha, 1, G::audio_encoder, c.audio_dim);
  add("audio_encoder.fc2.weight", Ha, Ha, G::audio_encoder, Ha);
  add("audio_encoder.fc2.bias", Ha, 1, G::audio_encoder, Ha);

  for (auto [prefix, group, in] : {std::tuple{"frame_chain", G::frame_chain, Hf},
                                   std::tuple{"audio_chain", G::audio_chain, Ha}}) {
    const std::string pre(prefix);
    add(pre + ".lstm.weight", 4 * R, in + R, group, in + R);
    add(pre + ".lstm.bias", 4 * R, 1, group, in + R);
    add(pre + ".head.weight", 2 * D, R, group, R);
    add(pre + ".head.bias", 2 * D, 1, group, R);
  }

  add("decoder.init.weight", R, Hf, G::decoder, Hf);
  add("decoder.init.bias", R, 1, G::decoder, Hf);
  add("decoder.lstm.weight", 4 * R, D + R, G::decoder, D + R);
  add("decoder.lstm.bias", 4 * R, 1, G::decoder, D + R);
  add("decoder.fc.weight", p.bottleneck(), R, G::decoder, R);
  add("decoder.fc.bias", p.bottleneck(), 1, G::decoder, R);
  for (int l = p.levels; l >= 1; --l) {
    const Eigen::Index in = 2 * p.channels[l];
    const Eigen::Index out = p.decoder_channels(l - 1, c);
    // Each output pixel of a stride-2, 4x4 transposed convolution sees 2x2
    // input positions.
    const Eigen::Index fan = in * 4;
    add("decoder.deconv" + std::to_string(l) + ".weight", out * kKernel * kKernel, in, G::decoder, fan);
    add("decoder.deconv" + std::to_string(l) + ".bias", out, 1, G::decoder, fan);
  }
  const Eigen::Index out_fan = (c.decoder_output_channels + c.channels) * kOutKernel * kOutKernel;
  add("decoder.out.weight", c.channels, out_fan, G::decoder, out_fan);
  add("decoder.out.bias", c.channels, 1, G::decoder, out_fan);
}

void ParamLayout::add(std::string name, Eigen::Index rows, Eigen::Index cols, ParamGroup group,
                      Eigen::Index fan_in) {
  by_name_.emplace(name, tensors_.size());
  tensors_.push_back({std::move(name), rows, cols, group, size_, fan_in});
  size_ += rows * cols;
}

const TensorSpec& ParamLayout::spec(const std::string& name) const { return tensors_[index(name)]; }

std::size_t ParamLayout::index(const std::string& name) const {
  const auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::invalid_argument("unknown parameter tensor '" + name + "'");
  return it->second;
}

template <typename Scalar>
ModelParams<Scalar> init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams<Scalar> params(config);
  NoiseSource rng(derive_seed(seed, 0x1417));
  const auto& tensors = params.layout().tensors();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& spec = tensors[i];
    auto t = params.tensor(i);
    if (spec.cols == 1 && spec.name.ends_with(".bias")) {
      t.setZero();
      if (spec.name.ends_with("lstm.bias")) {
        const Eigen::Index hidden = spec.rows / 4;
        t.middleRows(hidden, hidden).setOnes();
      }
      continue;
    }
    const bool conv = spec.name.find("conv") != std::string::npos;
    const double gain = conv ? 6.0 / (1.0 + kLeakySlope * kLeakySlope) : 1.0;
    const double bound = std::sqrt(gain / static_cast<double>(spec.fan_in));
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
      for (Eigen::Index r = 0; r < t.rows(); ++r) t(r, j) = static_cast<Scalar>((2.0 * rng.uniform() - 1.0) * bound);
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Streams and reports

FrameStream::FrameStream(int length, int h, int w, int c)
    : height(h), width(w), channels(c), data(Eigen::MatrixXf::Zero(c, Eigen::Index{length} * h * w)) {}

int FrameStream::length() const { return pixels() == 0 ? 0 : static_cast<int>(data.cols() / pixels()); }

double LossReport::recon_sum() const { return std::accumulate(recon_per_t.begin(), recon_per_t.end(), 0.0); }
double LossReport::kl_sum() const { return std::accumulate(kl_per_t.begin(), kl_per_t.end(), 0.0); }

void check_pair(const FrameStream& frames, const AudioStream& audio, const ModelConfig& config) {
  auto fail = [](const std::string& m) { throw std::invalid_argument(m); };
  if (frames.height != config.height || frames.width != config.width || frames.channels != config.channels) {
    fail("frame stream shape " + std::to_string(frames.height) + "x" + std::to_string(frames.width) + "x" +
         std::to_string(frames.channels) + " does not match the model");
  }
  if (audio.dim() != config.audio_dim) fail("audio feature dimension does not match the model");
  if (frames.length() != audio.length()) {
    fail("frame and audio streams differ in length (" + std::to_string(frames.length()) + " vs " +
         std::to_string(audio.length()) + ")");
  }
  if (frames.length() < 2) fail("training sequences need at least 2 timesteps");
  if (frames.data.size() > 0 && (frames.data.minCoeff() < 0.0f || frames.data.maxCoeff() > 1.0f)) {
    fail("frame intensities must lie in [0, 1]");
  }
}

std::vector<std::uint64_t> sample_seeds(std::uint64_t base, int count) {
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(std::max(count, 0)));
  for (int k = 0; k < count; ++k) seeds[k] = derive_seed(base, 0x6e6, static_cast<std::uint64_t>(k));
  return seeds;
}

// ---------------------------------------------------------------------------
// Network internals

namespace {

template <typename Scalar>
void require_finite(const Mat<Scalar>& m, const char* where) {
  if (!m.allFinite()) throw NumericalFailure(where, "non-finite activations in forward pass");
}

struct ChainSlots {
  std::size_t lstm_w, lstm_b, head_w, head_b;
};

struct Slots {
  std::vector<std::size_t> enc_conv_w, enc_conv_b;  // index l - 1
  std::size_t enc_fc_w, enc_fc_b;
  std::size_t aud_fc1_w, aud_fc1_b, aud_fc2_w, aud_fc2_b;
  ChainSlots frame_chain, audio_chain;
  std::size_t dec_init_w, dec_init_b, dec_lstm_w, dec_lstm_b, dec_fc_w, dec_fc_b;
  std::vector<std::size_t> dec_deconv_w, dec_deconv_b;  // index l - 1
  std::size_t dec_out_w, dec_out_b;

  Slots(const ParamLayout& layout, int levels) {
    auto at = [&](const std::string& n) { return layout.index(n); };
    for (int l = 1; l <= levels; ++l) {
      enc_conv_w.push_back(at("frame_encoder.conv" + std::to_string(l) + ".weight"));
      enc_conv_b.push_back(at("frame_encoder.conv" + std::to_string(l) + ".bias"));
      dec_deconv_w.push_back(at("decoder.deconv" + std::to_string(l) + ".weight"));
      dec_deconv_b.push_back(at("decoder.deconv" + std::to_string(l) + ".bias"));
    }
    enc_fc_w = at("frame_encoder.fc.weight");
    enc_fc_b = at("frame_encoder.fc.bias");
    aud_fc1_w = at("audio_encoder.fc1.weight");
    aud_fc1_b = at("audio_encoder.fc1.bias");
    aud_fc2_w = at("audio_encoder.fc2.weight");
    aud_fc2_b = at("audio_encoder.fc2.bias");
    for (auto [slots, prefix] : {std::pair{&frame_chain, "frame_chain"}, std::pair{&audio_chain, "audio_chain"}}) {
      const std::string p(prefix);
      *slots = {at(p + ".lstm.weight"), at(p + ".lstm.bias"), at(p + ".head.weight"), at(p + ".head.bias")};
    }
    dec_init_w = at("decoder.init.weight");
    dec_init_b = at("decoder.init.bias");
    dec_lstm_w = at("decoder.lstm.weight");
    dec_lstm_b = at("decoder.lstm.bias");
    dec_fc_w = at("decoder.fc.weight");
    dec_fc_b = at("decoder.fc.bias");
    dec_out_w = at("decoder.out.weight");
    dec_out_b = at("decoder.out.bias");
  }
};

template <typename Scalar>
struct EncoderTape {
  Eigen::Index images = 0;
  std::vector<Mat<Scalar>> act;   // act[0] = input, act[l] = leaky(pre[l])
  std::vector<Mat<Scalar>> pre;   // index l, pre[0] unused
  std::vector<Mat<Scalar>> cols;  // index l, cols[0] unused
  Mat<Scalar> embedding;          // (Hf, N)
};

template <typename Scalar>
struct AudioTape {
  Mat<Scalar> input, pre1, act1, embedding;
};

template <typename Scalar>
struct ChainTape {
  Eigen::Index batch = 0;
  std::vector<LstmStep<Scalar>> steps;
  Mat<Scalar> hidden;       // (R, T*B)
  Mat<Scalar> log_var_raw;  // (D, T*B)
  Mat<Scalar> mean;         // (D, T*B)
  Mat<Scalar> log_var;      // clamped
};

template <typename Scalar>
struct TowerTape {
  Eigen::Index images = 0;
  Eigen::Index skip_count = 1;
  Mat<Scalar> hidden;   // decoder recurrent outputs (R, N)
  Mat<Scalar> fc_pre;   // (bottleneck, N)
  std::vector<Mat<Scalar>> concat;  // index l: [Y_l; skip_l] at level l
  std::vector<Mat<Scalar>> pre;     // index l: pre-activation produced at level l (l < levels)
  Mat<Scalar> out_cols;             // im2col of the level-0 concat
  Mat<Scalar> output;               // sigmoid output (C, N*H*W)
};

template <typename Scalar>
struct RecurrentTape {
  Mat<Scalar> init_pre;  // (R, B)
  Mat<Scalar> h0;
  std::vector<LstmStep<Scalar>> steps;
  Mat<Scalar> hidden;  // (R, T*B)
};

template <typename Scalar>
class Network {
 public:
  explicit Network(const ModelParams<Scalar>& params)
      : params_(params), config_(params.config()), pyr_(config_), slots_(params.layout(), pyr_.levels) {}

  const ModelConfig& config() const { return config_; }
  const Pyramid& pyramid() const { return pyr_; }

  auto w(std::size_t i) const { return params_.tensor(i); }

  // --- frame encoder -------------------------------------------------------

  EncoderTape<Scalar> encode_frames(const Mat<Scalar>& frames, Eigen::Index images) const {
    EncoderTape<Scalar> tape;
    tape.images = images;
    tape.act.resize(pyr_.levels + 1);
    tape.pre.resize(pyr_.levels + 1);
    tape.cols.resize(pyr_.levels + 1);
    tape.act[0] = frames;
    for (int l = 1; l <= pyr_.levels; ++l) {
      tape.cols[l] = im2col(tape.act[l - 1], pyr_.down(l - 1), images);
      tape.pre[l].noalias() = w(slots_.enc_conv_w[l - 1]) * tape.cols[l];
      tape.pre[l].colwise() += w(slots_.enc_conv_b[l - 1]).col(0);
      tape.act[l] = leaky_relu(tape.pre[l]);
    }
    const Eigen::Map<const Mat<Scalar>> flat(tape.act[pyr_.levels].data(), pyr_.bottleneck(), images);
    Mat<Scalar> fc = w(slots_.enc_fc_w) * flat;
    fc.colwise() += w(slots_.enc_fc_b).col(0);
    tape.embedding = fc.array().tanh().matrix();
    require_finite(tape.embedding, "frame_encoder");
    return tape;
  }

  // d_act[l] (l >= 1) may carry gradient from the skip pathway; it is consumed.
  void encode_frames_backward(const EncoderTape<Scalar>& tape, const Mat<Scalar>& d_embedding,
                              std::vector<Mat<Scalar>>& d_act, ModelParams<Scalar>& grad) const {
    const int L = pyr_.levels;
    const Mat<Scalar> d_fc = (d_embedding.array() * (Scalar(1) - tape.embedding.array().square())).matrix();
    const Eigen::Map<const Mat<Scalar>> flat(tape.act[L].data(), pyr_.bottleneck(), tape.images);
    grad.tensor(slots_.enc_fc_w).noalias() += d_fc * flat.transpose();
    grad.tensor(slots_.enc_fc_b).col(0) += d_fc.rowwise().sum();
    Mat<Scalar> d_flat = w(slots_.enc_fc_w).transpose() * d_fc;
    Mat<Scalar> d_top = Eigen::Map<Mat<Scalar>>(d_flat.data(), pyr_.channels[L], pyr_.pixels(L) * tape.images);
    if (d_act[L].size() > 0) d_top += d_act[L];
    Mat<Scalar> d_cur = std::move(d_top);
    for (int l = L; l >= 1; --l) {
      const Mat<Scalar> d_pre = leaky_relu_backward(d_cur, tape.pre[l]);
      grad.tensor(slots_.enc_conv_w[l - 1]).noalias() += d_pre * tape.cols[l].transpose();
      grad.tensor(slots_.enc_conv_b[l - 1]).col(0) += d_pre.rowwise().sum();
      if (l == 1) break;
      const Mat<Scalar> d_cols = w(slots_.enc_conv_w[l - 1]).transpose() * d_pre;
      d_cur = col2im(d_cols, pyr_.down(l - 1), tape.images);
      if (d_act[l - 1].size() > 0) d_cur += d_act[l - 1];
    }
  }

  // --- audio encoder -------------------------------------------------------

  AudioTape<Scalar> encode_audio(const Mat<Scalar>& features) const {
    AudioTape<Scalar> tape;
    tape.input = features;
    tape.pre1.noalias() = w(slots_.aud_fc1_w) * features;
    tape.pre1.colwise() += w(slots_.aud_fc1_b).col(0);
    tape.act1 = leaky_relu(tape.pre1);
    Mat<Scalar> pre2 = w(slots_.aud_fc2_w) * tape.act1;
    pre2.colwise() += w(slots_.aud_fc2_b).col(0);
    tape.embedding = pre2.array().tanh().matrix();
    require_finite(tape.embedding, "audio_encoder");
    return tape;
  }

  void encode_audio_backward(const AudioTape<Scalar>& tape, const Mat<Scalar>& d_embedding,
                             ModelParams<Scalar>& grad) const {
    const Mat<Scalar> d_pre2 = (d_embedding.array() * (Scalar(1) - tape.embedding.array().square())).matrix();
    grad.tensor(slots_.aud_fc2_w).noalias() += d_pre2 * tape.act1.transpose();
    grad.tensor(slots_.aud_fc2_b).col(0) += d_pre2.rowwise().sum();
    const Mat<Scalar> d_act1 = w(slots_.aud_fc2_w).transpose() * d_pre2;
    const Mat<Scalar> d_pre1 = leaky_relu_backward(d_act1, tape.pre1);
    grad.tensor(slots_.aud_fc1_w).noalias() += d_pre1 * tape.input.transpose();
    grad.tensor(slots_.aud_fc1_b).col(0) += d_pre1.rowwise().sum();
  }

  // --- posterior chains ----------------------------------------------------

  const ChainSlots& chain_slots(Chain c) const { return c == Chain::frame ? slots_.frame_chain : slots_.audio_chain; }

  Eigen::Index chain_input_dim(Chain c) const {
    return c == Chain::frame ? config_.frame_hidden_dim : config_.audio_hidden_dim;
  }

  ChainTape<Scalar> run_chain(Chain chain, const Mat<Scalar>& embeddings, Eigen::Index batch,
                              const RecurrentState<Scalar>& init) const {
    const auto& s = chain_slots(chain);
    const Eigen::Index steps = embeddings.cols() / batch;
    const Eigen::Index D = config_.latent_dim, R = config_.recurrent_hidden_dim;
    ChainTape<Scalar> tape;
    tape.batch = batch;
    tape.hidden.resize(R, embeddings.cols());
    Mat<Scalar> h = init.h, c = init.c;
    for (Eigen::Index t = 0; t < steps; ++t) {
      tape.steps.push_back(lstm_forward<Scalar>(w(s.lstm_w), w(s.lstm_b), embeddings.middleCols(t * batch, batch),
                                                h, c));
      h = tape.steps.back().h;
      c = tape.steps.back().c;
      tape.hidden.middleCols(t * batch, batch) = h;
    }
    Mat<Scalar> out = w(s.head_w) * tape.hidden;
    out.colwise() += w(s.head_b).col(0);
    tape.mean = out.topRows(D);
    tape.log_var_raw = out.bottomRows(D);
    tape.log_var = tape.log_var_raw.cwiseMax(Scalar(kLogVarMin)).cwiseMin(Scalar(kLogVarMax));
    require_finite(out, chain == Chain::frame ? "frame_chain" : "audio_chain");
    return tape;
  }

  // Returns the gradient with respect to the chain's input embeddings.
  Mat<Scalar> run_chain_backward(Chain chain, const ChainTape<Scalar>& tape, const Mat<Scalar>& d_mean,
                                 const Mat<Scalar>& d_log_var, ModelParams<Scalar>& grad) const {
    const auto& s = chain_slots(chain);
    const Eigen::Index D = config_.latent_dim, R = config_.recurrent_hidden_dim;
    const Eigen::Index B = tape.batch;
    Mat<Scalar> d_out(2 * D, tape.hidden.cols());
    d_out.topRows(D) = d_mean;
    d_out.bottomRows(D) =
        ((tape.log_var_raw.array() >= Scalar(kLogVarMin)) && (tape.log_var_raw.array() <= Scalar(kLogVarMax)))
            .select(d_log_var.array(), Scalar(0))
            .matrix();
    grad.tensor(s.head_w).noalias() += d_out * tape.hidden.transpose();
    grad.tensor(s.head_b).col(0) += d_out.rowwise().sum();
    const Mat<Scalar> d_hidden = w(s.head_w).transpose() * d_out;

    Mat<Scalar> d_emb(chain_input_dim(chain), tape.hidden.cols());
    Mat<Scalar> dh = Mat<Scalar>::Zero(R, B), dc = Mat<Scalar>::Zero(R, B);
    for (Eigen::Index t = static_cast<Eigen::Index>(tape.steps.size()) - 1; t >= 0; --t) {
      dh += d_hidden.middleCols(t * B, B);
      d_emb.middleCols(t * B, B) =
          lstm_backward<Scalar>(w(s.lstm_w), tape.steps[t], dh, dc, grad.tensor(s.lstm_w), grad.tensor(s.lstm_b));
    }
    return d_emb;
  }

  // --- decoder -------------------------------------------------------------

  Mat<Scalar> decoder_init_pre(const Mat<Scalar>& first_embedding) const {
    Mat<Scalar> pre = w(slots_.dec_init_w) * first_embedding;
    pre.colwise() += w(slots_.dec_init_b).col(0);
    return pre;
  }

  RecurrentTape<Scalar> run_decoder_recurrence(const Mat<Scalar>& first_embedding, const Mat<Scalar>& z,
                                               Eigen::Index batch) const {
    RecurrentTape<Scalar> tape;
    tape.init_pre = decoder_init_pre(first_embedding);
    tape.h0 = tape.init_pre.array().tanh().matrix();
    const Eigen::Index steps = z.cols() / batch;
    tape.hidden.resize(config_.recurrent_hidden_dim, z.cols());
    Mat<Scalar> h = tape.h0, c = Mat<Scalar>::Zero(h.rows(), batch);
    for (Eigen::Index t = 0; t < steps; ++t) {
      tape.steps.push_back(
          lstm_forward<Scalar>(w(slots_.dec_lstm_w), w(slots_.dec_lstm_b), z.middleCols(t * batch, batch), h, c));
      h = tape.steps.back().h;
      c = tape.steps.back().c;
      tape.hidden.middleCols(t * batch, batch) = h;
    }
    return tape;
  }

  // Returns d z; d_first_embedding receives the init-path gradient.
  Mat<Scalar> run_decoder_recurrence_backward(const RecurrentTape<Scalar>& tape, const Mat<Scalar>& first_embedding,
                                              const Mat<Scalar>& d_hidden, Mat<Scalar>& d_first_embedding,
                                              ModelParams<Scalar>& grad) const {
    const Eigen::Index B = tape.h0.cols();
    const Eigen::Index R = config_.recurrent_hidden_dim;
    Mat<Scalar> dz(config_.latent_dim, d_hidden.cols());
    Mat<Scalar> dh = Mat<Scalar>::Zero(R, B), dc = Mat<Scalar>::Zero(R, B);
    for (Eigen::Index t = static_cast<Eigen::Index>(tape.steps.size()) - 1; t >= 0; --t) {
      dh += d_hidden.middleCols(t * B, B);
      dz.middleCols(t * B, B) = lstm_backward<Scalar>(w(slots_.dec_lstm_w), tape.steps[t], dh, dc,
                                                      grad.tensor(slots_.dec_lstm_w), grad.tensor(slots_.dec_lstm_b));
    }
    const Mat<Scalar> d_pre = (dh.array() * (Scalar(1) - tape.h0.array().square())).matrix();
    grad.tensor(slots_.dec_init_w).noalias() += d_pre * first_embedding.transpose();
    grad.tensor(slots_.dec_init_b).col(0) += d_pre.rowwise().sum();
    d_first_embedding = w(slots_.dec_init_w).transpose() * d_pre;
    return dz;
  }

  // skips[l] holds skip_count images at level l; image n uses skip n % skip_count.
  TowerTape<Scalar> run_tower(const Mat<Scalar>& hidden, const std::vector<Mat<Scalar>>& skips,
                              Eigen::Index skip_count) const {
    const int L = pyr_.levels;
    const Eigen::Index N = hidden.cols();
    TowerTape<Scalar> tape;
    tape.images = N;
    tape.skip_count = skip_count;
    tape.hidden = hidden;
    tape.fc_pre.noalias() = w(slots_.dec_fc_w) * hidden;
    tape.fc_pre.colwise() += w(slots_.dec_fc_b).col(0);
    tape.concat.resize(L + 1);
    tape.pre.resize(L + 1);

    Mat<Scalar> y = leaky_relu(tape.fc_pre);
    Mat<Scalar> current = Eigen::Map<Mat<Scalar>>(y.data(), pyr_.channels[L], pyr_.pixels(L) * N);
    for (int l = L; l >= 0; --l) {
      tape.concat[l] = concat_skip(current, skips[l], l, N, skip_count);
      if (l == 0) break;
      const Eigen::Index out_ch = pyr_.decoder_channels(l - 1, config_);
      const Mat<Scalar> cols = w(slots_.dec_deconv_w[l - 1]) * tape.concat[l];
      tape.pre[l - 1] = col2im(cols, up_geometry(l, out_ch), N);
      tape.pre[l - 1].colwise() += w(slots_.dec_deconv_b[l - 1]).col(0);
      current = leaky_relu(tape.pre[l - 1]);
    }
    tape.out_cols = im2col(tape.concat[0], out_geometry(), N);
    Mat<Scalar> out = w(slots_.dec_out_w) * tape.out_cols;
    out.colwise() += w(slots_.dec_out_b).col(0);
    tape.output = sigmoid(out);
    require_finite(tape.output, "decoder");
    return tape;
  }

  // Returns d hidden; d_skips[l] (l >= 1) receives gradient for the skip maps.
  Mat<Scalar> run_tower_backward(const TowerTape<Scalar>& tape, const Mat<Scalar>& d_output,
                                 std::vector<Mat<Scalar>>& d_skips, ModelParams<Scalar>& grad) const {
    const int L = pyr_.levels;
    const Eigen::Index N = tape.images;
    const Mat<Scalar> d_out = (d_output.array() * tape.output.array() * (Scalar(1) - tape.output.array())).matrix();
    grad.tensor(slots_.dec_out_w).noalias() += d_out * tape.out_cols.transpose();
    grad.tensor(slots_.dec_out_b).col(0) += d_out.rowwise().sum();
    Mat<Scalar> d_concat = col2im<Scalar>(w(slots_.dec_out_w).transpose() * d_out, out_geometry(), N);

    d_skips.assign(L + 1, Mat<Scalar>());
    Mat<Scalar> d_current;
    for (int l = 0;; ++l) {
      const Eigen::Index own = tape.concat[l].rows() - pyr_.channels[l];
      d_current = d_concat.topRows(own);
      if (l >= 1) d_skips[l] = gather_skip_grad(d_concat.bottomRows(pyr_.channels[l]), l, N, tape.skip_count);
      if (l == L) break;
      // d_current is the gradient at the output of deconv (l + 1).
      const Eigen::Index out_ch = pyr_.decoder_channels(l, config_);
      const Mat<Scalar> d_pre = leaky_relu_backward(d_current, tape.pre[l]);
      grad.tensor(slots_.dec_deconv_b[l]).col(0) += d_pre.rowwise().sum();
      const Mat<Scalar> d_cols = im2col(d_pre, up_geometry(l + 1, out_ch), N);
      grad.tensor(slots_.dec_deconv_w[l]).noalias() += d_cols * tape.concat[l + 1].transpose();
      d_concat = w(slots_.dec_deconv_w[l]).transpose() * d_cols;
    }
    Mat<Scalar> d_fc_act = Eigen::Map<Mat<Scalar>>(d_current.data(), pyr_.bottleneck(), N);
    const Mat<Scalar> d_fc = leaky_relu_backward(d_fc_act, tape.fc_pre);
    grad.tensor(slots_.dec_fc_w).noalias() += d_fc * tape.hidden.transpose();
    grad.tensor(slots_.dec_fc_b).col(0) += d_fc.rowwise().sum();
    return w(slots_.dec_fc_w).transpose() * d_fc;
  }

 private:
  // Geometry of the forward convolution whose adjoint maps level l to l - 1.
  ConvGeometry up_geometry(int l, Eigen::Index out_channels) const {
    return {out_channels, pyr_.height[l - 1], pyr_.width[l - 1], kKernel, 2, 1};
  }
  ConvGeometry out_geometry() const {
    return {config_.decoder_output_channels + config_.channels, pyr_.height[0], pyr_.width[0], kOutKernel, 1, 1};
  }

  Mat<Scalar> concat_skip(const Mat<Scalar>& own, const Mat<Scalar>& skip, int l, Eigen::Index images,
                          Eigen::Index skip_count) const {
    const Eigen::Index px = pyr_.pixels(l);
    Mat<Scalar> out(own.rows() + skip.rows(), own.cols());
    out.topRows(own.rows()) = own;
    for (Eigen::Index n = 0; n < images; ++n) {
      out.bottomRows(skip.rows()).middleCols(n * px, px) = skip.middleCols((n % skip_count) * px, px);
    }
    return out;
  }

  Mat<Scalar> gather_skip_grad(const Mat<Scalar>& d, int l, Eigen::Index images, Eigen::Index skip_count) const {
    const Eigen::Index px = pyr_.pixels(l);
    Mat<Scalar> out = Mat<Scalar>::Zero(d.rows(), skip_count * px);
    for (Eigen::Index n = 0; n < images; ++n) out.middleCols((n % skip_count) * px, px) += d.middleCols(n * px, px);
    return out;
  }

  const ModelParams<Scalar>& params_;
  ModelConfig config_;
  Pyramid pyr_;
  Slots slots_;
};

template <typename Scalar>
PosteriorSequence<Scalar> to_posteriors(const Mat<Scalar>& mean, const Mat<Scalar>& log_var) {
  PosteriorSequence<Scalar> seq;
  for (Eigen::Index t = 0; t < mean.cols(); ++t) seq.steps.emplace_back(mean.col(t), log_var.col(t));
  return seq;
}

template <typename Scalar>
std::vector<Mat<Scalar>> first_frame_skips(const EncoderTape<Scalar>& tape, const Pyramid& p, Eigen::Index batch) {
  std::vector<Mat<Scalar>> skips(p.levels + 1);
  for (int l = 0; l <= p.levels; ++l) skips[l] = tape.act[l].leftCols(batch * p.pixels(l));
  return skips;
}

// Packs a batch into time-major matrices: column block t*B + b.
template <typename Scalar>
void pack_batch(std::span<const SequenceRef> batch, const ModelConfig& config, Mat<Scalar>& frames,
                Mat<Scalar>& audio) {
  const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
  const int T = batch[0].frames->length();
  const Eigen::Index px = Eigen::Index{config.height} * config.width;
  frames.resize(config.channels, T * B * px);
  audio.resize(config.audio_dim, T * B);
  for (Eigen::Index b = 0; b < B; ++b) {
    for (int t = 0; t < T; ++t) {
      frames.middleCols((t * B + b) * px, px) = batch[b].frames->frame(t).template cast<Scalar>();
      audio.col(t * B + b) = batch[b].audio->features.col(t).template cast<Scalar>();
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Public operations

template <typename Scalar>
FrameEncoding<Scalar> encode_frame(const Mat<Scalar>& frame, const ModelParams<Scalar>& params) {
  const auto& c = params.config();
  if (frame.rows() != c.channels || frame.cols() != Eigen::Index{c.height} * c.width) {
    throw std::invalid_argument("encode_frame: frame shape does not match the model");
  }
  if (frame.size() > 0 && (frame.minCoeff() < Scalar(0) || frame.maxCoeff() > Scalar(1))) {
    throw std::invalid_argument("encode_frame: intensities must lie in [0, 1]");
  }
  const Network<Scalar> net(params);
  auto tape = net.encode_frames(frame, 1);
  FrameEncoding<Scalar> out;
  out.embedding = tape.embedding.col(0);
  const auto& p = net.pyramid();
  for (int l = 0; l <= p.levels; ++l) {
    out.skips.levels.push_back(std::move(tape.act[l]));
    out.skips.heights.push_back(p.height[l]);
    out.skips.widths.push_back(p.width[l]);
  }
  return out;
}

template <typename Scalar>
Vec<Scalar> encode_audio(const Vec<Scalar>& features, const ModelParams<Scalar>& params) {
  if (features.size() != params.config().audio_dim) {
    throw std::invalid_argument("encode_audio: feature dimension does not match the model");
  }
  const Network<Scalar> net(params);
  return net.encode_audio(features).embedding.col(0);
}

template <typename Scalar>
ChainResult<Scalar> run_posterior_chain(const Mat<Scalar>& embeddings, Chain chain, const ModelParams<Scalar>& params,
                                        const RecurrentState<Scalar>& initial_state) {
  const Network<Scalar> net(params);
  const Eigen::Index R = params.config().recurrent_hidden_dim;
  if (embeddings.rows() != net.chain_input_dim(chain)) {
    throw std::invalid_argument("run_posterior_chain: embedding size does not match the chain");
  }
  if (embeddings.cols() < 1) throw std::invalid_argument("run_posterior_chain: need at least one step");
  if (initial_state.h.rows() != R || initial_state.c.rows() != R || initial_state.h.cols() != 1 ||
      initial_state.c.cols() != 1) {
    throw std::invalid_argument("run_posterior_chain: initial state shape does not match the chain");
  }
  const auto tape = net.run_chain(chain, embeddings, 1, initial_state);
  return {to_posteriors(tape.mean, tape.log_var), {tape.steps.back().h, tape.steps.back().c}};
}

template <typename Scalar>
RecurrentState<Scalar> decoder_initial_state(const FrameEncoding<Scalar>& first, const ModelParams<Scalar>& params) {
  const Network<Scalar> net(params);
  if (first.embedding.size() != params.config().frame_hidden_dim) {
    throw std::invalid_argument("decoder_initial_state: embedding size does not match the model");
  }
  const Mat<Scalar> h = net.decoder_init_pre(first.embedding).array().tanh().matrix();
  return {h, Mat<Scalar>::Zero(h.rows(), 1)};
}

template <typename Scalar>
DecodeResult<Scalar> decode_frame(const Vec<Scalar>& z, const SkipStack<Scalar>& skips,
                                  const RecurrentState<Scalar>& state, const ModelParams<Scalar>& params) {
  const auto& c = params.config();
  const Network<Scalar> net(params);
  const auto& p = net.pyramid();
  if (z.size() != c.latent_dim) throw std::invalid_argument("decode_frame: latent dimension mismatch");
  if (state.h.rows() != c.recurrent_hidden_dim || state.c.rows() != c.recurrent_hidden_dim || state.h.cols() != 1 ||
      state.c.cols() != 1) {
    throw std::invalid_argument("decode_frame: decoder state shape mismatch");
  }
  if (static_cast<int>(skips.levels.size()) != p.levels + 1) {
    throw std::invalid_argument("decode_frame: skip stack has the wrong number of levels");
  }
  for (int l = 0; l <= p.levels; ++l) {
    if (skips.levels[l].rows() != p.channels[l] || skips.levels[l].cols() != p.pixels(l)) {
      throw std::invalid_argument("decode_frame: skip level " + std::to_string(l) + " has the wrong shape");
    }
  }
  const auto slots = Slots(params.layout(), p.levels);
  const auto step = lstm_forward<Scalar>(params.tensor(slots.dec_lstm_w), params.tensor(slots.dec_lstm_b), z,
                                         state.h, state.c);
  const auto tower = net.run_tower(step.h, skips.levels, 1);
  return {tower.output, {step.h, step.c}};
}

template <typename Scalar>
LossReport elbo_loss_with_noise(std::span<const SequenceRef> batch, const ModelParams<Scalar>& params,
                                const Mat<Scalar>& noise, ModelParams<Scalar>* gradient) {
  const auto& c = params.config();
  if (batch.empty()) throw std::invalid_argument("elbo_loss: empty batch");
  const int T = batch[0].frames->length();
  for (const auto& s : batch) {
    check_pair(*s.frames, *s.audio, c);
    if (s.frames->length() != T) throw std::invalid_argument("elbo_loss: batch sequences differ in length");
  }
  const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index N = T * B;
  const Eigen::Index px = Eigen::Index{c.height} * c.width;
  if (noise.rows() != c.latent_dim || noise.cols() != N) {
    throw std::invalid_argument("elbo_loss: noise must be latent_dim x (T * batch)");
  }

  const Network<Scalar> net(params);
  Mat<Scalar> frames, audio;
  pack_batch(batch, c, frames, audio);

  const auto enc = net.encode_frames(frames, N);
  const auto aud = net.encode_audio(audio);
  const auto zero_state = RecurrentState<Scalar>::zeros(c.recurrent_hidden_dim, B);
  const auto fchain = net.run_chain(Chain::frame, enc.embedding, B, zero_state);
  const auto achain = net.run_chain(Chain::audio, aud.embedding, B, zero_state);

  const Mat<Scalar> half_std = (Scalar(0.5) * fchain.log_var.array()).exp().matrix();
  const Mat<Scalar> z = fchain.mean + (half_std.array() * noise.array()).matrix();

  const Mat<Scalar> first_embedding = enc.embedding.leftCols(B);
  const auto rec = net.run_decoder_recurrence(first_embedding, z, B);
  const auto skips = first_frame_skips(enc, net.pyramid(), B);
  const auto tower = net.run_tower(rec.hidden, skips, B);

  const Mat<Scalar> diff = tower.output - frames;
  const Mat<Scalar> kl = kl_divergence_columns(fchain.mean, fchain.log_var, achain.mean, achain.log_var);

  LossReport report;
  report.recon_per_t.assign(T, 0.0);
  report.kl_per_t.assign(T, 0.0);
  for (int t = 0; t < T; ++t) {
    double r = 0.0, k = 0.0;
    for (Eigen::Index b = 0; b < B; ++b) {
      r += 0.5 * static_cast<double>(diff.middleCols((t * B + b) * px, px).squaredNorm());
      k += static_cast<double>(kl(0, t * B + b));
    }
    report.recon_per_t[t] = r / static_cast<double>(B);
    report.kl_per_t[t] = k / static_cast<double>(B);
    report.total += c.lambda * report.recon_per_t[t] + c.beta * report.kl_per_t[t];
  }
  if (!std::isfinite(report.total)) throw NumericalFailure("elbo_loss", "non-finite loss");
  if (gradient == nullptr) return report;

  if (gradient->layout().size() != params.layout().size()) {
    throw std::invalid_argument("elbo_loss: gradient buffer does not match the parameters");
  }
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(B);
  const Scalar recon_w = static_cast<Scalar>(c.lambda) * inv_b;
  const Scalar kl_w = static_cast<Scalar>(c.beta) * inv_b;
  auto& grad = *gradient;

  // Decoder.
  std::vector<Mat<Scalar>> d_skips;
  const Mat<Scalar> d_hidden = net.run_tower_backward(tower, (recon_w * diff).eval(), d_skips, grad);
  Mat<Scalar> d_first_embedding;
  const Mat<Scalar> dz = net.run_decoder_recurrence_backward(rec, first_embedding, d_hidden, d_first_embedding, grad);

  // KL and the reparameterized sample.
  const auto klg = kl_divergence_gradient<Scalar>(fchain.mean, fchain.log_var, achain.mean, achain.log_var);
  const Mat<Scalar> d_mean_f = kl_w * klg.mean_q + dz;
  const Mat<Scalar> d_log_var_f =
      kl_w * klg.log_var_q + (dz.array() * noise.array() * Scalar(0.5) * half_std.array()).matrix();
  const Mat<Scalar> d_mean_a = kl_w * klg.mean_p;
  const Mat<Scalar> d_log_var_a = kl_w * klg.log_var_p;

  Mat<Scalar> d_frame_emb = net.run_chain_backward(Chain::frame, fchain, d_mean_f, d_log_var_f, grad);
  const Mat<Scalar> d_audio_emb = net.run_chain_backward(Chain::audio, achain, d_mean_a, d_log_var_a, grad);
  net.encode_audio_backward(aud, d_audio_emb, grad);

  d_frame_emb.leftCols(B) += d_first_embedding;
  std::vector<Mat<Scalar>> d_act(net.pyramid().levels + 1);
  for (int l = 1; l <= net.pyramid().levels; ++l) {
    d_act[l] = Mat<Scalar>::Zero(net.pyramid().channels[l], N * net.pyramid().pixels(l));
    d_act[l].leftCols(d_skips[l].cols()) = d_skips[l];
  }
  net.encode_frames_backward(enc, d_frame_emb, d_act, grad);
  return report;
}

template <typename Scalar>
LossReport elbo_loss_batch(std::span<const SequenceRef> batch, const ModelParams<Scalar>& params, NoiseSource& noise,
                           ModelParams<Scalar>* gradient) {
  if (batch.empty()) throw std::invalid_argument("elbo_loss: empty batch");
  const Eigen::Index cols = Eigen::Index{batch[0].frames->length()} * static_cast<Eigen::Index>(batch.size());
  const Mat<Scalar> eps = noise.normal_matrix<Scalar>(params.config().latent_dim, cols);
  return elbo_loss_with_noise(batch, params, eps, gradient);
}

template <typename Scalar>
LossReport elbo_loss(const FrameStream& frames, const AudioStream& audio, const ModelParams<Scalar>& params,
                     NoiseSource& noise) {
  const SequenceRef one{&frames, &audio};
  return elbo_loss_batch<Scalar>(std::span(&one, 1), params, noise, nullptr);
}

template <typename Scalar>
std::vector<double> alignment_kl(const FrameStream& frames, const AudioStream& audio,
                                 const ModelParams<Scalar>& params) {
  const auto& c = params.config();
  if (frames.length() != audio.length()) throw std::invalid_argument("alignment_kl: stream lengths differ");
  const Network<Scalar> net(params);
  const Mat<Scalar> f = frames.data.cast<Scalar>();
  const auto enc = net.encode_frames(f, frames.length());
  const auto aud = net.encode_audio(audio.features.cast<Scalar>());
  const auto zero = RecurrentState<Scalar>::zeros(c.recurrent_hidden_dim, 1);
  const auto fchain = net.run_chain(Chain::frame, enc.embedding, 1, zero);
  const auto achain = net.run_chain(Chain::audio, aud.embedding, 1, zero);
  const Mat<Scalar> kl = kl_divergence_columns(fchain.mean, fchain.log_var, achain.mean, achain.log_var);
  std::vector<double> out(kl.cols());
  for (Eigen::Index t = 0; t < kl.cols(); ++t) out[t] = static_cast<double>(kl(0, t));
  return out;
}

template <typename Scalar>
GenerationResult generate(const Eigen::MatrixXf& first_frame, const AudioStream& audio,
                          const ModelParams<Scalar>& params, std::span<const std::uint64_t> seeds,
                          const FrameStream* reference) {
  const auto& c = params.config();
  const Eigen::Index K = static_cast<Eigen::Index>(seeds.size());
  const Eigen::Index T = audio.length();
  const Eigen::Index px = Eigen::Index{c.height} * c.width;
  if (K < 1) throw std::invalid_argument("generate: need at least one sample");
  if (T < 1) throw std::invalid_argument("generate: audio stream is empty");
  if (audio.dim() != c.audio_dim) throw std::invalid_argument("generate: audio feature dimension mismatch");
  if (first_frame.rows() != c.channels || first_frame.cols() != px) {
    throw std::invalid_argument("generate: first frame shape does not match the model");
  }
  if (!params.all_finite()) throw NumericalFailure("params", "model parameters contain NaN or Inf");

  const Network<Scalar> net(params);
  const auto enc = net.encode_frames(first_frame.cast<Scalar>(), 1);
  const auto aud = net.encode_audio(audio.features.cast<Scalar>());
  const auto achain = net.run_chain(Chain::audio, aud.embedding, 1,
                                    RecurrentState<Scalar>::zeros(c.recurrent_hidden_dim, 1));
  const Mat<Scalar> std_a = (Scalar(0.5) * achain.log_var.array()).exp().matrix();

  GenerationResult result;
  Mat<Scalar> z(c.latent_dim, T * K);
  for (Eigen::Index k = 0; k < K; ++k) {
    NoiseSource noise(seeds[k]);
    const Mat<Scalar> eps = noise.normal_matrix<Scalar>(c.latent_dim, T);
    const Mat<Scalar> zk = achain.mean + (std_a.array() * eps.array()).matrix();
    for (Eigen::Index t = 0; t < T; ++t) z.col(t * K + k) = zk.col(t);
    result.latents.push_back(zk.template cast<double>());
  }

  const Mat<Scalar> first_embedding = enc.embedding.col(0).replicate(1, K);
  const auto rec = net.run_decoder_recurrence(first_embedding, z, K);
  const auto tower = net.run_tower(rec.hidden, first_frame_skips(enc, net.pyramid(), 1), 1);

  for (Eigen::Index k = 0; k < K; ++k) {
    FrameStream s(static_cast<int>(T), c.height, c.width, c.channels);
    s.frame(0) = first_frame;
    for (Eigen::Index t = 1; t < T; ++t) s.frame(t) = tower.output.middleCols((t * K + k) * px, px).template cast<float>();
    result.samples.push_back(std::move(s));
  }

  if (reference != nullptr) {
    if (reference->length() != T) throw std::invalid_argument("generate: reference length differs from audio");
    result.per_step_kl = alignment_kl(*reference, audio, params);
  } else {
    const Mat<Scalar> zeros = Mat<Scalar>::Zero(c.latent_dim, T);
    const Mat<Scalar> kl = kl_divergence_columns(achain.mean, achain.log_var, zeros, zeros);
    for (Eigen::Index t = 0; t < T; ++t) result.per_step_kl.push_back(static_cast<double>(kl(0, t)));
  }
  return result;
}

#define XMODAL_INSTANTIATE_MODEL(S)                                                                               \
  template ModelParams<S> init_params<S>(const ModelConfig&, std::uint64_t);                                     \
  template FrameEncoding<S> encode_frame<S>(const Mat<S>&, const ModelParams<S>&);                               \
  template Vec<S> encode_audio<S>(const Vec<S>&, const ModelParams<S>&);                                         \
  template ChainResult<S> run_posterior_chain<S>(const Mat<S>&, Chain, const ModelParams<S>&,                    \
                                                 const RecurrentState<S>&);                                      \
  template RecurrentState<S> decoder_initial_state<S>(const FrameEncoding<S>&, const ModelParams<S>&);           \
  template DecodeResult<S> decode_frame<S>(const Vec<S>&, const SkipStack<S>&, const RecurrentState<S>&,         \
                                           const ModelParams<S>&);                                               \
  template LossReport elbo_loss<S>(const FrameStream&, const AudioStream&, const ModelParams<S>&, NoiseSource&); \
  template LossReport elbo_loss_batch<S>(std::span<const SequenceRef>, const ModelParams<S>&, NoiseSource&,      \
                                         ModelParams<S>*);                                                       \
  template LossReport elbo_loss_with_noise<S>(std::span<const SequenceRef>, const ModelParams<S>&, const Mat<S>&, \
                                              ModelParams<S>*);                                                  \
  template std::vector<double> alignment_kl<S>(const FrameStream&, const AudioStream&, const ModelParams<S>&);   \
  template GenerationResult generate<S>(const Eigen::MatrixXf&, const AudioStream&, const ModelParams<S>&,       \
                                        std::span<const std::uint64_t>, const FrameStream*);

XMODAL_INSTANTIATE_MODEL(float)
XMODAL_INSTANTIATE_MODEL(double)

}  // namespace xmodal
