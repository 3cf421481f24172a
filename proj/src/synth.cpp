#include "xmodal/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "xmodal/noise.hpp"
#include "xmodal/tensor_io.hpp"

namespace xmodal {

namespace {

constexpr int kSuper = 4;  // subsamples per pixel side

constexpr double kBackground = 0.1;
constexpr double kSkin = 0.5;
constexpr double kEye = 0.15;
constexpr double kMouth = 0.9;

constexpr double kMaxStep = 0.25;

// Stream tags for derive_seed.
constexpr std::uint64_t kTagDriver = 0xd21;
constexpr std::uint64_t kTagNuisance = 0x7a1;
constexpr std::uint64_t kTagAudio = 0xa0d;
constexpr std::uint64_t kTagLift = 0x11f;
constexpr std::uint64_t kTagBlink = 0xb11;

struct Ellipse {
  double cx, cy, rx, ry;
  bool contains(double x, double y) const {
    if (rx <= 0 || ry <= 0) return false;
    const double u = (x - cx) / rx, v = (y - cy) / ry;
    return u * u + v * v <= 1.0;
  }
};

struct FaceGeometry {
  Ellipse head, left_eye, right_eye, mouth;

  FaceGeometry(const SceneState& s, int h, int w) {
    const double cx = 0.5 * w + s.dx, cy = 0.5 * h + s.dy;
    const double r = 0.40 * std::min(h, w);
    head = {cx, cy, r, r};
    const double eye_ry = s.blink ? 0.012 * h : 0.06 * h;
    left_eye = {cx - 0.16 * w, cy - 0.12 * h, 0.07 * w, eye_ry};
    right_eye = {cx + 0.16 * w, cy - 0.12 * h, 0.07 * w, eye_ry};
    mouth = {cx, cy + 0.2 * h, 0.17 * w, 0.13 * h * s.driver};
  }
};

template <typename F>
void for_each_subsample(int h, int w, F&& f) {
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int j = 0; j < kSuper; ++j) {
        for (int i = 0; i < kSuper; ++i) {
          f(y * w + x, x + (i + 0.5) / kSuper, y + (j + 0.5) / kSuper);
        }
      }
    }
  }
}

void write_manifest(const CorpusManifest& m, const std::filesystem::path& path) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : m.records) {
    records.push_back({{"offset", r.offset},
                       {"driver_seed", r.seeds.driver},
                       {"nuisance_seed", r.seeds.nuisance},
                       {"audio_noise_seed", r.seeds.audio_noise},
                       {"head_dx", r.dx},
                       {"head_dy", r.dy}});
  }
  const nlohmann::json j{{"kind", "xmodal-corpus"},
                         {"format_version", m.format_version},
                         {"config", m.config},
                         {"data_file", m.data_file},
                         {"records", records}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write corpus manifest: " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing corpus manifest: " + path.string());
}

std::vector<std::uint32_t> u32_shape(std::initializer_list<int> dims) {
  std::vector<std::uint32_t> s;
  for (int d : dims) s.push_back(static_cast<std::uint32_t>(d));
  return s;
}

std::uint64_t sequence_record_size(const SynthConfig& c) {
  return tensor_record_size(u32_shape({c.length, c.height, c.width, 1})) +
         tensor_record_size(u32_shape({c.length, c.audio_dim})) + 2 * tensor_record_size(u32_shape({c.length}));
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("SynthConfig: " + m); };
  if (length < 2) fail("sequence length T must be >= 2");
  if (height < 16 || width < 16) fail("height and width must be >= 16");
  if (audio_dim < 4) fail("audio_dim must be >= 4");
  if (num_train < 0 || num_test < 0 || num_sequences() < 1) fail("need at least one sequence");
  if (!(audio_noise >= 0)) fail("audio_noise must be >= 0");
  if (!(blink_rate >= 0 && blink_rate <= 1)) fail("blink_rate must lie in [0, 1]");
  if (blink_duration < 1) fail("blink_duration must be >= 1");
  if (max_head_offset < 0) fail("max_head_offset must be >= 0");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = nlohmann::json{{"seed", c.seed},
                     {"num_train", c.num_train},
                     {"num_test", c.num_test},
                     {"length", c.length},
                     {"height", c.height},
                     {"width", c.width},
                     {"channels", 1},
                     {"audio_dim", c.audio_dim},
                     {"audio_noise", c.audio_noise},
                     {"blink_rate", c.blink_rate},
                     {"blink_duration", c.blink_duration},
                     {"max_head_offset", c.max_head_offset}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.num_train = j.value("num_train", c.num_train);
  c.num_test = j.value("num_test", c.num_test);
  c.length = j.value("length", c.length);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.audio_dim = j.value("audio_dim", c.audio_dim);
  c.audio_noise = j.value("audio_noise", c.audio_noise);
  c.blink_rate = j.value("blink_rate", c.blink_rate);
  c.blink_duration = j.value("blink_duration", c.blink_duration);
  c.max_head_offset = j.value("max_head_offset", c.max_head_offset);
  if (j.value("channels", 1) != 1) throw std::invalid_argument("SynthConfig: only single-channel corpora exist");
}

DriverSignal synth_driver(std::uint64_t seed, int length) {
  if (length < 2) throw std::invalid_argument("synth_driver: length must be >= 2");
  NoiseSource rng(derive_seed(seed, kTagDriver));
  double period[3], phase[3];
  for (int k = 0; k < 3; ++k) {
    period[k] = 8.0 + 24.0 * rng.uniform();
    phase[k] = 2.0 * std::numbers::pi * rng.uniform();
  }
  DriverSignal d;
  d.values.resize(length);
  for (int t = 0; t < length; ++t) {
    double s = 0.0;
    for (int k = 0; k < 3; ++k) s += std::sin(2.0 * std::numbers::pi * t / period[k] + phase[k]);
    const double target = 0.5 + 0.45 * s / 3.0;
    if (t == 0) {
      d.values[t] = target;
      continue;
    }
    const double prev = d.values[t - 1];
    double next = prev + std::clamp(target - prev, -kMaxStep, kMaxStep);
    while (std::abs(next - prev) > kMaxStep) next = std::nextafter(next, prev);
    d.values[t] = next;
  }
  return d;
}

std::vector<std::uint8_t> synth_blinks(std::uint64_t seed, int length, double rate, int duration) {
  NoiseSource rng(derive_seed(seed, kTagBlink));
  std::vector<std::uint8_t> b(length, 0);
  int remaining = 0;
  for (int t = 0; t < length; ++t) {
    // One draw per step keeps the trace aligned however blinks fall.
    const bool onset = rng.uniform() < rate;
    if (remaining > 0) {
      b[t] = 1;
      --remaining;
    } else if (onset) {
      b[t] = 1;
      remaining = duration - 1;
    }
  }
  return b;
}

Eigen::MatrixXf render_frame(const SceneState& state, int height, int width) {
  const FaceGeometry g(state, height, width);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(Eigen::Index{height} * width);
  for_each_subsample(height, width, [&](int p, double x, double y) {
    double v = kBackground;
    if (g.head.contains(x, y)) {
      v = kSkin;
      if (g.left_eye.contains(x, y) || g.right_eye.contains(x, y)) v = kEye;
      if (g.mouth.contains(x, y)) v = kMouth;
    }
    acc(p) += v;
  });
  acc /= double(kSuper * kSuper);
  return acc.transpose().cast<float>();
}

double mouth_coverage(const SceneState& state, int height, int width) {
  const FaceGeometry g(state, height, width);
  double hits = 0;
  for_each_subsample(height, width, [&](int, double x, double y) { hits += g.mouth.contains(x, y) ? 1.0 : 0.0; });
  return hits / (kSuper * kSuper);
}

Eigen::MatrixXd audio_lift(std::uint64_t corpus_seed, int audio_dim) {
  NoiseSource rng(derive_seed(corpus_seed, kTagLift));
  Eigen::MatrixXd lift(audio_dim, 3);
  for (Eigen::Index j = 0; j < 3; ++j) {
    for (Eigen::Index i = 0; i < audio_dim; ++i) lift(i, j) = rng.normal() / std::sqrt(3.0);
  }
  return lift;
}

AudioStream synth_audio_features(const DriverSignal& driver, const Eigen::MatrixXd& lift, std::uint64_t noise_seed,
                                 double noise_std) {
  if (lift.rows() < 4 || lift.cols() != 3) throw std::invalid_argument("synth_audio_features: lift must be A x 3, A >= 4");
  const int T = driver.length();
  NoiseSource rng(derive_seed(noise_seed, kTagAudio));
  AudioStream a;
  a.features.resize(lift.rows(), T);
  for (int t = 0; t < T; ++t) {
    const Eigen::Vector3d window(driver.values[std::max(t - 1, 0)], driver.values[t],
                                 driver.values[std::min(t + 1, T - 1)]);
    Eigen::VectorXd f = lift * window;
    for (Eigen::Index i = 0; i < f.size(); ++i) f(i) += noise_std * rng.normal();
    a.features.col(t) = f.cast<float>();
  }
  return a;
}

AudioStream synth_audio_features(const DriverSignal& driver, std::uint64_t seed, int audio_dim) {
  if (audio_dim < 4) throw std::invalid_argument("synth_audio_features: audio_dim must be >= 4");
  return synth_audio_features(driver, audio_lift(seed, audio_dim), seed, 0.01);
}

SequenceSeeds sequence_seeds(std::uint64_t corpus_seed, int index) {
  const auto i = static_cast<std::uint64_t>(index);
  return {derive_seed(corpus_seed, kTagDriver, i), derive_seed(corpus_seed, kTagNuisance, i),
          derive_seed(corpus_seed, kTagAudio, i)};
}

SyntheticSequence synth_sequence(const SequenceSeeds& seeds, const Eigen::MatrixXd& lift, const SynthConfig& c) {
  SyntheticSequence s;
  s.driver = synth_driver(seeds.driver, c.length);
  s.blink = synth_blinks(seeds.nuisance, c.length, c.blink_rate, c.blink_duration);
  NoiseSource head(derive_seed(seeds.nuisance, kTagNuisance));
  const auto span = static_cast<std::uint64_t>(2 * c.max_head_offset + 1);
  s.dx = static_cast<int>(head.below(span)) - c.max_head_offset;
  s.dy = static_cast<int>(head.below(span)) - c.max_head_offset;
  s.audio = synth_audio_features(s.driver, lift, seeds.audio_noise, c.audio_noise);
  s.frames = FrameStream(c.length, c.height, c.width, 1);
  for (int t = 0; t < c.length; ++t) s.frames.frame(t) = render_frame(s.state(t), c.height, c.width);
  return s;
}

FaceRegions face_regions(int height, int width, int dx, int dy) {
  const Eigen::Index n = Eigen::Index{height} * width;
  FaceRegions r{Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(n, false),
                Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(n, false),
                Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(n, true)};
  const FaceGeometry g(SceneState{1.0, false, dx, dy}, height, width);
  const double margin = 1.0;
  for_each_subsample(height, width, [&](int p, double x, double y) {
    if (g.left_eye.contains(x, y) || g.right_eye.contains(x, y)) r.eyes(p) = true;
    if (g.mouth.contains(x, y)) r.mouth(p) = true;
    const Ellipse padded{g.head.cx, g.head.cy, g.head.rx + margin, g.head.ry + margin};
    if (padded.contains(x, y)) r.background(p) = false;
  });
  return r;
}

CorpusManifest generate_corpus(const SynthConfig& config, const std::filesystem::path& out_dir) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create corpus directory " + out_dir.string() + ": " + ec.message());

  CorpusManifest m;
  m.config = config;
  const auto data_path = out_dir / m.data_file;
  std::ofstream out(data_path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write corpus data: " + data_path.string());

  const Eigen::MatrixXd lift = audio_lift(config.seed, config.audio_dim);
  std::uint64_t offset = 0;
  for (int i = 0; i < config.num_sequences(); ++i) {
    const auto seeds = sequence_seeds(config.seed, i);
    const auto s = synth_sequence(seeds, lift, config);
    m.records.push_back({offset, seeds, s.dx, s.dy});

    std::vector<float> driver(s.driver.values.begin(), s.driver.values.end());
    std::vector<float> blink(s.blink.begin(), s.blink.end());
    write_tensor(out, u32_shape({config.length, config.height, config.width, 1}),
                 std::span<const float>(s.frames.data.data(), s.frames.data.size()));
    write_tensor(out, u32_shape({config.length, config.audio_dim}),
                 std::span<const float>(s.audio.features.data(), s.audio.features.size()));
    write_tensor(out, u32_shape({config.length}), driver);
    write_tensor(out, u32_shape({config.length}), blink);
    offset += sequence_record_size(config);
  }
  out.flush();
  if (!out) throw std::runtime_error("failed writing corpus data: " + data_path.string());
  write_manifest(m, out_dir / "corpus.json");
  return m;
}

std::filesystem::path manifest_path(const std::filesystem::path& corpus) {
  return std::filesystem::is_directory(corpus) ? corpus / "corpus.json" : corpus;
}

Corpus Corpus::load(const std::filesystem::path& path) {
  const auto mpath = manifest_path(path);
  const std::string context = "corpus " + mpath.string();
  std::ifstream in(mpath);
  if (!in) throw std::runtime_error("cannot open corpus manifest: " + mpath.string());

  Corpus corpus;
  auto& m = corpus.manifest_;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.value("kind", "") != "xmodal-corpus") throw CorruptFile(context + ": not a corpus manifest");
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != kCorpusVersion) {
      throw CorruptFile(context + ": unsupported corpus format version " + std::to_string(m.format_version));
    }
    m.config = j.at("config").get<SynthConfig>();
    m.config.validate();
    m.data_file = j.at("data_file").get<std::string>();
    for (const auto& r : j.at("records")) {
      m.records.push_back({r.at("offset").get<std::uint64_t>(),
                           {r.at("driver_seed").get<std::uint64_t>(), r.at("nuisance_seed").get<std::uint64_t>(),
                            r.at("audio_noise_seed").get<std::uint64_t>()},
                           r.at("head_dx").get<int>(),
                           r.at("head_dy").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(context + ": malformed manifest: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw CorruptFile(context + ": " + e.what());
  }

  const auto& c = m.config;
  if (static_cast<int>(m.records.size()) != c.num_sequences()) {
    throw CorruptFile(context + ": manifest lists " + std::to_string(m.records.size()) + " records, expected " +
                      std::to_string(c.num_sequences()));
  }
  const std::uint64_t rec_size = sequence_record_size(c);
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (i > 0 && m.records[i].offset <= m.records[i - 1].offset) {
      throw CorruptFile(context + ": record offsets are not strictly increasing");
    }
  }
  const auto data_path = mpath.parent_path() / m.data_file;
  std::error_code ec;
  const auto file_size = std::filesystem::file_size(data_path, ec);
  if (ec) throw std::runtime_error("cannot open corpus data: " + data_path.string());
  if (!m.records.empty() && file_size != m.records.back().offset + rec_size) {
    throw CorruptFile(context + ": data file size " + std::to_string(file_size) + " does not match the manifest");
  }

  std::ifstream data(data_path, std::ios::binary);
  if (!data) throw std::runtime_error("cannot open corpus data: " + data_path.string());
  const std::string dctx = "corpus data " + data_path.string();
  for (const auto& r : m.records) {
    data.seekg(static_cast<std::streamoff>(r.offset));
    const RawTensor frames = read_tensor(data, dctx);
    const RawTensor audio = read_tensor(data, dctx);
    const RawTensor driver = read_tensor(data, dctx);
    const RawTensor blink = read_tensor(data, dctx);
    if (frames.shape != u32_shape({c.length, c.height, c.width, 1}) || audio.shape != u32_shape({c.length, c.audio_dim}) ||
        driver.shape != u32_shape({c.length}) || blink.shape != u32_shape({c.length})) {
      throw CorruptFile(dctx + ": record at offset " + std::to_string(r.offset) + " has unexpected shapes");
    }
    SyntheticSequence s;
    s.frames = FrameStream(c.length, c.height, c.width, 1);
    s.frames.data = Eigen::Map<const Eigen::MatrixXf>(frames.data.data(), 1, frames.data.size());
    s.audio.features = Eigen::Map<const Eigen::MatrixXf>(audio.data.data(), c.audio_dim, c.length);
    s.driver.values.assign(driver.data.begin(), driver.data.end());
    for (float b : blink.data) s.blink.push_back(b != 0.0f ? 1 : 0);
    s.dx = r.dx;
    s.dy = r.dy;
    corpus.sequences_.push_back(std::move(s));
  }
  return corpus;
}

const SyntheticSequence& Corpus::at(int index) const {
  if (index < 0 || index >= size()) {
    throw std::out_of_range("corpus index " + std::to_string(index) + " out of range [0, " + std::to_string(size()) +
                            ")");
  }
  return sequences_[index];
}

const SyntheticSequence& Corpus::train(int i) const {
  if (i < 0 || i >= num_train()) throw std::out_of_range("training index " + std::to_string(i) + " out of range");
  return sequences_[i];
}

const SyntheticSequence& Corpus::test(int i) const {
  if (i < 0 || i >= num_test()) throw std::out_of_range("test index " + std::to_string(i) + " out of range");
  return sequences_[num_train() + i];
}

void write_frame_stream(std::ostream& out, const FrameStream& frames) {
  write_tensor(out, u32_shape({frames.length(), frames.height, frames.width, frames.channels}),
               std::span<const float>(frames.data.data(), frames.data.size()));
  if (!out) throw std::runtime_error("failed writing frame stream");
}

std::vector<FrameStream> read_frame_streams(const std::filesystem::path& path) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(path)) {
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".bin") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    files.push_back(path);
  }
  std::vector<FrameStream> out;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open stream file: " + f.string());
    const std::string context = "stream file " + f.string();
    while (in.peek() != std::char_traits<char>::eof()) {
      const RawTensor t = read_tensor(in, context);
      if (t.shape.size() != 4) throw CorruptFile(context + ": expected a rank-4 (T, H, W, C) record");
      FrameStream s(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]),
                    static_cast<int>(t.shape[3]));
      s.data = Eigen::Map<const Eigen::MatrixXf>(t.data.data(), s.channels, s.data.cols());
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace xmodal
