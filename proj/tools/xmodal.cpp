// xmodal: corpus synthesis, training, generation and evaluation.
//
// Exit codes: 0 success, 1 check failed, 2 usage or input error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "xmodal/checkpoint.hpp"
#include "xmodal/config_io.hpp"
#include "xmodal/evaluation.hpp"
#include "xmodal/synth.hpp"
#include "xmodal/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xmodal;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kInputError = 2;

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

json read_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file: " + path);
  try {
    auto j = json::parse(in);
    if (!j.is_object()) throw InputError("config file must hold a JSON object: " + path);
    for (const auto& [key, value] : j.items()) {
      if (key != "model" && key != "train" && key != "corpus" && key != "eval") {
        throw InputError("config file " + path + ": unknown section '" + key + "'");
      }
    }
    return j;
  } catch (const json::exception& e) {
    throw InputError("config file " + path + ": " + e.what());
  }
}

// Flag, then config file, then XMODAL_SEED, then 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const json& section) {
  if (flag) return *flag;
  for (const char* key : {"seed", "rng_seed"}) {
    if (section.contains(key)) return section.at(key).get<std::uint64_t>();
  }
  if (const char* env = std::getenv("XMODAL_SEED"); env != nullptr && *env != '\0') {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::strlen(env)) return v;
    } catch (const std::exception&) {
    }
    throw InputError(std::string("XMODAL_SEED is not an unsigned integer: ") + env);
  }
  return 0;
}

void echo_config(const fs::path& dir, const json& run) {
  fs::create_directories(dir);
  std::ofstream out(dir / "run_config.json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + (dir / "run_config.json").string());
  out << run.dump(2) << '\n';
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw InputError(std::string(what) + " not found: " + path);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out, config;
  std::optional<std::uint64_t> seed;
  std::optional<int> num_train, num_test, length, height, width, audio_dim;
};

int cmd_synth_data(const SynthArgs& a) {
  const json file = read_config_file(a.config);
  SynthConfig c = file.value("corpus", json::object()).get<SynthConfig>();
  c.seed = resolve_seed(a.seed, file.value("corpus", json::object()));
  if (a.num_train) c.num_train = *a.num_train;
  if (a.num_test) c.num_test = *a.num_test;
  if (a.length) c.length = *a.length;
  if (a.height) c.height = *a.height;
  if (a.width) c.width = *a.width;
  if (a.audio_dim) c.audio_dim = *a.audio_dim;
  c.validate();
  echo_config(a.out, {{"command", "synth-data"}, {"corpus", c}});
  const auto m = generate_corpus(c, a.out);
  std::cout << "wrote " << m.records.size() << " sequences (" << c.num_train << " train, " << c.num_test
            << " test) of " << c.length << " frames " << c.height << "x" << c.width << " to " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus, out, config, resume;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_steps, batch_size, eval_every, precision, num_validation;
  std::optional<double> lr, beta;
  std::optional<std::string> optimizer;
  int log_every = 1;
};

template <typename Scalar>
TrainReport run_training(const ModelConfig& mc, const TrainConfig& tc, std::span<const SequenceRef> data,
                         TrainOptions options) {
  return train<Scalar>(mc, tc, data, options).report;
}

int cmd_train(const TrainArgs& a) {
  const json file = read_config_file(a.config);
  require_file(manifest_path(a.corpus).string(), "corpus manifest");
  const Corpus corpus = Corpus::load(a.corpus);
  const auto& cc = corpus.manifest().config;

  ModelConfig mc = file.value("model", json::object()).get<ModelConfig>();
  mc.height = cc.height;
  mc.width = cc.width;
  mc.channels = 1;
  mc.audio_dim = cc.audio_dim;
  if (a.beta) mc.beta = *a.beta;

  const json train_section = file.value("train", json::object());
  TrainConfig tc = train_section.get<TrainConfig>();
  tc.rng_seed = resolve_seed(a.seed, train_section);
  if (a.max_steps) tc.max_steps = *a.max_steps;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.eval_every) tc.eval_every = *a.eval_every;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.optimizer) {
    json j = tc;
    j["optimizer"] = *a.optimizer;
    tc = j.get<TrainConfig>();
  }
  if (a.precision) {
    if (*a.precision != 32 && *a.precision != 64) throw InputError("--precision must be 32 or 64");
    tc.precision = *a.precision == 32 ? Precision::f32 : Precision::f64;
  }

  CheckpointExtras resume_extras;
  TrainOptions options;
  if (!a.resume.empty()) {
    require_file(a.resume, "checkpoint");
    auto params = load_checkpoint<float>(a.resume, &resume_extras);
    if (!(params.config() == mc)) throw InputError("resume checkpoint was trained with a different model config");
    options.initial_params = std::move(params);
    options.resume = &resume_extras;
  }
  mc.validate();
  tc.validate();

  std::vector<SequenceRef> train_refs, val_refs;
  for (int i = 0; i < corpus.num_train(); ++i) train_refs.push_back({&corpus.train(i).frames, &corpus.train(i).audio});
  const int num_val = std::min(a.num_validation.value_or(16), corpus.num_test());
  for (int i = 0; i < num_val; ++i) val_refs.push_back({&corpus.test(i).frames, &corpus.test(i).audio});

  const fs::path out(a.out);
  json run = {{"command", "train"},
              {"corpus", corpus.manifest().config},
              {"corpus_path", a.corpus},
              {"model", mc},
              {"train", tc},
              {"num_validation", num_val},
              {"resume", a.resume}};
  echo_config(out, run);

  const auto log_path = out / "train_log.jsonl";
  std::ofstream log(log_path, a.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  options.log = &log;
  options.log_every = a.log_every;
  options.validation = val_refs;
  options.checkpoint_path = (out / "checkpoint.bin").string();

  const TrainReport report = tc.precision == Precision::f32
                                 ? run_training<float>(mc, tc, train_refs, options)
                                 : run_training<double>(mc, tc, train_refs, options);
  json summary = {{"steps", report.steps.size()},
                  {"wall_seconds", report.wall_seconds},
                  {"checkpoint", report.checkpoint_path},
                  {"eval_steps", report.eval_steps},
                  {"validation_kl", report.eval_kl}};
  if (!report.total.empty()) {
    summary["final_total"] = report.total.back();
    summary["final_recon"] = report.recon.back();
    summary["final_kl"] = report.kl.back();
  }
  write_json(out / "train_report.json", summary);
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint, corpus, out;
  int sequence_index = 0;
  int num_samples = 1;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_file(manifest_path(a.corpus).string(), "corpus manifest");
  if (a.num_samples < 1) throw InputError("--num-samples must be >= 1");
  const auto params = load_checkpoint<float>(a.checkpoint);
  const Corpus corpus = Corpus::load(a.corpus);
  const auto& s = corpus.at(a.sequence_index);
  check_pair(s.frames, s.audio, params.config());
  const std::uint64_t seed = resolve_seed(a.seed, json::object());
  const auto seeds = sample_seeds(seed, a.num_samples);

  const fs::path out(a.out);
  echo_config(out, {{"command", "generate"},
                    {"checkpoint", a.checkpoint},
                    {"corpus", a.corpus},
                    {"sequence_index", a.sequence_index},
                    {"num_samples", a.num_samples},
                    {"seed", seed},
                    {"model", params.config()}});

  const auto g = generate(Eigen::MatrixXf(s.frames.frame(0)), s.audio, params, seeds, &s.frames);
  std::ofstream samples(out / "samples.bin", std::ios::binary | std::ios::trunc);
  if (!samples) throw std::runtime_error("cannot write " + (out / "samples.bin").string());
  for (const auto& f : g.samples) write_frame_stream(samples, f);
  samples.close();

  std::ofstream kl(out / "kl.jsonl", std::ios::trunc);
  for (std::size_t t = 0; t < g.per_step_kl.size(); ++t) kl << json{{"t", t}, {"kl", g.per_step_kl[t]}}.dump() << '\n';

  json summary = {{"num_samples", a.num_samples}, {"length", s.frames.length()}, {"samples", (out / "samples.bin").string()}};
  if (g.samples.size() >= 2) summary["diversity"] = diversity_score(g.samples);
  std::cout << summary.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  std::string checkpoint, corpus, out;
  int num_sequences = 256;
  int num_samples = 5;
  std::optional<std::uint64_t> seed;
};

int cmd_evaluate(const EvaluateArgs& a) {
  require_file(a.checkpoint, "checkpoint");
  require_file(manifest_path(a.corpus).string(), "corpus manifest");
  const Corpus corpus = Corpus::load(a.corpus);
  EvalConfig ec;
  ec.num_sequences = a.num_sequences;
  ec.num_samples = a.num_samples;
  ec.seed = resolve_seed(a.seed, json::object());
  const EvalReport r = evaluate_model(a.checkpoint, corpus, ec);
  json report = r;
  report["checkpoint"] = a.checkpoint;
  if (!a.out.empty()) {
    const fs::path out(a.out);
    echo_config(out, {{"command", "evaluate"}, {"checkpoint", a.checkpoint}, {"corpus", a.corpus}, {"eval", r.config}});
    write_json(out / "report.json", report);
    std::ofstream per(out / "per_sequence.jsonl", std::ios::trunc);
    write_per_sequence(per, r);
  }
  std::cout << report.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string config;
  double epsilon = 1e-5;
  int num_coordinates = 200;
  double threshold = 1e-4;
  int length = 3;
  std::optional<std::uint64_t> seed;
};

ModelConfig gradcheck_model() {
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

int cmd_gradcheck(const GradcheckArgs& a) {
  const json file = read_config_file(a.config);
  ModelConfig mc = gradcheck_model();
  if (file.contains("model")) from_json(file.at("model"), mc);
  mc.validate();
  const std::uint64_t seed = resolve_seed(a.seed, json::object());
  if (a.length < 1) throw InputError("--length must be >= 1");

  NoiseSource rng(derive_seed(seed, 0x5a));
  FrameStream frames(a.length, mc.height, mc.width, mc.channels);
  for (Eigen::Index i = 0; i < frames.data.size(); ++i) frames.data.data()[i] = static_cast<float>(rng.uniform());
  AudioStream audio;
  audio.features = rng.normal_matrix<float>(mc.audio_dim, a.length);

  const auto r = finite_difference_gradcheck(mc, {&frames, &audio}, a.epsilon, a.num_coordinates, seed);
  json groups = json::object();
  for (const auto g : kAllParamGroups) groups[to_string(g)] = r.max_relative_error_in(g);
  const bool pass = r.max_relative_error < a.threshold;
  std::cout << json{{"max_relative_error", r.max_relative_error},
                    {"threshold", a.threshold},
                    {"num_coordinates", r.coordinates.size()},
                    {"per_group", groups},
                    {"pass", pass}}
                   .dump(2)
            << "\n";
  return pass ? kOk : kCheckFailed;
}

// ---------------------------------------------------------------------------

int cmd_diversity(const std::string& input) {
  require_file(input, "stream input");
  const auto streams = read_frame_streams(input);
  if (streams.size() < 2) throw InputError("diversity needs at least two streams, found " + std::to_string(streams.size()));
  const double d = diversity_score(streams);
  std::cout << json{{"num_streams", streams.size()}, {"diversity", d}}.dump(2) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal recurrent VAE: synthesize, train, generate, evaluate"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-data", "Write a synthetic paired-modality corpus");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--seed", sa.seed, "Corpus seed");
  synth->add_option("--config", sa.config, "JSON config file (\"corpus\" section)");
  synth->add_option("--num-train", sa.num_train);
  synth->add_option("--num-test", sa.num_test);
  synth->add_option("--length,-T", sa.length, "Frames per sequence");
  synth->add_option("--height", sa.height);
  synth->add_option("--width", sa.width);
  synth->add_option("--audio-dim", sa.audio_dim);

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on a corpus");
  tr->add_option("--corpus", ta.corpus, "Corpus directory")->required();
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_option("--config", ta.config, "JSON config file (\"model\", \"train\" sections)");
  tr->add_option("--seed", ta.seed, "Training seed");
  tr->add_option("--max-steps", ta.max_steps, "Total optimizer steps");
  tr->add_option("--batch-size", ta.batch_size);
  tr->add_option("--lr", ta.lr, "Learning rate");
  tr->add_option("--beta", ta.beta, "Weight of the posterior alignment term");
  tr->add_option("--optimizer", ta.optimizer)->check(CLI::IsMember({"sgd", "adam"}));
  tr->add_option("--precision", ta.precision, "32 or 64");
  tr->add_option("--eval-every", ta.eval_every, "Validation KL interval in steps");
  tr->add_option("--num-validation", ta.num_validation, "Test sequences used for validation KL");
  tr->add_option("--log-every", ta.log_every, "Log interval in steps");
  tr->add_option("--resume", ta.resume, "Checkpoint written by an earlier train run");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "Sample frame streams for one corpus sequence");
  gen->add_option("--checkpoint", ga.checkpoint)->required();
  gen->add_option("--corpus", ga.corpus)->required();
  gen->add_option("--sequence-index", ga.sequence_index, "Corpus index")->required();
  gen->add_option("--num-samples,-K", ga.num_samples);
  gen->add_option("--seed", ga.seed);
  gen->add_option("--out", ga.out)->required();

  EvaluateArgs ea;
  auto* ev = app.add_subcommand("evaluate", "SSIM, PSNR and diversity on the test split");
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--corpus", ea.corpus)->required();
  ev->add_option("--num-sequences", ea.num_sequences);
  ev->add_option("--num-samples", ea.num_samples);
  ev->add_option("--seed", ea.seed);
  ev->add_option("--out", ea.out, "Directory for report.json and per_sequence.jsonl");

  GradcheckArgs ca;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the analytic gradient");
  gc->add_option("--config", ca.config, "JSON config file (\"model\" section)");
  gc->add_option("--epsilon", ca.epsilon);
  gc->add_option("--num-coordinates", ca.num_coordinates);
  gc->add_option("--threshold", ca.threshold);
  gc->add_option("--length,-T", ca.length);
  gc->add_option("--seed", ca.seed);

  std::string div_input;
  auto* dv = app.add_subcommand("diversity", "Diversity score of a set of frame streams");
  dv->add_option("--input", div_input, "Stream file or directory of *.bin stream files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInputError;
  }

  try {
    if (*synth) return cmd_synth_data(sa);
    if (*tr) return cmd_train(ta);
    if (*gen) return cmd_generate(ga);
    if (*ev) return cmd_evaluate(ea);
    if (*gc) return cmd_gradcheck(ca);
    if (*dv) return cmd_diversity(div_input);
  } catch (const NumericalFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const json::exception& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kInputError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInputError;
  }
  return kInputError;
}
