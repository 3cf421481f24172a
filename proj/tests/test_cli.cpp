#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "json.hpp"
#include "xmodal/checkpoint.hpp"
#include "xmodal/metrics.hpp"
#include "xmodal/synth.hpp"

using namespace xmodal;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string output;  // stdout and stderr
};

Run cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " XMODAL_CLI_PATH " " + args + " 2>&1";
  FILE* p = ::popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::string out;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
  const int status = ::pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream in(p);
  for (std::string line; std::getline(in, line);) out.push_back(json::parse(line));
  return out;
}

// One small corpus and one short training run shared by the cases below.
struct Workspace {
  fs::path root = fs::temp_directory_path() / ("xmodal_cli_" + std::to_string(::getpid()));
  fs::path corpus = root / "corpus";
  fs::path run = root / "run";
  fs::path config = root / "small.json";

  Workspace() {
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(config) << R"({"model": {"latent_dim": 2, "frame_hidden_dim": 8, "audio_hidden_dim": 8,
      "recurrent_hidden_dim": 8, "encoder_channels": [2, 4, 4], "decoder_output_channels": 2, "beta": 0.5},
      "train": {"batch_size": 2, "learning_rate": 0.01}})";
    REQUIRE(cli("synth-data --out " + corpus.string() +
                   " --seed 3 --num-train 6 --num-test 5 -T 4 --height 16 --width 16")
                .code == 0);
    REQUIRE(cli("train --corpus " + corpus.string() + " --out " + run.string() + " --config " + config.string() +
                   " --seed 1 --max-steps 10 --eval-every 5 --num-validation 2")
                .code == 0);
  }
  ~Workspace() { fs::remove_all(root); }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("synth-data") {
  auto& w = workspace();
  const auto again = w.root / "again";
  CHECK(cli("synth-data --out " + again.string() + " --seed 3 --num-train 6 --num-test 5 -T 4 --height 16 --width 16")
            .code == 0);
  CHECK(slurp(again / "corpus.bin") == slurp(w.corpus / "corpus.bin"));
  CHECK(slurp(again / "corpus.json") == slurp(w.corpus / "corpus.json"));
  CHECK(fs::exists(w.corpus / "run_config.json"));

  SUBCASE("seed from the environment when no flag is given") {
    const auto env = w.root / "env";
    CHECK(cli("synth-data --out " + env.string() + " --num-train 6 --num-test 5 -T 4 --height 16 --width 16",
                 "XMODAL_SEED=3")
              .code == 0);
    CHECK(slurp(env / "corpus.bin") == slurp(w.corpus / "corpus.bin"));
  }
  SUBCASE("default flags") {
    const auto full = w.root / "full";
    CHECK(cli("synth-data --out " + full.string() + " --seed 0").code == 0);
    const auto m = read_json(full / "corpus.json");
    CHECK(m["config"]["num_train"] == 500);
    CHECK(m["config"]["num_test"] == 64);
    CHECK(m["records"].size() == 564);
  }
  SUBCASE("T=1 is a usage error") {
    const auto r = cli("synth-data --out " + (w.root / "bad").string() + " -T 1");
    CHECK(r.code == 2);
    CHECK(r.output.find("error") != std::string::npos);
  }
  SUBCASE("missing required flag") { CHECK(cli("synth-data").code == 2); }
}

TEST_CASE("train") {
  auto& w = workspace();
  CHECK(fs::exists(w.run / "checkpoint.bin"));
  CHECK(fs::exists(w.run / "run_config.json"));
  const auto log = read_jsonl(w.run / "train_log.jsonl");
  REQUIRE(log.size() == 10);
  CHECK(log.front()["step"] == 0);
  CHECK(log.back()["step"] == 9);
  const auto report = read_json(w.run / "train_report.json");
  CHECK(report["validation_kl"].size() == 3);
  const auto cfg = read_json(w.run / "run_config.json");
  CHECK(cfg["train"]["rng_seed"] == 1);
  CHECK(cfg["model"]["latent_dim"] == 2);

  SUBCASE("zero learning rate keeps the initial parameters") {
    const auto init = w.root / "init", still = w.root / "still";
    const std::string base = "train --corpus " + w.corpus.string() + " --config " + w.config.string() + " --seed 4";
    REQUIRE(cli(base + " --out " + init.string() + " --max-steps 0").code == 0);
    REQUIRE(cli(base + " --out " + still.string() + " --lr 0 --max-steps 1").code == 0);
    CHECK(load_checkpoint<float>(init / "checkpoint.bin").values() ==
          load_checkpoint<float>(still / "checkpoint.bin").values());
  }
  SUBCASE("a resumed run continues the loss series") {
    const auto part = w.root / "part";
    const std::string base = "train --corpus " + w.corpus.string() + " --config " + w.config.string() +
                             " --seed 1 --eval-every 5 --num-validation 2 --out " + part.string();
    REQUIRE(cli(base + " --max-steps 4").code == 0);
    REQUIRE(cli(base + " --max-steps 10 --resume " + (part / "checkpoint.bin").string()).code == 0);
    const auto resumed = read_jsonl(part / "train_log.jsonl");
    REQUIRE(resumed.size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(resumed[i]["step"] == log[i]["step"]);
      CHECK(resumed[i]["total"] == log[i]["total"]);
    }
    CHECK(load_checkpoint<float>(part / "checkpoint.bin").values() ==
          load_checkpoint<float>(w.run / "checkpoint.bin").values());
  }
  SUBCASE("repeat run gives an identical checkpoint") {
    const auto twin = w.root / "twin";
    REQUIRE(cli("train --corpus " + w.corpus.string() + " --out " + twin.string() + " --config " +
                   w.config.string() + " --seed 1 --max-steps 10 --eval-every 5 --num-validation 2")
                .code == 0);
    CHECK(slurp(twin / "checkpoint.bin") == slurp(w.run / "checkpoint.bin"));
  }
  SUBCASE("unknown config key") {
    const auto bad = w.root / "bad.json";
    std::ofstream(bad) << R"({"model": {"latnet_dim": 2}})";
    const auto r = cli("train --corpus " + w.corpus.string() + " --out " + (w.root / "x").string() +
                          " --config " + bad.string());
    CHECK(r.code == 2);
    CHECK(r.output.find("latnet_dim") != std::string::npos);
  }
}

TEST_CASE("generate") {
  auto& w = workspace();
  const std::string base = "generate --checkpoint " + (w.run / "checkpoint.bin").string() + " --corpus " +
                           w.corpus.string() + " --sequence-index 7 --seed 2";
  const auto a = w.root / "gen_a", b = w.root / "gen_b", k3 = w.root / "gen_k3";
  REQUIRE(cli(base + " -K 1 --out " + a.string()).code == 0);
  REQUIRE(cli(base + " -K 1 --out " + b.string()).code == 0);
  CHECK(slurp(a / "samples.bin") == slurp(b / "samples.bin"));
  CHECK(read_jsonl(a / "kl.jsonl").size() == 4);

  REQUIRE(cli(base + " -K 3 --out " + k3.string()).code == 0);
  const auto streams = read_frame_streams(k3 / "samples.bin");
  REQUIRE(streams.size() == 3);
  CHECK(streams[0].length() == 4);
  CHECK(diversity_score(streams) > 0.0);

  SUBCASE("missing checkpoint") {
    const auto r = cli("generate --checkpoint " + (w.root / "nope.bin").string() + " --corpus " +
                          w.corpus.string() + " --sequence-index 0 --out " + (w.root / "g").string());
    CHECK(r.code == 2);
    CHECK(r.output.find("nope.bin") != std::string::npos);
  }
  SUBCASE("sequence index out of range") {
    CHECK(cli(base + " --sequence-index 99 --out " + (w.root / "g").string()).code == 2);
  }
}

TEST_CASE("evaluate") {
  auto& w = workspace();
  const auto out = w.root / "eval";
  const auto r = cli("evaluate --checkpoint " + (w.run / "checkpoint.bin").string() + " --corpus " +
                        w.corpus.string() + " --num-sequences 4 --num-samples 2 --seed 0 --out " + out.string());
  REQUIRE(r.code == 0);
  const auto report = read_json(out / "report.json");
  for (const char* key : {"ssim_mean", "ssim_std", "psnr_mean", "psnr_std", "diversity", "num_sequences", "config"}) {
    CHECK(report.contains(key));
  }
  CHECK(report["num_sequences"] == 4);
  CHECK(read_jsonl(out / "per_sequence.jsonl").size() == 4);
  const auto again = w.root / "eval2";
  cli("evaluate --checkpoint " + (w.run / "checkpoint.bin").string() + " --corpus " + w.corpus.string() +
         " --num-sequences 4 --num-samples 2 --seed 0 --out " + again.string());
  CHECK(slurp(again / "report.json") == slurp(out / "report.json"));
}

TEST_CASE("gradcheck") {
  const auto r = cli("gradcheck --num-coordinates 60");
  CHECK(r.code == 0);
  CHECK(r.output.find("max_relative_error") != std::string::npos);
  CHECK(cli("gradcheck --num-coordinates 20 --threshold 1e-300").code == 1);
  CHECK(cli("gradcheck --epsilon -1").code == 2);
}

TEST_CASE("diversity") {
  auto& w = workspace();
  const auto dir = w.root / "same";
  fs::create_directories(dir);
  FrameStream s(3, 16, 16, 1);
  s.data.setConstant(0.3f);
  for (const char* name : {"a.bin", "b.bin"}) {
    std::ofstream out(dir / name, std::ios::binary);
    write_frame_stream(out, s);
  }
  const auto r = cli("diversity --input " + dir.string());
  CHECK(r.code == 0);
  const auto j = json::parse(r.output);
  CHECK(j["diversity"] == 0.0);
  CHECK(j["num_streams"] == 2);
  CHECK(cli("diversity --input " + (w.root / "absent").string()).code == 2);
}
