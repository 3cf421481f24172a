#include "xmodal/checkpoint.hpp"

#include <fstream>

#include "xmodal/config_io.hpp"
#include "xmodal/tensor_io.hpp"

namespace xmodal {

namespace {

constexpr const char* kMagic = "XMODAL-CHECKPOINT";

void write_named(std::ostream& out, const std::string& name, std::span<const std::uint32_t> shape,
                 std::span<const float> data) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_tensor(out, shape, data);
}

RawTensor read_named(std::istream& in, const std::string& expected, const std::string& context) {
  const std::uint32_t len = read_u32(in, context);
  if (len > 4096) throw CorruptFile(context + ": implausible tensor name length");
  std::string name(len, '\0');
  in.read(name.data(), len);
  if (in.gcount() != static_cast<std::streamsize>(len)) throw CorruptFile(context + ": unexpected end of file");
  if (name != expected) throw CorruptFile(context + ": expected tensor '" + expected + "', found '" + name + "'");
  return read_tensor(in, context + " [" + name + "]");
}

struct Header {
  nlohmann::json json;
  ModelConfig config;
};

Header read_header(std::istream& in, const std::string& context) {
  std::string magic;
  if (!std::getline(in, magic) || magic != kMagic) throw CorruptFile(context + ": not a checkpoint (bad magic)");
  std::string line;
  if (!std::getline(in, line)) throw CorruptFile(context + ": missing header");
  Header h;
  try {
    h.json = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(context + ": malformed header: " + e.what());
  }
  const int version = h.json.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw CorruptFile(context + ": unsupported checkpoint format version " + std::to_string(version) +
                      " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  try {
    h.config = h.json.at("config").get<ModelConfig>();
    h.config.validate();
  } catch (const std::exception& e) {
    throw CorruptFile(context + ": invalid model config: " + e.what());
  }
  return h;
}

}  // namespace

const Eigen::VectorXf* CheckpointExtras::find_state(const std::string& name) const {
  for (const auto& [n, v] : state) {
    if (n == name) return &v;
  }
  return nullptr;
}

template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& params, const std::filesystem::path& path,
                     const CheckpointExtras& extras) {
  const auto& layout = params.layout();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& s : layout.tensors()) tensors.push_back({{"name", s.name}, {"shape", {s.rows, s.cols}}});
  for (const auto& [name, v] : extras.state) tensors.push_back({{"name", name}, {"shape", {v.size()}}});
  const nlohmann::json header{{"format_version", kCheckpointVersion},
                              {"config", params.config()},
                              {"tensors", tensors},
                              {"metadata", extras.metadata}};

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  out << kMagic << '\n' << header.dump() << '\n';
  for (std::size_t i = 0; i < layout.tensors().size(); ++i) {
    const auto& s = layout.tensors()[i];
    const Eigen::MatrixXf t = params.tensor(i).template cast<float>();
    const std::uint32_t shape[] = {static_cast<std::uint32_t>(s.rows), static_cast<std::uint32_t>(s.cols)};
    write_named(out, s.name, shape, std::span<const float>(t.data(), t.size()));
  }
  for (const auto& [name, v] : extras.state) {
    const std::uint32_t shape[] = {static_cast<std::uint32_t>(v.size())};
    write_named(out, name, shape, std::span<const float>(v.data(), v.size()));
  }
  out.flush();
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const std::filesystem::path& path, CheckpointExtras* extras) {
  const std::string context = "checkpoint " + path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  const Header h = read_header(in, context);

  ModelParams<Scalar> params(h.config);
  const auto& specs = params.layout().tensors();
  const auto& listed = h.json.at("tensors");
  if (!listed.is_array() || listed.size() < specs.size()) throw CorruptFile(context + ": tensor list too short");

  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const RawTensor t = read_named(in, s.name, context);
    if (t.shape.size() != 2 || t.shape[0] != s.rows || t.shape[1] != s.cols) {
      throw CorruptFile(context + ": tensor '" + s.name + "' has the wrong shape for the stored config");
    }
    params.tensor(i) = Eigen::Map<const Eigen::MatrixXf>(t.data.data(), s.rows, s.cols).cast<Scalar>();
  }
  CheckpointExtras loaded;
  loaded.metadata = h.json.value("metadata", nlohmann::json::object());
  for (std::size_t i = specs.size(); i < listed.size(); ++i) {
    const std::string name = listed[i].at("name").get<std::string>();
    const RawTensor t = read_named(in, name, context);
    if (t.shape.size() != 1) throw CorruptFile(context + ": state tensor '" + name + "' must be 1-D");
    loaded.state.emplace_back(name, Eigen::Map<const Eigen::VectorXf>(t.data.data(), t.data.size()));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptFile(context + ": trailing bytes after last tensor");
  if (!params.all_finite()) throw CorruptFile(context + ": non-finite parameter values");
  if (extras != nullptr) *extras = std::move(loaded);
  return params;
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  return read_header(in, "checkpoint " + path.string()).config;
}

template void save_checkpoint<float>(const ModelParams<float>&, const std::filesystem::path&,
                                     const CheckpointExtras&);
template void save_checkpoint<double>(const ModelParams<double>&, const std::filesystem::path&,
                                      const CheckpointExtras&);
template ModelParams<float> load_checkpoint<float>(const std::filesystem::path&, CheckpointExtras*);
template ModelParams<double> load_checkpoint<double>(const std::filesystem::path&, CheckpointExtras*);

}  // namespace xmodal
