#include "mdm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mdm/error.hpp"
#include "mdm/hash.hpp"

namespace mdm {

namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr const char* kCheckpointMagic = "MDMCKPT1";

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace

const torch::Tensor& TensorArchive::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("archive has no tensor '" + name + "'");
}

bool TensorArchive::has(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

void write_archive(const std::filesystem::path& path, const std::string& magic, const TensorArchive& archive) {
  if (magic.size() != 8) throw ValidationError("archive magic must be 8 bytes");
  nlohmann::json header = archive.header;
  nlohmann::json list = nlohmann::json::array();
  std::string data;
  for (const auto& [name, t] : archive.tensors) {
    const auto c = t.detach().to(torch::kFloat32).contiguous();
    const auto bytes = static_cast<std::size_t>(c.numel()) * sizeof(float);
    list.push_back({{"name", name}, {"shape", c.sizes().vec()}, {"offset", data.size()}, {"bytes", bytes}});
    data.append(reinterpret_cast<const char*>(c.data_ptr<float>()), bytes);
  }
  header["tensors"] = list;
  header["dtype"] = "f32";
  header["byte_order"] = "little";
  const std::string text = header.dump();
  std::string out = magic;
  put_u64(out, text.size());
  out += text;
  out += data;
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path, const std::string& magic) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (in.size() < 16 || in.compare(0, 8, magic) != 0) {
    throw FormatError(path.string() + ": not a " + magic + " file");
  }
  const auto len = get_u64(in, 8);
  if (16 + len > in.size()) throw FormatError(path.string() + ": truncated header");
  TensorArchive a;
  try {
    a.header = nlohmann::json::parse(in.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  const std::size_t base = 16 + len;
  for (const auto& e : a.header.at("tensors")) {
    const auto shape = e.at("shape").get<std::vector<std::int64_t>>();
    const auto off = e.at("offset").get<std::size_t>();
    const auto bytes = e.at("bytes").get<std::size_t>();
    std::int64_t numel = 1;
    for (auto s : shape) numel *= s;
    if (static_cast<std::size_t>(numel) * sizeof(float) != bytes || base + off + bytes > in.size()) {
      throw FormatError(path.string() + ": tensor '" + e.at("name").get<std::string>() + "' is truncated");
    }
    auto t = torch::empty(shape, torch::kFloat32);
    std::memcpy(t.data_ptr<float>(), in.data() + base + off, bytes);
    a.tensors.emplace_back(e.at("name").get<std::string>(), t);
  }
  a.header.erase("tensors");
  return a;
}

std::string config_hash(const DenoiserConfig& config) { return hash_hex(config.to_json().dump()); }

void save_checkpoint(const std::filesystem::path& path, MotionDenoiser& model, const CheckpointMeta& meta,
                     const AdamState* optimizer) {
  TensorArchive a;
  const auto& cfg = model->config();
  a.header = {{"format", "mdm-checkpoint"},
              {"version", 1},
              {"config", cfg.to_json()},
              {"config_hash", config_hash(cfg)},
              {"step", meta.step},
              {"skeleton", meta.skeleton.to_json()},
              {"layout", meta.layout.to_json()},
              {"fps", meta.fps},
              {"class_names", meta.class_names},
              {"stats", meta.stats.to_json()},
              {"corpus_hash", meta.corpus_hash},
              {"train_config", meta.train_config},
              {"metrics", meta.metrics}};
  for (auto& [name, p] : named_parameters(*model)) a.tensors.emplace_back("model/" + name, p);
  if (optimizer) {
    a.header["optimizer_step"] = optimizer->step;
    for (const auto& [name, t] : optimizer->m) a.tensors.emplace_back("optim/m/" + name, t);
    for (const auto& [name, t] : optimizer->v) a.tensors.emplace_back("optim/v/" + name, t);
  }
  write_archive(path, kCheckpointMagic, a);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, std::shared_ptr<const TextEmbedder> text,
                                 const DenoiserConfig* expected) {
  const TensorArchive a = read_archive(path, kCheckpointMagic);
  LoadedCheckpoint out;
  try {
    out.config = DenoiserConfig::from_json(a.header.at("config"));
    out.config_hash = a.header.at("config_hash").get<std::string>();
    if (out.config_hash != config_hash(out.config)) throw FormatError(path.string() + ": config hash mismatch");
    if (expected && !(*expected == out.config)) {
      throw FormatError(path.string() + ": stored config " + out.config.to_json().dump() +
                        " differs from expected " + expected->to_json().dump());
    }
    auto& m = out.meta;
    m.step = a.header.at("step").get<std::int64_t>();
    m.skeleton = Skeleton::from_json(a.header.at("skeleton"));
    m.layout = FeatureLayout::from_json(a.header.at("layout"));
    m.fps = a.header.at("fps").get<double>();
    m.class_names = a.header.at("class_names").get<std::vector<std::string>>();
    m.stats = DatasetStats::from_json(a.header.at("stats"));
    m.corpus_hash = a.header.at("corpus_hash").get<std::string>();
    m.train_config = a.header.at("train_config");
    m.metrics = a.header.at("metrics");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad checkpoint header: " + e.what());
  }
  if (out.meta.layout.dim() != out.config.feature_dim || out.meta.stats.dim() != out.config.feature_dim) {
    throw FormatError(path.string() + ": layout/stats width disagrees with the model feature_dim");
  }

  out.model = MotionDenoiser(out.config, std::move(text));
  torch::NoGradGuard no_grad;
  const auto params = named_parameters(*out.model);
  std::size_t model_tensors = 0;
  for (const auto& [name, t] : a.tensors) model_tensors += name.rfind("model/", 0) == 0;
  if (model_tensors != params.size()) {
    throw FormatError(path.string() + ": checkpoint has " + std::to_string(model_tensors) +
                      " parameters, config implies " + std::to_string(params.size()));
  }
  for (const auto& [name, p] : params) {
    const auto& t = a.get("model/" + name);
    if (!t.sizes().equals(p.sizes())) throw FormatError(path.string() + ": shape mismatch for " + name);
    p.copy_(t);
  }
  if (a.header.contains("optimizer_step")) {
    AdamState s;
    s.step = a.header.at("optimizer_step").get<std::int64_t>();
    for (const auto& [name, p] : params) {
      s.m.emplace_back(name, a.get("optim/m/" + name));
      s.v.emplace_back(name, a.get("optim/v/" + name));
    }
    out.optimizer = std::move(s);
  }
  out.model->eval();
  return out;
}

}  // namespace mdm
