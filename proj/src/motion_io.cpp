#include "mdm/motion_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mdm/error.hpp"
#include "mdm/hash.hpp"

namespace mdm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "motion container I/O assumes a little-endian host");

constexpr std::size_t kPrefix = 16;

std::size_t align16(std::size_t n) { return (n + 15) & ~std::size_t{15}; }

json label_to_json(const ClipLabel& l) {
  return {{"action", l.action}, {"action_name", l.action_name}, {"captions", l.captions}};
}

ClipLabel label_from_json(const json& j) {
  return ClipLabel{j.at("action").get<int>(), j.value("action_name", std::string{}),
                   j.value("captions", std::vector<std::string>{})};
}

json header_base(const MotionFile& file) {
  json h;
  h["format"] = "mdm-motion";
  h["version"] = 1;
  h["skeleton"] = file.skeleton.to_json();
  h["layout"] = FeatureLayout(file.skeleton).to_json();
  h["fps"] = file.motion.fps;
  h["frames"] = file.motion.frames();
  if (file.label) h["labels"] = label_to_json(*file.label);
  if (file.stats) h["stats"] = file.stats->to_json();
  if (!file.meta.empty()) h["meta"] = file.meta;
  return h;
}

MotionFile from_header(const json& h) {
  MotionFile out;
  out.skeleton = Skeleton::from_json(h.at("skeleton"));
  out.motion.fps = h.value("fps", 20.0);
  out.motion.skeleton_ref = out.skeleton.fingerprint();
  if (h.contains("labels")) out.label = label_from_json(h.at("labels"));
  if (h.contains("stats")) out.stats = DatasetStats::from_json(h.at("stats"));
  if (h.contains("meta")) out.meta = h.at("meta");
  if (h.contains("layout") && !(FeatureLayout::from_json(h.at("layout")) == FeatureLayout(out.skeleton))) {
    throw FormatError("motion file: layout does not match skeleton");
  }
  return out;
}

void check_shape(const MotionFile& f) {
  const int F = FeatureLayout(f.skeleton).dim();
  if (f.motion.dim() != F) throw FormatError("motion file: feature width does not match skeleton layout");
  if (f.motion.frames() < 2) throw FormatError("motion file: motions need at least 2 frames");
  if (f.stats && f.stats->dim() != F) throw FormatError("motion file: stats width does not match layout");
}

}  // namespace

std::string encode_motion_file(const MotionFile& file) {
  check_shape(file);
  json h = header_base(file);
  const std::size_t data_bytes = static_cast<std::size_t>(file.motion.features.size()) * sizeof(float);
  std::size_t offset = 0;
  std::string header;
  // The offset is written inside the header, so iterate until it is stable.
  for (int it = 0; it < 4; ++it) {
    h["data"] = {{"dtype", "float32"},
                 {"byte_order", "little"},
                 {"shape", {file.motion.frames(), file.motion.dim()}},
                 {"offset", offset},
                 {"bytes", data_bytes}};
    header = h.dump();
    const std::size_t needed = align16(kPrefix + header.size());
    if (needed == offset) break;
    offset = needed;
  }
  std::string out(offset + data_bytes, '\0');
  std::memcpy(out.data(), kMotionMagic, 8);
  const std::uint64_t hlen = header.size();
  std::memcpy(out.data() + 8, &hlen, 8);
  std::memcpy(out.data() + kPrefix, header.data(), header.size());
  std::memcpy(out.data() + offset, file.motion.features.data(), data_bytes);
  return out;
}

void write_motion_file(const fs::path& path, const MotionFile& file) { write_text_file(path, encode_motion_file(file)); }

MotionFile decode_motion_file(const std::string& bytes) {
  if (!bytes.empty() && bytes.front() == '{') {
    json j;
    try {
      j = json::parse(bytes);
    } catch (const json::exception& e) {
      throw FormatError(std::string("motion json: ") + e.what());
    }
    MotionFile out = from_header(j);
    const auto rows = j.at("features").get<std::vector<std::vector<float>>>();
    if (rows.empty()) throw FormatError("motion json: no frames");
    out.motion.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != rows[0].size()) throw FormatError("motion json: ragged feature rows");
      for (std::size_t c = 0; c < rows[r].size(); ++c) out.motion.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
    check_shape(out);
    return out;
  }
  if (bytes.size() < kPrefix || std::memcmp(bytes.data(), kMotionMagic, 8) != 0) {
    throw FormatError("motion file: bad magic");
  }
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (kPrefix + hlen > bytes.size()) throw FormatError("motion file: truncated header");
  json h;
  try {
    h = json::parse(bytes.substr(kPrefix, hlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("motion file header: ") + e.what());
  }
  MotionFile out = from_header(h);
  const auto& d = h.at("data");
  if (d.value("dtype", "") != "float32" || d.value("byte_order", "") != "little") {
    throw FormatError("motion file: only little-endian float32 data is supported");
  }
  const auto shape = d.at("shape").get<std::vector<std::int64_t>>();
  const auto offset = d.at("offset").get<std::size_t>();
  const auto nbytes = d.at("bytes").get<std::size_t>();
  if (shape.size() != 2 || static_cast<std::size_t>(shape[0] * shape[1]) * sizeof(float) != nbytes) {
    throw FormatError("motion file: data shape and byte count disagree");
  }
  if (offset < kPrefix + hlen || offset + nbytes > bytes.size()) throw FormatError("motion file: data block out of bounds");
  out.motion.features.resize(shape[0], shape[1]);
  std::memcpy(out.motion.features.data(), bytes.data() + offset, nbytes);
  check_shape(out);
  return out;
}

MotionFile read_motion_file(const fs::path& path) { return decode_motion_file(read_text_file(path)); }

json motion_to_json(const MotionFile& file) {
  check_shape(file);
  json j = header_base(file);
  auto rows = json::array();
  for (int r = 0; r < file.motion.frames(); ++r) {
    std::vector<float> row(file.motion.features.row(r).data(), file.motion.features.row(r).data() + file.motion.dim());
    rows.push_back(std::move(row));
  }
  j["features"] = std::move(rows);
  return j;
}

void save_dataset(const fs::path& dir, const LabeledDataset& ds, const json& provenance) {
  ds.validate();
  fs::create_directories(dir / "clips");
  json index;
  index["format"] = "mdm-corpus";
  index["version"] = 1;
  index["provenance"] = provenance;
  index["skeleton"] = ds.skeleton.to_json();
  index["layout"] = ds.layout.to_json();
  index["fps"] = ds.fps;
  index["class_names"] = ds.class_names;
  index["stats"] = ds.stats.to_json();
  index["splits"] = {{"train", ds.train}, {"test", ds.test}};
  auto clips = json::array();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%05zu.motion", i);
    MotionFile mf{ds.motions[i], ds.skeleton, ds.labels[i], std::nullopt, json::object()};
    const std::string bytes = encode_motion_file(mf);
    write_text_file(dir / "clips" / name, bytes);
    clips.push_back({{"file", std::string("clips/") + name},
                     {"frames", ds.motions[i].frames()},
                     {"action", ds.labels[i].action},
                     {"hash", hash_hex(bytes)}});
  }
  index["clips"] = std::move(clips);
  write_text_file(dir / "index.json", index.dump(1) + "\n");
}

LabeledDataset load_dataset(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  if (!fs::exists(index_path)) throw FormatError("no corpus index at " + index_path.string());
  json index;
  try {
    index = json::parse(read_text_file(index_path));
  } catch (const json::exception& e) {
    throw FormatError(std::string("corpus index: ") + e.what());
  }
  LabeledDataset ds;
  ds.skeleton = Skeleton::from_json(index.at("skeleton"));
  ds.layout = FeatureLayout(ds.skeleton);
  ds.fps = index.value("fps", 20.0);
  ds.class_names = index.at("class_names").get<std::vector<std::string>>();
  ds.stats = DatasetStats::from_json(index.at("stats"));
  ds.train = index.at("splits").at("train").get<std::vector<int>>();
  ds.test = index.at("splits").at("test").get<std::vector<int>>();
  for (const auto& c : index.at("clips")) {
    MotionFile mf = read_motion_file(dir / c.at("file").get<std::string>());
    if (!(mf.skeleton == ds.skeleton)) throw FormatError("clip skeleton differs from corpus skeleton");
    ds.motions.push_back(std::move(mf.motion));
    ds.labels.push_back(mf.label.value_or(ClipLabel{c.value("action", 0), {}, {}}));
  }
  ds.validate();
  return ds;
}

std::string dataset_hash(const fs::path& dir) { return hash_file(dir / "index.json"); }

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace mdm
