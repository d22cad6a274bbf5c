#include "puir/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace puir::io {

namespace {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

void check_length(const fs::path& path, std::uintmax_t expected) {
  if (!fs::exists(path)) throw FormatError("missing file '" + path.string() + "'");
  const auto actual = fs::file_size(path);
  if (actual != expected) {
    throw FormatError("length mismatch for '" + path.string() + "': expected " +
                      std::to_string(expected) + " bytes, found " + std::to_string(actual));
  }
}

template <class T>
T field(const json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw FormatError(where + "." + key + ": missing field");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(where + "." + key + ": " + e.what());
  }
}

json lut_to_json(const std::map<int, double>& lut) {
  json j = json::object();
  for (const auto& [k, v] : lut) j[std::to_string(k)] = v;
  return j;
}

std::map<int, double> lut_from_json(const json& j, const std::string& where) {
  if (!j.is_object()) throw FormatError(where + ": expected object");
  std::map<int, double> lut;
  for (const auto& [k, v] : j.items()) {
    try {
      lut[std::stoi(k)] = v.get<double>();
    } catch (const std::exception&) {
      throw FormatError(where + "." + k + ": bad lut entry");
    }
  }
  return lut;
}

}  // namespace

void write_volume(const Volume& v, const fs::path& path) {
  std::string bytes;
  bytes.reserve(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw std::invalid_argument("write_volume: non-finite value at index " + std::to_string(i));
    }
    put_le(bytes, std::bit_cast<std::uint32_t>(v[i]));
  }
  write_file(path, bytes);
}

Volume read_volume(const fs::path& path, Shape3 shape) {
  check_length(path, shape.voxels() * 4);
  const std::string bytes = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  Volume v(shape);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
  return v;
}

void write_labels(const LabelVolume& v, const fs::path& path) {
  write_file(path, std::string(v.data().begin(), v.data().end()));
}

LabelVolume read_labels(const fs::path& path, Shape3 shape) {
  check_length(path, shape.voxels());
  const std::string bytes = read_file(path);
  return LabelVolume(shape, std::vector<std::uint8_t>(bytes.begin(), bytes.end()));
}

std::vector<std::string> DatasetManifest::modality_ids() const {
  std::vector<std::string> ids;
  for (const auto& m : modalities) ids.push_back(m.modality_id);
  return ids;
}

std::vector<std::size_t> DatasetManifest::indices(phantom::Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < individuals.size(); ++i) {
    if (individuals[i].split == split) out.push_back(i);
  }
  return out;
}

json rendering_map_to_json(const phantom::RenderingMap& m) {
  return {{"id", m.modality_id},
          {"kind", phantom::to_string(m.kind)},
          {"map_params",
           {{"tissue_lut", lut_to_json(m.tissue_lut)},
            {"functional_uptake", lut_to_json(m.functional_uptake)},
            {"contrast_gamma", m.contrast_gamma},
            {"smoothing_sigma", m.smoothing_sigma},
            {"noise_sigma", m.noise_sigma}}}};
}

phantom::RenderingMap rendering_map_from_json(const json& j, const std::string& where) {
  phantom::RenderingMap m;
  m.modality_id = field<std::string>(j, "id", where);
  try {
    m.kind = phantom::modality_kind_from_string(field<std::string>(j, "kind", where));
  } catch (const std::invalid_argument& e) {
    throw FormatError(where + ".kind: " + e.what());
  }
  const json params = field<json>(j, "map_params", where);
  const std::string pw = where + ".map_params";
  m.tissue_lut = lut_from_json(field<json>(params, "tissue_lut", pw), pw + ".tissue_lut");
  if (params.contains("functional_uptake")) {
    m.functional_uptake = lut_from_json(params.at("functional_uptake"), pw + ".functional_uptake");
  }
  m.contrast_gamma = field<double>(params, "contrast_gamma", pw);
  m.smoothing_sigma = field<double>(params, "smoothing_sigma", pw);
  m.noise_sigma = field<double>(params, "noise_sigma", pw);
  if (!(m.contrast_gamma > 0) || m.smoothing_sigma < 0 || m.noise_sigma < 0) {
    throw FormatError(pw + ": gamma must be > 0 and sigmas >= 0");
  }
  return m;
}

json generation_config_to_json(const phantom::GenerationConfig& g) {
  return {{"shape", {g.shape.d, g.shape.h, g.shape.w}},
          {"body_radius_frac", {g.body_radius_frac.d, g.body_radius_frac.h, g.body_radius_frac.w}},
          {"body_jitter_frac", g.body_jitter_frac},
          {"body_amplitude", g.body_amplitude},
          {"tissue_a_blobs", {g.tissue_a_blobs_min, g.tissue_a_blobs_max}},
          {"tissue_a_radius", {g.tissue_a_radius_min, g.tissue_a_radius_max}},
          {"tissue_b_blobs", {g.tissue_b_blobs_min, g.tissue_b_blobs_max}},
          {"tissue_b_radius", {g.tissue_b_radius_min, g.tissue_b_radius_max}},
          {"lesion_probability", g.lesion_probability},
          {"lesion_radius", {g.lesion_radius_min, g.lesion_radius_max}},
          {"edge_sharpness", g.edge_sharpness},
          {"orientation_ramp", g.orientation_ramp},
          {"landmark_amplitude", g.landmark_amplitude},
          {"lobe_radius_frac", g.lobe_radius_frac}};
}

phantom::GenerationConfig generation_config_from_json(const json& j) {
  phantom::GenerationConfig g;
  const std::string w = "generation";
  auto shape = field<std::vector<int>>(j, "shape", w);
  if (shape.size() != 3) throw FormatError("generation.shape: expected 3 entries");
  g.shape = {shape[0], shape[1], shape[2]};
  auto body = field<std::vector<double>>(j, "body_radius_frac", w);
  if (body.size() != 3) throw FormatError("generation.body_radius_frac: expected 3 entries");
  g.body_radius_frac = {body[0], body[1], body[2]};
  g.body_jitter_frac = field<double>(j, "body_jitter_frac", w);
  g.body_amplitude = field<double>(j, "body_amplitude", w);
  auto pair_i = [&](const char* k, int& lo, int& hi) {
    auto v = field<std::vector<int>>(j, k, w);
    if (v.size() != 2) throw FormatError(w + "." + k + ": expected [min, max]");
    lo = v[0];
    hi = v[1];
  };
  auto pair_d = [&](const char* k, double& lo, double& hi) {
    auto v = field<std::vector<double>>(j, k, w);
    if (v.size() != 2) throw FormatError(w + "." + k + ": expected [min, max]");
    lo = v[0];
    hi = v[1];
  };
  pair_i("tissue_a_blobs", g.tissue_a_blobs_min, g.tissue_a_blobs_max);
  pair_d("tissue_a_radius", g.tissue_a_radius_min, g.tissue_a_radius_max);
  pair_i("tissue_b_blobs", g.tissue_b_blobs_min, g.tissue_b_blobs_max);
  pair_d("tissue_b_radius", g.tissue_b_radius_min, g.tissue_b_radius_max);
  g.lesion_probability = field<double>(j, "lesion_probability", w);
  pair_d("lesion_radius", g.lesion_radius_min, g.lesion_radius_max);
  g.edge_sharpness = field<double>(j, "edge_sharpness", w);
  g.orientation_ramp = field<double>(j, "orientation_ramp", w);
  g.landmark_amplitude = field<double>(j, "landmark_amplitude", w);
  g.lobe_radius_frac = field<double>(j, "lobe_radius_frac", w);
  return g;
}

json manifest_to_json(const DatasetManifest& m) {
  json mods = json::array();
  for (const auto& r : m.modalities) mods.push_back(rendering_map_to_json(r));
  json inds = json::array();
  for (const auto& e : m.individuals) {
    json files = json::object();
    for (const auto& [mod, p] : e.files) files[mod] = p;
    inds.push_back({{"id", e.id},
                    {"split", phantom::to_string(e.split)},
                    {"has_lesion", e.has_lesion},
                    {"files", files},
                    {"label_file", e.label_file}});
  }
  return {{"format_version", m.format_version},
          {"shape", {m.shape.d, m.shape.h, m.shape.w}},
          {"modalities", mods},
          {"individuals", inds},
          {"seeds", m.seeds},
          {"generation", m.generation}};
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  write_file(path, manifest_to_json(m).dump(2) + "\n");
}

DatasetManifest load_manifest(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw FormatError("manifest '" + path.string() + "': " + e.what());
  }
  DatasetManifest m;
  m.root = path.parent_path();
  const std::string w = "manifest";
  m.format_version = field<int>(j, "format_version", w);
  if (m.format_version != kManifestFormatVersion) {
    throw FormatError("manifest.format_version: expected " + std::to_string(kManifestFormatVersion) +
                      ", found " + std::to_string(m.format_version));
  }
  auto shape = field<std::vector<int>>(j, "shape", w);
  if (shape.size() != 3 || shape[0] <= 0 || shape[1] <= 0 || shape[2] <= 0) {
    throw FormatError("manifest.shape: expected three positive extents");
  }
  m.shape = {shape[0], shape[1], shape[2]};
  const json mods = field<json>(j, "modalities", w);
  if (!mods.is_array() || mods.empty()) throw FormatError("manifest.modalities: expected non-empty array");
  for (std::size_t i = 0; i < mods.size(); ++i) {
    m.modalities.push_back(rendering_map_from_json(mods[i], "manifest.modalities[" + std::to_string(i) + "]"));
  }
  const json inds = field<json>(j, "individuals", w);
  if (!inds.is_array()) throw FormatError("manifest.individuals: expected array");
  for (std::size_t i = 0; i < inds.size(); ++i) {
    const std::string iw = "manifest.individuals[" + std::to_string(i) + "]";
    IndividualEntry e;
    e.id = field<std::string>(inds[i], "id", iw);
    try {
      e.split = phantom::split_from_string(field<std::string>(inds[i], "split", iw));
    } catch (const std::invalid_argument& ex) {
      throw FormatError(iw + ".split: " + ex.what());
    }
    e.has_lesion = field<bool>(inds[i], "has_lesion", iw);
    e.files = field<std::map<std::string, std::string>>(inds[i], "files", iw);
    e.label_file = field<std::string>(inds[i], "label_file", iw);
    for (const auto& mod : m.modality_ids()) {
      auto it = e.files.find(mod);
      if (it == e.files.end()) throw FormatError(iw + ".files." + mod + ": missing field");
      check_length(m.root / it->second, m.shape.voxels() * 4);
    }
    check_length(m.root / e.label_file, m.shape.voxels());
    m.individuals.push_back(std::move(e));
  }
  if (j.contains("seeds")) m.seeds = j.at("seeds");
  if (j.contains("generation")) m.generation = j.at("generation");
  return m;
}

phantom::MultiModalSample load_sample(const DatasetManifest& m, std::size_t index) {
  const auto& e = m.individuals.at(index);
  phantom::MultiModalSample s;
  s.individual_id = e.id;
  s.split = e.split;
  s.has_lesion = e.has_lesion;
  for (const auto& mod : m.modality_ids()) {
    s.modality_order.push_back(mod);
    s.volumes.emplace(mod, read_volume(m.root / e.files.at(mod), m.shape));
  }
  s.seg_labels = read_labels(m.root / e.label_file, m.shape);
  return s;
}

const NamedArray& Checkpoint::array(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw FormatError("checkpoint has no array '" + name + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  json index = json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays) {
    if (a.values.size() != ag::numel(a.shape)) {
      throw std::invalid_argument("save_checkpoint: array '" + a.name + "' size/shape mismatch");
    }
    index.push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", a.values.size()}});
    offset += a.values.size();
  }
  const json header = {{"format_version", kCheckpointFormatVersion}, {"metadata", ckpt.metadata}, {"arrays", index}};
  const std::string h = header.dump();
  std::string bytes = "PUIRCKPT";
  put_le<std::uint32_t>(bytes, kCheckpointFormatVersion);
  put_le<std::uint64_t>(bytes, h.size());
  bytes += h;
  bytes.reserve(bytes.size() + offset * 8);
  for (const auto& a : ckpt.arrays) {
    for (double v : a.values) put_le(bytes, std::bit_cast<std::uint64_t>(v));
  }
  write_file(path, bytes);
}

Checkpoint load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 20 || bytes.compare(0, 8, "PUIRCKPT") != 0) {
    throw FormatError("checkpoint '" + path.string() + "': bad magic");
  }
  const auto version = get_le<std::uint32_t>(p + 8);
  if (version != kCheckpointFormatVersion) {
    throw FormatError("checkpoint '" + path.string() + "': unsupported format_version " + std::to_string(version));
  }
  const auto hlen = get_le<std::uint64_t>(p + 12);
  if (hlen > bytes.size() - 20) throw FormatError("checkpoint '" + path.string() + "': truncated header");
  json header;
  try {
    header = json::parse(bytes.substr(20, hlen));
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint '" + path.string() + "': " + e.what());
  }
  const std::size_t data_start = 20 + hlen;
  const std::size_t data_count = (bytes.size() - data_start) / 8;
  if ((bytes.size() - data_start) % 8 != 0) throw FormatError("checkpoint '" + path.string() + "': ragged payload");
  Checkpoint ckpt;
  ckpt.metadata = header.value("metadata", json::object());
  for (const auto& a : field<json>(header, "arrays", "checkpoint")) {
    NamedArray arr;
    arr.name = field<std::string>(a, "name", "checkpoint.arrays");
    arr.shape = field<ag::Dims>(a, "shape", "checkpoint.arrays." + arr.name);
    const auto off = field<std::uint64_t>(a, "offset", "checkpoint.arrays." + arr.name);
    const auto count = field<std::uint64_t>(a, "count", "checkpoint.arrays." + arr.name);
    if (count != ag::numel(arr.shape) || off > data_count || count > data_count - off) {
      throw FormatError("checkpoint.arrays." + arr.name + ": extent outside payload");
    }
    arr.values.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      arr.values[i] = std::bit_cast<double>(get_le<std::uint64_t>(p + data_start + 8 * (off + i)));
    }
    ckpt.arrays.push_back(std::move(arr));
  }
  return ckpt;
}

void append_jsonl(const fs::path& path, const json& record) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to '" + path.string() + "'");
  out << record.dump() << "\n";
}

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_hash(const fs::path& path) {
  const std::string bytes = read_file(path);
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace puir::io
