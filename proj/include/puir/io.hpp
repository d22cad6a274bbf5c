#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "puir/autograd.hpp"
#include "puir/phantom.hpp"
#include "puir/volume.hpp"

namespace puir::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kManifestFormatVersion = 1;
inline constexpr int kCheckpointFormatVersion = 1;

/// Raised for malformed or inconsistent files. The message names the
/// offending path or field.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raw little-endian float32 volumes and uint8 label grids, C-order, no header.
void write_volume(const Volume& v, const fs::path& path);
Volume read_volume(const fs::path& path, Shape3 shape);
void write_labels(const LabelVolume& v, const fs::path& path);
LabelVolume read_labels(const fs::path& path, Shape3 shape);

struct IndividualEntry {
  std::string id;
  phantom::Split split = phantom::Split::kTrain;
  bool has_lesion = false;
  std::map<std::string, std::string> files;  // modality id -> path relative to the manifest
  std::string label_file;
};

struct DatasetManifest {
  int format_version = kManifestFormatVersion;
  Shape3 shape;
  std::vector<phantom::RenderingMap> modalities;
  std::vector<IndividualEntry> individuals;
  json seeds = json::object();
  json generation = json::object();
  fs::path root;  // directory holding the manifest; not serialized

  std::vector<std::string> modality_ids() const;
  std::vector<std::size_t> indices(phantom::Split split) const;
};

json rendering_map_to_json(const phantom::RenderingMap& m);
phantom::RenderingMap rendering_map_from_json(const json& j, const std::string& where);
json generation_config_to_json(const phantom::GenerationConfig& g);
phantom::GenerationConfig generation_config_from_json(const json& j);

json manifest_to_json(const DatasetManifest& m);
void save_manifest(const DatasetManifest& m, const fs::path& path);
/// Parses and validates a manifest, including existence and byte length of
/// every referenced file.
DatasetManifest load_manifest(const fs::path& path);
phantom::MultiModalSample load_sample(const DatasetManifest& m, std::size_t index);

struct NamedArray {
  std::string name;
  ag::Dims shape;
  std::vector<double> values;
};

struct Checkpoint {
  json metadata = json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& array(const std::string& name) const;
};

/// Archive layout: "PUIRCKPT", u32 format version, u64 header length, JSON
/// header {format_version, metadata, arrays:[{name, shape, offset, count}]},
/// then every array as little-endian float64.
void save_checkpoint(const Checkpoint& ckpt, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

void append_jsonl(const fs::path& path, const json& record);

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull);
std::string file_hash(const fs::path& path);
std::string hex64(std::uint64_t v);

}  // namespace puir::io
