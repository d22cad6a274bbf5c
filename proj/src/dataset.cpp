#include "puir/dataset.hpp"

#include <stdexcept>

namespace puir::phantom {

io::DatasetManifest generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir,
                                     bool force) {
  cfg.gen.validate();
  if (cfg.modalities.size() < 2) {
    throw std::invalid_argument("generate_dataset: need at least two modalities");
  }
  bool structural = false;
  for (const auto& m : cfg.modalities) structural |= m.kind == ModalityKind::kStructural;
  if (!structural) throw std::invalid_argument("generate_dataset: need a structural modality");
  if (cfg.n_train < 0 || cfg.n_test < 0 || cfg.n_train + cfg.n_test == 0) {
    throw std::invalid_argument("generate_dataset: bad split sizes");
  }
  const auto manifest_path = out_dir / "manifest.json";
  if (std::filesystem::exists(manifest_path) && !force) {
    throw std::invalid_argument("generate_dataset: '" + manifest_path.string() +
                             "' exists; pass force to overwrite");
  }

  io::DatasetManifest m;
  m.root = out_dir;
  m.shape = cfg.gen.shape;
  m.modalities = cfg.modalities;
  m.seeds = {{"base", cfg.seed}, {"profile_stream", "derive_seed(base, index)"},
             {"noise_stream", "derive_seed(profile_seed, 1000 + modality_index)"}};
  m.generation = io::generation_config_to_json(cfg.gen);

  const int total = cfg.n_train + cfg.n_test;
  for (int i = 0; i < total; ++i) {
    const auto sample = make_sample(cfg, i);
    io::IndividualEntry e;
    e.id = sample.individual_id;
    e.split = sample.split;
    e.has_lesion = sample.has_lesion;
    for (const auto& mod : sample.modality_order) {
      const std::string rel = "volumes/" + e.id + "_" + mod + ".f32";
      io::write_volume(sample.volume(mod), out_dir / rel);
      e.files[mod] = rel;
    }
    e.label_file = "labels/" + e.id + ".u8";
    io::write_labels(sample.seg_labels, out_dir / e.label_file);
    m.individuals.push_back(std::move(e));
  }
  io::save_manifest(m, manifest_path);
  return m;
}

}  // namespace puir::phantom
