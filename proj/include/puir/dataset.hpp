#pragma once

#include <filesystem>

#include "puir/io.hpp"
#include "puir/phantom.hpp"

namespace puir::phantom {

/// Writes one volume per (individual, modality), one label grid per
/// individual and `manifest.json` under `out_dir`. The first `n_train`
/// individuals form the train split, the rest the test split.
/// Refuses to replace an existing manifest unless `force` is set.
io::DatasetManifest generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir,
                                     bool force = false);

}  // namespace puir::phantom
