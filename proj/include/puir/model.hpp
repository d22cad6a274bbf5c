#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "puir/autograd.hpp"
#include "puir/io.hpp"
#include "puir/volume.hpp"

namespace puir::model {

using ag::Tensor;

/// Architecture hyperparameters. `widths` lists the channel count of each
/// strided encoder level; the last entry is the feature width of z.
struct ModelConfig {
  int modalities = 3;
  std::vector<int> widths{8, 16, 32};
  int slots = 64;
  int proj_dim = 32;
  int seg_classes = 2;
  /// When false the prior bank is bypassed and z itself is the representation.
  bool use_prior = true;

  int depth() const { return static_cast<int>(widths.size()); }
  int feature_width() const { return widths.back(); }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  /// Hash of the architecture-defining fields.
  std::string hash() const;
};

struct EncoderOutput {
  Tensor final;
  /// One feature map per encoder level, finest first; the last is `final`.
  std::vector<Tensor> intermediates;
};

/// Zero mean, unit variance copy; constant volumes map to zeros.
Volume standardize(const Volume& v);
/// Stacks `m` copies of the volume as channels: [m, D, H, W].
Tensor replicate_channels(const Volume& v, int m);
/// Stacks the given volumes as channels in order.
Tensor stack_volumes(const std::vector<const Volume*>& volumes);
Volume channel_to_volume(const Tensor& x, int channel);

// Stateless building blocks, exposed for direct testing.
Tensor retrieve_prior(const Tensor& z, const Tensor& slots, std::vector<double>* weights = nullptr);
Tensor fuse(const Tensor& z, const Tensor& retrieved, const Tensor& weight, const Tensor& bias);
Tensor rotation_logits(const Tensor& z, const Tensor& weight, const Tensor& bias);
Tensor predict_rotation(const Tensor& z, const Tensor& weight, const Tensor& bias);
/// Pools, projects and L2-normalizes; throws std::domain_error on a zero projection.
Tensor project_contrastive(const Tensor& z, const Tensor& weight, const Tensor& bias);

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  EncoderOutput encode(const Tensor& x) const;
  Tensor retrieve_prior(const Tensor& z, std::vector<double>* weights = nullptr) const;
  Tensor fuse(const Tensor& z, const Tensor& retrieved) const;
  /// Prior retrieval plus fusion, or z unchanged when the prior is disabled.
  Tensor represent(const Tensor& z) const;
  /// Full-resolution hidden features shared by the reconstruction and segmentation heads.
  Tensor decode_features(const Tensor& xh, const std::vector<Tensor>& intermediates) const;
  /// One reconstructed channel per modality.
  Tensor decode(const Tensor& xh, const std::vector<Tensor>& intermediates) const;
  /// Per-voxel class logits.
  Tensor decode_segmentation(const Tensor& xh, const std::vector<Tensor>& intermediates) const;
  Tensor predict_rotation(const Tensor& z) const;
  Tensor project_contrastive(const Tensor& z) const;

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  Tensor& param(const std::string& name);
  const Tensor& param(const std::string& name) const;
  std::size_t parameter_count() const;

  std::vector<io::NamedArray> export_arrays() const;
  /// Copies values in by name. Every array must be present with an identical shape,
  /// except names listed in `optional` which keep their current values when absent.
  void import_arrays(const std::vector<io::NamedArray>& arrays,
                     const std::vector<std::string>& optional = {});
  /// Hash over all parameter bytes.
  std::string parameter_hash() const;

 private:
  void add_param(const std::string& name, ag::Dims shape, std::vector<double> values);

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

}  // namespace puir::model
