#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "puir/rotation.hpp"
#include "puir/volume.hpp"

namespace puir::phantom {

enum TissueClass : std::uint8_t {
  kBackground = 0,
  kTissueA = 1,
  kTissueB = 2,
  kLesion = 3,
};
inline constexpr int kNumTissueClasses = 4;

struct Vec3 {
  double d = 0, h = 0, w = 0;
};

/// Soft ellipsoid contributing `amplitude * soft(q)` to the latent anatomy,
/// with q the normalized squared ellipsoidal distance from the centre.
struct Blob {
  Vec3 center;
  Vec3 radii;
  double amplitude = 1.0;
  TissueClass tissue = kTissueA;
};

/// Parameters of the anatomy generator. Radii are in voxels unless noted.
/// Anatomy has a canonical orientation: the body is elongated along h and
/// carries a lobe on its high-h, high-w shoulder, organs (tissue B) sit in a
/// fixed quadrant, a thin bar-shaped landmark lines the low-h side of the body
/// and intensity falls off along h, so quarter turns about z are identifiable
/// from both the silhouette and local image structure.
struct GenerationConfig {
  Shape3 shape{32, 32, 32};
  Vec3 body_radius_frac{0.40, 0.42, 0.30};
  double body_jitter_frac = 0.04;
  double body_amplitude = 0.55;
  int tissue_a_blobs_min = 2;
  int tissue_a_blobs_max = 4;
  double tissue_a_radius_min = 2.5;
  double tissue_a_radius_max = 5.0;
  int tissue_b_blobs_min = 1;
  int tissue_b_blobs_max = 3;
  double tissue_b_radius_min = 3.0;
  double tissue_b_radius_max = 5.5;
  double lesion_probability = 0.75;
  double lesion_radius_min = 2.5;
  double lesion_radius_max = 4.5;
  double edge_sharpness = 6.0;
  double orientation_ramp = 0.3;
  /// Amplitude of the landmark bar; 0 disables it.
  double landmark_amplitude = 0.9;
  /// Shoulder lobe size as a fraction of the body radii; 0 disables it.
  double lobe_radius_frac = 0.35;

  void validate() const;
};

struct BiologicalProfile {
  std::string individual_id;
  Volume latent;
  LabelVolume label_map;
  LabelVolume lesion_mask;
  std::uint64_t seed = 0;
  bool has_lesion = false;
  std::vector<Blob> blobs;
};

/// Smooth inside-indicator of a blob at squared ellipsoidal distance q.
double blob_profile(double q, double sharpness);
double blob_distance_sq(const Blob& b, double d, double h, double w);

std::vector<Blob> sample_blobs(std::uint64_t seed, const GenerationConfig& cfg, bool* has_lesion);
/// Superposes the blobs into latent anatomy and labels.
BiologicalProfile profile_from_blobs(std::string id, std::uint64_t seed, std::vector<Blob> blobs,
                                     const GenerationConfig& cfg);
BiologicalProfile sample_profile(std::uint64_t seed, const GenerationConfig& cfg,
                                 std::string id = {});

enum class ModalityKind { kStructural, kFunctional };
std::string to_string(ModalityKind k);
ModalityKind modality_kind_from_string(const std::string& s);

/// Static mapping from anatomy to one imaging modality, shared by every individual.
struct RenderingMap {
  std::string modality_id;
  ModalityKind kind = ModalityKind::kStructural;
  std::map<int, double> tissue_lut;
  double contrast_gamma = 1.0;
  double smoothing_sigma = 0.0;
  double noise_sigma = 0.0;
  std::map<int, double> functional_uptake;

  double max_intensity() const;
};

/// Two structural contrasts and one functional (near-zero background) map.
std::vector<RenderingMap> default_modalities();

/// Noise-free, unsmoothed, unclipped intensity of one voxel.
double render_voxel(const RenderingMap& map, int tissue, double latent);
Volume render_modality(const BiologicalProfile& profile, const RenderingMap& map,
                       std::uint64_t noise_seed);
/// Separable Gaussian blur with clamp-to-edge borders.
Volume gaussian_smooth(const Volume& v, double sigma);

Volume apply_rotation(const Volume& v, RotationTransform r);
LabelVolume apply_rotation(const LabelVolume& v, RotationTransform r);
inline RotationTransform invert_rotation(RotationTransform r) { return r.inverse(); }

struct AugmentConfig {
  bool crop = true;
  double crop_min_frac = 0.7;
  bool flip = true;
  bool intensity_scale = true;
  double scale_lo = 0.9;
  double scale_hi = 1.1;
  bool noise = true;
  double noise_frac = 0.01;

  static AugmentConfig all_off() { return {false, 0.7, false, false, 0.9, 1.1, false, 0.01}; }
};

/// What a call to `augment` drew.
struct AugmentRecord {
  int crop_lo[3] = {0, 0, 0};
  int crop_hi[3] = {0, 0, 0};
  bool flip_h = false;
  bool flip_w = false;
  double scale = 1.0;
  double noise_sigma = 0.0;
};

Volume augment(const Volume& v, const AugmentConfig& cfg, std::uint64_t seed,
               AugmentRecord* record = nullptr);

enum class Split { kTrain, kTest };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct MultiModalSample {
  std::string individual_id;
  std::vector<std::string> modality_order;
  std::map<std::string, Volume> volumes;
  LabelVolume seg_labels;
  Split split = Split::kTrain;
  bool has_lesion = false;

  const Volume& volume(const std::string& modality) const;
  std::size_t num_modalities() const { return modality_order.size(); }
};

struct DatasetConfig {
  GenerationConfig gen;
  std::vector<RenderingMap> modalities = default_modalities();
  int n_train = 64;
  int n_test = 16;
  std::uint64_t seed = 1;
};

/// Renders all modalities of one individual in memory.
MultiModalSample make_sample(const DatasetConfig& cfg, int index);

}  // namespace puir::phantom
