#include "puir/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "puir/rng.hpp"

namespace puir::phantom {

void GenerationConfig::validate() const {
  if (shape.d <= 0 || shape.h <= 0 || shape.w <= 0) {
    throw std::invalid_argument("GenerationConfig: non-positive grid shape " + shape.str());
  }
  require_square_plane(shape.h, shape.w);
  const double radii[] = {body_radius_frac.d, body_radius_frac.h, body_radius_frac.w,
                          tissue_a_radius_min, tissue_a_radius_max, tissue_b_radius_min,
                          tissue_b_radius_max, lesion_radius_min, lesion_radius_max};
  for (double r : radii) {
    if (!(r > 0.0)) throw std::invalid_argument("GenerationConfig: radii must be positive");
  }
  if (tissue_a_radius_min > tissue_a_radius_max || tissue_b_radius_min > tissue_b_radius_max ||
      lesion_radius_min > lesion_radius_max) {
    throw std::invalid_argument("GenerationConfig: radius range min > max");
  }
  if (tissue_a_blobs_min < 0 || tissue_a_blobs_min > tissue_a_blobs_max || tissue_b_blobs_min < 0 ||
      tissue_b_blobs_min > tissue_b_blobs_max) {
    throw std::invalid_argument("GenerationConfig: bad blob count range");
  }
  if (lesion_probability < 0.0 || lesion_probability > 1.0) {
    throw std::invalid_argument("GenerationConfig: lesion_probability outside [0, 1]");
  }
  if (!(landmark_amplitude >= 0.0)) throw std::invalid_argument("GenerationConfig: landmark_amplitude < 0");
  if (!(lobe_radius_frac >= 0.0 && lobe_radius_frac <= 1.0)) {
    throw std::invalid_argument("GenerationConfig: lobe_radius_frac must lie in [0, 1]");
  }
  if (!(edge_sharpness > 0.0)) throw std::invalid_argument("GenerationConfig: edge_sharpness <= 0");
}

double blob_profile(double q, double sharpness) {
  return 1.0 / (1.0 + std::exp(sharpness * (std::sqrt(q) - 1.0)));
}

double blob_distance_sq(const Blob& b, double d, double h, double w) {
  const double x = (d - b.center.d) / b.radii.d;
  const double y = (h - b.center.h) / b.radii.h;
  const double z = (w - b.center.w) / b.radii.w;
  return x * x + y * y + z * z;
}

std::vector<Blob> sample_blobs(std::uint64_t seed, const GenerationConfig& cfg, bool* has_lesion) {
  cfg.validate();
  Rng rng(seed);
  const double D = cfg.shape.d, H = cfg.shape.h, W = cfg.shape.w;
  std::vector<Blob> blobs;

  Blob body;
  body.center = {(D - 1) / 2 + rng.uniform(-1, 1) * cfg.body_jitter_frac * D,
                 (H - 1) / 2 + rng.uniform(-1, 1) * cfg.body_jitter_frac * H,
                 (W - 1) / 2 + rng.uniform(-1, 1) * cfg.body_jitter_frac * W};
  body.radii = {cfg.body_radius_frac.d * D * rng.uniform(0.9, 1.1),
                cfg.body_radius_frac.h * H * rng.uniform(0.9, 1.1),
                cfg.body_radius_frac.w * W * rng.uniform(0.9, 1.1)};
  body.amplitude = cfg.body_amplitude;
  body.tissue = kTissueA;
  blobs.push_back(body);

  if (cfg.lobe_radius_frac > 0.0) {
    Blob lobe = body;
    lobe.center = {body.center.d, body.center.h + 0.45 * body.radii.h, body.center.w + 0.85 * body.radii.w};
    lobe.radii = {0.7 * body.radii.d, cfg.lobe_radius_frac * body.radii.h, 1.2 * cfg.lobe_radius_frac * body.radii.w};
    blobs.push_back(lobe);
  }

  // Point inside the body at normalized radius <= reach.
  auto inside_body = [&](double reach) {
    for (;;) {
      const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1), c = rng.uniform(-1, 1);
      if (a * a + b * b + c * c > 1.0) continue;
      return Vec3{body.center.d + reach * a * body.radii.d, body.center.h + reach * b * body.radii.h,
                  body.center.w + reach * c * body.radii.w};
    }
  };

  const int n_a = rng.uniform_int(cfg.tissue_a_blobs_min, cfg.tissue_a_blobs_max);
  for (int i = 0; i < n_a; ++i) {
    Blob b;
    b.center = inside_body(0.7);
    b.radii = {rng.uniform(cfg.tissue_a_radius_min, cfg.tissue_a_radius_max),
               rng.uniform(cfg.tissue_a_radius_min, cfg.tissue_a_radius_max),
               rng.uniform(cfg.tissue_a_radius_min, cfg.tissue_a_radius_max)};
    b.amplitude = rng.uniform(0.6, 0.75);
    b.tissue = kTissueA;
    blobs.push_back(b);
  }

  // Organs cluster in the high-h, low-w quadrant of the body.
  const int n_b = rng.uniform_int(cfg.tissue_b_blobs_min, cfg.tissue_b_blobs_max);
  for (int i = 0; i < n_b; ++i) {
    Blob b;
    b.center = {body.center.d + rng.uniform(-0.5, 0.5) * body.radii.d,
                body.center.h + rng.uniform(0.2, 0.6) * body.radii.h,
                body.center.w - rng.uniform(0.2, 0.6) * body.radii.w};
    b.radii = {rng.uniform(cfg.tissue_b_radius_min, cfg.tissue_b_radius_max),
               rng.uniform(cfg.tissue_b_radius_min, cfg.tissue_b_radius_max),
               rng.uniform(cfg.tissue_b_radius_min, cfg.tissue_b_radius_max)};
    b.amplitude = rng.uniform(0.85, 1.0);
    b.tissue = kTissueB;
    blobs.push_back(b);
  }

  if (cfg.landmark_amplitude > 0.0) {
    Blob b;
    b.center = {body.center.d, body.center.h - 0.75 * body.radii.h, body.center.w + 0.25 * body.radii.w};
    b.radii = {0.5 * body.radii.d, 1.6, 0.45 * body.radii.w};
    b.amplitude = cfg.landmark_amplitude;
    b.tissue = kTissueB;
    blobs.push_back(b);
  }

  const bool lesion = rng.bernoulli(cfg.lesion_probability);
  if (lesion) {
    Blob b;
    b.center = inside_body(0.6);
    b.center = {std::round(b.center.d), std::round(b.center.h), std::round(b.center.w)};
    b.center.d = std::clamp(b.center.d, 0.0, D - 1);
    b.center.h = std::clamp(b.center.h, 0.0, H - 1);
    b.center.w = std::clamp(b.center.w, 0.0, W - 1);
    const double r = rng.uniform(cfg.lesion_radius_min, cfg.lesion_radius_max);
    b.radii = {r * rng.uniform(0.85, 1.15), r * rng.uniform(0.85, 1.15), r * rng.uniform(0.85, 1.15)};
    b.amplitude = 1.3;
    b.tissue = kLesion;
    blobs.push_back(b);
  }
  if (has_lesion) *has_lesion = lesion;
  return blobs;
}

BiologicalProfile profile_from_blobs(std::string id, std::uint64_t seed, std::vector<Blob> blobs,
                                     const GenerationConfig& cfg) {
  cfg.validate();
  for (const auto& b : blobs) {
    if (!(b.radii.d > 0 && b.radii.h > 0 && b.radii.w > 0)) {
      throw std::invalid_argument("profile_from_blobs: non-positive blob radius");
    }
  }
  const Shape3 s = cfg.shape;
  BiologicalProfile p;
  p.individual_id = std::move(id);
  p.seed = seed;
  p.latent = Volume(s);
  p.label_map = LabelVolume(s);
  p.lesion_mask = LabelVolume(s);

  std::vector<double> raw(s.voxels(), 0.0);
  double max_raw = 0.0;
  for (int d = 0; d < s.d; ++d)
    for (int h = 0; h < s.h; ++h) {
      const double ramp = 1.0 - cfg.orientation_ramp * (s.h > 1 ? h / double(s.h - 1) : 0.0);
      for (int w = 0; w < s.w; ++w) {
        double total = 0.0;
        double strongest = 0.0;
        std::uint8_t cls = kBackground;
        for (const auto& b : blobs) {
          const double q = blob_distance_sq(b, d, h, w);
          const double v = b.amplitude * blob_profile(q, cfg.edge_sharpness);
          total += v;
          if (q <= 1.0 && v > strongest) {
            strongest = v;
            cls = b.tissue;
          }
        }
        const std::size_t i = p.latent.index(d, h, w);
        raw[i] = total * ramp;
        max_raw = std::max(max_raw, raw[i]);
        p.label_map[i] = cls;
        p.lesion_mask[i] = cls == kLesion ? 1 : 0;
      }
    }
  for (std::size_t i = 0; i < raw.size(); ++i) {
    p.latent[i] = max_raw > 0 ? static_cast<float>(std::clamp(raw[i] / max_raw, 0.0, 1.0)) : 0.0f;
  }
  p.has_lesion = p.lesion_mask.count(1) > 0;
  p.blobs = std::move(blobs);
  return p;
}

BiologicalProfile sample_profile(std::uint64_t seed, const GenerationConfig& cfg, std::string id) {
  bool lesion = false;
  auto blobs = sample_blobs(seed, cfg, &lesion);
  auto p = profile_from_blobs(std::move(id), seed, std::move(blobs), cfg);
  if (lesion && !p.has_lesion) {
    // Lesion centres are voxel-aligned and inside the grid, so this cannot
    // happen unless another class dominates the centre voxel.
    throw std::logic_error("sample_profile: lesion blob produced an empty mask");
  }
  return p;
}

std::string to_string(ModalityKind k) {
  return k == ModalityKind::kStructural ? "structural" : "functional";
}

ModalityKind modality_kind_from_string(const std::string& s) {
  if (s == "structural") return ModalityKind::kStructural;
  if (s == "functional") return ModalityKind::kFunctional;
  throw std::invalid_argument("unknown modality kind '" + s + "'");
}

double RenderingMap::max_intensity() const {
  const auto& table = kind == ModalityKind::kFunctional ? functional_uptake : tissue_lut;
  double m = 0.0;
  for (const auto& [cls, v] : table) m = std::max(m, v);
  return m;
}

std::vector<RenderingMap> default_modalities() {
  RenderingMap t1;
  t1.modality_id = "t1";
  t1.kind = ModalityKind::kStructural;
  t1.tissue_lut = {{0, 0.0}, {1, 0.55}, {2, 0.95}, {3, 0.30}};
  t1.contrast_gamma = 1.0;
  t1.smoothing_sigma = 0.6;
  t1.noise_sigma = 0.01;

  RenderingMap t2;
  t2.modality_id = "t2";
  t2.kind = ModalityKind::kStructural;
  t2.tissue_lut = {{0, 0.0}, {1, 0.85}, {2, 0.35}, {3, 1.0}};
  t2.contrast_gamma = 0.7;
  t2.smoothing_sigma = 0.6;
  t2.noise_sigma = 0.01;

  RenderingMap pet;
  pet.modality_id = "pet";
  pet.kind = ModalityKind::kFunctional;
  pet.tissue_lut = {{0, 0.0}, {1, 0.0}, {2, 0.0}, {3, 0.0}};
  pet.functional_uptake = {{0, 0.0}, {1, 0.12}, {2, 0.25}, {3, 1.0}};
  pet.contrast_gamma = 1.0;
  pet.smoothing_sigma = 1.0;
  pet.noise_sigma = 0.005;
  return {t1, t2, pet};
}

double render_voxel(const RenderingMap& map, int tissue, double latent) {
  if (map.kind == ModalityKind::kFunctional) {
    auto it = map.functional_uptake.find(tissue);
    if (it == map.functional_uptake.end()) {
      throw std::invalid_argument("render_modality: modality '" + map.modality_id +
                                  "' has no uptake entry for tissue class " + std::to_string(tissue));
    }
    return it->second * latent;
  }
  auto it = map.tissue_lut.find(tissue);
  if (it == map.tissue_lut.end()) {
    throw std::invalid_argument("render_modality: modality '" + map.modality_id +
                                "' has no lut entry for tissue class " + std::to_string(tissue));
  }
  return it->second * std::pow(latent, map.contrast_gamma);
}

Volume gaussian_smooth(const Volume& v, double sigma) {
  if (sigma <= 0.0) return v;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  }
  for (auto& k : kernel) k /= total;

  const Shape3 s = v.shape();
  std::vector<double> a(v.data().begin(), v.data().end());
  std::vector<double> b(a.size());
  const int dims[3] = {s.d, s.h, s.w};
  const std::size_t strides[3] = {static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.w), 1};
  for (int axis = 0; axis < 3; ++axis) {
    const int len = dims[axis];
    const std::size_t stride = strides[axis];
    for (std::size_t i = 0; i < a.size(); ++i) {
      const int pos = static_cast<int>((i / stride) % len);
      const std::size_t base = i - pos * stride;
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        const int p = std::clamp(pos + k, 0, len - 1);
        acc += kernel[k + radius] * a[base + p * stride];
      }
      b[i] = acc;
    }
    std::swap(a, b);
  }
  Volume out(s);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = static_cast<float>(a[i]);
  return out;
}

Volume render_modality(const BiologicalProfile& profile, const RenderingMap& map,
                       std::uint64_t noise_seed) {
  const Shape3 s = profile.latent.shape();
  Volume out(s);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(render_voxel(map, profile.label_map[i], profile.latent[i]));
  }
  out = gaussian_smooth(out, map.smoothing_sigma);
  if (map.noise_sigma > 0.0) {
    Rng rng(noise_seed);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = static_cast<float>(out[i] + map.noise_sigma * rng.normal());
    }
  }
  const float hi = static_cast<float>(map.max_intensity() * 1.1);
  for (auto& x : out.data()) x = std::clamp(x, 0.0f, hi);
  return out;
}

namespace {

template <class V>
V rotate_impl(const V& v, RotationTransform r) {
  const Shape3 s = v.shape();
  require_square_plane(s.h, s.w);
  if (r.quarter_turns() == 0) return v;
  V out(s);
  for (int d = 0; d < s.d; ++d)
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w) {
        const auto [sh, sw] = r.source(h, w, s.h);
        out.at(d, h, w) = v.at(d, sh, sw);
      }
  return out;
}

}  // namespace

Volume apply_rotation(const Volume& v, RotationTransform r) { return rotate_impl(v, r); }
LabelVolume apply_rotation(const LabelVolume& v, RotationTransform r) { return rotate_impl(v, r); }

Volume augment(const Volume& v, const AugmentConfig& cfg, std::uint64_t seed, AugmentRecord* record) {
  Rng rng(seed);
  const Shape3 s = v.shape();
  const int dims[3] = {s.d, s.h, s.w};
  AugmentRecord rec;
  for (int a = 0; a < 3; ++a) {
    rec.crop_lo[a] = 0;
    rec.crop_hi[a] = dims[a] - 1;
  }
  if (cfg.crop) {
    for (int a = 0; a < 3; ++a) {
      const int len = std::max(1, static_cast<int>(std::round(dims[a] * rng.uniform(cfg.crop_min_frac, 1.0))));
      const int lo = rng.uniform_int(0, dims[a] - len);
      rec.crop_lo[a] = lo;
      rec.crop_hi[a] = lo + len - 1;
    }
  }
  if (cfg.flip) {
    rec.flip_h = rng.bernoulli(0.5);
    rec.flip_w = rng.bernoulli(0.5);
  }
  if (cfg.intensity_scale) rec.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  if (cfg.noise) {
    const auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
    rec.noise_sigma = cfg.noise_frac * (v.empty() ? 0.0 : double(*hi) - double(*lo));
  }

  Volume out(s);
  for (int d = 0; d < s.d; ++d)
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w) {
        // Replication padding of the crop back to full size, then flips.
        int sh = rec.flip_h ? s.h - 1 - h : h;
        int sw = rec.flip_w ? s.w - 1 - w : w;
        const int cd = std::clamp(d, rec.crop_lo[0], rec.crop_hi[0]);
        sh = std::clamp(sh, rec.crop_lo[1], rec.crop_hi[1]);
        sw = std::clamp(sw, rec.crop_lo[2], rec.crop_hi[2]);
        out.at(d, h, w) = static_cast<float>(rec.scale * v.at(cd, sh, sw));
      }
  if (rec.noise_sigma > 0.0) {
    for (auto& x : out.data()) x = static_cast<float>(x + rec.noise_sigma * rng.normal());
  }
  if (record) *record = rec;
  return out;
}

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + s + "'");
}

const Volume& MultiModalSample::volume(const std::string& modality) const {
  auto it = volumes.find(modality);
  if (it == volumes.end()) {
    throw std::invalid_argument("sample " + individual_id + " has no modality '" + modality + "'");
  }
  return it->second;
}

MultiModalSample make_sample(const DatasetConfig& cfg, int index) {
  const std::uint64_t profile_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(index));
  char id[32];
  std::snprintf(id, sizeof id, "ind_%04d", index);
  const auto profile = sample_profile(profile_seed, cfg.gen, id);
  MultiModalSample s;
  s.individual_id = id;
  s.split = index < cfg.n_train ? Split::kTrain : Split::kTest;
  s.seg_labels = profile.label_map;
  s.has_lesion = profile.has_lesion;
  for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
    const auto& map = cfg.modalities[m];
    s.modality_order.push_back(map.modality_id);
    s.volumes.emplace(map.modality_id,
                      render_modality(profile, map, derive_seed(profile_seed, 1000 + m)));
  }
  return s;
}

}  // namespace puir::phantom
