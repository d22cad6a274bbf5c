#include "puir/model.hpp"

#include <cmath>
#include <stdexcept>

#include "puir/rng.hpp"

namespace puir::model {

void ModelConfig::validate() const {
  if (modalities < 1) throw std::invalid_argument("ModelConfig: modalities must be >= 1");
  if (widths.empty()) throw std::invalid_argument("ModelConfig: need at least one encoder level");
  for (int w : widths) {
    if (w < 1) throw std::invalid_argument("ModelConfig: widths must be positive");
  }
  if (slots < 1) throw std::invalid_argument("ModelConfig: slots must be >= 1");
  if (proj_dim < 1) throw std::invalid_argument("ModelConfig: proj_dim must be >= 1");
  if (seg_classes < 2) throw std::invalid_argument("ModelConfig: seg_classes must be >= 2");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"modalities", modalities}, {"widths", widths},       {"slots", slots},
          {"proj_dim", proj_dim},     {"seg_classes", seg_classes}, {"use_prior", use_prior}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.modalities = j.at("modalities").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.slots = j.at("slots").get<int>();
  c.proj_dim = j.at("proj_dim").get<int>();
  c.seg_classes = j.at("seg_classes").get<int>();
  c.use_prior = j.at("use_prior").get<bool>();
  c.validate();
  return c;
}

std::string ModelConfig::hash() const {
  const std::string s = to_json().dump();
  return io::hex64(io::fnv1a64(s.data(), s.size()));
}

Volume standardize(const Volume& v) {
  double mean = 0.0;
  for (float x : v.data()) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (float x : v.data()) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  const double inv = var > 1e-12 ? 1.0 / std::sqrt(var) : 0.0;
  Volume out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>((v[i] - mean) * inv);
  return out;
}

Tensor replicate_channels(const Volume& v, int m) {
  if (m < 1) throw std::invalid_argument("replicate_channels: m must be >= 1");
  const Shape3 s = v.shape();
  std::vector<double> data;
  data.reserve(v.size() * m);
  for (int c = 0; c < m; ++c) data.insert(data.end(), v.data().begin(), v.data().end());
  return Tensor::constant({m, s.d, s.h, s.w}, std::move(data));
}

Tensor stack_volumes(const std::vector<const Volume*>& volumes) {
  if (volumes.empty()) throw std::invalid_argument("stack_volumes: empty");
  const Shape3 s = volumes.front()->shape();
  std::vector<double> data;
  data.reserve(s.voxels() * volumes.size());
  for (const Volume* v : volumes) {
    if (!(v->shape() == s)) throw std::invalid_argument("stack_volumes: shape mismatch");
    data.insert(data.end(), v->data().begin(), v->data().end());
  }
  return Tensor::constant({static_cast<int>(volumes.size()), s.d, s.h, s.w}, std::move(data));
}

Volume channel_to_volume(const Tensor& x, int channel) {
  if (x.shape().size() != 4 || channel < 0 || channel >= x.dim(0)) {
    throw std::invalid_argument("channel_to_volume: bad channel for " + ag::dims_str(x.shape()));
  }
  const Shape3 s{x.dim(1), x.dim(2), x.dim(3)};
  Volume v(s);
  const std::size_t off = static_cast<std::size_t>(channel) * s.voxels();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(x.data()[off + i]);
  return v;
}

Tensor retrieve_prior(const Tensor& z, const Tensor& slots, std::vector<double>* weights) {
  return ag::attend_slots(z, slots, weights);
}

Tensor fuse(const Tensor& z, const Tensor& retrieved, const Tensor& weight, const Tensor& bias) {
  if (z.shape() != retrieved.shape()) {
    throw std::invalid_argument("fuse: shape mismatch " + ag::dims_str(z.shape()) + " vs " +
                                ag::dims_str(retrieved.shape()));
  }
  return ag::conv3d(ag::concat_channels(z, retrieved), weight, bias, 1, 0);
}

Tensor rotation_logits(const Tensor& z, const Tensor& weight, const Tensor& bias) {
  return ag::linear(ag::global_avg_pool(z), weight, bias);
}

Tensor predict_rotation(const Tensor& z, const Tensor& weight, const Tensor& bias) {
  return ag::softmax(rotation_logits(z, weight, bias));
}

Tensor project_contrastive(const Tensor& z, const Tensor& weight, const Tensor& bias) {
  return ag::l2_normalize(ag::linear(ag::global_avg_pool(z), weight, bias));
}

namespace {

std::vector<double> uniform_init(Rng& rng, std::size_t n, double bound) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return v;
}

}  // namespace

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const auto& w = cfg_.widths;
  const int depth = cfg_.depth();
  const int cf = cfg_.feature_width();
  const int m = cfg_.modalities;

  auto conv = [&](const std::string& name, int out, int in, int k, double gain) {
    const int fan_in = in * k * k * k;
    add_param(name + ".weight", {out, in, k, k, k},
              uniform_init(rng, static_cast<std::size_t>(out) * fan_in, std::sqrt(gain / fan_in)));
    add_param(name + ".bias", {out}, std::vector<double>(out, 0.0));
  };

  for (int l = 0; l < depth; ++l) conv("encoder." + std::to_string(l), w[l], l == 0 ? m : w[l - 1], 3, 6.0);

  std::vector<double> slots(static_cast<std::size_t>(cfg_.slots) * cf);
  for (auto& s : slots) s = rng.normal();
  add_param("prior.slots", {cfg_.slots, cf}, std::move(slots));
  conv("fusion", cf, 2 * cf, 1, 3.0);

  for (int l = depth - 1; l >= 1; --l) conv("decoder." + std::to_string(l), w[l - 1], w[l] + w[l - 1], 3, 6.0);
  conv("decoder.out", m, w[0], 1, 3.0);
  conv("seg_head", cfg_.seg_classes, w[0], 1, 3.0);

  add_param("rotation_head.weight", {4, cf}, std::vector<double>(4 * cf, 0.0));
  add_param("rotation_head.bias", {4}, std::vector<double>(4, 0.0));
  add_param("projection.weight", {cfg_.proj_dim, cf},
            uniform_init(rng, static_cast<std::size_t>(cfg_.proj_dim) * cf, std::sqrt(3.0 / cf)));
  add_param("projection.bias", {cfg_.proj_dim}, std::vector<double>(cfg_.proj_dim, 0.0));
}

void Model::add_param(const std::string& name, ag::Dims shape, std::vector<double> values) {
  params_.emplace_back(name, Tensor::parameter(std::move(shape), std::move(values)));
}

Tensor& Model::param(const std::string& name) {
  for (auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw std::out_of_range("Model: no parameter '" + name + "'");
}

const Tensor& Model::param(const std::string& name) const {
  return const_cast<Model*>(this)->param(name);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

EncoderOutput Model::encode(const Tensor& x) const {
  if (x.shape().size() != 4 || x.dim(0) != cfg_.modalities) {
    throw std::invalid_argument("encode: expected input with " + std::to_string(cfg_.modalities) +
                                " channels, got " + ag::dims_str(x.shape()));
  }
  const int factor = 1 << cfg_.depth();
  for (int a = 1; a <= 3; ++a) {
    if (x.dim(a) % factor != 0) {
      throw std::invalid_argument("encode: spatial extents " + ag::dims_str(x.shape()) +
                                  " not divisible by " + std::to_string(factor));
    }
  }
  EncoderOutput out;
  Tensor h = x;
  for (int l = 0; l < cfg_.depth(); ++l) {
    const std::string p = "encoder." + std::to_string(l);
    h = ag::silu(ag::conv3d(h, param(p + ".weight"), param(p + ".bias"), 2, 1));
    out.intermediates.push_back(h);
  }
  out.final = h;
  return out;
}

Tensor Model::retrieve_prior(const Tensor& z, std::vector<double>* weights) const {
  return model::retrieve_prior(z, param("prior.slots"), weights);
}

Tensor Model::fuse(const Tensor& z, const Tensor& retrieved) const {
  return model::fuse(z, retrieved, param("fusion.weight"), param("fusion.bias"));
}

Tensor Model::represent(const Tensor& z) const {
  if (!cfg_.use_prior) return z;
  return fuse(z, retrieve_prior(z));
}

Tensor Model::decode_features(const Tensor& xh, const std::vector<Tensor>& intermediates) const {
  const int depth = cfg_.depth();
  if (static_cast<int>(intermediates.size()) != depth) {
    throw std::invalid_argument("decode: expected " + std::to_string(depth) + " skip features, got " +
                                std::to_string(intermediates.size()));
  }
  const auto& deepest = intermediates.back();
  if (xh.shape() != deepest.shape()) {
    throw std::invalid_argument("decode: representation " + ag::dims_str(xh.shape()) +
                                " does not match deepest skip " + ag::dims_str(deepest.shape()));
  }
  for (int l = 0; l + 1 < depth; ++l) {
    const auto& a = intermediates[l].shape();
    const auto& b = intermediates[l + 1].shape();
    if (a[0] != cfg_.widths[l] || a[1] != 2 * b[1] || a[2] != 2 * b[2] || a[3] != 2 * b[3]) {
      throw std::invalid_argument("decode: skip pyramid mismatch at level " + std::to_string(l));
    }
  }
  Tensor h = xh;
  for (int l = depth - 1; l >= 1; --l) {
    const std::string p = "decoder." + std::to_string(l);
    h = ag::concat_channels(ag::upsample_nearest2(h), intermediates[l - 1]);
    h = ag::silu(ag::conv3d(h, param(p + ".weight"), param(p + ".bias"), 1, 1));
  }
  return ag::upsample_linear2(h);
}

Tensor Model::decode(const Tensor& xh, const std::vector<Tensor>& intermediates) const {
  return ag::conv3d(decode_features(xh, intermediates), param("decoder.out.weight"),
                    param("decoder.out.bias"), 1, 0);
}

Tensor Model::decode_segmentation(const Tensor& xh, const std::vector<Tensor>& intermediates) const {
  return ag::conv3d(decode_features(xh, intermediates), param("seg_head.weight"),
                    param("seg_head.bias"), 1, 0);
}

Tensor Model::predict_rotation(const Tensor& z) const {
  return model::predict_rotation(z, param("rotation_head.weight"), param("rotation_head.bias"));
}

Tensor Model::project_contrastive(const Tensor& z) const {
  return model::project_contrastive(z, param("projection.weight"), param("projection.bias"));
}

std::vector<io::NamedArray> Model::export_arrays() const {
  std::vector<io::NamedArray> out;
  for (const auto& [name, t] : params_) out.push_back({name, t.shape(), t.data()});
  return out;
}

void Model::import_arrays(const std::vector<io::NamedArray>& arrays,
                          const std::vector<std::string>& optional) {
  for (auto& [name, t] : params_) {
    const io::NamedArray* found = nullptr;
    for (const auto& a : arrays) {
      if (a.name == name) found = &a;
    }
    if (!found) {
      if (std::find(optional.begin(), optional.end(), name) != optional.end()) continue;
      throw io::FormatError("checkpoint is missing parameter '" + name + "'");
    }
    if (found->shape != t.shape()) {
      throw io::FormatError("parameter '" + name + "' has shape " + ag::dims_str(found->shape) +
                            " in checkpoint but " + ag::dims_str(t.shape()) + " in model");
    }
    t.mutable_data() = found->values;
  }
}

std::string Model::parameter_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : params_) {
    h = io::fnv1a64(name.data(), name.size(), h);
    h = io::fnv1a64(t.data().data(), t.data().size() * sizeof(double), h);
  }
  return io::hex64(h);
}

}  // namespace puir::model
