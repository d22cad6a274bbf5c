#include "puir/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "puir/losses.hpp"
#include "puir/rng.hpp"

namespace puir::harness {

using ag::Tensor;
using nlohmann::json;

const std::vector<CellSpec>& ablation_grid() {
  static const std::vector<CellSpec> grid{
      {"equ", true, false, false},       {"inv", false, true, false},      {"equ+inv", true, true, false},
      {"equ+prior", true, false, true},  {"inv+prior", false, true, true}, {"full", true, true, true},
  };
  return grid;
}

const CellSpec& cell_by_name(const std::string& name) {
  for (const auto& c : ablation_grid()) {
    if (c.name == name) return c;
  }
  throw std::invalid_argument("unknown ablation cell '" + name + "'");
}

json AblationCell::to_json() const {
  return {{"cell", spec.name},
          {"equivariance", spec.equivariance},
          {"invariance", spec.invariance},
          {"prior", spec.prior},
          {"seed", seed},
          {"status", status},
          {"error", error},
          {"checkpoint", checkpoint.string()},
          {"seg_checkpoint", seg_checkpoint.string()},
          {"initial_losses", initial.to_json()},
          {"final_losses", final.to_json()},
          {"metrics", metrics.to_json()}};
}

trainer::TrainConfig cell_config(const config::ExperimentConfig& cfg, const CellSpec& cell, std::uint64_t seed) {
  trainer::TrainConfig c = cfg.pretrain_config(seed, cell_dir(cfg, cell, seed));
  if (!cell.equivariance) c.weights.equ = 0.0;
  if (!cell.invariance) c.weights.inv = 0.0;
  c.model.use_prior = cell.prior;
  return c;
}

fs::path cell_dir(const config::ExperimentConfig& cfg, const CellSpec& cell, std::uint64_t seed) {
  std::string name = cell.name;
  std::replace(name.begin(), name.end(), '+', '_');
  return cfg.output_dir / "ablation" / (name + "_seed" + std::to_string(seed));
}

std::string corpus_fingerprint(const trainer::Corpus& corpus) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& s : corpus.samples) {
    h = io::fnv1a64(s.individual_id.data(), s.individual_id.size(), h);
    for (const auto& id : s.modality_order) {
      const auto& v = s.volume(id).data();
      h = io::fnv1a64(v.data(), v.size() * sizeof(float), h);
    }
    h = io::fnv1a64(s.seg_labels.data().data(), s.seg_labels.size(), h);
  }
  for (auto i : corpus.train) h = io::fnv1a64(&i, sizeof(i), h);
  return io::hex64(h);
}

namespace {

trainer::LossReport report_from_json(const json& j) {
  trainer::LossReport r;
  r.contr = j.value("contr", 0.0);
  r.decom = j.value("decom", 0.0);
  r.equ = j.value("equ", 0.0);
  r.inv = j.value("inv", 0.0);
  r.total = j.value("total", 0.0);
  r.dice = j.value("dice", 0.0);
  r.wce = j.value("wce", 0.0);
  r.task = j.value("task", 0.0);
  r.clamped = j.value("clamped", false);
  return r;
}

json run_key(const trainer::TrainConfig& cfg, const trainer::Corpus& corpus, const fs::path& from) {
  return {{"train_config", cfg.to_json()},
          {"corpus", corpus_fingerprint(corpus)},
          {"from", from.empty() ? std::string() : io::file_hash(from)}};
}

std::optional<trainer::RunResult> cached(const trainer::TrainConfig& cfg, const json& key) {
  const fs::path marker = cfg.out_dir / "run.json";
  const fs::path ckpt = cfg.out_dir / "checkpoint.ckpt";
  if (cfg.out_dir.empty() || !fs::exists(marker) || !fs::exists(ckpt)) return std::nullopt;
  json j;
  try {
    std::ifstream in(marker);
    in >> j;
  } catch (const json::exception&) {
    return std::nullopt;
  }
  if (j.value("key", json()) != key || j.value("checkpoint_hash", "") != io::file_hash(ckpt)) return std::nullopt;
  trainer::RunResult r;
  r.checkpoint = ckpt;
  r.initial = report_from_json(j.at("initial"));
  r.final = report_from_json(j.at("final"));
  for (const auto& e : j.at("epoch_means")) r.epoch_means.push_back(report_from_json(e));
  r.parameter_hash = j.at("parameter_hash").get<std::string>();
  return r;
}

void store(const trainer::TrainConfig& cfg, const json& key, const trainer::RunResult& r) {
  if (cfg.out_dir.empty()) return;
  json epochs = json::array();
  for (const auto& e : r.epoch_means) epochs.push_back(e.to_json());
  const json j{{"key", key},
               {"checkpoint_hash", io::file_hash(r.checkpoint)},
               {"initial", r.initial.to_json()},
               {"final", r.final.to_json()},
               {"epoch_means", epochs},
               {"parameter_hash", r.parameter_hash}};
  std::ofstream(cfg.out_dir / "run.json") << j.dump(2) << "\n";
}

}  // namespace

trainer::RunResult pretrain_cached(const trainer::TrainConfig& cfg, const trainer::Corpus& corpus) {
  const json key = run_key(cfg, corpus, {});
  if (auto hit = cached(cfg, key)) return *hit;
  auto r = trainer::pretrain(cfg, corpus);
  store(cfg, key, r);
  return r;
}

trainer::RunResult finetune_cached(const trainer::TrainConfig& cfg, const trainer::Corpus& corpus,
                                   const fs::path& from) {
  const json key = run_key(cfg, corpus, from);
  if (auto hit = cached(cfg, key)) return *hit;
  auto r = cfg.task == trainer::Task::kFinetuneTransfer ? trainer::finetune_transfer(cfg, corpus, from)
                                                         : trainer::finetune_seg(cfg, corpus, from);
  store(cfg, key, r);
  return r;
}

std::vector<AblationCell> run_ablation(const config::ExperimentConfig& cfg, const trainer::Corpus& corpus,
                                       const AblationOptions& opts) {
  cfg.validate();
  if (corpus.test.empty()) throw std::invalid_argument("run_ablation: corpus has no test individuals");
  std::vector<CellSpec> cells;
  if (cfg.ablation_cells.empty()) {
    cells = ablation_grid();
  } else {
    for (const auto& n : cfg.ablation_cells) cells.push_back(cell_by_name(n));
  }
  std::vector<AblationCell> out;
  for (auto seed : cfg.seeds) {
    for (const auto& spec : cells) {
      AblationCell cell;
      cell.spec = spec;
      cell.seed = seed;
      try {
        const auto tc = cell_config(cfg, spec, seed);
        const auto r = opts.reuse ? pretrain_cached(tc, corpus) : trainer::pretrain(tc, corpus);
        cell.checkpoint = r.checkpoint;
        cell.initial = r.initial;
        cell.final = r.final;
        const auto loaded = trainer::load_model(r.checkpoint);
        cell.metrics = evaluation::transfer_report(loaded.model, corpus, corpus.test, spec.name);
        if (cfg.ablation_finetune_seg) {
          auto fc = cfg.finetune_config(trainer::Task::kFinetuneSeg, seed, cell_dir(cfg, spec, seed) / "seg");
          fc.model = tc.model;
          const auto fr = opts.reuse ? finetune_cached(fc, corpus, r.checkpoint)
                                     : trainer::finetune_seg(fc, corpus, r.checkpoint);
          cell.seg_checkpoint = fr.checkpoint;
          const auto seg = evaluation::segmentation_report(trainer::load_model(fr.checkpoint).model, corpus,
                                                           corpus.test);
          for (const auto& row : seg.rows) {
            cell.metrics.add(spec.name + ":seg:" + row.setting_id, row.present_modalities, row.mn, row.metric,
                             row.value);
          }
        }
      } catch (const std::exception& e) {
        if (!opts.quarantine) throw;
        cell.status = "failed";
        cell.error = e.what();
        std::cerr << "ablation cell " << spec.name << " seed " << seed << " failed: " << e.what() << "\n";
      }
      out.push_back(std::move(cell));
    }
  }
  return out;
}

std::map<std::string, double> average_metric(const std::vector<AblationCell>& cells, std::uint64_t seed,
                                             const std::string& metric) {
  std::map<std::string, double> out;
  for (const auto& c : cells) {
    if (c.seed != seed || c.status != "ok") continue;
    double sum = 0.0;
    int n = 0;
    for (const auto& row : c.metrics.rows) {
      if (row.metric == metric && row.setting_id.find(":seg:") == std::string::npos) {
        sum += row.value;
        ++n;
      }
    }
    if (n > 0) out[c.spec.name] = sum / n;
  }
  return out;
}

std::vector<AuditMismatch> audit(const std::vector<AblationCell>& cells, const trainer::Corpus& corpus,
                                 double tolerance) {
  std::vector<AuditMismatch> out;
  for (const auto& c : cells) {
    if (c.status != "ok") continue;
    const auto model = trainer::load_model(c.checkpoint).model;
    const auto again = evaluation::transfer_report(model, corpus, corpus.test, c.spec.name);
    for (const auto& row : c.metrics.rows) {
      if (row.setting_id.find(":seg:") != std::string::npos) continue;
      const auto it = std::find_if(again.rows.begin(), again.rows.end(), [&](const metrics::MetricRow& r) {
        return r.setting_id == row.setting_id && r.metric == row.metric;
      });
      const double v = it == again.rows.end() ? std::nan("") : it->value;
      if (!(std::abs(v - row.value) <= tolerance)) {
        out.push_back({c.spec.name, c.seed, row.setting_id, row.metric, row.value, v});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checks

namespace {

constexpr double kStep = 1e-5;

Tensor random_param(Rng& rng, ag::Dims shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::parameter(std::move(shape), std::move(v));
}

Tensor random_const(Rng& rng, ag::Dims shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::constant(std::move(shape), std::move(v));
}

Tensor unit_param(Rng& rng, int dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    n += x * x;
  }
  for (auto& x : v) x /= std::sqrt(n);
  return Tensor::parameter({dim}, std::move(v));
}

/// Weighted sum of a tensor against fixed random weights, giving a scalar with a dense gradient.
Tensor probe(const Tensor& x, std::uint64_t seed) {
  Rng rng(seed);
  return ag::sum(ag::mul(x, random_const(rng, x.shape())));
}

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

GradcheckResult check(const std::string& target, std::vector<Tensor> inputs, const std::function<Tensor()>& f) {
  for (auto& t : inputs) t.zero_grad();
  ag::backward(f());
  GradcheckResult res;
  res.target = target;
  for (auto& t : inputs) {
    const std::vector<double> analytic = t.grad();
    std::vector<double> numeric(t.size());
    auto& x = t.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = x[i];
      double fp, fm;
      {
        ag::NoGradGuard ng;
        x[i] = x0 + kStep;
        fp = f().item();
        x[i] = x0 - kStep;
        fm = f().item();
      }
      x[i] = x0;
      numeric[i] = (fp - fm) / (2.0 * kStep);
    }
    std::vector<double> diff(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) diff[i] = analytic[i] - numeric[i];
    const double denom = std::max({norm(analytic), norm(numeric), 1e-8});
    res.max_rel_error = std::max(res.max_rel_error, norm(diff) / denom);
    res.checked += static_cast<int>(x.size());
  }
  return res;
}

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.modalities = 2;
  c.widths = {2, 3};
  c.slots = 3;
  c.proj_dim = 4;
  return c;
}

/// Tiny model with every parameter redrawn away from zero.
model::Model tiny_model(std::uint64_t seed) {
  model::Model m(tiny_config(), seed);
  Rng rng(derive_seed(seed, 7));
  for (auto& [name, p] : m.parameters()) {
    for (auto& v : p.mutable_data()) v = rng.uniform(-0.8, 0.8);
  }
  return m;
}

std::vector<Tensor> params_with_prefix(model::Model& m, const std::vector<std::string>& prefixes) {
  std::vector<Tensor> out;
  for (auto& [name, p] : m.parameters()) {
    for (const auto& pre : prefixes) {
      if (name.rfind(pre, 0) == 0) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}

using Check = std::function<GradcheckResult(std::uint64_t)>;

const std::map<std::string, Check>& registry() {
  static const std::map<std::string, Check> r{
      {"contrastive_loss",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor a = unit_param(rng, 8), p = unit_param(rng, 8);
         std::vector<Tensor> negs{unit_param(rng, 8), unit_param(rng, 8), unit_param(rng, 8)};
         std::vector<Tensor> in{a, p};
         in.insert(in.end(), negs.begin(), negs.end());
         return check("contrastive_loss", in, [=] { return losses::contrastive_loss(a, p, negs, 0.5); });
       }},
      {"invariance_loss",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor f = random_param(rng, {2, 2, 2, 2}), t = random_param(rng, {2, 2, 2, 2});
         return check("invariance_loss", {f, t}, [=] { return losses::invariance_loss(f, t); });
       }},
      {"sequential_mean_update",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor r = random_param(rng, {2, 2, 2, 2}), x = random_param(rng, {2, 2, 2, 2});
         return check("sequential_mean_update", {r, x},
                      [=] { return probe(losses::sequential_mean_update(r, x), seed + 1); });
       }},
      {"equivariance_loss",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor p = random_param(rng, {4}, 0.05, 1.0);
         const RotationTransform truth(rng.uniform_int(0, 3));
         return check("equivariance_loss", {p}, [=] { return losses::equivariance_loss(p, truth); });
       }},
      {"equivariance_loss@clamped",
       [](std::uint64_t seed) {
         Rng rng(seed);
         const int k = rng.uniform_int(0, 3);
         std::vector<double> v{0.4, 0.3, 0.3, 0.3};
         v[k] = 1e-13;
         Tensor p = Tensor::parameter({4}, v);
         bool clamped = false;
         losses::equivariance_loss(p, RotationTransform(k), &clamped);
         GradcheckResult res;
         res.target = "equivariance_loss@clamped";
         if (clamped) {
           res.skipped = true;
           res.note = "true-class probability below the log floor; the clamp is not differentiable there";
           return res;
         }
         return check(res.target, {p}, [=] { return losses::equivariance_loss(p, RotationTransform(k)); });
       }},
      {"decomposition_loss",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor d = random_param(rng, {2, 3, 4, 4});
         const Tensor t = random_const(rng, {2, 3, 4, 4});
         const RotationTransform r(rng.uniform_int(0, 3));
         return check("decomposition_loss", {d}, [=] { return losses::decomposition_loss(d, r, t); });
       }},
      {"pretrain_loss",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor c = random_param(rng, {}, 0, 2), de = random_param(rng, {}, 0, 2), e = random_param(rng, {}, 0, 2),
                i = random_param(rng, {}, 0, 2);
         losses::LossWeights w{0.5, 1.5, 2.0, 0.7, 0.5};
         return check("pretrain_loss", {c, de, e, i}, [=] { return losses::pretrain_loss(c, de, e, i, w); });
       }},
      {"dice_loss",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor p = random_param(rng, {1, 2, 2, 2}, 0.05, 0.95);
         std::vector<double> g(8);
         for (auto& x : g) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
         const Tensor lab = Tensor::constant({1, 2, 2, 2}, g);
         return check("dice_loss", {p}, [=] { return losses::dice_loss(p, lab); });
       }},
      {"weighted_ce_loss",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor p = random_param(rng, {2, 2, 2, 2}, 0.05, 0.95);
         std::vector<std::uint8_t> lab(8);
         for (auto& x : lab) x = rng.bernoulli(0.5) ? 1 : 0;
         const std::vector<double> w{0.6, 1.4};
         return check("weighted_ce_loss", {p}, [=] { return losses::weighted_ce_loss(p, lab, w); });
       }},
      {"transfer_loss",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor d = random_param(rng, {2, 2, 2, 2});
         const Tensor t = random_const(rng, {2, 2, 2, 2});
         return check("transfer_loss", {d}, [=] { return losses::transfer_loss(d, t); });
       }},
      {"downstream_loss",
       [](std::uint64_t seed) {
         Rng rng(seed);
         Tensor t = random_param(rng, {}, 0, 2), i = random_param(rng, {}, 0, 2);
         return check("downstream_loss", {t, i}, [=] { return losses::downstream_loss(t, i, 0.8); });
       }},
      {"encode",
       [](std::uint64_t seed) {
         auto m = tiny_model(seed);
         Rng rng(derive_seed(seed, 8));
         Tensor x = random_param(rng, {2, 4, 4, 4});
         auto in = params_with_prefix(m, {"encoder."});
         in.push_back(x);
         return check("encode", in, [m, x, seed] {
           const auto enc = m.encode(x);
           Tensor s = Tensor::scalar(0.0);
           for (std::size_t l = 0; l < enc.intermediates.size(); ++l) s = ag::add(s, probe(enc.intermediates[l], seed + l));
           return s;
         });
       }},
      {"decode",
       [](std::uint64_t seed) {
         auto m = tiny_model(seed);
         Rng rng(derive_seed(seed, 8));
         Tensor skip = random_param(rng, {2, 2, 2, 2}), xh = random_param(rng, {3, 1, 1, 1});
         auto in = params_with_prefix(m, {"decoder."});
         in.push_back(skip);
         in.push_back(xh);
         return check("decode", in, [m, skip, xh, seed] { return probe(m.decode(xh, {skip, xh}), seed); });
       }},
      {"fuse",
       [](std::uint64_t seed) {
         auto m = tiny_model(seed);
         Rng rng(derive_seed(seed, 8));
         Tensor z = random_param(rng, {3, 2, 2, 2}), zr = random_param(rng, {3, 2, 2, 2});
         auto in = params_with_prefix(m, {"fusion."});
         in.push_back(z);
         in.push_back(zr);
         return check("fuse", in, [m, z, zr, seed] { return probe(m.fuse(z, zr), seed); });
       }},
      {"retrieve_prior",
       [](std::uint64_t seed) {
         auto m = tiny_model(seed);
         Rng rng(derive_seed(seed, 8));
         Tensor z = random_param(rng, {3, 2, 2, 2});
         auto in = params_with_prefix(m, {"prior."});
         in.push_back(z);
         return check("retrieve_prior", in, [m, z, seed] { return probe(m.retrieve_prior(z), seed); });
       }},
      {"predict_rotation",
       [](std::uint64_t seed) {
         auto m = tiny_model(seed);
         Rng rng(derive_seed(seed, 8));
         Tensor z = random_param(rng, {3, 2, 2, 2});
         auto in = params_with_prefix(m, {"rotation_head."});
         in.push_back(z);
         return check("predict_rotation", in, [m, z, seed] { return probe(m.predict_rotation(z), seed); });
       }},
      {"project_contrastive",
       [](std::uint64_t seed) {
         auto m = tiny_model(seed);
         Rng rng(derive_seed(seed, 8));
         Tensor z = random_param(rng, {3, 2, 2, 2});
         auto in = params_with_prefix(m, {"projection."});
         in.push_back(z);
         return check("project_contrastive", in, [m, z, seed] { return probe(m.project_contrastive(z), seed); });
       }},
  };
  return r;
}

}  // namespace

std::vector<std::string> gradcheck_targets() {
  std::vector<std::string> out;
  for (const auto& [name, f] : registry()) out.push_back(name);
  return out;
}

GradcheckResult gradcheck(const std::string& target, std::uint64_t seed) {
  const auto& r = registry();
  const auto it = r.find(target);
  if (it == r.end()) {
    std::string known;
    for (const auto& [name, f] : r) known += (known.empty() ? "" : ", ") + name;
    throw std::invalid_argument("unknown gradcheck target '" + target + "' (known: " + known + ")");
  }
  return it->second(seed);
}

// ---------------------------------------------------------------------------
// Reports

json ExperimentResults::to_json() const {
  json curves_j = json::array();
  for (const auto& c : curves) curves_j.push_back({{"label", c.label}, {"values", c.values}});
  return {{"experiment", experiment}, {"seed", seed}, {"metrics", metrics.to_json()}, {"curves", curves_j},
          {"bars", bars}};
}

ExperimentResults ExperimentResults::from_json(const json& j) {
  ExperimentResults r;
  r.experiment = j.at("experiment").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.metrics = metrics::MetricsReport::from_json(j.at("metrics"));
  for (const auto& c : j.at("curves")) {
    r.curves.push_back({c.at("label").get<std::string>(), c.at("values").get<std::vector<double>>()});
  }
  r.bars = j.at("bars").get<std::map<std::string, std::map<std::string, double>>>();
  return r;
}

bool ExperimentResults::operator==(const ExperimentResults& o) const {
  if (experiment != o.experiment || seed != o.seed || bars != o.bars) return false;
  if (curves.size() != o.curves.size() || metrics.rows.size() != o.metrics.rows.size()) return false;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    if (curves[i].label != o.curves[i].label || curves[i].values != o.curves[i].values) return false;
  }
  for (std::size_t i = 0; i < metrics.rows.size(); ++i) {
    const auto& a = metrics.rows[i];
    const auto& b = o.metrics.rows[i];
    const bool same_value = a.value == b.value || (std::isnan(a.value) && std::isnan(b.value));
    if (a.setting_id != b.setting_id || a.present_modalities != b.present_modalities || a.mn != b.mn ||
        a.metric != b.metric || !same_value) {
      return false;
    }
  }
  return true;
}

namespace {

constexpr int kWidth = 640, kHeight = 400, kMargin = 60;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void svg_open(std::ostream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape_xml(title)
     << "</text>\n"
     << "<line x1=\"" << kMargin << "\" y1=\"" << kHeight - kMargin << "\" x2=\"" << kWidth - kMargin << "\" y2=\""
     << kHeight - kMargin << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << kMargin << "\" y1=\"" << kMargin << "\" x2=\"" << kMargin << "\" y2=\"" << kHeight - kMargin
     << "\" stroke=\"black\"/>\n";
}

void y_axis_labels(std::ostream& os, double lo, double hi) {
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    const double y = kHeight - kMargin - (kHeight - 2.0 * kMargin) * t / 4.0;
    os << "<text x=\"" << kMargin - 5 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << std::setprecision(3) << v
       << "</text>\n";
  }
}

std::string line_chart(const std::vector<Curve>& curves, const std::string& title) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& c : curves) {
    for (double v : c.values) {
      if (!std::isfinite(v)) continue;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    n = std::max(n, c.values.size());
  }
  if (!(hi > lo)) {
    lo = std::isfinite(lo) ? lo - 1.0 : 0.0;
    hi = lo + 2.0;
  }
  std::ostringstream os;
  svg_open(os, title);
  y_axis_labels(os, lo, hi);
  const double plot_w = kWidth - 2.0 * kMargin, plot_h = kHeight - 2.0 * kMargin;
  for (std::size_t ci = 0; ci < curves.size(); ++ci) {
    const auto& c = curves[ci];
    const char* color = kPalette[ci % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < c.values.size(); ++i) {
      if (!std::isfinite(c.values[i])) continue;
      const double x = kMargin + (n > 1 ? plot_w * i / (n - 1) : plot_w / 2);
      const double y = kHeight - kMargin - plot_h * (c.values[i] - lo) / (hi - lo);
      os << std::fixed << std::setprecision(2) << x << "," << y << " ";
    }
    os << "\"/>\n";
    os << "<text x=\"" << kWidth - kMargin + 5 << "\" y=\"" << kMargin + 14 * ci << "\" fill=\"" << color
       << "\" font-size=\"10\">" << escape_xml(c.label) << "</text>\n";
  }
  os << "<text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - kMargin + 30 << "\" text-anchor=\"middle\">epoch</text>\n";
  os << "</svg>\n";
  return os.str();
}

std::string bar_chart(const std::map<std::string, double>& bars, const std::string& title) {
  double lo = 0.0, hi = 0.0;
  for (const auto& [k, v] : bars) {
    if (!std::isfinite(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) hi = lo + 1.0;
  std::ostringstream os;
  svg_open(os, title);
  y_axis_labels(os, lo, hi);
  const double plot_w = kWidth - 2.0 * kMargin, plot_h = kHeight - 2.0 * kMargin;
  const double slot = plot_w / std::max<std::size_t>(1, bars.size());
  const double y0 = kHeight - kMargin - plot_h * (0.0 - lo) / (hi - lo);
  std::size_t i = 0;
  for (const auto& [label, v] : bars) {
    const double val = std::isfinite(v) ? v : 0.0;
    const double y = kHeight - kMargin - plot_h * (val - lo) / (hi - lo);
    const double x = kMargin + slot * i + slot * 0.15;
    os << std::fixed << std::setprecision(2) << "<rect x=\"" << x << "\" y=\"" << std::min(y, y0) << "\" width=\""
       << slot * 0.7 << "\" height=\"" << std::abs(y0 - y) << "\" fill=\"" << kPalette[i % std::size(kPalette)]
       << "\"/>\n";
    os << "<text x=\"" << x + slot * 0.35 << "\" y=\"" << kHeight - kMargin + 14
       << "\" text-anchor=\"middle\" font-size=\"10\">" << escape_xml(label) << "</text>\n";
    os << std::setprecision(4) << std::defaultfloat << "<text x=\"" << x + slot * 0.35 << "\" y=\""
       << std::min(y, y0) - 4 << "\" text-anchor=\"middle\" font-size=\"9\">" << v << "</text>\n";
    ++i;
  }
  os << "</svg>\n";
  return os.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

std::vector<fs::path> emit_report(const ExperimentResults& results, const fs::path& dir) {
  if (results.metrics.rows.empty() && results.curves.empty() && results.bars.empty()) {
    throw std::invalid_argument("emit_report: results are empty");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("emit_report: cannot create directory " + dir.string());
  const std::string stem = results.experiment + "_" + std::to_string(results.seed);
  std::vector<fs::path> written;
  written.push_back(dir / (stem + ".csv"));
  write_file(written.back(), results.metrics.to_csv());
  written.push_back(dir / (stem + ".json"));
  write_file(written.back(), results.to_json().dump(2) + "\n");
  if (!results.curves.empty()) {
    written.push_back(dir / (stem + "_loss.svg"));
    write_file(written.back(), line_chart(results.curves, stem + " losses"));
  }
  for (const auto& [metric, bars] : results.bars) {
    written.push_back(dir / (stem + "_" + metric + ".svg"));
    write_file(written.back(), bar_chart(bars, stem + " " + metric));
  }
  return written;
}

std::vector<Curve> loss_curves(const std::vector<trainer::LossReport>& epochs, const std::string& prefix) {
  std::vector<Curve> out;
  auto add = [&](const std::string& name, double trainer::LossReport::*field) {
    Curve c{prefix + name, {}};
    for (const auto& e : epochs) c.values.push_back(e.*field);
    out.push_back(std::move(c));
  };
  add("total", &trainer::LossReport::total);
  add("contr", &trainer::LossReport::contr);
  add("decom", &trainer::LossReport::decom);
  add("equ", &trainer::LossReport::equ);
  add("inv", &trainer::LossReport::inv);
  add("task", &trainer::LossReport::task);
  return out;
}

}  // namespace puir::harness
