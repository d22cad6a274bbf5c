#include "puir/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "puir/rng.hpp"

namespace puir::trainer {

using model::Tensor;
using phantom::apply_rotation;

std::string to_string(Task t) {
  switch (t) {
    case Task::kPretrain: return "pretrain";
    case Task::kFinetuneSeg: return "finetune-seg";
    case Task::kFinetuneTransfer: return "finetune-transfer";
  }
  return "?";
}

Task task_from_string(const std::string& s) {
  if (s == "pretrain") return Task::kPretrain;
  if (s == "finetune-seg" || s == "seg") return Task::kFinetuneSeg;
  if (s == "finetune-transfer" || s == "transfer") return Task::kFinetuneTransfer;
  throw std::invalid_argument("unknown task '" + s + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1, got " + std::to_string(epochs));
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rate must be > 0");
  if (optimizer != "adam") throw std::invalid_argument("unsupported optimizer '" + optimizer + "'");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
  if (missingness != "uniform" && missingness != "full") {
    throw std::invalid_argument("missingness must be 'uniform' or 'full', got '" + missingness + "'");
  }
  if (max_train < 0) throw std::invalid_argument("max_train must be >= 0");
  weights.validate();
  model.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"task", to_string(task)},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"optimizer", optimizer},
          {"seed", seed},
          {"weights",
           {{"contr", weights.contr},
            {"decom", weights.decom},
            {"equ", weights.equ},
            {"inv", weights.inv},
            {"temperature", weights.temperature}}},
          {"model", model.to_json()},
          {"augment",
           {{"crop", augment.crop},
            {"crop_min_frac", augment.crop_min_frac},
            {"flip", augment.flip},
            {"intensity_scale", augment.intensity_scale},
            {"scale_lo", augment.scale_lo},
            {"scale_hi", augment.scale_hi},
            {"noise", augment.noise},
            {"noise_frac", augment.noise_frac}}},
          {"checkpoint_every", checkpoint_every},
          {"shuffle_modalities", shuffle_modalities},
          {"exact_mean", exact_mean},
          {"inv_stop_grad", inv_stop_grad},
          {"missingness", missingness},
          {"max_train", max_train}};
}

std::string TrainConfig::hash() const {
  const std::string s = to_json().dump();
  return io::hex64(io::fnv1a64(s.data(), s.size()));
}

TrainState::TrainState(const ModelConfig& cfg, std::uint64_t seed, double lr)
    : TrainState(Model(cfg, seed), lr) {}

TrainState::TrainState(Model m, double lr) : model(std::move(m)), optimizer(model.parameters(), lr) {}

Corpus Corpus::load(const fs::path& manifest_path) {
  Corpus c;
  c.manifest = io::load_manifest(manifest_path);
  for (std::size_t i = 0; i < c.manifest.individuals.size(); ++i) {
    c.samples.push_back(io::load_sample(c.manifest, i));
  }
  c.train = c.manifest.indices(phantom::Split::kTrain);
  c.test = c.manifest.indices(phantom::Split::kTest);
  return c;
}

Corpus Corpus::from_samples(std::vector<MultiModalSample> samples) {
  Corpus c;
  c.samples = std::move(samples);
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    (c.samples[i].split == phantom::Split::kTrain ? c.train : c.test).push_back(i);
  }
  if (!c.samples.empty()) c.manifest.shape = c.samples.front().volumes.begin()->second.shape();
  return c;
}

std::vector<std::string> Corpus::modality_ids() const {
  if (!manifest.modalities.empty()) return manifest.modality_ids();
  if (samples.empty()) return {};
  return samples.front().modality_order;
}

Tensor modality_stack(const MultiModalSample& s, const std::vector<std::string>& order) {
  std::vector<const Volume*> vols;
  for (const auto& id : order) vols.push_back(&s.volume(id));
  return model::stack_volumes(vols);
}

Tensor network_input(const Volume& v, int modalities) {
  return model::replicate_channels(model::standardize(v), modalities);
}

namespace {

/// Rolls the in-plane h axis by half its extent.
Volume shift_half(const Volume& v) {
  const Shape3 s = v.shape();
  Volume out(s);
  for (int d = 0; d < s.d; ++d)
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w) out.at(d, (h + s.h / 2) % s.h, w) = v.at(d, h, w);
  return out;
}

Tensor lesion_target(const MultiModalSample& s) {
  const auto& lab = s.seg_labels;
  std::vector<double> g(lab.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = lab[i] == phantom::kLesion ? 1.0 : 0.0;
  const Shape3 sh = lab.shape();
  return Tensor::constant({1, sh.d, sh.h, sh.w}, std::move(g));
}

std::vector<std::uint8_t> lesion_labels(const MultiModalSample& s) {
  std::vector<std::uint8_t> g(s.seg_labels.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = s.seg_labels[i] == phantom::kLesion ? 1 : 0;
  return g;
}

void require_modalities(const MultiModalSample& s, const std::vector<std::string>& order) {
  for (const auto& id : order) {
    if (!s.volumes.count(id)) {
      throw std::invalid_argument("individual " + s.individual_id + " is missing modality '" + id +
                                  "'; pre-training needs every modality");
    }
  }
}

LossReport accumulate(const LossReport& a, const LossReport& b) {
  LossReport r = a;
  r.contr += b.contr;
  r.decom += b.decom;
  r.equ += b.equ;
  r.inv += b.inv;
  r.total += b.total;
  r.dice += b.dice;
  r.wce += b.wce;
  r.task += b.task;
  r.clamped = a.clamped || b.clamped;
  return r;
}

LossReport divided(LossReport r, double n) {
  r.contr /= n;
  r.decom /= n;
  r.equ /= n;
  r.inv /= n;
  r.total /= n;
  r.dice /= n;
  r.wce /= n;
  r.task /= n;
  return r;
}

double parameter_norm(const Model& m) {
  double s = 0.0;
  for (const auto& [name, t] : m.parameters()) {
    for (double x : t.data()) s += x * x;
  }
  return std::sqrt(s);
}

[[noreturn]] void abort_non_finite(const TrainConfig& cfg, const Model& m, int epoch, long step,
                                   const std::string& individual, const LossReport& r) {
  nlohmann::json snap = {{"epoch", epoch},
                         {"step", step},
                         {"individual", individual},
                         {"losses", r.to_json()},
                         {"parameter_norm", parameter_norm(m)},
                         {"config", cfg.to_json()}};
  nlohmann::json norms = nlohmann::json::object();
  for (const auto& [name, t] : m.parameters()) {
    double s = 0.0;
    bool finite = true;
    for (double x : t.data()) {
      s += x * x;
      finite = finite && std::isfinite(x);
    }
    norms[name] = {{"norm", std::sqrt(s)}, {"finite", finite}};
  }
  snap["parameters"] = norms;
  fs::path path = "diagnostic.json";
  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    path = cfg.out_dir / "diagnostic.json";
  }
  std::ofstream(path) << snap.dump(2) << "\n";
  throw NonFiniteLoss("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                      " (individual " + individual + "); snapshot written to " + path.string());
}

std::vector<std::string> modality_order_for(const TrainConfig& cfg, const std::vector<std::string>& base,
                                            std::uint64_t seed) {
  std::vector<std::string> order = base;
  if (cfg.shuffle_modalities) {
    Rng rng(derive_seed(seed, 77));
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }
  }
  return order;
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> v, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  }
  return v;
}

std::vector<std::size_t> training_indices(const TrainConfig& cfg, const Corpus& corpus) {
  std::vector<std::size_t> idx = corpus.train;
  if (cfg.max_train > 0 && static_cast<std::size_t>(cfg.max_train) < idx.size()) idx.resize(cfg.max_train);
  if (idx.empty()) throw std::invalid_argument("no training individuals");
  return idx;
}

ModelConfig model_config_for(const TrainConfig& cfg, const Corpus& corpus) {
  ModelConfig mc = cfg.model;
  const int m = static_cast<int>(corpus.modality_ids().size());
  if (mc.modalities != m) {
    throw std::invalid_argument("model expects " + std::to_string(mc.modalities) + " modalities but the dataset has " +
                                std::to_string(m));
  }
  return mc;
}

void reset_log(const fs::path& path) {
  std::error_code ec;
  fs::remove(path, ec);
}

nlohmann::json epoch_record(int epoch, const LossReport& r, double seconds) {
  nlohmann::json j = r.to_json();
  j["epoch"] = epoch;
  j["wall_time_s"] = seconds;
  return j;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

Tensor pretrain_objective(const Model& m, const PretrainInputs& in, const TrainConfig& cfg, LossReport* report) {
  const MultiModalSample& s = *in.sample;
  const auto& order = in.modality_order;
  require_modalities(s, order);
  if (in.negative) require_modalities(*in.negative, order);
  const int nm = static_cast<int>(order.size());
  if (nm != m.config().modalities) {
    throw std::invalid_argument("pretrain: model has " + std::to_string(m.config().modalities) +
                                " input channels but " + std::to_string(nm) + " modalities were given");
  }
  const auto& w = cfg.weights;
  const Tensor targets = modality_stack(s, order);

  Rng rng(in.seed);
  losses::RunningMean running(cfg.exact_mean);
  Tensor contr = Tensor::scalar(0.0), equ = Tensor::scalar(0.0), inv = Tensor::scalar(0.0),
         decom = Tensor::scalar(0.0);
  LossReport r;
  for (int i = 0; i < nm; ++i) {
    const std::string& mod = order[i];
    const RotationTransform phi(rng.uniform_int(0, 3));
    const std::uint64_t pos_seed = rng.next_u64();
    const std::uint64_t neg_seed = rng.next_u64();
    const Volume x = apply_rotation(s.volume(mod), phi);

    const auto enc = m.encode(network_input(x, nm));
    const Tensor& z = enc.final;

    if (w.contr > 0.0) {
      const Volume xp = phantom::augment(x, cfg.augment, pos_seed);
      const Volume neg_src =
          in.negative ? apply_rotation(in.negative->volume(mod), phi) : shift_half(x);
      const Volume xn = phantom::augment(neg_src, cfg.augment, neg_seed);
      const Tensor ea = m.project_contrastive(z);
      const Tensor ep = m.project_contrastive(m.encode(network_input(xp, nm)).final);
      const Tensor en = m.project_contrastive(m.encode(network_input(xn, nm)).final);
      const Tensor negs[] = {en};
      contr = ag::add(contr, losses::contrastive_loss(ea, ep, negs, w.temperature));
    }

    equ = ag::add(equ, losses::equivariance_loss(m.predict_rotation(z), phi, &r.clamped));

    const Tensor fused = m.represent(z);
    if (!running.empty()) {
      const Tensor target = cfg.inv_stop_grad ? running.value().detach() : running.value();
      inv = ag::add(inv, losses::invariance_loss(fused, target));
    }
    running.update(fused);

    const Tensor decoded = m.decode(fused, enc.intermediates);
    decom = ag::add(decom, losses::decomposition_loss(decoded, phi, targets));
  }
  const Tensor total = losses::pretrain_loss(contr, decom, equ, inv, w);
  if (report) {
    r.contr = contr.item();
    r.decom = decom.item();
    r.equ = equ.item();
    r.inv = inv.item();
    r.total = total.item();
    *report = r;
  }
  return total;
}

LossReport pretrain_step(const PretrainInputs& in, TrainState& state, const TrainConfig& cfg) {
  state.optimizer.zero_grad();
  LossReport r;
  const Tensor total = pretrain_objective(state.model, in, cfg, &r);
  if (!std::isfinite(r.total)) {
    abort_non_finite(cfg, state.model, state.epoch, state.step, in.sample->individual_id, r);
  }
  ag::backward(total);
  state.optimizer.step();
  ++state.step;
  return r;
}

namespace {

/// Shared per-modality encode / retrieve / fuse / invariance loop of the fine-tuning objectives.
template <typename Head>
Tensor finetune_objective(const Model& m, const FinetuneInputs& in, const TrainConfig& cfg, LossReport* report,
                          Head head) {
  if (in.available.empty()) throw std::invalid_argument("fine-tuning needs a non-empty modality subset");
  const MultiModalSample& s = *in.sample;
  const int nm = m.config().modalities;
  losses::RunningMean running(cfg.exact_mean);
  Tensor task = Tensor::scalar(0.0), inv = Tensor::scalar(0.0);
  LossReport r;
  for (const auto& mod : in.available) {
    const auto enc = m.encode(network_input(s.volume(mod), nm));
    const Tensor fused = m.represent(enc.final);
    if (!running.empty()) {
      const Tensor target = cfg.inv_stop_grad ? running.value().detach() : running.value();
      inv = ag::add(inv, losses::invariance_loss(fused, target));
    }
    running.update(fused);
    task = ag::add(task, head(fused, enc.intermediates, r));
  }
  const Tensor total = losses::downstream_loss(task, inv, cfg.weights.inv);
  if (report) {
    r.task = task.item();
    r.inv = inv.item();
    r.total = total.item();
    *report = r;
  }
  return total;
}

}  // namespace

Tensor finetune_seg_objective(const Model& m, const FinetuneInputs& in, const TrainConfig& cfg, LossReport* report) {
  const Tensor g = lesion_target(*in.sample);
  const auto labels = lesion_labels(*in.sample);
  return finetune_objective(m, in, cfg, report, [&](const Tensor& fused, const std::vector<Tensor>& skips,
                                                    LossReport& r) {
    const Tensor probs = ag::softmax_channels(m.decode_segmentation(fused, skips));
    const Tensor d = losses::dice_loss(ag::select_channel(probs, 1), g);
    const Tensor ce = losses::weighted_ce_loss(probs, labels, in.class_weights, &r.clamped);
    r.dice += d.item();
    r.wce += ce.item();
    return ag::add(d, ce);
  });
}

Tensor finetune_transfer_objective(const Model& m, const FinetuneInputs& in, const TrainConfig& cfg,
                                   LossReport* report) {
  const Tensor targets = modality_stack(*in.sample, in.modality_order);
  return finetune_objective(m, in, cfg, report,
                            [&](const Tensor& fused, const std::vector<Tensor>& skips, LossReport&) {
                              return losses::transfer_loss(m.decode(fused, skips), targets);
                            });
}

void save_model(const Model& m, const fs::path& path, const nlohmann::json& extra,
                const std::vector<std::string>& modalities, const optim::Adam* opt) {
  io::Checkpoint ck;
  ck.metadata = extra.is_object() ? extra : nlohmann::json::object();
  ck.metadata["format_version"] = io::kCheckpointFormatVersion;
  ck.metadata["model_config"] = m.config().to_json();
  ck.metadata["config_hash"] = m.config().hash();
  ck.metadata["modalities"] = modalities;
  ck.arrays = m.export_arrays();
  if (opt) {
    auto st = opt->export_state();
    ck.arrays.insert(ck.arrays.end(), st.begin(), st.end());
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::save_checkpoint(ck, path);
}

LoadedModel load_model(const fs::path& path, const std::optional<ModelConfig>& expected, bool allow_mismatch) {
  const io::Checkpoint ck = io::load_checkpoint(path);
  if (!ck.metadata.contains("model_config")) {
    throw io::FormatError(path.string() + ": metadata.model_config missing");
  }
  ModelConfig stored = ModelConfig::from_json(ck.metadata.at("model_config"));
  ModelConfig use = stored;
  if (expected) {
    if (expected->hash() != stored.hash()) {
      if (!allow_mismatch) {
        throw io::FormatError(path.string() + ": model config hash " + stored.hash() +
                              " does not match the requested config " + expected->hash());
      }
      std::cerr << "warning: " << path.string() << " was saved with a different model config\n";
      use = *expected;
    }
  }
  Model m(use, 0);
  m.import_arrays(ck.arrays);
  std::vector<std::string> mods;
  if (ck.metadata.contains("modalities")) mods = ck.metadata.at("modalities").get<std::vector<std::string>>();
  return {std::move(m), std::move(mods), ck.metadata};
}

namespace {

/// Evaluates the pre-training objective over `idx` with fixed per-individual seeds, no updates.
LossReport evaluate_pretrain(const Model& m, const TrainConfig& cfg, const Corpus& corpus,
                             const std::vector<std::size_t>& idx, const std::vector<std::string>& order) {
  ag::NoGradGuard ng;
  LossReport sum;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    PretrainInputs in;
    in.sample = &corpus.samples[idx[j]];
    in.negative = idx.size() > 1 ? &corpus.samples[idx[(j + 1) % idx.size()]] : nullptr;
    in.modality_order = order;
    in.seed = derive_seed(cfg.seed, 900000 + j);
    LossReport r;
    pretrain_objective(m, in, cfg, &r);
    sum = accumulate(sum, r);
  }
  return divided(sum, static_cast<double>(idx.size()));
}

}  // namespace

RunResult pretrain(const TrainConfig& cfg, const Corpus& corpus) {
  cfg.validate();
  const auto idx = training_indices(cfg, corpus);
  const auto modalities = corpus.modality_ids();
  TrainState state(model_config_for(cfg, corpus), derive_seed(cfg.seed, 1), cfg.lr);
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
  const fs::path log = cfg.out_dir / "train_log.jsonl";
  if (!cfg.out_dir.empty()) reset_log(log);

  RunResult result;
  result.initial = evaluate_pretrain(state.model, cfg, corpus, idx, modalities);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    const auto t0 = Clock::now();
    const auto order = shuffled(idx, derive_seed(cfg.seed, 100000 + epoch));
    Rng neg_rng(derive_seed(cfg.seed, 200000 + epoch));
    LossReport sum;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      state.optimizer.zero_grad();
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      for (std::size_t j = b; j < e; ++j) {
        PretrainInputs in;
        in.sample = &corpus.samples[order[j]];
        if (order.size() > 1) {
          std::size_t k = order[j];
          while (k == order[j]) k = order[static_cast<std::size_t>(neg_rng.uniform_int(0, static_cast<int>(order.size()) - 1))];
          in.negative = &corpus.samples[k];
        }
        in.seed = derive_seed(cfg.seed, 1000000 + static_cast<std::uint64_t>(epoch) * 100000 + j);
        in.modality_order = modality_order_for(cfg, modalities, in.seed);
        LossReport r;
        const Tensor total = pretrain_objective(state.model, in, cfg, &r);
        if (!std::isfinite(r.total)) abort_non_finite(cfg, state.model, epoch, state.step, in.sample->individual_id, r);
        ag::backward(total);
        sum = accumulate(sum, r);
      }
      state.optimizer.step();
      ++state.step;
    }
    const LossReport mean = divided(sum, static_cast<double>(order.size()));
    result.epoch_means.push_back(mean);
    if (!cfg.out_dir.empty()) {
      io::append_jsonl(log, epoch_record(epoch + 1, mean, seconds_since(t0)));
      if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
        save_model(state.model, cfg.out_dir / ("checkpoint_epoch" + std::to_string(epoch + 1) + ".ckpt"),
                   {{"epoch", epoch + 1}, {"task", "pretrain"}, {"losses", mean.to_json()}}, modalities,
                   &state.optimizer);
      }
    }
  }
  state.epoch = cfg.epochs;
  result.final = evaluate_pretrain(state.model, cfg, corpus, idx, modalities);
  result.parameter_hash = state.model.parameter_hash();
  if (!cfg.out_dir.empty()) {
    result.checkpoint = cfg.out_dir / "checkpoint.ckpt";
    save_model(state.model, result.checkpoint,
               {{"epoch", cfg.epochs},
                {"task", "pretrain"},
                {"train_config", cfg.to_json()},
                {"initial_losses", result.initial.to_json()},
                {"final_losses", result.final.to_json()}},
               modalities, &state.optimizer);
  }
  return result;
}

namespace {

std::vector<std::string> draw_subset(const TrainConfig& cfg, const std::vector<std::string>& order, Rng& rng) {
  if (cfg.missingness == "full") return order;
  const int n = static_cast<int>(order.size());
  const int mask = rng.uniform_int(1, (1 << n) - 1);
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) {
    if (mask & (1 << i)) out.push_back(order[i]);
  }
  return out;
}

std::vector<double> lesion_class_weights(const Corpus& corpus, const std::vector<std::size_t>& idx) {
  std::vector<std::uint64_t> counts(2, 0);
  for (auto i : idx) {
    for (auto v : corpus.samples[i].seg_labels.data()) ++counts[v == phantom::kLesion ? 1 : 0];
  }
  return losses::inverse_frequency_weights(counts);
}

template <typename Objective>
RunResult finetune(const TrainConfig& cfg, const Corpus& corpus, const fs::path& from, Objective objective) {
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  TrainConfig checked = cfg;
  checked.epochs = std::max(1, cfg.epochs);
  checked.validate();
  const auto idx = training_indices(cfg, corpus);
  const auto modalities = corpus.modality_ids();
  const ModelConfig mc = model_config_for(cfg, corpus);
  Model init = from.empty() ? Model(mc, derive_seed(cfg.seed, 2)) : load_model(from, mc).model;
  TrainState state(std::move(init), cfg.lr);
  if (!cfg.out_dir.empty()) fs::create_directories(cfg.out_dir);
  const fs::path log = cfg.out_dir / "train_log.jsonl";
  if (!cfg.out_dir.empty()) reset_log(log);

  FinetuneInputs base;
  base.modality_order = modalities;
  base.class_weights = lesion_class_weights(corpus, idx);

  RunResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    const auto t0 = Clock::now();
    const auto order = shuffled(idx, derive_seed(cfg.seed, 300000 + epoch));
    Rng rng(derive_seed(cfg.seed, 400000 + epoch));
    LossReport sum;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      state.optimizer.zero_grad();
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      for (std::size_t j = b; j < e; ++j) {
        FinetuneInputs in = base;
        in.sample = &corpus.samples[order[j]];
        in.available = draw_subset(cfg, modalities, rng);
        LossReport r;
        const Tensor total = objective(state.model, in, cfg, &r);
        if (!std::isfinite(r.total)) abort_non_finite(cfg, state.model, epoch, state.step, in.sample->individual_id, r);
        ag::backward(total);
        sum = accumulate(sum, r);
      }
      state.optimizer.step();
      ++state.step;
    }
    const LossReport mean = divided(sum, static_cast<double>(order.size()));
    result.epoch_means.push_back(mean);
    if (!cfg.out_dir.empty()) io::append_jsonl(log, epoch_record(epoch + 1, mean, seconds_since(t0)));
  }
  result.parameter_hash = state.model.parameter_hash();
  if (!cfg.out_dir.empty()) {
    result.checkpoint = cfg.out_dir / "checkpoint.ckpt";
    save_model(state.model, result.checkpoint,
               {{"epoch", cfg.epochs}, {"task", to_string(cfg.task)}, {"train_config", cfg.to_json()},
                {"from", from.string()}},
               modalities);
  }
  return result;
}

}  // namespace

RunResult finetune_seg(const TrainConfig& cfg, const Corpus& corpus, const fs::path& from) {
  return finetune(cfg, corpus, from, finetune_seg_objective);
}

RunResult finetune_transfer(const TrainConfig& cfg, const Corpus& corpus, const fs::path& from) {
  return finetune(cfg, corpus, from, finetune_transfer_objective);
}

Volume infer_transfer(const Model& m, const std::vector<std::string>& modalities, const Volume& source,
                      const std::string& source_modality, const std::string& target_modality) {
  const auto find = [&](const std::string& id) {
    const auto it = std::find(modalities.begin(), modalities.end(), id);
    if (it == modalities.end()) throw std::invalid_argument("unknown modality '" + id + "'");
    return static_cast<int>(it - modalities.begin());
  };
  find(source_modality);
  const int t = find(target_modality);
  ag::NoGradGuard ng;
  const auto enc = m.encode(network_input(source, m.config().modalities));
  return model::channel_to_volume(m.decode(m.represent(enc.final), enc.intermediates), t);
}

Volume infer_seg_probability(const Model& m, const std::vector<std::pair<std::string, const Volume*>>& available) {
  if (available.empty()) throw std::invalid_argument("infer_seg: need at least one modality");
  ag::NoGradGuard ng;
  const Shape3 shape = available.front().second->shape();
  const int nm = m.config().modalities;
  Tensor fused_sum;
  std::vector<Tensor> skip_sum;
  for (const auto& [id, v] : available) {
    if (!(v->shape() == shape)) {
      throw std::invalid_argument("infer_seg: modality '" + id + "' has shape " + v->shape().str() + ", expected " +
                                  shape.str());
    }
    const auto enc = m.encode(network_input(*v, nm));
    const Tensor fused = m.represent(enc.final);
    if (!fused_sum.defined()) {
      fused_sum = fused;
      skip_sum = enc.intermediates;
    } else {
      fused_sum = ag::add(fused_sum, fused);
      for (std::size_t l = 0; l < skip_sum.size(); ++l) skip_sum[l] = ag::add(skip_sum[l], enc.intermediates[l]);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(available.size());
  fused_sum = ag::scale(fused_sum, inv_n);
  for (auto& s : skip_sum) s = ag::scale(s, inv_n);
  const Tensor probs = ag::softmax_channels(m.decode_segmentation(fused_sum, skip_sum));
  return model::channel_to_volume(probs, 1);
}

LabelVolume infer_seg(const Model& m, const std::vector<std::pair<std::string, const Volume*>>& available) {
  const Volume p = infer_seg_probability(m, available);
  LabelVolume out(p.shape());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] > 0.5f ? 1 : 0;
  return out;
}

std::vector<double> fused_embedding(const Model& m, const Volume& v) {
  ag::NoGradGuard ng;
  const auto enc = m.encode(network_input(v, m.config().modalities));
  return ag::global_avg_pool(m.represent(enc.final)).data();
}

}  // namespace puir::trainer
