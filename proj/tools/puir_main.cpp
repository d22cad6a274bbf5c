// Command-line entry point. Exit codes: 0 success, 2 precondition error, 1 runtime failure.

#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "puir/config.hpp"
#include "puir/dataset.hpp"
#include "puir/evaluation.hpp"
#include "puir/harness.hpp"
#include "puir/trainer.hpp"

namespace {

using namespace puir;
namespace fs = std::filesystem;

constexpr int kPrecondition = 2;
constexpr int kRuntime = 1;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

config::ExperimentConfig load(const Common& c) {
  auto cfg = config::load_experiment(c.config);
  for (const auto& kv : c.overrides) {
    const auto [k, v] = config::parse_override(kv);
    cfg.set(k, v);
  }
  config::apply_seed_override(cfg);
  cfg.validate();
  return cfg;
}

void print_losses(const std::string& label, const trainer::LossReport& r) {
  std::cout << label << " total=" << r.total << " contr=" << r.contr << " decom=" << r.decom << " equ=" << r.equ
            << " inv=" << r.inv << "\n";
}

void print_report(const metrics::MetricsReport& rep) {
  for (const auto& row : rep.rows) {
    std::cout << "  " << std::left << std::setw(28) << row.setting_id << " MN=" << row.mn << " " << std::setw(15)
              << row.metric << " " << row.value << "\n";
  }
}

int cmd_gen_data(const Common& c, bool force) {
  auto cfg = load(c);
  if (std::getenv("PUIR_SEED")) cfg.data.seed = cfg.seeds.front();
  const auto m = phantom::generate_dataset(cfg.data, cfg.data_dir, force);
  std::cout << "wrote " << m.individuals.size() << " individuals x " << m.modalities.size() << " modalities ("
            << m.shape.str() << ") to " << cfg.manifest_path().string() << "\n";
  return 0;
}

int cmd_pretrain(const Common& c) {
  const auto cfg = load(c);
  const auto corpus = trainer::Corpus::load(cfg.manifest_path());
  for (auto seed : cfg.seeds) {
    const auto tc = cfg.pretrain_config(seed, cfg.output_dir / ("pretrain_seed" + std::to_string(seed)));
    const auto r = trainer::pretrain(tc, corpus);
    std::cout << "seed " << seed << " checkpoint " << r.checkpoint.string() << " parameters " << r.parameter_hash
              << "\n";
    print_losses("  initial", r.initial);
    print_losses("  final  ", r.final);
    harness::ExperimentResults res;
    res.experiment = cfg.name + "-pretrain";
    res.seed = seed;
    res.curves = harness::loss_curves(r.epoch_means, "");
    res.metrics.add("pretrain", "all", 0, "initial_total", r.initial.total);
    res.metrics.add("pretrain", "all", 0, "final_total", r.final.total);
    harness::emit_report(res, tc.out_dir);
  }
  return 0;
}

metrics::MetricsReport evaluate(const trainer::LoadedModel& lm, const trainer::Corpus& corpus,
                                const std::string& missingness) {
  const std::string task = lm.metadata.value("task", "pretrain");
  if (task == trainer::to_string(trainer::Task::kFinetuneSeg)) {
    auto rep = evaluation::segmentation_report(lm.model, corpus, corpus.test);
    if (missingness == "all") return rep;
    metrics::MetricsReport sel;
    for (const auto& row : rep.rows) {
      if (row.setting_id == missingness) sel.rows.push_back(row);
    }
    if (sel.rows.empty()) throw std::invalid_argument("--missingness '" + missingness + "' names no modality subset");
    return sel;
  }
  if (missingness != "all") throw std::invalid_argument("--missingness applies to segmentation checkpoints only");
  auto rep = evaluation::transfer_report(lm.model, corpus, corpus.test, "transfer");
  if (task == "pretrain") {
    const int nm = static_cast<int>(corpus.modality_ids().size());
    const auto fd = evaluation::fused_distance(lm.model, corpus, corpus.test);
    rep.add("pretrain", "all", 0, "rotation_accuracy", evaluation::rotation_accuracy(lm.model, corpus, corpus.test));
    rep.add("pretrain", "all", 0, "equivariance_error", evaluation::equivariance_error(lm.model, corpus, corpus.test));
    rep.add("pretrain", "all", 0, "fused_distance", fd.raw);
    rep.add("pretrain", "all", 0, "fused_distance_normalized", fd.normalized);
    if (nm >= 2 && corpus.test.size() >= 2) {
      rep.add("pretrain", "all", 0, "personalization", evaluation::personalization(lm.model, corpus, corpus.test));
    }
  }
  return rep;
}

int cmd_finetune(const Common& c, const std::string& task_name, const std::string& from) {
  const auto cfg = load(c);
  const auto task = trainer::task_from_string(task_name);
  if (task == trainer::Task::kPretrain) throw std::invalid_argument("--task must be seg or transfer");
  if (!from.empty() && !fs::exists(from)) throw std::invalid_argument("checkpoint " + from + " does not exist");
  const auto corpus = trainer::Corpus::load(cfg.manifest_path());
  for (auto seed : cfg.seeds) {
    const auto tc = cfg.finetune_config(
        task, seed, cfg.output_dir / ("finetune_" + std::string(task_name) + "_seed" + std::to_string(seed)));
    const auto r = task == trainer::Task::kFinetuneSeg ? trainer::finetune_seg(tc, corpus, from)
                                                       : trainer::finetune_transfer(tc, corpus, from);
    std::cout << "seed " << seed << " checkpoint " << r.checkpoint.string() << " parameters " << r.parameter_hash
              << "\n";
    harness::ExperimentResults res;
    res.experiment = cfg.name + "-finetune-" + task_name;
    res.seed = seed;
    res.curves = harness::loss_curves(r.epoch_means, "");
    res.metrics = evaluate(trainer::load_model(r.checkpoint), corpus, "all");
    print_report(res.metrics);
    harness::emit_report(res, tc.out_dir);
  }
  return 0;
}

int cmd_eval(const Common& c, const std::string& from, const std::string& missingness) {
  const auto cfg = load(c);
  const auto corpus = trainer::Corpus::load(cfg.manifest_path());
  const auto lm = trainer::load_model(from);
  if (lm.modalities != corpus.modality_ids()) {
    throw std::invalid_argument("checkpoint modalities do not match the dataset's");
  }
  harness::ExperimentResults res;
  res.experiment = cfg.name + "-eval";
  res.seed = cfg.seeds.front();
  res.metrics = evaluate(lm, corpus, missingness);
  print_report(res.metrics);
  for (const auto& p : harness::emit_report(res, cfg.output_dir / "eval")) std::cout << "wrote " << p.string() << "\n";
  return 0;
}

int cmd_ablate(const Common& c, bool audit, bool fresh) {
  const auto cfg = load(c);
  const auto corpus = trainer::Corpus::load(cfg.manifest_path());
  harness::AblationOptions opts;
  opts.reuse = !fresh;
  const auto cells = harness::run_ablation(cfg, corpus, opts);
  int failed = 0;
  for (auto seed : cfg.seeds) {
    harness::ExperimentResults res;
    res.experiment = cfg.name + "-ablation";
    res.seed = seed;
    for (const auto& cell : cells) {
      if (cell.seed != seed) continue;
      if (cell.status != "ok") {
        ++failed;
        std::cout << "seed " << seed << " " << cell.spec.name << " FAILED: " << cell.error << "\n";
        continue;
      }
      res.metrics.rows.insert(res.metrics.rows.end(), cell.metrics.rows.begin(), cell.metrics.rows.end());
    }
    res.bars["ssim"] = harness::average_metric(cells, seed, "ssim");
    res.bars["psnr"] = harness::average_metric(cells, seed, "psnr");
    std::cout << "seed " << seed << " average held-out transfer:\n";
    for (const auto& [name, v] : res.bars["ssim"]) {
      std::cout << "  " << std::left << std::setw(10) << name << " ssim=" << v << " psnr=" << res.bars["psnr"][name]
                << "\n";
    }
    harness::emit_report(res, cfg.output_dir / "ablation");
  }
  if (audit) {
    const auto mismatches = harness::audit(cells, corpus);
    for (const auto& m : mismatches) {
      std::cout << "audit mismatch " << m.cell << " seed " << m.seed << " " << m.setting << " " << m.metric
                << ": reported " << m.reported << " recomputed " << m.recomputed << "\n";
    }
    std::cout << "audit: " << mismatches.size() << " mismatches\n";
    if (!mismatches.empty()) return kRuntime;
  }
  return failed ? kRuntime : 0;
}

int cmd_gradcheck(const std::string& target, std::uint64_t seed) {
  const auto targets = target == "all" ? harness::gradcheck_targets() : std::vector<std::string>{target};
  bool ok = true;
  for (const auto& t : targets) {
    const auto r = harness::gradcheck(t, seed);
    if (r.skipped) {
      std::cout << t << ": skipped (" << r.note << ")\n";
      continue;
    }
    const bool pass = r.max_rel_error < 1e-4;
    ok = ok && pass;
    std::cout << t << ": max relative error " << r.max_rel_error << " over " << r.checked << " entries"
              << (pass ? "" : "  FAIL") << "\n";
  }
  return ok ? 0 : kRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized multi-modal representation learning on synthetic phantoms"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "TOML experiment file")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", common.overrides, "Override a config key, e.g. --set train.epochs=5");
  };

  bool force = false;
  auto* gen = app.add_subcommand("gen-data", "Generate the phantom dataset");
  add_common(gen);
  gen->add_flag("--force", force, "Replace an existing dataset");

  auto* pre = app.add_subcommand("pretrain", "Pre-train on the phantom dataset");
  add_common(pre);

  std::string task, from;
  auto* fin = app.add_subcommand("finetune", "Fine-tune for segmentation or modality transfer");
  add_common(fin);
  fin->add_option("--task", task, "seg or transfer")->required()->check(CLI::IsMember({"seg", "transfer"}));
  fin->add_option("--from", from, "Pre-trained checkpoint; omit to train from scratch");

  std::string missingness = "all";
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(ev);
  ev->add_option("--from", from, "Checkpoint to evaluate")->required();
  ev->add_option("--missingness", missingness, "'all' or one modality subset such as t1+pet");

  bool audit = false, fresh = false;
  auto* abl = app.add_subcommand("ablate", "Run the constraint ablation grid");
  add_common(abl);
  abl->add_flag("--audit", audit, "Recompute every reported number from the stored checkpoints");
  abl->add_flag("--fresh", fresh, "Retrain cells even when a matching completed run exists");

  std::string target;
  std::uint64_t gc_seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gc->add_option("--target", target, "Registered target name, or 'all'")->required();
  gc->add_option("--seed", gc_seed, "Instance seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kPrecondition;
  }

  try {
    if (*gen) return cmd_gen_data(common, force);
    if (*pre) return cmd_pretrain(common);
    if (*fin) return cmd_finetune(common, task, from);
    if (*ev) return cmd_eval(common, from, missingness);
    if (*abl) return cmd_ablate(common, audit, fresh);
    if (*gc) {
      if (const char* env = std::getenv("PUIR_SEED"); env && *env) gc_seed = std::stoull(env);
      return cmd_gradcheck(target, gc_seed);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPrecondition;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPrecondition;
  } catch (const io::FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kPrecondition;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kRuntime;
  }
  return 0;
}
