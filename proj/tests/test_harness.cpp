#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "puir/harness.hpp"
#include "support.hpp"

using namespace puir;
using namespace puir::harness;

namespace {

config::ExperimentConfig tiny_experiment(const fs::path& out) {
  config::ExperimentConfig c;
  c.name = "tiny";
  c.output_dir = out;
  c.seeds = {1};
  c.data.gen.shape = {8, 16, 16};
  c.data.gen.tissue_a_radius_min = c.data.gen.tissue_b_radius_min = c.data.gen.lesion_radius_min = 1.5;
  c.data.gen.tissue_a_radius_max = c.data.gen.tissue_b_radius_max = 2.5;
  c.data.gen.lesion_radius_max = 2.0;
  c.data.n_train = 2;
  c.data.n_test = 1;
  c.train.epochs = 1;
  c.train.lr = 1e-3;
  c.train.model.widths = {2, 3};
  c.train.model.slots = 3;
  c.train.model.proj_dim = 4;
  c.finetune.epochs = 1;
  return c;
}

trainer::Corpus corpus_for(const config::ExperimentConfig& c) {
  std::vector<phantom::MultiModalSample> s;
  for (int i = 0; i < c.data.n_train + c.data.n_test; ++i) s.push_back(phantom::make_sample(c.data, i));
  return trainer::Corpus::from_samples(std::move(s));
}

ExperimentResults sample_results() {
  ExperimentResults r;
  r.experiment = "demo";
  r.seed = 3;
  r.metrics.add("full:t1->t2", "t1", 2, "ssim", 0.5);
  r.metrics.add("full:t1->t2", "t1", 2, "psnr", 21.25);
  r.curves.push_back({"total", {3.0, 2.0, 1.5}});
  r.curves.push_back({"equ", {1.4, 0.7, 0.2}});
  r.bars["ssim"] = {{"full", 0.6}, {"equ", 0.4}};
  return r;
}

}  // namespace

TEST_CASE("ablation grid: six distinct cells ending with the full model") {
  const auto& g = ablation_grid();
  REQUIRE(g.size() == 6);
  std::set<std::tuple<bool, bool, bool>> flags;
  std::set<std::string> names;
  for (const auto& c : g) {
    flags.insert({c.equivariance, c.invariance, c.prior});
    names.insert(c.name);
    CHECK((c.equivariance || c.invariance));
  }
  CHECK(flags.size() == 6);
  CHECK(names.size() == 6);
  CHECK(g.back().name == "full");
  CHECK((g.back().equivariance && g.back().invariance && g.back().prior));
  const std::set<std::tuple<bool, bool, bool>> expected = {{true, false, false}, {false, true, false},
                                                           {true, true, false},  {true, false, true},
                                                           {false, true, true},  {true, true, true}};
  CHECK(flags == expected);
  CHECK(cell_by_name("equ+inv").prior == false);
  CHECK_THROWS_AS(cell_by_name("nothing"), std::invalid_argument);
}

TEST_CASE("cell_config switches terms and the prior") {
  const auto cfg = tiny_experiment("unused");
  const auto equ = cell_config(cfg, cell_by_name("equ"), 2);
  CHECK(equ.weights.equ == 1.0);
  CHECK(equ.weights.inv == 0.0);
  CHECK(equ.weights.contr == 1.0);
  CHECK(equ.weights.decom == 1.0);
  CHECK_FALSE(equ.model.use_prior);
  CHECK(equ.seed == 2);
  const auto inv_prior = cell_config(cfg, cell_by_name("inv+prior"), 2);
  CHECK(inv_prior.weights.equ == 0.0);
  CHECK(inv_prior.weights.inv == 1.0);
  CHECK(inv_prior.model.use_prior);
  CHECK(cell_dir(cfg, cell_by_name("equ+inv"), 2).filename() == "equ_inv_seed2");
}

TEST_CASE("gradcheck: every target within tolerance, clamped instance skipped") {
  const auto targets = gradcheck_targets();
  for (const char* must : {"contrastive_loss", "invariance_loss", "equivariance_loss", "decomposition_loss",
                           "dice_loss", "weighted_ce_loss", "transfer_loss", "downstream_loss", "encode", "decode",
                           "fuse", "retrieve_prior", "equivariance_loss@clamped"}) {
    CHECK(std::find(targets.begin(), targets.end(), must) != targets.end());
  }
  for (const auto& t : targets) {
    const auto r = gradcheck(t, 3);
    if (t == "equivariance_loss@clamped") {
      CHECK(r.skipped);
      continue;
    }
    INFO(t);
    CHECK_FALSE(r.skipped);
    CHECK(r.checked > 0);
    CHECK(r.max_rel_error < 1e-4);
  }
  CHECK_THROWS_AS(gradcheck("no_such_op", 1), std::invalid_argument);
}

TEST_CASE("emit_report: file names, CSV column order, JSON round trip") {
  const auto dir = test::scratch_dir("report");
  const auto r = sample_results();
  const auto files = emit_report(r, dir);
  std::set<std::string> names;
  for (const auto& f : files) {
    CHECK(fs::exists(f));
    names.insert(f.filename().string());
  }
  CHECK(names == std::set<std::string>{"demo_3.csv", "demo_3.json", "demo_3_loss.svg", "demo_3_ssim.svg"});

  std::ifstream csv(dir / "demo_3.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "setting_id,present_modalities,MN,metric,value");
  const auto first = test::file_bytes(dir / "demo_3.csv");
  emit_report(r, dir);
  CHECK(test::file_bytes(dir / "demo_3.csv") == first);

  std::ifstream js(dir / "demo_3.json");
  const auto back = ExperimentResults::from_json(nlohmann::json::parse(js));
  CHECK(back == r);
  const auto svg = test::file_bytes(dir / "demo_3_loss.svg");
  CHECK(std::string(svg.begin(), svg.end()).find("<svg") != std::string::npos);

  CHECK_THROWS_AS(emit_report(ExperimentResults{}, dir), std::invalid_argument);
}

TEST_CASE("emit_report: unwritable directory is an error") {
  const auto dir = test::scratch_dir("report_blocked");
  std::ofstream(dir / "file") << "x";
  CHECK_THROWS(emit_report(sample_results(), dir / "file" / "sub"));
}

TEST_CASE("loss_curves: one curve per component") {
  std::vector<trainer::LossReport> epochs(3);
  for (int i = 0; i < 3; ++i) epochs[i].total = 3 - i;
  const auto curves = loss_curves(epochs, "pre.");
  bool found = false;
  for (const auto& c : curves) {
    CHECK(c.values.size() == 3);
    if (c.label == "pre.total") {
      found = true;
      CHECK(c.values == std::vector<double>{3, 2, 1});
    }
  }
  CHECK(found);
}

TEST_CASE("run_ablation: cached rerun, audit, failed cell quarantined") {
  const auto out = test::scratch_dir("ablation");
  auto cfg = tiny_experiment(out);
  cfg.ablation_cells = {"equ+inv", "full"};
  cfg.ablation_finetune_seg = true;
  const auto corpus = corpus_for(cfg);

  const auto first = run_ablation(cfg, corpus);
  REQUIRE(first.size() == 2);
  for (const auto& c : first) {
    CHECK(c.status == "ok");
    CHECK(fs::exists(c.checkpoint));
    CHECK(fs::exists(c.seg_checkpoint));
    CHECK(c.metrics.rows.size() > 0);
  }
  const auto avg = average_metric(first, 1, "ssim");
  CHECK(avg.size() == 2);
  CHECK(audit(first, corpus).empty());

  const auto second = run_ablation(cfg, corpus);
  for (std::size_t i = 0; i < first.size(); ++i) {
    CHECK(io::file_hash(second[i].checkpoint) == io::file_hash(first[i].checkpoint));
    REQUIRE(second[i].metrics.rows.size() == first[i].metrics.rows.size());
    for (std::size_t k = 0; k < first[i].metrics.rows.size(); ++k) {
      const auto& x = first[i].metrics.rows[k];
      const auto& y = second[i].metrics.rows[k];
      INFO(x.setting_id, " ", x.metric, " ", x.value, " ", y.value);
      CHECK((x == y || (std::isnan(x.value) && std::isnan(y.value))));
    }
  }

  // Tampering with a reported number is caught by the audit.
  auto tampered = first;
  tampered[0].metrics.rows[0].value += 1e-3;
  CHECK(audit(tampered, corpus).size() == 1);

  // A cell whose output directory cannot be created fails alone.
  cfg.ablation_cells = {"equ", "inv"};
  cfg.ablation_finetune_seg = false;
  fs::create_directories(out / "ablation");
  std::ofstream(cell_dir(cfg, cell_by_name("equ"), 1)) << "blocker";
  const auto mixed = run_ablation(cfg, corpus);
  REQUIRE(mixed.size() == 2);
  CHECK(mixed[0].status == "failed");
  CHECK_FALSE(mixed[0].error.empty());
  CHECK(mixed[1].status == "ok");
  AblationOptions strict;
  strict.quarantine = false;
  CHECK_THROWS(run_ablation(cfg, corpus, strict));
}

TEST_CASE("run_ablation requires test individuals") {
  auto cfg = tiny_experiment(test::scratch_dir("ablation_notest"));
  auto corpus = corpus_for(cfg);
  corpus.test.clear();
  CHECK_THROWS_AS(run_ablation(cfg, corpus), std::invalid_argument);
}
