#include <doctest.h>

#include <cmath>
#include <fstream>

#include "puir/trainer.hpp"
#include "support.hpp"

using namespace puir;
using namespace puir::trainer;

namespace {

phantom::DatasetConfig tiny_data(int n_train = 3, int n_test = 1) {
  phantom::DatasetConfig d;
  d.gen.shape = {8, 16, 16};
  d.gen.tissue_a_radius_min = 1.5;
  d.gen.tissue_a_radius_max = 2.5;
  d.gen.tissue_b_radius_min = 1.5;
  d.gen.tissue_b_radius_max = 2.5;
  d.gen.lesion_radius_min = 1.5;
  d.gen.lesion_radius_max = 2.0;
  d.n_train = n_train;
  d.n_test = n_test;
  return d;
}

Corpus tiny_corpus(const phantom::DatasetConfig& d) {
  std::vector<phantom::MultiModalSample> s;
  for (int i = 0; i < d.n_train + d.n_test; ++i) s.push_back(phantom::make_sample(d, i));
  return Corpus::from_samples(std::move(s));
}

TrainConfig tiny_train(int modalities = 3) {
  TrainConfig c;
  c.epochs = 1;
  c.lr = 1e-3;
  c.seed = 4;
  c.model.modalities = modalities;
  c.model.widths = {2, 3};
  c.model.slots = 3;
  c.model.proj_dim = 4;
  return c;
}

bool same_report(const LossReport& a, const LossReport& b) {
  return a.contr == b.contr && a.decom == b.decom && a.equ == b.equ && a.inv == b.inv && a.total == b.total;
}

}  // namespace

TEST_CASE("TrainConfig validation") {
  auto c = tiny_train();
  CHECK_NOTHROW(c.validate());
  c.epochs = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_train();
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_train();
  c.missingness = "sometimes";
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_train();
  c.epochs = 0;
  const auto corpus = tiny_corpus(tiny_data(1, 0));
  CHECK_THROWS_AS(pretrain(c, corpus), std::invalid_argument);
}

TEST_CASE("pretrain_step: fixed seed gives identical reports and parameters") {
  const auto corpus = tiny_corpus(tiny_data());
  const auto cfg = tiny_train();
  PretrainInputs in{&corpus.samples[0], &corpus.samples[1], corpus.modality_ids(), 77};
  TrainState a(cfg.model, 9, cfg.lr), b(cfg.model, 9, cfg.lr);
  const auto ra = pretrain_step(in, a, cfg);
  const auto rb = pretrain_step(in, b, cfg);
  CHECK(same_report(ra, rb));
  CHECK(a.model.parameter_hash() == b.model.parameter_hash());
  CHECK(ra.total == doctest::Approx(ra.contr + ra.decom + ra.equ + ra.inv).epsilon(1e-12));
}

TEST_CASE("pretrain_step: fresh model has uniform rotation head") {
  const auto corpus = tiny_corpus(tiny_data());
  const auto cfg = tiny_train();
  TrainState st(cfg.model, 1, cfg.lr);
  PretrainInputs in{&corpus.samples[0], &corpus.samples[1], corpus.modality_ids(), 3};
  const auto r = pretrain_step(in, st, cfg);
  CHECK(r.equ == doctest::Approx(3 * std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("pretrain_step: single modality contributes no invariance term") {
  auto d = tiny_data();
  d.modalities = {phantom::default_modalities().front()};
  const auto corpus = tiny_corpus(d);
  const auto cfg = tiny_train(1);
  TrainState st(cfg.model, 1, cfg.lr);
  PretrainInputs in{&corpus.samples[0], &corpus.samples[1], corpus.modality_ids(), 3};
  const auto r = pretrain_step(in, st, cfg);
  CHECK(r.inv == 0.0);
  CHECK(std::isfinite(r.total));
}

TEST_CASE("pretrain_step: missing modality is an error") {
  const auto corpus = tiny_corpus(tiny_data());
  auto s = corpus.samples[0];
  s.volumes.erase("pet");
  const auto cfg = tiny_train();
  TrainState st(cfg.model, 1, cfg.lr);
  PretrainInputs in{&s, nullptr, corpus.modality_ids(), 3};
  CHECK_THROWS_AS(pretrain_step(in, st, cfg), std::invalid_argument);
}

TEST_CASE("pretrain_objective: with three modalities the running target is the same in both mean modes") {
  const auto corpus = tiny_corpus(tiny_data());
  auto cfg = tiny_train();
  const Model m(cfg.model, 2);
  PretrainInputs in{&corpus.samples[0], &corpus.samples[1], corpus.modality_ids(), 5};
  LossReport seq, exact;
  pretrain_objective(m, in, cfg, &seq);
  cfg.exact_mean = true;
  pretrain_objective(m, in, cfg, &exact);
  // The third modality is compared with the mean of the first two, which
  // pairwise halving computes exactly.
  CHECK(seq.decom == exact.decom);
  CHECK(seq.inv == doctest::Approx(exact.inv).epsilon(1e-12));
}

TEST_CASE("optimizer step with zero learning rate leaves parameters bit-identical") {
  const auto corpus = tiny_corpus(tiny_data());
  const auto cfg = tiny_train();
  TrainState st(cfg.model, 1, cfg.lr);
  st.optimizer.set_lr(0.0);
  const auto before = st.model.export_arrays();
  PretrainInputs in{&corpus.samples[0], &corpus.samples[1], corpus.modality_ids(), 3};
  pretrain_step(in, st, cfg);
  const auto after = st.model.export_arrays();
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].values == after[i].values);
}

TEST_CASE("pretrain: reproducible checkpoint, log per epoch, loaded forward identical") {
  const auto corpus = tiny_corpus(tiny_data());
  auto cfg = tiny_train();
  cfg.epochs = 2;
  cfg.out_dir = test::scratch_dir("pretrain_a");
  const auto a = pretrain(cfg, corpus);
  cfg.out_dir = test::scratch_dir("pretrain_b");
  const auto b = pretrain(cfg, corpus);
  CHECK(a.parameter_hash == b.parameter_hash);
  CHECK(io::file_hash(a.checkpoint) == io::file_hash(b.checkpoint));
  CHECK(a.epoch_means.size() == 2);

  std::ifstream log(cfg.out_dir / "train_log.jsonl");
  int lines = 0;
  for (std::string line; std::getline(log, line);) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("epoch") == lines + 1);
    for (const char* k : {"contr", "decom", "equ", "inv", "total", "wall_time_s"}) CHECK(j.contains(k));
    ++lines;
  }
  CHECK(lines == 2);

  const auto loaded = load_model(a.checkpoint, cfg.model);
  CHECK(loaded.model.parameter_hash() == a.parameter_hash);
  CHECK(loaded.modalities == corpus.modality_ids());
}

TEST_CASE("pretrain: model width must match the corpus") {
  const auto corpus = tiny_corpus(tiny_data());
  auto cfg = tiny_train(2);
  CHECK_THROWS_AS(pretrain(cfg, corpus), std::invalid_argument);
}

TEST_CASE("fine-tuning: zero epochs returns the starting checkpoint unchanged") {
  const auto corpus = tiny_corpus(tiny_data());
  auto cfg = tiny_train();
  cfg.out_dir = test::scratch_dir("ft_zero_src");
  const auto pre = pretrain(cfg, corpus);
  for (auto task : {Task::kFinetuneSeg, Task::kFinetuneTransfer}) {
    auto ft = cfg;
    ft.task = task;
    ft.epochs = 0;
    ft.out_dir = test::scratch_dir("ft_zero_" + to_string(task));
    const auto r = task == Task::kFinetuneSeg ? finetune_seg(ft, corpus, pre.checkpoint)
                                              : finetune_transfer(ft, corpus, pre.checkpoint);
    CHECK(r.parameter_hash == pre.parameter_hash);
    CHECK(r.epoch_means.empty());
  }
}

TEST_CASE("fine-tuning objectives: empty subset rejected, one modality has no invariance term") {
  const auto corpus = tiny_corpus(tiny_data());
  const auto cfg = tiny_train();
  const Model m(cfg.model, 1);
  FinetuneInputs in;
  in.sample = &corpus.samples[0];
  in.modality_order = corpus.modality_ids();
  in.class_weights = {1.0, 1.0};
  LossReport r;
  CHECK_THROWS_AS(finetune_seg_objective(m, in, cfg, &r), std::invalid_argument);
  in.available = {"t2"};
  finetune_seg_objective(m, in, cfg, &r);
  CHECK(r.inv == 0.0);
  CHECK(r.task == doctest::Approx(r.dice + r.wce).epsilon(1e-12));
  in.available = {"t1", "t2", "pet"};
  finetune_transfer_objective(m, in, cfg, &r);
  CHECK(r.inv > 0.0);
  CHECK(r.total == doctest::Approx(r.task + r.inv).epsilon(1e-12));
}

TEST_CASE("fine-tuning: without the invariance term all-modality training is plain supervision") {
  const auto corpus = tiny_corpus(tiny_data());
  auto cfg = tiny_train();
  cfg.weights.inv = 0.0;
  const Model m(cfg.model, 1);
  FinetuneInputs in;
  in.sample = &corpus.samples[0];
  in.modality_order = corpus.modality_ids();
  in.available = corpus.modality_ids();
  in.class_weights = {1.0, 1.0};
  LossReport r;
  finetune_seg_objective(m, in, cfg, &r);
  CHECK(r.total == r.task);
}

TEST_CASE("finetune_seg: runs from scratch and from a checkpoint") {
  const auto corpus = tiny_corpus(tiny_data());
  auto cfg = tiny_train();
  cfg.task = Task::kFinetuneSeg;
  cfg.out_dir = test::scratch_dir("ft_seg");
  const auto r = finetune_seg(cfg, corpus, {});
  REQUIRE(r.epoch_means.size() == 1);
  CHECK(std::isfinite(r.epoch_means[0].total));
  CHECK(fs::exists(r.checkpoint));
  const auto again = finetune_seg(cfg, corpus, {});
  CHECK(again.parameter_hash == r.parameter_hash);
}

TEST_CASE("infer_transfer: deterministic, finite, right shape, unknown modality rejected") {
  const auto corpus = tiny_corpus(tiny_data());
  const auto cfg = tiny_train();
  const Model m(cfg.model, 8);
  const auto ids = corpus.modality_ids();
  const auto& src = corpus.samples[0].volume("t1");
  const auto a = infer_transfer(m, ids, src, "t1", "pet");
  CHECK(a == infer_transfer(m, ids, src, "t1", "pet"));
  CHECK(a.shape() == src.shape());
  for (float x : a.data()) CHECK(std::isfinite(x));
  CHECK_THROWS_AS(infer_transfer(m, ids, src, "t1", "ct"), std::invalid_argument);
  CHECK_THROWS_AS(infer_transfer(m, ids, src, "flair", "t1"), std::invalid_argument);
}

TEST_CASE("infer_seg: duplicated modality matches single, shape errors, binary output") {
  const auto corpus = tiny_corpus(tiny_data());
  const auto cfg = tiny_train();
  const Model m(cfg.model, 8);
  const auto& s = corpus.samples[0];
  const auto once = infer_seg(m, {{"t1", &s.volume("t1")}});
  const auto twice = infer_seg(m, {{"t1", &s.volume("t1")}, {"t1", &s.volume("t1")}});
  CHECK(once == twice);
  CHECK(infer_seg_probability(m, {{"t1", &s.volume("t1")}}) ==
        infer_seg_probability(m, {{"t1", &s.volume("t1")}, {"t1", &s.volume("t1")}}));
  const auto both = infer_seg(m, {{"t1", &s.volume("t1")}, {"pet", &s.volume("pet")}});
  for (auto v : both.data()) CHECK(v <= 1);
  const Volume other({8, 8, 8});
  CHECK_THROWS_AS(infer_seg(m, {{"t1", &s.volume("t1")}, {"t2", &other}}), std::invalid_argument);
  CHECK_THROWS_AS(infer_seg(m, {}), std::invalid_argument);
}

TEST_CASE("Corpus: splits and modality ids") {
  const auto corpus = tiny_corpus(tiny_data(3, 2));
  CHECK(corpus.train.size() == 3);
  CHECK(corpus.test.size() == 2);
  CHECK(corpus.modality_ids() == std::vector<std::string>{"t1", "t2", "pet"});
}
