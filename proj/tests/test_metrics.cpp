#include <doctest.h>

#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "puir/metrics.hpp"
#include "support.hpp"

using namespace puir;
using namespace puir::metrics;

namespace {

LabelVolume random_mask(Shape3 s, std::uint64_t seed, double p) {
  Rng rng(seed);
  LabelVolume m(s);
  for (auto& x : m.data()) x = rng.bernoulli(p) ? 1 : 0;
  return m;
}

LabelVolume mask_with(Shape3 s, std::initializer_list<int> on) {
  LabelVolume m(s);
  for (int i : on) m[i] = 1;
  return m;
}

Volume plus(const Volume& v, float c) {
  Volume out = v;
  for (auto& x : out.data()) x += c;
  return out;
}

}  // namespace

TEST_CASE("psnr: exact match, known offset, constant ground truth") {
  const auto gt = test::random_volume({4, 4, 4}, 1);
  CHECK(std::isinf(psnr(gt, gt)));
  CHECK(capped_psnr(psnr(gt, gt)) == kPsnrCap);
  Volume b({2, 2, 2});
  for (int i = 0; i < 8; ++i) b[i] = float(i % 2);
  Volume shifted = b;
  for (auto& x : shifted.data()) x += 0.1f;
  // MSE is 0.1^2 up to float rounding of the shifted values.
  const double d0 = double(0.0f + 0.1f), d1 = double(1.0f + 0.1f) - 1.0;
  const double mse = (d0 * d0 + d1 * d1) / 2;
  CHECK(psnr(shifted, b) == doctest::Approx(10 * std::log10(1.0 / mse)).epsilon(1e-12));
  CHECK(psnr(shifted, b) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK_THROWS_AS(psnr(gt, Volume({4, 4, 4}, 2.0f)), std::invalid_argument);
  CHECK_THROWS_AS(psnr(gt, Volume({4, 4, 2})), std::invalid_argument);
}

TEST_CASE("nmse: zero, zero prediction, doubled prediction") {
  const auto gt = test::random_volume({4, 4, 4}, 2, -1, 1);
  CHECK(nmse(gt, gt) == 0.0);
  CHECK(nmse(Volume({4, 4, 4}), gt) == 1.0);
  Volume twice = gt;
  for (auto& x : twice.data()) x *= 2;
  CHECK(nmse(twice, gt) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK_THROWS_AS(nmse(gt, Volume({4, 4, 4})), std::invalid_argument);
}

TEST_CASE("ssim3d: identity, offset and negation against the naive oracle") {
  const auto gt = test::random_volume({8, 8, 8}, 3);
  CHECK(ssim3d(gt, gt) == 1.0);
  const auto off = plus(gt, 0.2f);
  const double v = ssim3d(off, gt);
  CHECK(v < 1.0);
  CHECK(std::abs(v - oracle::ssim(off, gt)) < 1e-9);

  auto centered = test::random_volume({8, 8, 8}, 4, -1, 1);
  double mean = 0.0;
  for (float x : centered.data()) mean += x;
  mean /= centered.size();
  for (auto& x : centered.data()) x = static_cast<float>(x - mean);
  Volume neg = centered;
  for (auto& x : neg.data()) x = -x;
  const double n = ssim3d(neg, centered);
  CHECK(n < 0.0);
  CHECK(std::abs(n - oracle::ssim(neg, centered)) < 1e-9);
}

TEST_CASE("ssim3d: window validation and other window sizes") {
  const auto a = test::random_volume({8, 8, 8}, 5), b = test::random_volume({8, 8, 8}, 6);
  CHECK_THROWS_AS(ssim3d(a, b, 4), std::invalid_argument);
  CHECK_THROWS_AS(ssim3d(a, b, 9), std::invalid_argument);
  CHECK_THROWS_AS(ssim3d(a, Volume({8, 8, 8}, 1.0f)), std::invalid_argument);
  for (int w : {1, 3, 5}) CHECK(std::abs(ssim3d(a, b, w) - oracle::ssim(a, b, w)) < 1e-9);
}

TEST_CASE("image metrics agree with naive references on random 8^3 pairs") {
  for (std::uint64_t s = 0; s < 50; ++s) {
    const auto gt = test::random_volume({8, 8, 8}, 1000 + s);
    const auto pred = test::random_volume({8, 8, 8}, 2000 + s, -0.2, 1.2);
    CHECK(std::abs(psnr(pred, gt) - oracle::psnr(pred, gt)) < 1e-9);
    CHECK(std::abs(nmse(pred, gt) - oracle::nmse(pred, gt)) < 1e-9);
    CHECK(std::abs(ssim3d(pred, gt) - oracle::ssim(pred, gt)) < 1e-9);
    CHECK(ssim3d(pred, gt) <= 1.0);
  }
}

TEST_CASE("dice: identical, disjoint, counted overlap, symmetry, both empty") {
  const Shape3 s{2, 2, 2};
  const auto a = mask_with(s, {0, 1, 2});
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, mask_with(s, {4, 5})) == 0.0);
  CHECK(dice(mask_with(s, {0, 1, 2, 3}), mask_with(s, {2, 3, 4, 5})) == 0.5);
  CHECK(dice(LabelVolume(s), LabelVolume(s)) == 1.0);
  LabelVolume bad(s);
  bad[0] = 2;
  CHECK_THROWS_AS(dice(bad, a), std::invalid_argument);
  for (std::uint64_t k = 0; k < 50; ++k) {
    const auto p = random_mask({8, 8, 8}, 10 + k, 0.3), g = random_mask({8, 8, 8}, 90 + k, 0.3);
    CHECK(dice(p, g) == dice(g, p));
    CHECK(std::abs(dice(p, g) - oracle::dice(p, g)) < 1e-12);
  }
}

TEST_CASE("challenge_dice: case outcomes") {
  const Shape3 s{2, 2, 2};
  const LabelVolume empty(s);
  const auto lesion = mask_with(s, {0, 1});
  auto fn = challenge_dice(empty, lesion);
  CHECK(fn.value == 0.0);
  CHECK(fn.outcome == CaseOutcome::kFalseNegative);
  auto tn = challenge_dice(empty, empty);
  CHECK(tn.value == 0.0);
  CHECK(tn.outcome == CaseOutcome::kTrueNegative);
  auto fp = challenge_dice(lesion, empty);
  CHECK(fp.value == 0.0);
  CHECK(fp.outcome == CaseOutcome::kFalsePositive);
  const auto pred = mask_with(s, {1, 2});
  auto tp = challenge_dice(pred, lesion);
  CHECK(tp.value == dice(pred, lesion));
  CHECK(tp.outcome == CaseOutcome::kTruePositive);
  CHECK(to_string(CaseOutcome::kFalseNegative) != to_string(CaseOutcome::kTrueNegative));
}

TEST_CASE("confusion_rates: all correct, all empty predictions, counted case") {
  using C = CaseOutcome;
  const C correct[] = {C::kTruePositive, C::kTruePositive, C::kTrueNegative};
  auto r = confusion_rates(correct);
  CHECK(*r.tpr == 1.0);
  CHECK(*r.tnr == 1.0);
  CHECK(*r.fnr == 0.0);
  CHECK(*r.fpr == 0.0);
  const C empty_preds[] = {C::kFalseNegative, C::kFalseNegative, C::kTrueNegative, C::kTrueNegative};
  r = confusion_rates(empty_preds);
  CHECK(*r.tpr == 0.0);
  CHECK(*r.tnr == 1.0);
  const C counted[] = {C::kTruePositive, C::kTruePositive, C::kTruePositive, C::kFalseNegative,
                       C::kFalsePositive, C::kTrueNegative};
  r = confusion_rates(counted);
  CHECK(*r.tpr == 0.75);
  CHECK(*r.fpr == 0.5);
  CHECK(r.positives == 4);
  CHECK(r.negatives == 2);
  const C only_pos[] = {C::kTruePositive};
  r = confusion_rates(only_pos);
  CHECK_FALSE(r.tnr.has_value());
  CHECK_FALSE(r.fpr.has_value());
}

TEST_CASE("confusion_rates: complementary rates and naive agreement") {
  for (std::uint64_t k = 0; k < 20; ++k) {
    Rng rng(k);
    std::vector<LabelVolume> preds, gts;
    std::vector<CaseOutcome> cases;
    for (int c = 0; c < 6; ++c) {
      const Shape3 s{4, 4, 4};
      preds.push_back(rng.bernoulli(0.5) ? random_mask(s, rng.next_u64(), 0.1) : LabelVolume(s));
      gts.push_back(rng.bernoulli(0.5) ? random_mask(s, rng.next_u64(), 0.1) : LabelVolume(s));
      cases.push_back(classify_case(preds.back(), gts.back()));
    }
    const auto r = confusion_rates(cases);
    const auto o = oracle::rates(preds, gts);
    if (r.tpr) {
      CHECK(*r.tpr + *r.fnr == doctest::Approx(1.0));
      CHECK(std::abs(*r.tpr - o.tpr) < 1e-12);
    } else {
      CHECK(std::isnan(o.tpr));
    }
    if (r.tnr) {
      CHECK(*r.tnr + *r.fpr == doctest::Approx(1.0));
      CHECK(std::abs(*r.fpr - o.fpr) < 1e-12);
    } else {
      CHECK(std::isnan(o.tnr));
    }
  }
}

TEST_CASE("psnr decreases with stronger noise on average") {
  const auto gt = test::random_volume({8, 8, 8}, 7);
  double low = 0.0, high = 0.0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    Rng rng(k);
    Volume a = gt, b = gt;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const double e = rng.normal();
      a[i] += static_cast<float>(0.05 * e);
      b[i] += static_cast<float>(0.2 * e);
    }
    low += psnr(a, gt);
    high += psnr(b, gt);
  }
  CHECK(high < low);
}

TEST_CASE("enumerate_missingness: counts, grouping and order") {
  for (int m = 1; m <= 5; ++m) CHECK(enumerate_missingness(m).size() == (1u << m) - 1);
  const auto four = enumerate_missingness(4);
  std::map<int, int> groups;
  for (const auto& s : four) ++groups[s.mn];
  CHECK(groups == std::map<int, int>{{0, 1}, {1, 4}, {2, 6}, {3, 4}});
  for (std::size_t i = 1; i < four.size(); ++i) CHECK(four[i - 1].mn <= four[i].mn);
  const auto two = enumerate_missingness(2);
  REQUIRE(two.size() == 3);
  CHECK(two[0].present == std::vector<int>{0, 1});
  CHECK(two[1].present == std::vector<int>{0});
  CHECK(two[2].present == std::vector<int>{1});
  CHECK(two[0].label({"t1", "pet"}) == "t1+pet");
}

TEST_CASE("personalization_score: hand-placed points, clustered, modality-dominated") {
  std::map<std::pair<std::string, std::string>, std::vector<double>> e;
  e[{"a", "m1"}] = {0};
  e[{"a", "m2"}] = {1};
  e[{"b", "m1"}] = {10};
  e[{"b", "m2"}] = {11};
  // Cross-individual pairs: |0-10|, |0-11|, |1-10|, |1-11| -> mean 10; intra: 1.
  CHECK(personalization_score(e) == doctest::Approx(10.0).epsilon(1e-14));

  e[{"a", "m2"}] = {0};
  e[{"b", "m2"}] = {10};
  CHECK(personalization_score(e) == kPersonalizationCap);

  std::map<std::pair<std::string, std::string>, std::vector<double>> m;
  for (const char* id : {"a", "b", "c"}) {
    m[{id, "m1"}] = {0.0, 0.0};
    m[{id, "m2"}] = {5.0, 0.0};
  }
  m[{"c", "m1"}] = {0.1, 0.0};
  CHECK(personalization_score(m) < 1.0);

  std::map<std::pair<std::string, std::string>, std::vector<double>> same;
  for (const char* id : {"a", "b"})
    for (const char* mod : {"m1", "m2"}) same[{id, mod}] = {1.0};
  CHECK(std::isnan(personalization_score(same)));
  same.erase({"b", "m1"});
  same.erase({"b", "m2"});
  CHECK_THROWS_AS(personalization_score(same), std::invalid_argument);
}

TEST_CASE("gaussian_kl_divergence: identical sets, unit shift, per-dimension scaling") {
  Rng rng(9);
  std::vector<std::vector<double>> a, b;
  for (int i = 0; i < 40; ++i) {
    a.push_back({rng.normal(), rng.normal(0, 2)});
    b.push_back({rng.normal(1, 1), rng.normal(0.5, 1)});
  }
  CHECK(gaussian_kl_divergence(a, a).value == 0.0);

  // Two samples at +-1/sqrt(2) have unit sample variance; the second set is shifted by 1.
  const std::vector<std::vector<double>> u = {{-1 / std::sqrt(2.0)}, {1 / std::sqrt(2.0)}};
  const std::vector<std::vector<double>> v = {{1 - 1 / std::sqrt(2.0)}, {1 + 1 / std::sqrt(2.0)}};
  CHECK(gaussian_kl_divergence(u, v).value == doctest::Approx(0.5).epsilon(1e-12));

  auto sa = a, sb = b;
  for (auto* set : {&sa, &sb})
    for (auto& x : *set) {
      x[0] = 3 * x[0] + 1;
      x[1] = -0.5 * x[1] + 2;
    }
  CHECK(gaussian_kl_divergence(sa, sb).value == doctest::Approx(gaussian_kl_divergence(a, b).value).epsilon(1e-10));

  std::vector<std::vector<double>> flat = {{1, 0}, {1, 1}, {1, 2}};
  const auto r = gaussian_kl_divergence(flat, flat);
  CHECK(r.degenerate_dims == std::vector<int>{0});
  CHECK_THROWS_AS(gaussian_kl_divergence({{1, 2}, {3, 4}}, a), std::invalid_argument);
}

TEST_CASE("MetricsReport: grouping, CSV layout, JSON round trip") {
  MetricsReport r;
  r.add("s1", "t1+t2", 0, "ssim", 0.5);
  r.add("s2", "t1", 1, "ssim", 0.25);
  r.add("s3", "t2", 1, "ssim", 0.75);
  r.add("s4", "t2", 1, "ssim", std::numeric_limits<double>::quiet_NaN());
  r.add("s4", "t2", 1, "psnr", std::numeric_limits<double>::infinity());
  const auto g = r.by_mn("ssim");
  CHECK(g.at(0).mean == 0.5);
  CHECK(g.at(1).mean == 0.5);
  CHECK(g.at(1).std == doctest::Approx(0.25));
  CHECK(g.at(1).count == 2);

  const auto csv = r.to_csv();
  CHECK(csv.rfind("setting_id,present_modalities,MN,metric,value\n", 0) == 0);
  CHECK(csv.find("s2,t1,1,ssim,0.25\n") != std::string::npos);
  CHECK(csv == r.to_csv());

  const auto back = MetricsReport::from_json(nlohmann::json::parse(r.to_json().dump()));
  REQUIRE(back.rows.size() == r.rows.size());
  for (std::size_t i = 0; i < 3; ++i) CHECK(back.rows[i] == r.rows[i]);
  CHECK(std::isnan(back.rows[3].value));
  CHECK(std::isinf(back.rows[4].value));
}
