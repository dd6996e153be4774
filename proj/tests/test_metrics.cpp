#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "fixture_util.hpp"
#include "oracles.hpp"
#include "pseudoseg/digest.hpp"
#include "pseudoseg/metrics.hpp"

namespace pseudoseg {
namespace {

using testing_util::fixture;

Dataset load(const std::string& rel) { return parse_dataset(read_file(fixture(rel).string())); }

Polygon square(double x, double y, double s) { return {x, y, x + s, y, x + s, y + s, x, y + s}; }

Instance inst(std::int64_t cat, const Polygon& p, double score = 1.0, int w = 20, int h = 20) {
  return {cat, rasterize({p}, w, h), score};
}

// ---------------------------------------------------------------------------
// IoU and matching

TEST(MaskIou, Examples) {
  EXPECT_EQ(mask_iou({square(2, 2, 6)}, {square(2, 2, 6)}, 20, 20), 1.0);
  EXPECT_EQ(mask_iou({square(0, 0, 5)}, {square(10, 10, 5)}, 20, 20), 0.0);
  EXPECT_EQ(mask_iou({square(0, 0, 10)}, {{0, 5, 10, 5, 10, 15, 0, 15}}, 20, 20), 1.0 / 3.0);
  EXPECT_EQ(mask_iou(PolygonSet{}, PolygonSet{}, 4, 4), 0.0);
}

TEST(MaskIou, SymmetricAndBounded) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const PolygonSet a = {oracle::random_grid_polygon(rng, 16, 6)};
    const PolygonSet b = {oracle::random_grid_polygon(rng, 16, 6)};
    const double ab = mask_iou(a, b, 16, 16), ba = mask_iou(b, a, 16, 16);
    EXPECT_EQ(ab, ba);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    const Mask ma = rasterize(a, 16, 16), mb = rasterize(b, 16, 16);
    const bool same = ma == mb && ma.popcount() > 0;
    EXPECT_EQ(ab == 1.0, same);
  }
}

TEST(MatchInstances, Examples) {
  const std::vector<Instance> gt = {inst(1, square(0, 0, 8))};
  auto r = match_instances(std::vector{inst(1, square(0, 0, 8), 0.7)}, gt);
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_TRUE(r.unmatched_predictions.empty());
  EXPECT_TRUE(r.unmatched_ground_truths.empty());

  r = match_instances(std::vector{inst(1, square(0, 0, 8), 0.8), inst(1, square(0, 0, 8), 0.9)}, gt);
  ASSERT_EQ(r.pairs.size(), 1u);
  EXPECT_EQ(r.pairs[0].prediction, 1u);  // higher score wins
  EXPECT_EQ(r.unmatched_predictions, std::vector<std::size_t>{0});

  r = match_instances(std::vector{inst(2, square(0, 0, 8), 0.9)}, gt);
  EXPECT_TRUE(r.pairs.empty());
  EXPECT_EQ(r.unmatched_predictions.size(), 1u);
  EXPECT_EQ(r.unmatched_ground_truths.size(), 1u);
}

TEST(MatchInstances, StructuralInvariants) {
  std::mt19937_64 rng(32);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Instance> preds, gts;
    for (int i = 0; i < 6; ++i) preds.push_back(inst(1 + rng() % 2, oracle::random_grid_polygon(rng, 12, 5), u(rng), 12, 12));
    for (int i = 0; i < 5; ++i) gts.push_back(inst(1 + rng() % 2, oracle::random_grid_polygon(rng, 12, 5), 1.0, 12, 12));
    const double thr = 0.3;
    const MatchResult r = match_instances(preds, gts, thr);
    std::vector<int> pseen(preds.size()), gseen(gts.size());
    for (const auto& p : r.pairs) {
      ++pseen[p.prediction];
      ++gseen[p.ground_truth];
      EXPECT_GE(p.iou, thr);
      EXPECT_EQ(preds[p.prediction].category_id, gts[p.ground_truth].category_id);
    }
    for (auto i : r.unmatched_predictions) ++pseen[i];
    for (auto i : r.unmatched_ground_truths) ++gseen[i];
    for (int c : pseen) EXPECT_EQ(c, 1);
    for (int c : gseen) EXPECT_EQ(c, 1);
  }
}

// ---------------------------------------------------------------------------
// F1 and AP

Dataset one_image(std::vector<std::pair<Polygon, std::optional<double>>> anns, std::int64_t cat = 1) {
  Dataset d;
  d.images = {{1, "x.png", 20, 20}};
  d.categories = {{1, "a"}, {2, "b"}};
  std::int64_t id = 1;
  for (auto& [p, s] : anns) {
    d.annotations.push_back(make_annotation(id++, 1, cat, {p}, s, s ? Source::pseudo : Source::labeled, d.images[0]));
  }
  return d;
}

TEST(F1Report, PerfectAndEmpty) {
  const Dataset gt = one_image({{square(0, 0, 5), {}}, {square(10, 10, 5), {}}});
  const Dataset perfect = one_image({{square(0, 0, 5), 1.0}, {square(10, 10, 5), 1.0}});
  EvalReport r = f1_report(perfect, gt);
  EXPECT_EQ(r.micro_f1, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
  r = f1_report(one_image({}), gt);
  EXPECT_EQ(r.micro_f1, 0.0);
  EXPECT_EQ(r.macro_f1, 0.0);
}

TEST(F1Report, OneOfEach) {
  const Dataset gt = one_image({{square(0, 0, 5), {}}, {square(10, 10, 5), {}}});
  const Dataset pred = one_image({{square(0, 0, 5), 0.9}, {square(0, 12, 4), 0.8}});
  const EvalReport r = f1_report(pred, gt);
  const ClassStats& s = r.per_class.at(1);
  EXPECT_EQ(s.tp, 1);
  EXPECT_EQ(s.fp, 1);
  EXPECT_EQ(s.fn, 1);
  EXPECT_EQ(s.f1, 0.5);
  EXPECT_EQ(f1_score(0, 0, 0), 0.0);
}

TEST(F1Report, TableMismatch) {
  Dataset gt = one_image({});
  Dataset pred = one_image({});
  pred.images[0].width = 21;
  EXPECT_THROW(f1_report(pred, gt), ContractError);
  pred = one_image({});
  pred.categories.pop_back();
  EXPECT_THROW(evaluate(pred, gt), ContractError);
}

TEST(AveragePrecision, Examples) {
  EXPECT_EQ(*average_precision(std::vector<RankedDetection>{{0.9, true}}, 1), 1.0);
  EXPECT_EQ(*average_precision(std::vector<RankedDetection>{{0.9, false}, {0.8, true}}, 1), 0.5);
  EXPECT_FALSE(average_precision(std::vector<RankedDetection>{{0.9, false}}, 0).has_value());
  EXPECT_EQ(*average_precision({}, 3), 0.0);
}

std::vector<RankedDetection> random_ranking(std::mt19937_64& rng, int n, int& num_gt) {
  std::vector<RankedDetection> dets;
  int tp = 0;
  for (int i = 0; i < n; ++i) {
    const bool hit = rng() % 2;
    tp += hit;
    dets.push_back({1.0 - 0.01 * i, hit});  // already ranked, distinct scores
  }
  num_gt = tp + static_cast<int>(rng() % 4);
  if (num_gt == 0) num_gt = 1;
  std::shuffle(dets.begin(), dets.end(), rng);
  return dets;
}

std::vector<bool> ranked_hits(std::vector<RankedDetection> dets) {
  std::sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<bool> hits;
  for (const auto& d : dets) hits.push_back(d.true_positive);
  return hits;
}

TEST(AveragePrecision, MatchesOracleAndIgnoresTrailingFalsePositive) {
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    int num_gt = 0;
    auto dets = random_ranking(rng, 1 + static_cast<int>(rng() % 9), num_gt);
    const double ap = *average_precision(dets, num_gt);
    EXPECT_DOUBLE_EQ(ap, oracle::interpolated_ap(ranked_hits(dets), num_gt));
    dets.push_back({0.001, false});
    EXPECT_EQ(*average_precision(dets, num_gt), ap) << trial;
  }
}

TEST(AveragePrecision, DatasetLevelTrailingFalsePositive) {
  std::mt19937_64 rng(34);
  std::uniform_real_distribution<double> u(0.2, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::pair<Polygon, std::optional<double>>> g, p;
    const int ng = 1 + static_cast<int>(rng() % 4);
    for (int i = 0; i < ng; ++i) g.push_back({square(4.0 * i, 0, 4), {}});
    const int np = static_cast<int>(rng() % 5);
    for (int i = 0; i < np; ++i) {
      const double x = 4.0 * static_cast<double>(rng() % 5);
      p.push_back({square(x, rng() % 2 ? 0.0 : 1.0, 4), u(rng)});
    }
    const Dataset gt = one_image(g);
    Dataset pred = one_image(p);
    const EvalReport before = evaluate(pred, gt);
    pred.annotations.push_back(make_annotation(100, 1, 1, {square(14, 14, 5)}, 0.1, Source::pseudo, pred.images[0]));
    const EvalReport after = evaluate(pred, gt);
    EXPECT_EQ(before.per_class.at(1).ap50, after.per_class.at(1).ap50) << trial;
    EXPECT_EQ(before.map50, after.map50);
  }
}

// ---------------------------------------------------------------------------
// Golden fixtures

TEST(Evaluate, MixedFixtureHandComputed) {
  const EvalReport r = evaluate(load("metrics/mixed_pred.json"), load("metrics/mixed_gt.json"));
  const auto& c1 = r.per_class.at(1);
  const auto& c2 = r.per_class.at(2);
  const auto& c3 = r.per_class.at(3);
  EXPECT_EQ(std::tie(c1.tp, c1.fp, c1.fn), std::make_tuple(2, 2, 1));
  EXPECT_EQ(std::tie(c2.tp, c2.fp, c2.fn), std::make_tuple(1, 1, 0));
  EXPECT_EQ(std::tie(c3.tp, c3.fp, c3.fn), std::make_tuple(0, 1, 1));
  EXPECT_DOUBLE_EQ(c1.f1, 4.0 / 7.0);
  EXPECT_DOUBLE_EQ(c2.f1, 2.0 / 3.0);
  EXPECT_EQ(c3.f1, 0.0);
  EXPECT_NEAR(*c1.ap50, 134.0 / 303.0, 1e-12);
  EXPECT_EQ(*c2.ap50, 1.0);
  EXPECT_EQ(*c3.ap50, 0.0);
  EXPECT_EQ(r.micro_f1, 0.5);
  EXPECT_DOUBLE_EQ(r.macro_f1, 26.0 / 63.0);
  EXPECT_DOUBLE_EQ(r.map50, 437.0 / 909.0);
  EXPECT_EQ(write_report(r), read_file(fixture("metrics/mixed_report.json").string()));
}

TEST(Evaluate, TwoPredictionFixture) {
  const EvalReport r = evaluate(load("metrics/two_pred.json"), load("metrics/two_gt.json"));
  EXPECT_EQ(*r.per_class.at(1).ap50, 0.5);
  EXPECT_EQ(r.map50, 0.5);
  EXPECT_DOUBLE_EQ(r.micro_f1, 2.0 / 3.0);
  EXPECT_EQ(write_report(r), read_file(fixture("metrics/two_report.json").string()));
  EXPECT_EQ(average_precision_50(load("metrics/two_pred.json"), load("metrics/two_gt.json"), 1), 0.5);
}

TEST(Evaluate, PerfectAndEmpty) {
  const Dataset gt = load("metrics/mixed_gt.json");
  Dataset perfect = gt;
  for (auto& a : perfect.annotations) a.score = 1.0;
  EvalReport r = evaluate(perfect, gt);
  EXPECT_EQ(r.micro_f1, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
  EXPECT_EQ(r.map50, 1.0);
  Dataset empty = gt;
  empty.annotations.clear();
  r = evaluate(empty, gt);
  EXPECT_EQ(r.micro_f1, 0.0);
  EXPECT_EQ(r.macro_f1, 0.0);
  EXPECT_EQ(r.map50, 0.0);
}

TEST(Evaluate, ScoreScalingInvariance) {
  const Dataset gt = load("metrics/mixed_gt.json");
  const Dataset pred = load("metrics/mixed_pred.json");
  Dataset scaled = pred;
  for (auto& a : scaled.annotations) a.score = *a.score * 0.37;
  EXPECT_EQ(write_report(evaluate(scaled, gt)), write_report(evaluate(pred, gt)));
}

TEST(Evaluate, ImageRelabelingInvariance) {
  const Dataset gt = load("metrics/mixed_gt.json");
  const Dataset pred = load("metrics/mixed_pred.json");
  auto relabel = [](Dataset d) {
    for (auto& im : d.images) im.id = 10 - im.id;
    for (auto& a : d.annotations) a.image_id = 10 - a.image_id;
    return d;
  };
  EXPECT_EQ(write_report(evaluate(relabel(pred), relabel(gt))), write_report(evaluate(pred, gt)));
}

TEST(Evaluate, ThreadCountDoesNotMatter) {
  const Dataset gt = load("metrics/mixed_gt.json");
  const Dataset pred = load("metrics/mixed_pred.json");
  const std::string one = write_report(evaluate(pred, gt, 0.5, 1));
  for (unsigned jobs : {2u, 4u, 8u}) EXPECT_EQ(write_report(evaluate(pred, gt, 0.5, jobs)), one);
}

TEST(Evaluate, ReportCsv) {
  const EvalReport r = evaluate(load("metrics/two_pred.json"), load("metrics/two_gt.json"));
  EXPECT_EQ(write_report_csv(r),
            "category_id,tp,fp,fn,ground_truths,precision,recall,f1,ap50\n"
            "1,1,1,0,1,0.500000,1.000000,0.666667,0.500000\n");
}

}  // namespace
}  // namespace pseudoseg
