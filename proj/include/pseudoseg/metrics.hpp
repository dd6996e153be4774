#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "pseudoseg/dataset.hpp"
#include "pseudoseg/error.hpp"
#include "pseudoseg/geometry.hpp"
#include "pseudoseg/parallel.hpp"

namespace pseudoseg {

inline double mask_iou(const Mask& a, const Mask& b) {
  if (a.width() != b.width() || a.height() != b.height()) {
    throw ContractError("mask_iou: masks have different dimensions");
  }
  const auto uni = union_count(a, b);
  if (uni == 0) return 0.0;
  return static_cast<double>(intersection_count(a, b)) / static_cast<double>(uni);
}

inline double mask_iou(const PolygonSet& a, const PolygonSet& b, int width, int height) {
  return mask_iou(rasterize(a, width, height), rasterize(b, width, height));
}

// A rasterized instance on one image. Ground truths ignore `score`.
struct Instance {
  std::int64_t category_id = 0;
  Mask mask;
  double score = 1.0;
};

struct MatchPair {
  std::size_t prediction = 0;
  std::size_t ground_truth = 0;
  double iou = 0.0;
};

struct MatchResult {
  std::vector<MatchPair> pairs;
  std::vector<std::size_t> unmatched_predictions;    // false positives
  std::vector<std::size_t> unmatched_ground_truths;  // false negatives
};

// Indices of `preds` by descending score, ties by ascending index.
inline std::vector<std::size_t> score_order(std::span<const Instance> preds) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });
  return order;
}

// Greedy one-to-one matching on one image: in score order, each prediction
// takes the still-unmatched ground truth of its own class with the highest
// IoU, provided that IoU reaches the threshold. IoU ties go to the lower
// ground-truth index.
inline MatchResult match_instances(std::span<const Instance> preds, std::span<const Instance> gts,
                                   double iou_threshold = 0.5) {
  MatchResult result;
  std::vector<bool> gt_taken(gts.size(), false);
  std::vector<bool> pred_matched(preds.size(), false);
  for (std::size_t p : score_order(preds)) {
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (gt_taken[g] || gts[g].category_id != preds[p].category_id) continue;
      const double iou = mask_iou(preds[p].mask, gts[g].mask);
      if (iou >= iou_threshold && iou > best) {
        best = iou;
        best_gt = g;
      }
    }
    if (best_gt < gts.size()) {
      gt_taken[best_gt] = true;
      pred_matched[p] = true;
      result.pairs.push_back({p, best_gt, best});
    }
  }
  for (std::size_t p = 0; p < preds.size(); ++p) {
    if (!pred_matched[p]) result.unmatched_predictions.push_back(p);
  }
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (!gt_taken[g]) result.unmatched_ground_truths.push_back(g);
  }
  return result;
}

// A prediction after matching, in pooled (image id, annotation id) order.
struct RankedDetection {
  double score = 0.0;
  bool true_positive = false;
};

// 101-point interpolated AP. Detections are ranked by descending score
// (ties keep input order); p_interp(r) is the best precision at any recall
// >= r, or 0 if recall r is never reached. Returns nullopt when the class
// has no ground truth.
inline std::optional<double> average_precision(std::span<const RankedDetection> dets,
                                               std::int64_t num_ground_truth) {
  if (num_ground_truth <= 0) return std::nullopt;
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  // Precision envelope from the right; recall is tracked as a TP count.
  std::vector<std::int64_t> tp_at(order.size());
  std::vector<double> precision(order.size());
  std::int64_t tp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (dets[order[k]].true_positive) ++tp;
    tp_at[k] = tp;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  for (std::size_t k = order.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);

  double sum = 0.0;
  std::size_t k = 0;
  for (int i = 0; i <= 100; ++i) {
    // First rank whose recall tp/num_gt reaches i/100.
    while (k < order.size() && tp_at[k] * 100 < static_cast<std::int64_t>(i) * num_ground_truth) ++k;
    if (k == order.size()) break;
    sum += precision[k];
  }
  return sum / 101.0;
}

struct ClassStats {
  std::int64_t tp = 0, fp = 0, fn = 0;
  std::int64_t ground_truths = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::optional<double> ap50;  // unset when the class has no ground truth
};

struct EvalReport {
  double iou_threshold = 0.5;
  std::map<std::int64_t, ClassStats> per_class;
  double micro_f1 = 0.0;
  double macro_f1 = 0.0;
  double map50 = 0.0;
};

inline double safe_ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

inline double f1_score(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
  return safe_ratio(2.0 * static_cast<double>(tp), static_cast<double>(2 * tp + fp + fn));
}

namespace detail {

inline void check_same_tables(const Dataset& pred, const Dataset& gt) {
  auto sorted = [](auto v) {
    std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return v;
  };
  if (sorted(pred.images) != sorted(gt.images)) {
    throw ContractError("evaluate: prediction and ground-truth image tables differ");
  }
  if (sorted(pred.categories) != sorted(gt.categories)) {
    throw ContractError("evaluate: prediction and ground-truth category tables differ");
  }
}

struct PerImage {
  MatchResult match;
  std::vector<const Annotation*> preds;
  std::vector<const Annotation*> gts;
};

struct Collected {
  std::vector<PerImage> images;  // ascending image id
};

inline Collected collect(const Dataset& pred, const Dataset& gt, double iou_threshold, unsigned jobs) {
  check_same_tables(pred, gt);
  std::vector<ImageRecord> images = gt.images;
  std::sort(images.begin(), images.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::unordered_map<std::int64_t, std::size_t> slot;
  for (std::size_t i = 0; i < images.size(); ++i) slot[images[i].id] = i;

  Collected c;
  c.images.resize(images.size());
  auto bucket = [&](const Dataset& d, bool is_pred) {
    std::vector<const Annotation*> anns;
    for (const auto& a : d.annotations) anns.push_back(&a);
    std::sort(anns.begin(), anns.end(), [](const auto* a, const auto* b) { return a->id < b->id; });
    for (const auto* a : anns) {
      auto it = slot.find(a->image_id);
      if (it == slot.end()) {
        throw ReferentialError("evaluate: annotation " + std::to_string(a->id) +
                               " refers to unknown image " + std::to_string(a->image_id));
      }
      (is_pred ? c.images[it->second].preds : c.images[it->second].gts).push_back(a);
    }
  };
  bucket(pred, true);
  bucket(gt, false);

  parallel_for(images.size(), jobs, [&](std::size_t i) {
    auto& pi = c.images[i];
    const auto& im = images[i];
    std::vector<Instance> p, g;
    for (const auto* a : pi.preds) p.push_back({a->category_id, annotation_mask(*a, im), a->score.value_or(1.0)});
    for (const auto* a : pi.gts) g.push_back({a->category_id, annotation_mask(*a, im), 1.0});
    pi.match = match_instances(p, g, iou_threshold);
  });
  return c;
}

inline EvalReport build_report(const Collected& c, double iou_threshold, bool with_ap) {
  EvalReport r;
  r.iou_threshold = iou_threshold;
  std::map<std::int64_t, std::vector<RankedDetection>> ranked;
  for (const auto& pi : c.images) {
    std::vector<bool> tp(pi.preds.size(), false);
    for (const auto& pair : pi.match.pairs) tp[pair.prediction] = true;
    for (std::size_t i = 0; i < pi.preds.size(); ++i) {
      auto& s = r.per_class[pi.preds[i]->category_id];
      (tp[i] ? s.tp : s.fp) += 1;
      ranked[pi.preds[i]->category_id].push_back({pi.preds[i]->score.value_or(1.0), tp[i]});
    }
    for (const auto* g : pi.gts) r.per_class[g->category_id].ground_truths += 1;
    for (std::size_t g : pi.match.unmatched_ground_truths) r.per_class[pi.gts[g]->category_id].fn += 1;
  }

  std::int64_t tp = 0, fp = 0, fn = 0;
  double macro_sum = 0.0, ap_sum = 0.0;
  int classes_with_gt = 0;
  for (auto& [cls, s] : r.per_class) {
    s.precision = safe_ratio(static_cast<double>(s.tp), static_cast<double>(s.tp + s.fp));
    s.recall = safe_ratio(static_cast<double>(s.tp), static_cast<double>(s.tp + s.fn));
    s.f1 = f1_score(s.tp, s.fp, s.fn);
    tp += s.tp;
    fp += s.fp;
    fn += s.fn;
    if (s.ground_truths > 0) {
      ++classes_with_gt;
      macro_sum += s.f1;
      if (with_ap) {
        s.ap50 = average_precision(ranked[cls], s.ground_truths);
        ap_sum += *s.ap50;
      }
    }
  }
  r.micro_f1 = f1_score(tp, fp, fn);
  r.macro_f1 = classes_with_gt ? macro_sum / classes_with_gt : 0.0;
  r.map50 = (with_ap && classes_with_gt) ? ap_sum / classes_with_gt : 0.0;
  return r;
}

}  // namespace detail

// Per-class tp/fp/fn, precision, recall and F1 plus micro and macro F1.
// Macro F1 averages over classes with at least one ground truth.
inline EvalReport f1_report(const Dataset& pred, const Dataset& gt, double iou_threshold = 0.5,
                            unsigned jobs = 1) {
  return detail::build_report(detail::collect(pred, gt, iou_threshold, jobs), iou_threshold, false);
}

// AP at IoU 0.5 for one class, predictions pooled over all images.
inline std::optional<double> average_precision_50(const Dataset& pred, const Dataset& gt,
                                                  std::int64_t category_id, unsigned jobs = 1) {
  const auto r = detail::build_report(detail::collect(pred, gt, 0.5, jobs), 0.5, true);
  auto it = r.per_class.find(category_id);
  if (it == r.per_class.end()) return std::nullopt;
  return it->second.ap50;
}

// F1 fields at `iou_threshold` together with AP and mAP. AP always uses the
// threshold given here, which is 0.5 unless overridden.
inline EvalReport evaluate(const Dataset& pred, const Dataset& gt, double iou_threshold = 0.5,
                           unsigned jobs = 1) {
  return detail::build_report(detail::collect(pred, gt, iou_threshold, jobs), iou_threshold, true);
}

// Canonical report: sorted keys, 6-decimal fractions, per-class rows in
// ascending category id.
inline std::string write_report(const EvalReport& r, const Json& provenance = Json::object()) {
  using detail::fixed6;
  std::string out = "{\n";
  out += "  \"iou_threshold\": " + fixed6(r.iou_threshold) + ",\n";
  out += "  \"macro_f1\": " + fixed6(r.macro_f1) + ",\n";
  out += "  \"map50\": " + fixed6(r.map50) + ",\n";
  out += "  \"micro_f1\": " + fixed6(r.micro_f1) + ",\n";
  out += "  \"per_class\": [";
  bool first = true;
  for (const auto& [cls, s] : r.per_class) {
    out += first ? "\n    " : ",\n    ";
    first = false;
    out += "{\"ap50\": " + (s.ap50 ? fixed6(*s.ap50) : std::string("null")) +
           ", \"category_id\": " + std::to_string(cls) + ", \"f1\": " + fixed6(s.f1) +
           ", \"fn\": " + std::to_string(s.fn) + ", \"fp\": " + std::to_string(s.fp) +
           ", \"ground_truths\": " + std::to_string(s.ground_truths) +
           ", \"precision\": " + fixed6(s.precision) + ", \"recall\": " + fixed6(s.recall) +
           ", \"tp\": " + std::to_string(s.tp) + "}";
  }
  out += first ? "],\n" : "\n  ],\n";
  out += "  \"provenance\": " + provenance.dump() + "\n}\n";
  return out;
}

inline std::string write_report_csv(const EvalReport& r) {
  using detail::fixed6;
  std::string out = "category_id,tp,fp,fn,ground_truths,precision,recall,f1,ap50\n";
  for (const auto& [cls, s] : r.per_class) {
    out += std::to_string(cls) + "," + std::to_string(s.tp) + "," + std::to_string(s.fp) + "," +
           std::to_string(s.fn) + "," + std::to_string(s.ground_truths) + "," +
           fixed6(s.precision) + "," + fixed6(s.recall) + "," + fixed6(s.f1) + "," +
           (s.ap50 ? fixed6(*s.ap50) : std::string()) + "\n";
  }
  return out;
}

}  // namespace pseudoseg
