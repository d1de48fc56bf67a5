#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "saane/config.hpp"
#include "saane/tensor.hpp"

namespace saane {

// A fixed-length descriptor of one frame.
struct Embedding {
  int frame_id = 0;
  int class_id = 0;
  int condition_id = 0;
  std::vector<float> values;
};

struct RetrievalResult {
  int query_frame = 0;
  int best_frame = 0;
  double d1 = 0.0;  // best distance
  double d2 = 0.0;  // second-best distance
};

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // one per swept threshold, ascending
  double auc = 0.0;
};

inline double embedding_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sq += d * d;
  }
  return std::sqrt(sq);
}

// Exhaustive nearest-neighbor scan returning the best frame and the two
// smallest distances. Distance ties go to the lower frame index.
inline RetrievalResult retrieve(const Embedding& query, const std::vector<Embedding>& db) {
  if (db.size() < 2) {
    throw DataError("retrieve needs a database of at least 2 embeddings (ratio undefined)");
  }
  RetrievalResult out;
  out.query_frame = query.frame_id;
  double d1 = std::numeric_limits<double>::infinity();
  double d2 = std::numeric_limits<double>::infinity();
  int best_frame = -1;
  for (const Embedding& entry : db) {
    if (entry.values.size() != query.values.size()) {
      throw DataError("embedding length mismatch: query " + std::to_string(query.values.size()) +
                      " vs database " + std::to_string(entry.values.size()));
    }
    const double d = embedding_distance(query.values, entry.values);
    if (d < d1 || (d == d1 && entry.frame_id < best_frame)) {
      d2 = d1;
      d1 = d;
      best_frame = entry.frame_id;
    } else if (d < d2) {
      d2 = d;
    }
  }
  out.best_frame = best_frame;
  out.d1 = d1;
  out.d2 = d2;
  return out;
}

// Synchronized-traversal ground truth: the retrieved frame must lie within
// `tolerance` frames of the query frame.
inline bool is_true_positive(int query_frame, int best_frame, int tolerance) {
  if (tolerance < 0) throw Error("frame tolerance must be non-negative");
  return std::abs(query_frame - best_frame) <= tolerance;
}

// Distinctiveness ratio of a retrieval; an exact double tie at zero counts
// as maximally ambiguous.
inline double match_ratio(const RetrievalResult& r) { return r.d2 > 0.0 ? r.d1 / r.d2 : 1.0; }

inline bool ratio_accepts(double ratio, double threshold, RatioDirection direction) {
  return direction == RatioDirection::AcceptLeq ? ratio <= threshold : ratio >= threshold;
}

// Precision-recall sweep over ratio-test thresholds. A query is accepted at
// threshold tau when its ratio passes (d1/d2 <= tau by default); a true
// positive is an accepted query within the frame tolerance. Thresholds with
// no accepted query define precision 1. The AUC integrates precision over
// recall with the trapezoid rule, anchored at (0, precision of the
// lowest-recall point).
inline PrCurve pr_curve(const std::vector<RetrievalResult>& results, int tolerance,
                        const std::vector<double>& thresholds,
                        RatioDirection direction = RatioDirection::AcceptLeq) {
  if (results.empty()) throw DataError("pr_curve needs at least one retrieval result");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (thresholds[i] <= 0.0 || thresholds[i] > 1.0 ||
        (i > 0 && thresholds[i] <= thresholds[i - 1])) {
      throw Error("thresholds must be strictly increasing within (0, 1]");
    }
  }

  PrCurve curve;
  for (double tau : thresholds) {
    std::size_t accepted = 0, tp = 0;
    for (const RetrievalResult& r : results) {
      if (!ratio_accepts(match_ratio(r), tau, direction)) continue;
      ++accepted;
      if (is_true_positive(r.query_frame, r.best_frame, tolerance)) ++tp;
    }
    PrPoint point;
    point.threshold = tau;
    point.precision = accepted == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(accepted);
    point.recall = static_cast<double>(tp) / static_cast<double>(results.size());
    curve.points.push_back(point);
  }

  std::vector<PrPoint> by_recall = curve.points;
  std::stable_sort(by_recall.begin(), by_recall.end(),
                   [](const PrPoint& a, const PrPoint& b) { return a.recall < b.recall; });
  double auc = 0.0;
  double prev_recall = 0.0;
  double prev_precision = by_recall.empty() ? 1.0 : by_recall.front().precision;
  for (const PrPoint& p : by_recall) {
    auc += (p.recall - prev_recall) * 0.5 * (p.precision + prev_precision);
    prev_recall = p.recall;
    prev_precision = p.precision;
  }
  curve.auc = auc;
  return curve;
}

inline std::vector<double> even_thresholds(int count) {
  if (count <= 0) throw Error("threshold count must be positive");
  std::vector<double> out(static_cast<std::size_t>(count));
  for (int i = 1; i <= count; ++i) {
    out[static_cast<std::size_t>(i - 1)] = static_cast<double>(i) / static_cast<double>(count);
  }
  return out;
}

struct Evaluation {
  PrCurve curve;
  std::vector<RetrievalResult> results;  // one per query, in query order
  std::vector<bool> correct;             // frame-tolerance verdict per query
};

// Whole-protocol evaluation: retrieve every query against the database,
// sweep `n_thresholds` evenly spaced ratio thresholds in (0, 1], and report
// the curve plus the per-query outcomes.
inline Evaluation evaluate(const std::vector<Embedding>& db, const std::vector<Embedding>& queries,
                           int tolerance, int n_thresholds = 100,
                           RatioDirection direction = RatioDirection::AcceptLeq) {
  if (db.empty() || queries.empty()) {
    throw DataError("evaluate needs non-empty database and query sets");
  }
  Evaluation out;
  out.results.reserve(queries.size());
  for (const Embedding& q : queries) {
    RetrievalResult r = retrieve(q, db);
    out.correct.push_back(is_true_positive(r.query_frame, r.best_frame, tolerance));
    out.results.push_back(r);
  }
  out.curve = pr_curve(out.results, tolerance, even_thresholds(n_thresholds), direction);
  return out;
}

}  // namespace saane
