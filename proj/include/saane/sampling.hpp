#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "saane/config.hpp"
#include "saane/tensor.hpp"

namespace saane {

struct TripletIndex {
  int anchor = 0;
  int positive = 0;
  int negative = 0;
};

// log of the pairwise-distance density on the unit (n-1)-sphere, up to its
// normalizing constant: q(d) ~ d^(n-2) * (1 - d^2/4)^((n-3)/2).
inline double log_sphere_distance_density(double d, int n) {
  return (n - 2) * std::log(d) + 0.5 * (n - 3) * std::log(1.0 - 0.25 * d * d);
}

// Unnormalized log weight for drawing a negative at unit-sphere distance d:
// min(w_max, q(d)^-1), with d clamped below at d_min. Distances at or past
// the antipode land on the weight cap.
inline double negative_log_weight(double d, int n, const SamplingConfig& cfg) {
  d = std::max(d, cfg.d_min);
  const double log_cap = std::log(cfg.w_max);
  if (1.0 - 0.25 * d * d <= 0.0) return log_cap;
  return std::min(log_cap, -log_sphere_distance_density(d, n));
}

// Online triplet mining with distance-weighted negative sampling. For every
// ordered anchor-positive pair within a class, one negative is drawn from
// the other classes with probability proportional to min(w_max, q(d)^-1),
// where d is the anchor-negative distance on the unit-normalized embeddings
// and n the embedding dimension. `unit_distance(i, j)` must return that
// distance for items i and j of the batch.
template <typename DistanceFn>
std::vector<TripletIndex> mine_triplets(const std::vector<int>& labels, int embedding_dim,
                                        DistanceFn&& unit_distance, const SamplingConfig& cfg,
                                        Rng& rng) {
  const int n = static_cast<int>(labels.size());
  std::vector<TripletIndex> out;
  for (int anchor = 0; anchor < n; ++anchor) {
    std::vector<int> positives, negatives;
    for (int j = 0; j < n; ++j) {
      if (j == anchor) continue;
      (labels[j] == labels[anchor] ? positives : negatives).push_back(j);
    }
    if (positives.empty()) {
      throw DataError("triplet mining needs at least 2 members per class, class " +
                      std::to_string(labels[anchor]) + " has 1");
    }
    if (negatives.empty()) {
      throw DataError("triplet mining needs at least 2 classes in the batch");
    }

    std::vector<double> log_w(negatives.size());
    for (std::size_t k = 0; k < negatives.size(); ++k) {
      log_w[k] = negative_log_weight(unit_distance(anchor, negatives[k]), embedding_dim, cfg);
    }
    const double shift = *std::max_element(log_w.begin(), log_w.end());
    std::vector<double> weights(negatives.size());
    for (std::size_t k = 0; k < weights.size(); ++k) weights[k] = std::exp(log_w[k] - shift);
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());

    for (int positive : positives) {
      out.push_back(TripletIndex{anchor, positive, negatives[pick(rng)]});
    }
  }
  return out;
}

}  // namespace saane
