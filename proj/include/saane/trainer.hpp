#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "saane/config.hpp"
#include "saane/dataset.hpp"
#include "saane/eval.hpp"
#include "saane/gradcheck.hpp"
#include "saane/model.hpp"
#include "saane/optimizer.hpp"
#include "saane/sampling.hpp"
#include "saane/tape.hpp"

namespace saane {

// Hinge on the anchor-positive / anchor-negative distance gap.
inline double triplet_loss(double d_ap, double d_an, double margin) {
  return std::max(0.0, d_ap - d_an + margin);
}

struct EpochStats {
  double mean_loss = 0.0;        // averaged over all triplets of the epoch
  double active_fraction = 0.0;  // triplets with a positive hinge argument
  double wall_seconds = 0.0;
};

template <typename T>
struct BatchLoss {
  Var loss;
  int active = 0;
  int total = 0;
};

// Builds the mean triplet hinge over mined triplets on the recording tape.
// Distance nodes are cached per unordered pair so shared distances
// contribute one node.
template <typename T>
BatchLoss<T> triplet_loss_on_tape(Tape<T>& tape, const std::vector<Var>& embeddings,
                                  const std::vector<TripletIndex>& triplets, double margin) {
  std::map<std::pair<int, int>, Var> cache;
  auto distance = [&](int i, int j) {
    auto key = std::minmax(i, j);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    Var d = tape.euclidean(embeddings[static_cast<std::size_t>(key.first)],
                           embeddings[static_cast<std::size_t>(key.second)]);
    cache.emplace(key, d);
    return d;
  };
  BatchLoss<T> out;
  std::vector<Var> losses;
  losses.reserve(triplets.size());
  for (const TripletIndex& t : triplets) {
    Var gap = tape.shift(tape.sub(distance(t.anchor, t.positive), distance(t.anchor, t.negative)),
                         static_cast<T>(margin));
    if (tape.value(gap)[0] > T(0)) ++out.active;
    losses.push_back(tape.relu(gap));
  }
  out.total = static_cast<int>(triplets.size());
  out.loss = tape.mean(losses);
  return out;
}

namespace detail {

// Classes for one epoch, shuffled, chunked into groups of exactly
// batch_classes. A short trailing chunk is completed with distinct classes
// drawn from the rest of the epoch's order.
inline std::vector<std::vector<int>> compose_class_batches(std::vector<int> class_ids,
                                                           int batch_classes, Rng& rng) {
  std::shuffle(class_ids.begin(), class_ids.end(), rng);
  std::vector<std::vector<int>> batches;
  const std::size_t p = static_cast<std::size_t>(batch_classes);
  for (std::size_t start = 0; start < class_ids.size(); start += p) {
    std::vector<int> batch(class_ids.begin() + static_cast<std::ptrdiff_t>(start),
                           class_ids.begin() +
                               static_cast<std::ptrdiff_t>(std::min(start + p, class_ids.size())));
    for (std::size_t fill = 0; batch.size() < p; ++fill) batch.push_back(class_ids[fill]);
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace detail

// One pass over ceil(#classes / P) batch compositions: forward the P*K
// items, mine triplets online, average the hinge losses, backpropagate,
// and take an Adam step per batch.
template <typename T>
EpochStats train_epoch(const Dataset& data, const ClassIndex& index, EmbeddingModel<T>& model,
                       AdamOptimizer<T>& optimizer, const RunConfig& cfg, Rng& rng) {
  const auto start = std::chrono::steady_clock::now();
  auto params = model.parameters();
  auto batches = detail::compose_class_batches(index.class_ids(), cfg.batch_classes, rng);

  double loss_sum = 0.0;
  std::int64_t active = 0, total = 0;
  for (const auto& batch_classes : batches) {
    std::vector<std::size_t> items;
    std::vector<int> labels;
    for (int class_id : batch_classes) {
      std::vector<std::size_t> members = index.members(class_id);
      std::shuffle(members.begin(), members.end(), rng);
      for (int k = 0; k < cfg.batch_examples; ++k) {
        items.push_back(members[static_cast<std::size_t>(k)]);
        labels.push_back(class_id);
      }
    }

    Tape<T> tape;
    std::vector<Var> embeddings;
    embeddings.reserve(items.size());
    for (std::size_t idx : items) {
      const FeatureRecord& r = data[idx];
      embeddings.push_back(model
                               .embed_on_tape(tape, r.appearance.template cast<T>(),
                                              r.semantic.template cast<T>())
                               .embedding);
    }

    auto unit_distance = [&](int i, int j) {
      const Tensor<T>& a = tape.value(embeddings[static_cast<std::size_t>(i)]);
      const Tensor<T>& b = tape.value(embeddings[static_cast<std::size_t>(j)]);
      double sq = 0.0;
      for (std::size_t e = 0; e < a.size(); ++e) {
        const double d = static_cast<double>(a[e]) - static_cast<double>(b[e]);
        sq += d * d;
      }
      return std::sqrt(sq) / cfg.alpha;
    };
    auto triplets = mine_triplets(labels, model.embedding_dim(), unit_distance, cfg.sampling, rng);

    auto batch = triplet_loss_on_tape(tape, embeddings, triplets, cfg.margin);
    for (Parameter<T>* p : params) p->zero_grad();
    tape.backward(batch.loss);
    optimizer.step(params);

    loss_sum += static_cast<double>(tape.value(batch.loss)[0]) * batch.total;
    active += batch.active;
    total += batch.total;
  }

  EpochStats stats;
  stats.mean_loss = total > 0 ? loss_sum / static_cast<double>(total) : 0.0;
  stats.active_fraction = total > 0 ? static_cast<double>(active) / static_cast<double>(total) : 0.0;
  stats.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return stats;
}

struct TrainResult {
  std::vector<EpochStats> epochs;
  std::uint64_t steps = 0;
};

// Full training loop over cfg.epochs. Only the fusion and attention
// parameters train; inputs stay frozen. The optional callback sees each
// epoch's statistics as they complete.
template <typename T>
TrainResult train_run(const Dataset& data, EmbeddingModel<T>& model, const RunConfig& cfg,
                      Rng& rng,
                      const std::function<void(int, const EpochStats&)>& on_epoch = {}) {
  if (cfg.batch_examples < 2) {
    throw DataError("training needs at least 2 examples per class in a batch");
  }
  ClassIndex index(data);
  if (static_cast<int>(index.class_count()) < cfg.batch_classes) {
    throw DataError("dataset has " + std::to_string(index.class_count()) +
                    " classes, need at least " + std::to_string(cfg.batch_classes));
  }
  index.require_members(cfg.batch_examples);
  for (const FeatureRecord& r : data) validate_record(r);

  AdamConfig adam;
  adam.lr = cfg.lr;
  adam.weight_decay = cfg.weight_decay;
  AdamOptimizer<T> optimizer(model.parameters(), adam);

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats stats = train_epoch(data, index, model, optimizer, cfg, rng);
    if (on_epoch) on_epoch(epoch, stats);
    result.epochs.push_back(stats);
  }
  result.steps = optimizer.step_count();
  return result;
}

// Embeds every record of a dataset with a trained model.
template <typename T>
std::vector<Embedding> embed_dataset(EmbeddingModel<T>& model, const Dataset& data) {
  std::vector<Embedding> out;
  out.reserve(data.size());
  for (const FeatureRecord& r : data) {
    validate_record(r);
    Embedding e;
    e.frame_id = r.frame_id;
    e.class_id = r.class_id;
    e.condition_id = r.condition_id;
    Tensor<T> values =
        model.embed(r.appearance.template cast<T>(), r.semantic.template cast<T>());
    e.values.reserve(values.size());
    for (const T& v : values.data) e.values.push_back(static_cast<float>(v));
    out.push_back(std::move(e));
  }
  return out;
}

// Gradient check of the full embedding pipeline through the triplet loss.
// Builds a double-precision model and a fixed 2-class x 2-example batch of
// random maps, freezes the mined triplets whose hinge argument is bounded
// away from the kink, and compares analytic gradients against central
// finite differences.
inline GradCheckReport model_grad_check(const RunConfig& cfg, std::uint64_t seed, double eps) {
  Rng rng(seed);
  EmbeddingModel<double> model(cfg, rng);
  auto params = model.parameters();

  std::vector<Tensor<double>> appearance, semantic;
  for (int i = 0; i < 4; ++i) {
    Tensor<double> a(Shape{cfg.appearance_dim, cfg.map_h, cfg.map_w});
    Tensor<double> s(Shape{cfg.semantic_dim, cfg.map_h, cfg.map_w});
    fill_uniform(a, rng, -1.0, 1.0);
    fill_uniform(s, rng, -1.0, 1.0);
    appearance.push_back(std::move(a));
    semantic.push_back(std::move(s));
  }
  const std::vector<int> labels = {0, 0, 1, 1};

  auto forward = [&](Tape<double>& tape) {
    std::vector<Var> embeddings;
    for (int i = 0; i < 4; ++i) {
      embeddings.push_back(model.embed_on_tape(tape, appearance[static_cast<std::size_t>(i)],
                                               semantic[static_cast<std::size_t>(i)])
                               .embedding);
    }
    return embeddings;
  };

  // Freeze the triplet list at the base point; drop triplets whose hinge
  // argument is within 1e-2 of the kink, where finite differences are
  // meaningless. Active triplets carry the full gradient path, so they are
  // preferred; inactive ones only confirm a flat loss.
  std::vector<TripletIndex> triplets;
  {
    Tape<double> tape;
    auto embeddings = forward(tape);
    auto unit_distance = [&](int i, int j) {
      const auto& a = tape.value(embeddings[static_cast<std::size_t>(i)]);
      const auto& b = tape.value(embeddings[static_cast<std::size_t>(j)]);
      double sq = 0.0;
      for (std::size_t e = 0; e < a.size(); ++e) {
        const double d = a[e] - b[e];
        sq += d * d;
      }
      return std::sqrt(sq) / cfg.alpha;
    };
    Rng mine_rng(seed + 1);
    auto mined = mine_triplets(labels, model.embedding_dim(), unit_distance, cfg.sampling,
                               mine_rng);
    std::vector<TripletIndex> active, inactive;
    for (const TripletIndex& t : mined) {
      const auto& a = tape.value(embeddings[static_cast<std::size_t>(t.anchor)]);
      const auto& p = tape.value(embeddings[static_cast<std::size_t>(t.positive)]);
      const auto& n = tape.value(embeddings[static_cast<std::size_t>(t.negative)]);
      double d_ap = 0.0, d_an = 0.0;
      for (std::size_t e = 0; e < a.size(); ++e) {
        d_ap += (a[e] - p[e]) * (a[e] - p[e]);
        d_an += (a[e] - n[e]) * (a[e] - n[e]);
      }
      const double gap = std::sqrt(d_ap) - std::sqrt(d_an) + cfg.margin;
      if (gap > 1e-2) {
        active.push_back(t);
      } else if (gap < -1e-2) {
        inactive.push_back(t);
      }
    }
    triplets = active.empty() ? inactive : active;
    if (triplets.empty()) {
      throw CheckError("model_grad_check: every mined triplet sits on the hinge kink; "
                       "try another seed");
    }
  }

  auto loss = [&](bool with_grads) {
    Tape<double> tape;
    auto embeddings = forward(tape);
    auto batch = triplet_loss_on_tape(tape, embeddings, triplets, cfg.margin);
    const double value = tape.value(batch.loss)[0];
    if (with_grads) tape.backward(batch.loss);
    return value;
  };
  return grad_check(params, loss, eps);
}

}  // namespace saane
