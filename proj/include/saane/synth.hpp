#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "saane/config.hpp"
#include "saane/dataset.hpp"
#include "saane/tensor.hpp"

namespace saane {

// Deterministic desk-scale dataset generator. Each place has a latent
// appearance map and a latent semantic map. A record for (place, condition)
// perturbs them asymmetrically:
//   appearance = latent * condition gain field + strong noise
//   semantic   = latent + weak noise
// so the semantic stream stays far more stable across conditions than the
// appearance stream. Distractor blobs are planted at random positions per
// record: inside a blob the appearance content is replaced outright and the
// semantic content is suppressed, with a marker activation added on semantic
// channel 0 so the blob is detectable but carries no place identity.
inline Dataset generate_synthetic(const RunConfig& cfg, int n_places, int n_conditions,
                                  std::uint64_t seed) {
  if (n_conditions < 2) throw DataError("synthetic generator needs at least 2 conditions");
  if (n_places < cfg.batch_classes) {
    throw DataError("synthetic generator needs at least batch_classes (" +
                    std::to_string(cfg.batch_classes) + ") places, got " +
                    std::to_string(n_places));
  }
  const int max_level = *std::max_element(cfg.spp_levels.begin(), cfg.spp_levels.end());
  if (cfg.map_h < max_level || cfg.map_w < max_level) {
    throw DataError("map extent " + std::to_string(cfg.map_h) + "x" + std::to_string(cfg.map_w) +
                    " too small for spp level " + std::to_string(max_level));
  }

  const int ca = cfg.appearance_dim, cs = cfg.semantic_dim, h = cfg.map_h, w = cfg.map_w;
  const SynthConfig& s = cfg.synth;
  Rng rng(seed);

  // Per-condition multiplicative gain fields, shared across places.
  std::vector<Tensor<float>> gains;
  for (int c = 0; c < n_conditions; ++c) {
    Tensor<float> channel_gain(Shape{ca});
    Tensor<float> spatial_gain(Shape{h, w});
    fill_gaussian(channel_gain, rng, 1.0);
    fill_gaussian(spatial_gain, rng, 1.0);
    Tensor<float> gain(Shape{ca, h, w});
    for (int ch = 0; ch < ca; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          gain.at(ch, y, x) = static_cast<float>(std::exp(
              0.5 * s.gain_strength *
              (channel_gain[static_cast<std::size_t>(ch)] + spatial_gain.at(y, x))));
        }
    gains.push_back(std::move(gain));
  }

  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> pick_y(0, h - 1);
  std::uniform_int_distribution<int> pick_x(0, w - 1);

  Dataset out;
  out.reserve(static_cast<std::size_t>(n_places) * n_conditions);
  for (int place = 0; place < n_places; ++place) {
    Tensor<float> latent_app(Shape{ca, h, w});
    Tensor<float> latent_sem(Shape{cs, h, w});
    fill_gaussian(latent_app, rng, 1.0);
    fill_gaussian(latent_sem, rng, 1.0);

    for (int cond = 0; cond < n_conditions; ++cond) {
      FeatureRecord rec;
      rec.frame_id = place * n_conditions + cond;
      rec.class_id = place;
      rec.condition_id = cond;

      rec.appearance = Tensor<float>(Shape{ca, h, w});
      const Tensor<float>& gain = gains[static_cast<std::size_t>(cond)];
      for (std::size_t i = 0; i < rec.appearance.size(); ++i) {
        rec.appearance[i] = latent_app[i] * gain[i] +
                            static_cast<float>(s.appearance_noise * unit(rng));
      }
      rec.semantic = Tensor<float>(Shape{cs, h, w});
      for (std::size_t i = 0; i < rec.semantic.size(); ++i) {
        rec.semantic[i] = latent_sem[i] + static_cast<float>(s.semantic_noise * unit(rng));
      }

      for (int blob = 0; blob < s.distractor_count; ++blob) {
        const int cy = pick_y(rng), cx = pick_x(rng);
        Tensor<float> signature(Shape{ca});
        fill_gaussian(signature, rng, s.distractor_strength);
        const int y0 = std::max(0, cy - s.distractor_radius);
        const int y1 = std::min(h - 1, cy + s.distractor_radius);
        const int x0 = std::max(0, cx - s.distractor_radius);
        const int x1 = std::min(w - 1, cx + s.distractor_radius);
        for (int y = y0; y <= y1; ++y)
          for (int x = x0; x <= x1; ++x) {
            for (int ch = 0; ch < ca; ++ch) {
              rec.appearance.at(ch, y, x) = signature[static_cast<std::size_t>(ch)];
            }
            for (int ch = 0; ch < cs; ++ch) rec.semantic.at(ch, y, x) *= 0.2f;
            rec.semantic.at(0, y, x) += static_cast<float>(s.distractor_strength);
          }
      }
      out.push_back(std::move(rec));
    }
  }
  return out;
}

// Records of one viewing condition, re-framed by place so frame indices
// align across traversals.
inline Dataset condition_slice(const Dataset& data, int condition) {
  Dataset out;
  for (const FeatureRecord& r : data) {
    if (r.condition_id != condition) continue;
    FeatureRecord copy = r;
    copy.frame_id = r.class_id;
    out.push_back(std::move(copy));
  }
  return out;
}

}  // namespace saane
