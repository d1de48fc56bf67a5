#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "saane/tape.hpp"
#include "saane/tensor.hpp"

namespace saane {

enum class RatioDirection { AcceptLeq, AcceptGeq };

struct SamplingConfig {
  double d_min = 0.5;   // lower clamp on unit-sphere distances before weighting
  double w_max = 1e6;   // cap on the inverse-density weight
};

struct SynthConfig {
  double gain_strength = 1.0;        // log-gain stddev of the per-condition field
  double appearance_noise = 0.4;     // per-record additive noise on the appearance stream
  double semantic_noise = 0.15;      // per-record additive noise on the semantic stream
  int distractor_count = 3;          // activation blobs planted per record
  double distractor_strength = 2.0;  // blob activation scale
  int distractor_radius = 1;         // blob half-extent (box of side 2r+1)
};

struct RunConfig {
  int common_dim = 256;          // C, channels of the shared fusion space
  int appearance_dim = 1024;     // C_A, input channels of the appearance stream
  int semantic_dim = 512;        // C_S, input channels of the semantic stream
  int reduction_ratio = 16;      // channel-gate MLP hidden width is C / r
  std::vector<int> spp_levels = {4, 3, 2, 1};
  double alpha = 10.0;           // embedding scale after L2 normalization
  double margin = 0.5;
  double lr = 5e-5;
  double weight_decay = 5e-4;
  int batch_classes = 16;        // P, distinct classes per batch
  int batch_examples = 4;        // K, examples per class
  int epochs = 30;
  std::uint64_t seed = 1;
  bool share_channel_attention = true;
  bool use_semantic = true;
  bool use_attention = true;
  PoolMode spp_mode = PoolMode::Max;
  RatioDirection ratio_direction = RatioDirection::AcceptLeq;
  int map_h = 7;                 // spatial extent used by gradcheck and the generator
  int map_w = 7;
  SamplingConfig sampling;
  SynthConfig synth;
};

inline int embedding_length(const RunConfig& cfg) {
  int bins = 0;
  for (int n : cfg.spp_levels) bins += n * n;
  return cfg.common_dim * bins;
}

// FNV-1a over a canonical rendering of the architecture-defining fields.
// Two configs with equal digests build models with identical parameter
// censuses and embedding layouts.
inline std::uint64_t arch_digest(const RunConfig& cfg) {
  std::ostringstream s;
  s << "C=" << cfg.common_dim << ";Ca=" << cfg.appearance_dim << ";Cs=" << cfg.semantic_dim
    << ";r=" << cfg.reduction_ratio << ";levels=";
  for (std::size_t i = 0; i < cfg.spp_levels.size(); ++i) {
    if (i > 0) s << ',';
    s << cfg.spp_levels[i];
  }
  s << ";mode=" << pool_mode_name(cfg.spp_mode) << ";alpha=" << cfg.alpha
    << ";share=" << (cfg.share_channel_attention ? 1 : 0)
    << ";sem=" << (cfg.use_semantic ? 1 : 0) << ";att=" << (cfg.use_attention ? 1 : 0);
  const std::string text = s.str();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace saane
