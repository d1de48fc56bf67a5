#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "saane/attention.hpp"
#include "saane/config.hpp"
#include "saane/fusion.hpp"
#include "saane/tape.hpp"
#include "saane/tensor.hpp"

namespace saane {

// The full embedding pipeline: project-and-sum fusion, channel/spatial
// gating, a second fusion over the gated maps, pyramid pooling, and
// L2-normalize-then-scale. Configuration flags drop the semantic stream
// or the whole gating stage for ablation runs; pooling and normalization
// contribute no trainable state.
template <typename T>
class EmbeddingModel {
 public:
  struct Forward {
    Var embedding;
    std::optional<typename AttentionModule<T>::Attended> gates;
  };

  EmbeddingModel(const RunConfig& cfg, Rng& rng)
      : cfg_(cfg),
        fusion_first_("fusion1", cfg.appearance_dim,
                      cfg.use_semantic ? std::optional<int>(cfg.semantic_dim) : std::nullopt,
                      cfg.common_dim, rng) {
    if (cfg.use_attention) {
      attention_.emplace("attention", cfg.common_dim, cfg.reduction_ratio,
                         cfg.share_channel_attention, cfg.use_semantic, rng);
      fusion_second_.emplace("fusion2", cfg.common_dim,
                             cfg.use_semantic ? std::optional<int>(cfg.common_dim) : std::nullopt,
                             cfg.common_dim, rng);
    }
  }

  const RunConfig& config() const { return cfg_; }
  int embedding_dim() const { return embedding_length(cfg_); }
  AttentionModule<T>* attention() { return attention_ ? &*attention_ : nullptr; }

  Forward embed_on_tape(Tape<T>& tape, Var appearance, std::optional<Var> semantic) {
    if (!cfg_.use_semantic) semantic.reset();
    Forward out;
    auto first = fusion_first_.fuse(tape, appearance, semantic);
    Var pooled_input = first.combined;
    if (attention_) {
      auto gated = attention_->attend(
          tape, first.appearance,
          cfg_.use_semantic ? std::optional<Var>(first.semantic) : std::nullopt);
      auto second = fusion_second_->fuse(
          tape, gated.refined_appearance,
          cfg_.use_semantic ? std::optional<Var>(*gated.refined_semantic) : std::nullopt);
      pooled_input = second.combined;
      out.gates = std::move(gated);
    }
    Var descriptor = tape.spp(pooled_input, cfg_.spp_levels, cfg_.spp_mode);
    out.embedding = tape.normalize_scale(descriptor, static_cast<T>(cfg_.alpha));
    return out;
  }

  Forward embed_on_tape(Tape<T>& tape, const Tensor<T>& appearance, const Tensor<T>& semantic) {
    Var a = tape.leaf(appearance);
    std::optional<Var> s;
    if (cfg_.use_semantic) s = tape.leaf(semantic);
    return embed_on_tape(tape, a, s);
  }

  // One-off embedding of a single image pair.
  Tensor<T> embed(const Tensor<T>& appearance, const Tensor<T>& semantic) {
    Tape<T> tape;
    return tape.value(embed_on_tape(tape, appearance, semantic).embedding);
  }

  // Trainable parameters, in a fixed order used for initialization,
  // checkpoints, and optimizer state.
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out = fusion_first_.parameters();
    if (attention_) {
      auto att = attention_->parameters();
      out.insert(out.end(), att.begin(), att.end());
      auto second = fusion_second_->parameters();
      out.insert(out.end(), second.begin(), second.end());
    }
    return out;
  }

 private:
  RunConfig cfg_;
  FusionModule<T> fusion_first_;
  std::optional<AttentionModule<T>> attention_;
  std::optional<FusionModule<T>> fusion_second_;
};

}  // namespace saane
