#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "saane/tape.hpp"
#include "saane/tensor.hpp"

namespace saane {

enum class Modality { Appearance, Semantic };

// Channel and spatial gating over the fused representation. The channel
// gate is a sigmoid over a shared two-layer MLP applied to the average- and
// max-pooled map; each modality then gets its own spatial gate from a 7x7
// convolution over the channel-pooled refined map, multiplied back by the
// channel gate. With sharing disabled, each modality runs a fully separate
// gate stack over its own aligned map.
template <typename T>
class AttentionModule {
 public:
  struct Mlp {
    Parameter<T> w1, b1, w2, b2;
    std::vector<Parameter<T>*> parameters() { return {&w1, &b1, &w2, &b2}; }
  };

  struct SpatialGate {
    Var factor;  // sigmoid(conv) factor, 1 x H x W
    Var volume;  // channel gate times factor, C x H x W
  };

  struct Attended {
    Var refined_appearance;
    std::optional<Var> refined_semantic;
    // Exported gates, per modality. With sharing enabled the two channel
    // gates are the same node.
    Var channel_gate_appearance;
    std::optional<Var> channel_gate_semantic;
    Var spatial_factor_appearance;
    std::optional<Var> spatial_factor_semantic;
    Var spatial_gate_appearance;
    std::optional<Var> spatial_gate_semantic;
  };

  AttentionModule(const std::string& name, int common_dim, int reduction_ratio, bool shared,
                  bool has_semantic, Rng& rng)
      : common_dim_(common_dim), shared_(shared || !has_semantic), has_semantic_(has_semantic) {
    if (reduction_ratio <= 0 || common_dim % reduction_ratio != 0) {
      throw ShapeError("channel gate needs common_dim divisible by reduction_ratio, got " +
                       std::to_string(common_dim) + " / " + std::to_string(reduction_ratio));
    }
    hidden_dim_ = common_dim / reduction_ratio;
    if (shared_) {
      gate_mlp_ = make_mlp(name + ".mlp", rng);
    } else {
      gate_mlp_ = make_mlp(name + ".mlp_a", rng);
      gate_mlp_semantic_ = make_mlp(name + ".mlp_s", rng);
    }
    conv_appearance_ = make_conv(name + ".conv_a", rng);
    if (has_semantic_) conv_semantic_ = make_conv(name + ".conv_s", rng);
  }

  // Test hook: replaces every gate with ones so refinement is the identity.
  void force_identity(bool on) { identity_ = on; }

  // sigmoid(mlp(avg-pooled) + mlp(max-pooled)), one gate value per channel.
  // Uses the shared MLP (the appearance MLP when sharing is disabled).
  Var channel_attention(Tape<T>& tape, Var fused) {
    return channel_gate(tape, fused, gate_mlp_);
  }

  // Per-channel scaling of the fused map by the channel gate.
  static Var refine_channels(Tape<T>& tape, Var fused, Var gate) {
    return tape.mul_broadcast(fused, gate);
  }

  // Spatial gate for one modality from the channel-refined map: a 7x7
  // convolution over the concatenated [avg ; max] channel-pooled map,
  // sigmoid, then broadcast-multiplied by the channel gate into a full
  // C x H x W volume.
  SpatialGate spatial_attention(Tape<T>& tape, Var refined, Var gate, Modality which) {
    Parameter<T>& conv = which == Modality::Appearance ? conv_appearance_ : *conv_semantic_;
    SpatialGate out;
    out.factor = spatial_factor(tape, refined, conv);
    out.volume = tape.mul_broadcast(gate, out.factor);
    return out;
  }

  Attended attend(Tape<T>& tape, Var fused_appearance, std::optional<Var> fused_semantic) {
    if (fused_semantic.has_value() != has_semantic_) {
      throw ShapeError("attention module stream mismatch");
    }
    Attended out;
    if (shared_) {
      Var combined = fused_semantic ? tape.add(fused_appearance, *fused_semantic)
                                    : fused_appearance;
      Var gate = channel_gate(tape, combined, gate_mlp_);
      Var refined = refine_channels(tape, combined, gate);
      out.channel_gate_appearance = gate;
      SpatialGate sa = spatial_attention(tape, refined, gate, Modality::Appearance);
      out.spatial_factor_appearance = sa.factor;
      out.spatial_gate_appearance = sa.volume;
      out.refined_appearance = tape.mul_broadcast(fused_appearance, sa.volume);
      if (fused_semantic) {
        out.channel_gate_semantic = gate;
        SpatialGate ss = spatial_attention(tape, refined, gate, Modality::Semantic);
        out.spatial_factor_semantic = ss.factor;
        out.spatial_gate_semantic = ss.volume;
        out.refined_semantic = tape.mul_broadcast(*fused_semantic, ss.volume);
      }
    } else {
      Var gate_a = channel_gate(tape, fused_appearance, gate_mlp_);
      Var refined_a = refine_channels(tape, fused_appearance, gate_a);
      out.channel_gate_appearance = gate_a;
      SpatialGate sa = spatial_attention(tape, refined_a, gate_a, Modality::Appearance);
      out.spatial_factor_appearance = sa.factor;
      out.spatial_gate_appearance = sa.volume;
      out.refined_appearance = tape.mul_broadcast(fused_appearance, sa.volume);

      Var gate_s = channel_gate(tape, *fused_semantic, *gate_mlp_semantic_);
      Var refined_s = refine_channels(tape, *fused_semantic, gate_s);
      out.channel_gate_semantic = gate_s;
      SpatialGate ss = spatial_attention(tape, refined_s, gate_s, Modality::Semantic);
      out.spatial_factor_semantic = ss.factor;
      out.spatial_gate_semantic = ss.volume;
      out.refined_semantic = tape.mul_broadcast(*fused_semantic, ss.volume);
    }
    return out;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out = gate_mlp_.parameters();
    if (gate_mlp_semantic_) {
      auto extra = gate_mlp_semantic_->parameters();
      out.insert(out.end(), extra.begin(), extra.end());
    }
    out.push_back(&conv_appearance_);
    if (conv_semantic_) out.push_back(&*conv_semantic_);
    return out;
  }

 private:
  int common_dim_;
  int hidden_dim_ = 0;
  bool shared_;
  bool has_semantic_;
  bool identity_ = false;
  Mlp gate_mlp_;
  std::optional<Mlp> gate_mlp_semantic_;
  Parameter<T> conv_appearance_;
  std::optional<Parameter<T>> conv_semantic_;

  Mlp make_mlp(const std::string& name, Rng& rng) {
    Mlp mlp;
    Tensor<T> w1(Shape{hidden_dim_, common_dim_});
    fill_gaussian(w1, rng, std::sqrt(2.0 / common_dim_));
    Tensor<T> w2(Shape{common_dim_, hidden_dim_});
    fill_gaussian(w2, rng, std::sqrt(2.0 / hidden_dim_));
    mlp.w1 = Parameter<T>(name + ".w1", std::move(w1));
    mlp.b1 = Parameter<T>(name + ".b1", Tensor<T>(Shape{hidden_dim_}));
    mlp.w2 = Parameter<T>(name + ".w2", std::move(w2));
    mlp.b2 = Parameter<T>(name + ".b2", Tensor<T>(Shape{common_dim_}));
    return mlp;
  }

  // Bias-free 7x7 filter over the 2-channel [avg ; max] pooled map.
  Parameter<T> make_conv(const std::string& name, Rng& rng) {
    Tensor<T> w(Shape{1, 2, 7, 7});
    fill_gaussian(w, rng, std::sqrt(2.0 / (2 * 7 * 7)));
    return Parameter<T>(name, std::move(w));
  }

  Var channel_gate(Tape<T>& tape, Var fused, Mlp& mlp) {
    if (identity_) return tape.leaf(Tensor<T>::ones(Shape{common_dim_}));
    Var avg = mlp2(tape, tape.pool_spatial(fused, PoolMode::Avg), tape.param(mlp.w1),
                   tape.param(mlp.b1), tape.param(mlp.w2), tape.param(mlp.b2));
    Var max = mlp2(tape, tape.pool_spatial(fused, PoolMode::Max), tape.param(mlp.w1),
                   tape.param(mlp.b1), tape.param(mlp.w2), tape.param(mlp.b2));
    return tape.sigmoid(tape.add(avg, max));
  }

  Var spatial_factor(Tape<T>& tape, Var refined, Parameter<T>& conv) {
    if (identity_) {
      const Tensor<T>& r = tape.value(refined);
      return tape.leaf(Tensor<T>::ones(Shape{1, r.extent(1), r.extent(2)}));
    }
    Var pooled = tape.concat_channels(tape.pool_channel(refined, PoolMode::Avg),
                                      tape.pool_channel(refined, PoolMode::Max));
    return tape.sigmoid(tape.conv2d(pooled, tape.param(conv), 3));
  }
};

}  // namespace saane
