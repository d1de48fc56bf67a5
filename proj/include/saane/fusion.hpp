#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "saane/tape.hpp"
#include "saane/tensor.hpp"

namespace saane {

// Projects the appearance and semantic streams into a common C-dimensional
// space with bias-free 1x1 convolutions and sums them. The semantic
// projection is absent in appearance-only configurations.
template <typename T>
class FusionModule {
 public:
  struct Fused {
    Var combined;    // sum of the aligned streams
    Var appearance;  // aligned appearance map
    Var semantic;    // aligned semantic map (valid only when both streams exist)
  };

  FusionModule(const std::string& name, int appearance_channels,
               std::optional<int> semantic_channels, int common_dim, Rng& rng)
      : common_dim_(common_dim) {
    Tensor<T> wa(Shape{common_dim, appearance_channels, 1, 1});
    fill_gaussian(wa, rng, std::sqrt(2.0 / appearance_channels));
    project_appearance_ = Parameter<T>(name + ".proj_a", std::move(wa));
    if (semantic_channels) {
      Tensor<T> ws(Shape{common_dim, *semantic_channels, 1, 1});
      fill_gaussian(ws, rng, std::sqrt(2.0 / *semantic_channels));
      project_semantic_ = Parameter<T>(name + ".proj_s", std::move(ws));
    }
  }

  int common_dim() const { return common_dim_; }
  bool has_semantic() const { return project_semantic_.has_value(); }

  Fused fuse(Tape<T>& tape, Var appearance, std::optional<Var> semantic) {
    if (semantic.has_value() != has_semantic()) {
      throw ShapeError("fusion module stream mismatch: module " +
                       std::string(has_semantic() ? "has" : "lacks") +
                       " a semantic projection");
    }
    Fused out;
    out.appearance = tape.conv2d(appearance, tape.param(project_appearance_), 0);
    if (semantic) {
      const Tensor<T>& a = tape.value(appearance);
      const Tensor<T>& s = tape.value(*semantic);
      if (a.extent(1) != s.extent(1) || a.extent(2) != s.extent(2)) {
        throw ShapeError("fusion requires equal spatial extents, got " + shape_str(a.shape) +
                         " vs " + shape_str(s.shape));
      }
      out.semantic = tape.conv2d(*semantic, tape.param(*project_semantic_), 0);
      out.combined = tape.add(out.appearance, out.semantic);
    } else {
      out.combined = out.appearance;
    }
    return out;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out{&project_appearance_};
    if (project_semantic_) out.push_back(&*project_semantic_);
    return out;
  }

 private:
  int common_dim_;
  Parameter<T> project_appearance_;
  std::optional<Parameter<T>> project_semantic_;
};

}  // namespace saane
