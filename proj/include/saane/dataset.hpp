#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "saane/tensor.hpp"

namespace saane {

// One frame of pre-extracted feature maps with its place identity and
// viewing condition. The two maps must share spatial extents.
struct FeatureRecord {
  int frame_id = 0;
  int class_id = 0;
  int condition_id = 0;
  Tensor<float> appearance;
  Tensor<float> semantic;
};

using Dataset = std::vector<FeatureRecord>;

inline void validate_record(const FeatureRecord& r) {
  if (r.appearance.rank() != 3 || r.semantic.rank() != 3) {
    throw DataError("feature record " + std::to_string(r.frame_id) + " maps must be C x H x W");
  }
  if (r.appearance.extent(1) != r.semantic.extent(1) ||
      r.appearance.extent(2) != r.semantic.extent(2)) {
    throw DataError("feature record " + std::to_string(r.frame_id) +
                    " maps disagree on spatial extent: " + shape_str(r.appearance.shape) +
                    " vs " + shape_str(r.semantic.shape));
  }
}

// Record indices grouped by class, in ascending class order.
class ClassIndex {
 public:
  explicit ClassIndex(const Dataset& data) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      groups_[data[i].class_id].push_back(i);
    }
  }

  std::size_t class_count() const { return groups_.size(); }

  std::vector<int> class_ids() const {
    std::vector<int> out;
    out.reserve(groups_.size());
    for (const auto& [id, members] : groups_) out.push_back(id);
    return out;
  }

  const std::vector<std::size_t>& members(int class_id) const { return groups_.at(class_id); }

  void require_members(int min_members) const {
    for (const auto& [id, members] : groups_) {
      if (static_cast<int>(members.size()) < min_members) {
        throw DataError("class " + std::to_string(id) + " has " +
                        std::to_string(members.size()) + " members, need at least " +
                        std::to_string(min_members));
      }
    }
  }

 private:
  std::map<int, std::vector<std::size_t>> groups_;
};

}  // namespace saane
