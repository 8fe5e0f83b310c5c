#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stemnet/errors.hpp"

namespace stemnet {

// Fixed label code table.
enum LabelCode : std::uint8_t {
  kBackground = 0,
  kPons = 1,
  kMidbrain = 2,
  kMedulla = 3,
  kScp = 4,
};
inline constexpr int kNumClasses = 5;
inline constexpr const char* kClassNames[kNumClasses] = {"background", "pons", "midbrain",
                                                         "medulla", "scp"};

// Dense scalar grid with voxel spacing; axis order is [D,H,W] where D is the
// superior-inferior axis, H anterior-posterior and W left-right (sagittal).
struct Volume {
  std::array<std::int64_t, 3> extents{};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<float> data;
  // Row-major voxel-to-world matrix, stored as read, never resampled.
  std::optional<std::array<double, 16>> affine;

  std::int64_t numel() const { return extents[0] * extents[1] * extents[2]; }
  float& at(std::int64_t d, std::int64_t h, std::int64_t w) {
    return data[static_cast<std::size_t>((d * extents[1] + h) * extents[2] + w)];
  }
  float at(std::int64_t d, std::int64_t h, std::int64_t w) const {
    return data[static_cast<std::size_t>((d * extents[1] + h) * extents[2] + w)];
  }
  void validate() const;
};

// Dense categorical grid over the five classes.
struct LabelVolume {
  std::array<std::int64_t, 3> extents{};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> labels;
  std::optional<std::array<double, 16>> affine;

  std::int64_t numel() const { return extents[0] * extents[1] * extents[2]; }
  std::uint8_t& at(std::int64_t d, std::int64_t h, std::int64_t w) {
    return labels[static_cast<std::size_t>((d * extents[1] + h) * extents[2] + w)];
  }
  std::uint8_t at(std::int64_t d, std::int64_t h, std::int64_t w) const {
    return labels[static_cast<std::size_t>((d * extents[1] + h) * extents[2] + w)];
  }
  void validate() const;
};

inline void check_extents_spacing(const std::array<std::int64_t, 3>& extents,
                                  const std::array<double, 3>& spacing, std::size_t size,
                                  const char* what) {
  for (int a = 0; a < 3; ++a) {
    if (extents[a] <= 0) throw ShapeError(std::string(what) + ": non-positive extent");
    if (!(spacing[a] > 0.0)) throw ValueError(std::string(what) + ": non-positive voxel spacing");
  }
  const auto expect =
      static_cast<std::size_t>(extents[0]) * static_cast<std::size_t>(extents[1]) *
      static_cast<std::size_t>(extents[2]);
  if (size != expect)
    throw ShapeError(std::string(what) + ": data length " + std::to_string(size) +
                     " != extent product " + std::to_string(expect));
}

inline void Volume::validate() const {
  check_extents_spacing(extents, spacing, data.size(), "volume");
}

inline void LabelVolume::validate() const {
  check_extents_spacing(extents, spacing, labels.size(), "label volume");
  for (std::uint8_t v : labels)
    if (v >= kNumClasses)
      throw ValueError("label volume: code " + std::to_string(int(v)) + " outside 0.." +
                       std::to_string(kNumClasses - 1));
}

}  // namespace stemnet
