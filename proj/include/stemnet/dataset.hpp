#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stemnet/tensor.hpp"
#include "stemnet/volume.hpp"

namespace stemnet {

struct SubjectEntry {
  std::string id;
  std::string image;                 // path, relative to the manifest directory
  std::optional<std::string> label;  // required for train/val
  std::optional<std::array<std::int64_t, 3>> crop_center;  // voxel (d,h,w)
  std::string split;                 // train | val | test
};

struct DatasetManifest {
  std::vector<SubjectEntry> subjects;
  std::filesystem::path root;  // directory the relative paths resolve against

  void validate() const;
  std::vector<const SubjectEntry*> split(const std::string& name) const;
  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
};

// JSON document {"v":1, "subjects":[...]}.
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Min-max to [0, 1]; a constant volume maps to all zeros.
Volume normalize_intensity(const Volume& volume);

// Inverse mapping of a crop so predictions can be re-embedded.
struct CropInfo {
  std::array<std::int64_t, 3> origin{};          // source index of crop voxel (0,0,0)
  std::array<std::int64_t, 3> source_extents{};
  std::int64_t extent = 0;
};

// Cube of `extent` centred on `center`; out-of-bounds regions are zero
// (background) filled.
std::pair<Volume, CropInfo> crop_roi(const Volume& volume,
                                     const std::array<std::int64_t, 3>& center,
                                     std::int64_t extent);
std::pair<LabelVolume, CropInfo> crop_roi(const LabelVolume& labels,
                                          const std::array<std::int64_t, 3>& center,
                                          std::int64_t extent);

// Predictions back into source coordinates, background outside the crop.
LabelVolume re_embed(const LabelVolume& pred, const CropInfo& info,
                     const std::array<double, 3>& spacing);

// Rounded centroid of the nonzero labels; nullopt when all background.
std::optional<std::array<std::int64_t, 3>> label_centroid(const LabelVolume& labels);

// [1, num_classes, D, H, W] with exactly one 1 per voxel.
Tensor<float> one_hot_encode(const LabelVolume& labels, int num_classes = kNumClasses);

// Per-voxel argmax over channels, ties to the lowest class code.
LabelVolume argmax_decode(const Tensor<float>& probs, const std::array<double, 3>& spacing);

Tensor<float> tensor_from_volume(const Volume& volume);

// Per-class voxel fractions over a set of label volumes; sums to 1.
std::vector<double> class_frequencies(const std::vector<const LabelVolume*>& labels,
                                      int num_classes = kNumClasses);

}  // namespace stemnet
