#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "stemnet/tensor.hpp"
#include "stemnet/unet.hpp"
#include "stemnet/volume.hpp"

namespace stemnet {

// DSC = 2|X n Y| / (|X| + |Y|), counted in integer arithmetic with a single
// final division; DSC of two empty masks is defined as 1.
double dsc(const std::vector<bool>& x, const std::vector<bool>& y);

struct DscResult {
  std::array<double, kNumClasses> dsc{};
  std::array<bool, kNumClasses> empty_pair{};  // both masks empty, value 1 by convention
};

DscResult per_class_dsc(const LabelVolume& pred, const LabelVolume& ref);

struct CohortStats {
  std::array<double, kNumClasses> mean{};
  std::array<double, kNumClasses> stddev{};  // sample (n-1); 0 for a single subject
  int subjects = 0;
};

CohortStats cohort_summary(const std::vector<std::array<double, kNumClasses>>& per_subject);

// mm^3 per class: voxel count times the spacing product.
std::array<double, kNumClasses> structure_volumes(const LabelVolume& labels);

// Midbrain area / pons area (mm^2) on the sagittal slice through the rounded
// centroid of all nonzero labels. Pons absent on that slice is an error;
// midbrain absent gives 0.
double mp_area_ratio(const LabelVolume& labels);

// Median wall-clock seconds over 3 runs of forward + argmax (no I/O).
double time_inference(UNetParams<float>& params, const Tensor<float>& input);

struct SubjectMetrics {
  std::string id;
  bool has_ref = false;
  DscResult dsc;
  std::array<double, kNumClasses> volumes_mm3{};
  std::optional<double> mp_ratio;  // absent when undefined on the slice
  double inference_seconds = 0.0;
};

struct MetricsReport {
  std::vector<SubjectMetrics> subjects;
  CohortStats cohort;  // over subjects with reference labels

  void finalize();  // recomputes the cohort block
  std::string to_json() const;
  std::string to_table() const;
};

}  // namespace stemnet
