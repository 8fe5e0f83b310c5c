#include "stemnet/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "stemnet/dataset.hpp"

namespace stemnet {

double dsc(const std::vector<bool>& x, const std::vector<bool>& y) {
  if (x.size() != y.size()) throw ShapeError("dsc: mask extents differ");
  std::int64_t nx = 0, ny = 0, ni = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    nx += x[i];
    ny += y[i];
    ni += x[i] && y[i];
  }
  if (nx + ny == 0) return 1.0;  // agreement on absence
  return 2.0 * static_cast<double>(ni) / static_cast<double>(nx + ny);
}

DscResult per_class_dsc(const LabelVolume& pred, const LabelVolume& ref) {
  if (pred.extents != ref.extents)
    throw ShapeError("per_class_dsc: prediction and reference extents differ");
  std::array<std::int64_t, kNumClasses> np{}, nr{}, ni{};
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const std::uint8_t p = pred.labels[i], r = ref.labels[i];
    ++np[p];
    ++nr[r];
    if (p == r) ++ni[p];
  }
  DscResult out;
  for (int c = 0; c < kNumClasses; ++c) {
    if (np[c] + nr[c] == 0) {
      out.dsc[c] = 1.0;
      out.empty_pair[c] = true;
    } else {
      out.dsc[c] = 2.0 * static_cast<double>(ni[c]) / static_cast<double>(np[c] + nr[c]);
    }
  }
  return out;
}

CohortStats cohort_summary(const std::vector<std::array<double, kNumClasses>>& per_subject) {
  CohortStats s;
  s.subjects = static_cast<int>(per_subject.size());
  if (per_subject.empty()) return s;
  for (const auto& row : per_subject)
    for (int c = 0; c < kNumClasses; ++c) s.mean[c] += row[c];
  for (int c = 0; c < kNumClasses; ++c) s.mean[c] /= static_cast<double>(s.subjects);
  if (s.subjects > 1) {
    for (const auto& row : per_subject)
      for (int c = 0; c < kNumClasses; ++c) {
        const double d = row[c] - s.mean[c];
        s.stddev[c] += d * d;
      }
    for (int c = 0; c < kNumClasses; ++c)
      s.stddev[c] = std::sqrt(s.stddev[c] / static_cast<double>(s.subjects - 1));
  }
  return s;
}

std::array<double, kNumClasses> structure_volumes(const LabelVolume& labels) {
  labels.validate();
  const double voxel_mm3 = labels.spacing[0] * labels.spacing[1] * labels.spacing[2];
  std::array<std::int64_t, kNumClasses> counts{};
  for (std::uint8_t code : labels.labels) ++counts[code];
  std::array<double, kNumClasses> out{};
  for (int c = 0; c < kNumClasses; ++c) out[c] = static_cast<double>(counts[c]) * voxel_mm3;
  return out;
}

double mp_area_ratio(const LabelVolume& labels) {
  labels.validate();
  const auto centroid = label_centroid(labels);
  if (!centroid) throw ValueError("mp_area_ratio: volume has no brainstem labels");
  const std::int64_t slice_w = (*centroid)[2];

  const auto [D, H, W] = labels.extents;
  std::int64_t midbrain = 0, pons = 0;
  for (std::int64_t d = 0; d < D; ++d)
    for (std::int64_t h = 0; h < H; ++h) {
      const std::uint8_t code = labels.at(d, h, slice_w);
      if (code == kMidbrain) ++midbrain;
      if (code == kPons) ++pons;
    }
  if (pons == 0)
    throw ValueError("mp_area_ratio: pons area is zero on the midsagittal slice, ratio undefined");
  // Areas share the in-plane voxel area factor, so counts divide directly.
  return static_cast<double>(midbrain) / static_cast<double>(pons);
}

double time_inference(UNetParams<float>& params, const Tensor<float>& input) {
  std::array<double, 3> runs{};
  for (auto& r : runs) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor<float> logits = unet_forward(params, input, false);
    LabelVolume mask = argmax_decode(softmax_channels(logits), {1.0, 1.0, 1.0});
    const auto t1 = std::chrono::steady_clock::now();
    r = std::chrono::duration<double>(t1 - t0).count();
    (void)mask;
  }
  std::sort(runs.begin(), runs.end());
  return runs[1];
}

void MetricsReport::finalize() {
  std::vector<std::array<double, kNumClasses>> rows;
  for (const auto& s : subjects)
    if (s.has_ref) rows.push_back(s.dsc.dsc);
  cohort = cohort_summary(rows);
}

std::string MetricsReport::to_json() const {
  nlohmann::json subj = nlohmann::json::array();
  for (const auto& s : subjects) {
    nlohmann::json j = {{"id", s.id},
                        {"volumes_mm3", s.volumes_mm3},
                        {"inference_seconds", s.inference_seconds}};
    if (s.has_ref) {
      j["dsc"] = s.dsc.dsc;
      j["dsc_empty_pair"] = s.dsc.empty_pair;
    }
    if (s.mp_ratio) j["mp_area_ratio"] = *s.mp_ratio;
    subj.push_back(std::move(j));
  }
  nlohmann::json doc = {{"v", 1}, {"subjects", subj}};
  if (cohort.subjects > 0) {
    doc["cohort"] = {{"subjects", cohort.subjects},
                     {"mean_dsc", cohort.mean},
                     {"std_dsc", cohort.stddev}};
  }
  return doc.dump(2);
}

std::string MetricsReport::to_table() const {
  std::ostringstream os;
  char line[256];
  os << "subject      ";
  for (int c = 0; c < kNumClasses; ++c) {
    std::snprintf(line, sizeof(line), " dsc_%-9s", kClassNames[c]);
    os << line;
  }
  os << "  m/p_ratio  infer_s\n";
  for (const auto& s : subjects) {
    std::snprintf(line, sizeof(line), "%-12s ", s.id.c_str());
    os << line;
    for (int c = 0; c < kNumClasses; ++c) {
      if (s.has_ref)
        std::snprintf(line, sizeof(line), " %8.4f%s    ", s.dsc.dsc[c],
                      s.dsc.empty_pair[c] ? "*" : " ");
      else
        std::snprintf(line, sizeof(line), " %8s     ", "-");
      os << line;
    }
    if (s.mp_ratio)
      std::snprintf(line, sizeof(line), " %9.4f", *s.mp_ratio);
    else
      std::snprintf(line, sizeof(line), " %9s", "-");
    os << line;
    std::snprintf(line, sizeof(line), "  %7.3f\n", s.inference_seconds);
    os << line;
  }
  if (cohort.subjects > 0) {
    os << "cohort (n=" << cohort.subjects << ", mean +/- sample std)\n";
    for (int c = 0; c < kNumClasses; ++c) {
      std::snprintf(line, sizeof(line), "  %-10s %.4f +/- %.4f\n", kClassNames[c], cohort.mean[c],
                    cohort.stddev[c]);
      os << line;
    }
  }
  bool any_empty = false;
  for (const auto& s : subjects)
    for (bool e : s.dsc.empty_pair) any_empty |= (e && s.has_ref);
  if (any_empty) os << "* class absent from both masks, DSC 1 by convention\n";
  return os.str();
}

}  // namespace stemnet
