#include "stemnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"

namespace stemnet {

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  for (const auto& s : subjects) {
    if (s.id.empty()) throw ValueError("manifest: empty subject id");
    if (!ids.insert(s.id).second) throw ValueError("manifest: duplicate subject id '" + s.id + "'");
    if (s.split != "train" && s.split != "val" && s.split != "test")
      throw ValueError("manifest: subject '" + s.id + "' has unknown split '" + s.split + "'");
    if ((s.split == "train" || s.split == "val") && !s.label)
      throw ValueError("manifest: " + s.split + " subject '" + s.id + "' has no label path");
    if (s.image.empty()) throw ValueError("manifest: subject '" + s.id + "' has no image path");
  }
}

std::vector<const SubjectEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const SubjectEntry*> out;
  for (const auto& s : subjects)
    if (s.split == name) out.push_back(&s);
  return out;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  manifest.validate();
  nlohmann::json subjects = nlohmann::json::array();
  for (const auto& s : manifest.subjects) {
    nlohmann::json j = {{"id", s.id}, {"image", s.image}, {"split", s.split}};
    if (s.label) j["label"] = *s.label;
    if (s.crop_center)
      j["crop_center"] = {(*s.crop_center)[0], (*s.crop_center)[1], (*s.crop_center)[2]};
    subjects.push_back(std::move(j));
  }
  const nlohmann::json doc = {{"v", 1}, {"subjects", subjects}};
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write manifest: " + path.string());
  f << doc.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest: " + path.string());
  nlohmann::json doc;
  try {
    f >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": invalid json: " + e.what());
  }
  try {
    if (doc.at("v").get<int>() != 1)
      throw VersionError("manifest " + path.string() + ": unsupported schema version");
    DatasetManifest m;
    m.root = path.parent_path();
    for (const auto& j : doc.at("subjects")) {
      SubjectEntry s;
      s.id = j.at("id").get<std::string>();
      s.image = j.at("image").get<std::string>();
      s.split = j.at("split").get<std::string>();
      if (j.contains("label")) s.label = j.at("label").get<std::string>();
      if (j.contains("crop_center")) {
        const auto& c = j.at("crop_center");
        s.crop_center = {c.at(0).get<std::int64_t>(), c.at(1).get<std::int64_t>(),
                         c.at(2).get<std::int64_t>()};
      }
      m.subjects.push_back(std::move(s));
    }
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + ": missing field: " + e.what());
  }
}

Volume normalize_intensity(const Volume& volume) {
  volume.validate();
  float lo = volume.data.empty() ? 0.0f : volume.data[0];
  float hi = lo;
  for (float v : volume.data) {
    if (!std::isfinite(v)) throw ValueError("normalize_intensity: non-finite input value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  Volume out = volume;
  if (hi == lo) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    return out;
  }
  const float inv = 1.0f / (hi - lo);
  for (float& v : out.data) v = (v - lo) * inv;
  return out;
}

namespace {

CropInfo make_crop_info(const std::array<std::int64_t, 3>& src_extents,
                        const std::array<std::int64_t, 3>& center, std::int64_t extent) {
  if (extent < 1) throw ConfigError("crop_roi: extent must be >= 1");
  CropInfo info;
  info.extent = extent;
  info.source_extents = src_extents;
  for (int a = 0; a < 3; ++a) info.origin[a] = center[a] - extent / 2;
  return info;
}

template <typename Elem>
void copy_crop(const std::vector<Elem>& src, const std::array<std::int64_t, 3>& src_ext,
               std::vector<Elem>& dst, const CropInfo& info) {
  const std::int64_t extent = info.extent;
  dst.assign(static_cast<std::size_t>(extent * extent * extent), Elem{});
  const auto [D, H, W] = src_ext;
  for (std::int64_t d = 0; d < extent; ++d) {
    const std::int64_t sd = info.origin[0] + d;
    if (sd < 0 || sd >= D) continue;
    for (std::int64_t h = 0; h < extent; ++h) {
      const std::int64_t sh = info.origin[1] + h;
      if (sh < 0 || sh >= H) continue;
      const std::int64_t w0 = std::max<std::int64_t>(0, -info.origin[2]);
      const std::int64_t w1 = std::min<std::int64_t>(extent, W - info.origin[2]);
      for (std::int64_t w = w0; w < w1; ++w)
        dst[static_cast<std::size_t>((d * extent + h) * extent + w)] =
            src[static_cast<std::size_t>((sd * H + sh) * W + info.origin[2] + w)];
    }
  }
}

}  // namespace

std::pair<Volume, CropInfo> crop_roi(const Volume& volume,
                                     const std::array<std::int64_t, 3>& center,
                                     std::int64_t extent) {
  volume.validate();
  const CropInfo info = make_crop_info(volume.extents, center, extent);
  Volume out;
  out.extents = {extent, extent, extent};
  out.spacing = volume.spacing;
  copy_crop(volume.data, volume.extents, out.data, info);
  return {std::move(out), info};
}

std::pair<LabelVolume, CropInfo> crop_roi(const LabelVolume& labels,
                                          const std::array<std::int64_t, 3>& center,
                                          std::int64_t extent) {
  labels.validate();
  const CropInfo info = make_crop_info(labels.extents, center, extent);
  LabelVolume out;
  out.extents = {extent, extent, extent};
  out.spacing = labels.spacing;
  copy_crop(labels.labels, labels.extents, out.labels, info);
  return {std::move(out), info};
}

LabelVolume re_embed(const LabelVolume& pred, const CropInfo& info,
                     const std::array<double, 3>& spacing) {
  pred.validate();
  if (pred.extents[0] != info.extent || pred.extents[1] != info.extent ||
      pred.extents[2] != info.extent)
    throw ShapeError("re_embed: prediction extents do not match the crop");
  LabelVolume out;
  out.extents = info.source_extents;
  out.spacing = spacing;
  out.labels.assign(static_cast<std::size_t>(out.numel()), kBackground);
  const auto [D, H, W] = info.source_extents;
  for (std::int64_t d = 0; d < info.extent; ++d) {
    const std::int64_t sd = info.origin[0] + d;
    if (sd < 0 || sd >= D) continue;
    for (std::int64_t h = 0; h < info.extent; ++h) {
      const std::int64_t sh = info.origin[1] + h;
      if (sh < 0 || sh >= H) continue;
      for (std::int64_t w = 0; w < info.extent; ++w) {
        const std::int64_t sw = info.origin[2] + w;
        if (sw < 0 || sw >= W) continue;
        out.labels[static_cast<std::size_t>((sd * H + sh) * W + sw)] = pred.at(d, h, w);
      }
    }
  }
  return out;
}

std::optional<std::array<std::int64_t, 3>> label_centroid(const LabelVolume& labels) {
  double sum[3] = {0, 0, 0};
  std::int64_t count = 0;
  const auto [D, H, W] = labels.extents;
  std::int64_t i = 0;
  for (std::int64_t d = 0; d < D; ++d)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w, ++i)
        if (labels.labels[static_cast<std::size_t>(i)] != kBackground) {
          sum[0] += static_cast<double>(d);
          sum[1] += static_cast<double>(h);
          sum[2] += static_cast<double>(w);
          ++count;
        }
  if (count == 0) return std::nullopt;
  return std::array<std::int64_t, 3>{
      static_cast<std::int64_t>(std::llround(sum[0] / static_cast<double>(count))),
      static_cast<std::int64_t>(std::llround(sum[1] / static_cast<double>(count))),
      static_cast<std::int64_t>(std::llround(sum[2] / static_cast<double>(count)))};
}

Tensor<float> one_hot_encode(const LabelVolume& labels, int num_classes) {
  labels.validate();
  if (num_classes < 2) throw ConfigError("one_hot_encode: num_classes must be >= 2");
  const auto [D, H, W] = labels.extents;
  Tensor<float> out({1, num_classes, D, H, W});
  const std::int64_t spatial = D * H * W;
  float* p = out.data();
  for (std::int64_t v = 0; v < spatial; ++v) {
    const std::uint8_t code = labels.labels[static_cast<std::size_t>(v)];
    if (static_cast<int>(code) >= num_classes)
      throw ValueError("one_hot_encode: label code " + std::to_string(int(code)) +
                       " >= num_classes " + std::to_string(num_classes));
    p[code * spatial + v] = 1.0f;
  }
  return out;
}

LabelVolume argmax_decode(const Tensor<float>& probs, const std::array<double, 3>& spacing) {
  require_rank(probs, 5, "argmax_decode");
  if (probs.dim(0) != 1) throw ShapeError("argmax_decode: batch extent must be 1");
  const std::int64_t C = probs.dim(1);
  const std::int64_t D = probs.dim(2), H = probs.dim(3), W = probs.dim(4);
  if (C > kNumClasses)
    throw ShapeError("argmax_decode: more channels than label codes");
  LabelVolume out;
  out.extents = {D, H, W};
  out.spacing = spacing;
  out.labels.resize(static_cast<std::size_t>(D * H * W));
  const std::int64_t spatial = D * H * W;
  const float* p = probs.data();
  for (std::int64_t v = 0; v < spatial; ++v) {
    std::int64_t best = 0;
    float best_val = p[v];
    for (std::int64_t c = 1; c < C; ++c)
      if (p[c * spatial + v] > best_val) {  // ties keep the lowest code
        best_val = p[c * spatial + v];
        best = c;
      }
    out.labels[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Tensor<float> tensor_from_volume(const Volume& volume) {
  volume.validate();
  Tensor<float> t({1, 1, volume.extents[0], volume.extents[1], volume.extents[2]});
  std::copy(volume.data.begin(), volume.data.end(), t.data());
  return t;
}

std::vector<double> class_frequencies(const std::vector<const LabelVolume*>& labels,
                                      int num_classes) {
  if (labels.empty()) throw ValueError("class_frequencies: empty label set");
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  std::int64_t total = 0;
  for (const LabelVolume* lv : labels) {
    lv->validate();
    for (std::uint8_t code : lv->labels) {
      if (static_cast<int>(code) >= num_classes)
        throw ValueError("class_frequencies: label code outside 0.." +
                         std::to_string(num_classes - 1));
      ++counts[code];
    }
    total += lv->numel();
  }
  std::vector<double> freq(static_cast<std::size_t>(num_classes));
  for (std::size_t c = 0; c < freq.size(); ++c)
    freq[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
  return freq;
}

}  // namespace stemnet
