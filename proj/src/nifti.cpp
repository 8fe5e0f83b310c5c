#include "stemnet/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace stemnet {

namespace {

struct NiftiHeader {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

void bswap16(void* p) {
  auto* b = static_cast<unsigned char*>(p);
  std::swap(b[0], b[1]);
}

void bswap32(void* p) {
  auto* b = static_cast<unsigned char*>(p);
  std::swap(b[0], b[3]);
  std::swap(b[1], b[2]);
}

void swap_header(NiftiHeader& h) {
  bswap32(&h.sizeof_hdr);
  bswap32(&h.extents);
  bswap16(&h.session_error);
  for (auto& d : h.dim) bswap16(&d);
  bswap32(&h.intent_p1);
  bswap32(&h.intent_p2);
  bswap32(&h.intent_p3);
  bswap16(&h.intent_code);
  bswap16(&h.datatype);
  bswap16(&h.bitpix);
  bswap16(&h.slice_start);
  for (auto& p : h.pixdim) bswap32(&p);
  bswap32(&h.vox_offset);
  bswap32(&h.scl_slope);
  bswap32(&h.scl_inter);
  bswap16(&h.slice_end);
  bswap32(&h.cal_max);
  bswap32(&h.cal_min);
  bswap32(&h.slice_duration);
  bswap32(&h.toffset);
  bswap32(&h.glmax);
  bswap32(&h.glmin);
  bswap16(&h.qform_code);
  bswap16(&h.sform_code);
  bswap32(&h.quatern_b);
  bswap32(&h.quatern_c);
  bswap32(&h.quatern_d);
  bswap32(&h.qoffset_x);
  bswap32(&h.qoffset_y);
  bswap32(&h.qoffset_z);
  for (auto& v : h.srow_x) bswap32(&v);
  for (auto& v : h.srow_y) bswap32(&v);
  for (auto& v : h.srow_z) bswap32(&v);
}

int dtype_bytes(std::int16_t datatype) {
  switch (static_cast<NiftiDtype>(datatype)) {
    case NiftiDtype::kUint8:
      return 1;
    case NiftiDtype::kInt16:
    case NiftiDtype::kUint16:
      return 2;
    case NiftiDtype::kFloat32:
      return 4;
  }
  return 0;
}

class GzReader {
 public:
  explicit GzReader(const std::filesystem::path& path) : path_(path.string()) {
    f_ = gzopen(path_.c_str(), "rb");
    if (!f_) throw IoError("cannot open NIfTI file: " + path_);
  }
  ~GzReader() {
    if (f_) gzclose(f_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  void read(void* dst, std::size_t n, const char* what) {
    const int got = gzread(f_, dst, static_cast<unsigned>(n));
    if (got < 0 || static_cast<std::size_t>(got) != n)
      throw FormatError("NIfTI " + path_ + ": truncated while reading " + what + " (wanted " +
                        std::to_string(n) + " bytes, got " + std::to_string(got) + ")");
  }

  void skip(std::size_t n) {
    std::vector<char> scratch(std::min<std::size_t>(n, 4096));
    while (n) {
      const std::size_t take = std::min(n, scratch.size());
      read(scratch.data(), take, "padding");
      n -= take;
    }
  }

 private:
  std::string path_;
  gzFile f_ = nullptr;
};

Volume load_impl(const std::filesystem::path& path) {
  GzReader in(path);
  NiftiHeader h{};
  in.read(&h, sizeof(h), "header");

  bool swapped = false;
  if (h.sizeof_hdr != 348) {
    bswap32(&h.sizeof_hdr);
    if (h.sizeof_hdr != 348)
      throw FormatError("NIfTI " + path.string() + ": sizeof_hdr is not 348; not a NIfTI-1 file");
    bswap32(&h.sizeof_hdr);  // restore, swap_header redoes it
    swap_header(h);
    swapped = true;
  }

  if (std::memcmp(h.magic, "n+1", 4) != 0) {
    if (std::memcmp(h.magic, "ni1", 4) == 0)
      throw FormatError("NIfTI " + path.string() +
                        ": two-file (.hdr/.img) NIfTI is not supported, use single-file .nii");
    throw FormatError("NIfTI " + path.string() + ": bad magic, expected \"n+1\"");
  }

  if (h.dim[0] < 3 || h.dim[0] > 7)
    throw FormatError("NIfTI " + path.string() + ": dim[0] = " + std::to_string(h.dim[0]) +
                      ", expected a 3-dimensional volume");
  for (int d = 4; d <= h.dim[0]; ++d)
    if (h.dim[d] > 1)
      throw FormatError("NIfTI " + path.string() + ": non-singleton dimension " +
                        std::to_string(d) + "; only 3-dimensional volumes are supported");

  const int bytes = dtype_bytes(h.datatype);
  if (bytes == 0)
    throw FormatError("NIfTI " + path.string() + ": unsupported datatype code " +
                      std::to_string(h.datatype) +
                      " (supported: uint8, int16, uint16, float32)");
  if (h.bitpix != 8 * bytes)
    throw FormatError("NIfTI " + path.string() + ": bitpix " + std::to_string(h.bitpix) +
                      " inconsistent with datatype");

  Volume vol;
  // File order is x fastest; we store [D,H,W] with W fastest, so W=x, H=y, D=z
  // and the linear voxel order coincides.
  vol.extents = {h.dim[3], h.dim[2], h.dim[1]};
  vol.spacing = {h.pixdim[3], h.pixdim[2], h.pixdim[1]};
  for (int a = 0; a < 3; ++a) {
    if (vol.extents[a] <= 0)
      throw FormatError("NIfTI " + path.string() + ": non-positive extent");
    if (!(vol.spacing[a] > 0.0f))
      throw FormatError("NIfTI " + path.string() + ": non-positive pixdim");
  }

  if (h.sform_code > 0) {
    std::array<double, 16> m{};
    for (int c = 0; c < 4; ++c) {
      m[static_cast<std::size_t>(c)] = h.srow_x[c];
      m[static_cast<std::size_t>(4 + c)] = h.srow_y[c];
      m[static_cast<std::size_t>(8 + c)] = h.srow_z[c];
    }
    m[15] = 1.0;
    vol.affine = m;
  }

  if (h.vox_offset < 348.0f)
    throw FormatError("NIfTI " + path.string() + ": vox_offset " +
                      std::to_string(h.vox_offset) + " < 348");
  in.skip(static_cast<std::size_t>(h.vox_offset) - 348);

  const std::int64_t n = vol.numel();
  std::vector<unsigned char> raw(static_cast<std::size_t>(n) * static_cast<std::size_t>(bytes));
  in.read(raw.data(), raw.size(), "voxel data");

  if (swapped && bytes == 2)
    for (std::int64_t i = 0; i < n; ++i) bswap16(raw.data() + 2 * i);
  if (swapped && bytes == 4)
    for (std::int64_t i = 0; i < n; ++i) bswap32(raw.data() + 4 * i);

  const double slope = h.scl_slope == 0.0f ? 1.0 : static_cast<double>(h.scl_slope);
  const double inter = h.scl_slope == 0.0f ? 0.0 : static_cast<double>(h.scl_inter);
  vol.data.resize(static_cast<std::size_t>(n));
  switch (static_cast<NiftiDtype>(h.datatype)) {
    case NiftiDtype::kUint8:
      for (std::int64_t i = 0; i < n; ++i)
        vol.data[static_cast<std::size_t>(i)] = static_cast<float>(raw[static_cast<std::size_t>(i)] * slope + inter);
      break;
    case NiftiDtype::kInt16: {
      const std::int16_t* p = reinterpret_cast<const std::int16_t*>(raw.data());
      for (std::int64_t i = 0; i < n; ++i)
        vol.data[static_cast<std::size_t>(i)] = static_cast<float>(p[i] * slope + inter);
      break;
    }
    case NiftiDtype::kUint16: {
      const std::uint16_t* p = reinterpret_cast<const std::uint16_t*>(raw.data());
      for (std::int64_t i = 0; i < n; ++i)
        vol.data[static_cast<std::size_t>(i)] = static_cast<float>(p[i] * slope + inter);
      break;
    }
    case NiftiDtype::kFloat32: {
      const float* p = reinterpret_cast<const float*>(raw.data());
      for (std::int64_t i = 0; i < n; ++i)
        vol.data[static_cast<std::size_t>(i)] = static_cast<float>(p[i] * slope + inter);
      break;
    }
  }
  vol.validate();
  return vol;
}

bool wants_gzip(const std::filesystem::path& path) {
  return path.extension() == ".gz";
}

void write_all(const std::filesystem::path& path, const std::string& bytes) {
  if (wants_gzip(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb6");
    if (!f) throw IoError("cannot open for writing: " + path.string());
    const int wrote = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    const int rc = gzclose(f);
    if (wrote != static_cast<int>(bytes.size()) || rc != Z_OK)
      throw IoError("short gzip write: " + path.string());
  } else {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write: " + path.string());
  }
}

NiftiHeader make_header(const std::array<std::int64_t, 3>& extents,
                        const std::array<double, 3>& spacing,
                        const std::optional<std::array<double, 16>>& affine, NiftiDtype dtype) {
  NiftiHeader h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(extents[2]);  // x = W
  h.dim[2] = static_cast<std::int16_t>(extents[1]);  // y = H
  h.dim[3] = static_cast<std::int16_t>(extents[0]);  // z = D
  for (int d = 4; d < 8; ++d) h.dim[d] = 1;
  h.datatype = static_cast<std::int16_t>(dtype);
  h.bitpix = static_cast<std::int16_t>(8 * dtype_bytes(h.datatype));
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = static_cast<float>(spacing[2]);
  h.pixdim[2] = static_cast<float>(spacing[1]);
  h.pixdim[3] = static_cast<float>(spacing[0]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 2;  // millimetres
  std::strncpy(h.descrip, "stemnet", sizeof(h.descrip) - 1);
  if (affine) {
    h.sform_code = 2;
    for (int c = 0; c < 4; ++c) {
      h.srow_x[c] = static_cast<float>((*affine)[static_cast<std::size_t>(c)]);
      h.srow_y[c] = static_cast<float>((*affine)[static_cast<std::size_t>(4 + c)]);
      h.srow_z[c] = static_cast<float>((*affine)[static_cast<std::size_t>(8 + c)]);
    }
  } else {
    h.sform_code = 1;
    h.srow_x[0] = static_cast<float>(spacing[2]);
    h.srow_y[1] = static_cast<float>(spacing[1]);
    h.srow_z[2] = static_cast<float>(spacing[0]);
  }
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

template <typename T>
void encode_voxels(std::string& out, const std::vector<float>& data, const char* dtype_name,
                   double lo, double hi) {
  const std::size_t off = out.size();
  out.resize(off + data.size() * sizeof(T));
  T* dst = reinterpret_cast<T*>(out.data() + off);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const float v = data[i];
    if (!std::isfinite(v) || v != std::floor(v) || v < lo || v > hi)
      throw ValueError(std::string("save_nifti: value ") + std::to_string(v) +
                       " is not exactly representable as " + dtype_name);
    dst[i] = static_cast<T>(v);
  }
}

}  // namespace

Volume load_nifti(const std::filesystem::path& path) { return load_impl(path); }

LabelVolume load_label_nifti(const std::filesystem::path& path) {
  Volume v = load_impl(path);
  LabelVolume out;
  out.extents = v.extents;
  out.spacing = v.spacing;
  out.affine = v.affine;
  out.labels.resize(static_cast<std::size_t>(v.numel()));
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    const float x = v.data[i];
    if (x != std::floor(x) || x < 0.0f || x >= static_cast<float>(kNumClasses))
      throw ValueError("label file " + path.string() + ": code " + std::to_string(x) +
                       " outside the label range 0.." + std::to_string(kNumClasses - 1));
    out.labels[i] = static_cast<std::uint8_t>(x);
  }
  return out;
}

void save_nifti(const std::filesystem::path& path, const Volume& volume, NiftiDtype dtype) {
  volume.validate();
  for (int a = 0; a < 3; ++a)
    if (volume.extents[a] > 32767)
      throw ValueError("save_nifti: extent exceeds NIfTI-1 int16 dim field");

  NiftiHeader h = make_header(volume.extents, volume.spacing, volume.affine, dtype);
  std::string out;
  out.reserve(352 + volume.data.size() * 4);
  out.append(reinterpret_cast<const char*>(&h), sizeof(h));
  out.append(4, '\0');  // extension flag

  switch (dtype) {
    case NiftiDtype::kUint8:
      encode_voxels<std::uint8_t>(out, volume.data, "uint8", 0, 255);
      break;
    case NiftiDtype::kInt16:
      encode_voxels<std::int16_t>(out, volume.data, "int16", -32768, 32767);
      break;
    case NiftiDtype::kUint16:
      encode_voxels<std::uint16_t>(out, volume.data, "uint16", 0, 65535);
      break;
    case NiftiDtype::kFloat32: {
      const std::size_t off = out.size();
      out.resize(off + volume.data.size() * sizeof(float));
      std::memcpy(out.data() + off, volume.data.data(), volume.data.size() * sizeof(float));
      break;
    }
  }
  write_all(path, out);
}

void save_label_nifti(const std::filesystem::path& path, const LabelVolume& labels) {
  labels.validate();
  Volume v;
  v.extents = labels.extents;
  v.spacing = labels.spacing;
  v.affine = labels.affine;
  v.data.resize(labels.labels.size());
  for (std::size_t i = 0; i < labels.labels.size(); ++i)
    v.data[i] = static_cast<float>(labels.labels[i]);
  save_nifti(path, v, NiftiDtype::kUint8);
}

}  // namespace stemnet
