#pragma once

#include <filesystem>

#include "stemnet/volume.hpp"

namespace stemnet {

enum class NiftiDtype : std::int16_t {
  kUint8 = 2,
  kInt16 = 4,
  kFloat32 = 16,
  kUint16 = 512,
};

// Single-file NIfTI-1 (.nii, or gzip-compressed .nii.gz by extension),
// 3-dimensional, datatype one of the four above. Both byte orders are
// readable; files are written little-endian.
Volume load_nifti(const std::filesystem::path& path);

// As load_nifti, then validates every voxel is an integer label in 0..4.
LabelVolume load_label_nifti(const std::filesystem::path& path);

// Values must be exactly representable in the requested dtype, so a
// save -> load round trip reproduces the volume bit for bit.
void save_nifti(const std::filesystem::path& path, const Volume& volume,
                NiftiDtype dtype = NiftiDtype::kFloat32);

void save_label_nifti(const std::filesystem::path& path, const LabelVolume& labels);

}  // namespace stemnet
