#pragma once

#include <filesystem>

#include "vesselseg/volume.hpp"

namespace vesselseg {

// Two on-disk encodings are supported:
//
//  * NRRD subset (`.nrrd`): dimension 3, type float or uint8, raw little-endian
//    encoding, diagonal `space directions`. Anything else is rejected with a
//    FormatError naming the field.
//  * Raw fixture (`<stem>.f32` + `<stem>.json`): little-endian float32 voxels,
//    W fastest, plus a sidecar with `dims` [D,H,W] and `spacing_mm` [sx,sy,sz].
//    Either file of the pair may be passed as the path.

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

/// Masks load from either encoding; any nonzero voxel is foreground.
BinaryMask load_mask(const std::filesystem::path& path);
/// Writes uint8 for NRRD and 0/1 floats for the fixture format.
void save_mask(const BinaryMask& m, const std::filesystem::path& path);

Volume mask_to_volume(const BinaryMask& m);
BinaryMask volume_to_mask(const Volume& v, float threshold = 0.0f);

}  // namespace vesselseg
