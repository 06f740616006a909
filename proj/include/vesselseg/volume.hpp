#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <vector>

#include "vesselseg/error.hpp"

namespace vesselseg {

/// Target isotropic spacing used by the preprocessing profile, in millimeters.
inline constexpr double kTargetSpacingMm = 0.227;

using Index = std::int64_t;

/// Grid extent, ordered (D, H, W); W is the fastest-varying axis in memory.
struct Dims {
  Index d = 0, h = 0, w = 0;

  Index count() const { return d * h * w; }
  Index operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
  Index& operator[](int axis) { return axis == 0 ? d : (axis == 1 ? h : w); }
  Index linear(Index z, Index y, Index x) const { return (z * h + y) * w + x; }
  bool contains(Index z, Index y, Index x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w;
  }
  friend bool operator==(const Dims&, const Dims&) = default;
};

/// Millimeters per voxel. x runs along W, y along H, z along D.
struct Spacing {
  double sx = 1.0, sy = 1.0, sz = 1.0;

  Spacing() = default;
  Spacing(double x, double y, double z);

  static Spacing isotropic(double s) { return Spacing(s, s, s); }
  /// Spacing along grid axis 0 (D), 1 (H) or 2 (W).
  double along(int axis) const { return axis == 0 ? sz : (axis == 1 ? sy : sx); }
  bool is_isotropic() const;
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// Scalar field on a regular grid. Values are stored as 32-bit floats, W fastest.
class Volume {
public:
  using Array = Eigen::ArrayXf;

  Volume() = default;
  Volume(Dims dims, Spacing spacing, float fill = 0.0f);
  Volume(Dims dims, Spacing spacing, Array data);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  Index size() const { return dims_.count(); }

  Array& data() { return data_; }
  const Array& data() const { return data_; }

  float& operator()(Index z, Index y, Index x) { return data_[dims_.linear(z, y, x)]; }
  float operator()(Index z, Index y, Index x) const { return data_[dims_.linear(z, y, x)]; }

private:
  Dims dims_;
  Spacing spacing_;
  Array data_;
};

/// Binary label on a regular grid; one byte per voxel holding 0 or 1.
class BinaryMask {
public:
  BinaryMask() = default;
  BinaryMask(Dims dims, Spacing spacing, bool fill = false);

  const Dims& dims() const { return dims_; }
  const Spacing& spacing() const { return spacing_; }
  Index size() const { return dims_.count(); }

  std::vector<std::uint8_t>& data() { return data_; }
  const std::vector<std::uint8_t>& data() const { return data_; }

  bool operator()(Index z, Index y, Index x) const { return data_[dims_.linear(z, y, x)] != 0; }
  void set(Index z, Index y, Index x, bool v) { data_[dims_.linear(z, y, x)] = v ? 1 : 0; }
  bool at(Index i) const { return data_[i] != 0; }

  Index count() const;
  bool empty() const { return count() == 0; }
  friend bool operator==(const BinaryMask& a, const BinaryMask& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

private:
  Dims dims_;
  Spacing spacing_;
  std::vector<std::uint8_t> data_;
};

/// Half-open box [lo, hi) in voxel coordinates.
struct BBox {
  std::array<Index, 3> lo{}, hi{};
  Dims extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Cubic sliding-window plan over a (possibly zero-padded) grid.
struct PatchGrid {
  Index patch = 0;
  Index stride = 0;
  Dims padded;                       ///< grid the origins live on
  std::array<Index, 3> pad_before{};  ///< symmetric padding applied to reach `padded`
  std::vector<std::array<Index, 3>> origins;
};

Volume resample_trilinear(const Volume& v, const Spacing& target);

/// Population z-score. Throws DegenerateInputError on zero variance.
Volume zscore_normalize(const Volume& v);

/// Tight foreground box dilated by `margin` and clamped to the grid.
BBox foreground_bbox(const BinaryMask& m, Index margin);
Volume crop(const Volume& v, const BBox& box);
BinaryMask crop(const BinaryMask& m, const BBox& box);
std::pair<Volume, BBox> crop_to_roi(const Volume& v, const BinaryMask& m, Index margin = 8);

PatchGrid plan_patches(const Dims& dims, Index patch, double overlap_fraction);

/// Zero-pad with `before` voxels in front and enough behind to reach `target` dims.
Volume pad_to(const Volume& v, const Dims& target, const std::array<Index, 3>& before);

}  // namespace vesselseg
