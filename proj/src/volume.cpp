#include "vesselseg/volume.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace vesselseg {

Spacing::Spacing(double x, double y, double z) : sx(x), sy(y), sz(z) {
  if (!(sx > 0.0) || !(sy > 0.0) || !(sz > 0.0))
    throw ParameterError("spacing components must be strictly positive");
}

bool Spacing::is_isotropic() const {
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(std::abs(a), std::abs(b)); };
  return close(sx, sy) && close(sy, sz);
}

namespace {

void check_dims(const Dims& d) {
  if (d.d <= 0 || d.h <= 0 || d.w <= 0) throw ParameterError("volume dims must be positive");
}

}  // namespace

Volume::Volume(Dims dims, Spacing spacing, float fill)
    : dims_(dims), spacing_(spacing) {
  check_dims(dims_);
  data_ = Array::Constant(dims_.count(), fill);
}

Volume::Volume(Dims dims, Spacing spacing, Array data)
    : dims_(dims), spacing_(spacing), data_(std::move(data)) {
  check_dims(dims_);
  if (data_.size() != dims_.count())
    throw ParameterError("volume data length " + std::to_string(data_.size()) +
                         " does not match dims " + std::to_string(dims_.count()));
}

BinaryMask::BinaryMask(Dims dims, Spacing spacing, bool fill)
    : dims_(dims), spacing_(spacing), data_(static_cast<size_t>(dims.count()), fill ? 1 : 0) {
  check_dims(dims_);
}

Index BinaryMask::count() const {
  return std::count_if(data_.begin(), data_.end(), [](std::uint8_t v) { return v != 0; });
}

Volume resample_trilinear(const Volume& v, const Spacing& target) {
  const Dims& in = v.dims();
  Dims out;
  std::array<double, 3> step{};
  for (int a = 0; a < 3; ++a) {
    const double extent = static_cast<double>(in[a]) * v.spacing().along(a);
    out[a] = std::max<Index>(1, std::llround(extent / target.along(a)));
    step[a] = target.along(a) / v.spacing().along(a);
  }
  if (out == in && v.spacing() == target) return v;

  // Precompute per-axis sample positions: voxel centers mapped to source index space.
  std::array<std::vector<Index>, 3> i0, i1;
  std::array<std::vector<double>, 3> frac;
  for (int a = 0; a < 3; ++a) {
    i0[a].resize(out[a]);
    i1[a].resize(out[a]);
    frac[a].resize(out[a]);
    for (Index o = 0; o < out[a]; ++o) {
      double pos = (static_cast<double>(o) + 0.5) * step[a] - 0.5;
      pos = std::clamp(pos, 0.0, static_cast<double>(in[a] - 1));
      const Index lo = static_cast<Index>(std::floor(pos));
      i0[a][o] = lo;
      i1[a][o] = std::min(lo + 1, in[a] - 1);
      frac[a][o] = pos - static_cast<double>(lo);
    }
  }

  Volume res(out, target);
  const auto& src = v.data();
  auto at = [&](Index z, Index y, Index x) { return static_cast<double>(src[in.linear(z, y, x)]); };
  for (Index z = 0; z < out.d; ++z) {
    const Index z0 = i0[0][z], z1 = i1[0][z];
    const double fz = frac[0][z];
    for (Index y = 0; y < out.h; ++y) {
      const Index y0 = i0[1][y], y1 = i1[1][y];
      const double fy = frac[1][y];
      for (Index x = 0; x < out.w; ++x) {
        const Index x0 = i0[2][x], x1 = i1[2][x];
        const double fx = frac[2][x];
        const double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
        const double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
        const double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
        const double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
        const double c0 = c00 * (1 - fy) + c01 * fy;
        const double c1 = c10 * (1 - fy) + c11 * fy;
        res(z, y, x) = static_cast<float>(c0 * (1 - fz) + c1 * fz);
      }
    }
  }
  // Guard against rounding drifting outside the source range.
  const float lo = src.minCoeff(), hi = src.maxCoeff();
  res.data() = res.data().max(lo).min(hi);
  return res;
}

Volume zscore_normalize(const Volume& v) {
  if (v.size() < 2) throw DegenerateInputError("z-score needs at least two voxels");
  const auto d = v.data().cast<double>();
  const double mean = d.mean();
  const double var = (d - mean).square().mean();
  if (!(var > 0.0)) throw DegenerateInputError("z-score of a zero-variance volume");
  const double inv = 1.0 / std::sqrt(var);
  return Volume(v.dims(), v.spacing(), ((d - mean) * inv).cast<float>());
}

BBox foreground_bbox(const BinaryMask& m, Index margin) {
  const Dims& g = m.dims();
  BBox b;
  b.lo = {g.d, g.h, g.w};
  b.hi = {0, 0, 0};
  bool any = false;
  for (Index z = 0; z < g.d; ++z)
    for (Index y = 0; y < g.h; ++y)
      for (Index x = 0; x < g.w; ++x) {
        if (!m(z, y, x)) continue;
        any = true;
        const std::array<Index, 3> p{z, y, x};
        for (int a = 0; a < 3; ++a) {
          b.lo[a] = std::min(b.lo[a], p[a]);
          b.hi[a] = std::max(b.hi[a], p[a] + 1);
        }
      }
  if (!any) throw DegenerateInputError("bounding box of an empty mask");
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = std::max<Index>(0, b.lo[a] - margin);
    b.hi[a] = std::min(g[a], b.hi[a] + margin);
  }
  return b;
}

Volume crop(const Volume& v, const BBox& box) {
  const Dims e = box.extent();
  Volume out(e, v.spacing());
  for (Index z = 0; z < e.d; ++z)
    for (Index y = 0; y < e.h; ++y)
      for (Index x = 0; x < e.w; ++x) out(z, y, x) = v(z + box.lo[0], y + box.lo[1], x + box.lo[2]);
  return out;
}

BinaryMask crop(const BinaryMask& m, const BBox& box) {
  const Dims e = box.extent();
  BinaryMask out(e, m.spacing());
  for (Index z = 0; z < e.d; ++z)
    for (Index y = 0; y < e.h; ++y)
      for (Index x = 0; x < e.w; ++x) out.set(z, y, x, m(z + box.lo[0], y + box.lo[1], x + box.lo[2]));
  return out;
}

std::pair<Volume, BBox> crop_to_roi(const Volume& v, const BinaryMask& m, Index margin) {
  if (v.dims() != m.dims()) throw ParameterError("crop_to_roi: volume and mask grids differ");
  if (margin < 0) throw ParameterError("crop_to_roi: negative margin");
  const BBox box = foreground_bbox(m, margin);
  return {crop(v, box), box};
}

PatchGrid plan_patches(const Dims& dims, Index patch, double overlap_fraction) {
  if (patch <= 0) throw ParameterError("patch size must be positive");
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0))
    throw ParameterError("overlap fraction must lie in [0, 1)");
  if (overlap_fraction == 0.5 && patch % 2 != 0)
    throw ParameterError("50% overlap needs an even patch size");

  PatchGrid grid;
  grid.patch = patch;
  grid.stride = std::max<Index>(1, std::llround(static_cast<double>(patch) * (1.0 - overlap_fraction)));
  std::array<std::vector<Index>, 3> axis_origins;
  for (int a = 0; a < 3; ++a) {
    const Index n = std::max(dims[a], patch);
    grid.padded[a] = n;
    grid.pad_before[a] = (n - dims[a]) / 2;
    Index o = 0;
    axis_origins[a].push_back(o);
    while (o + patch < n) {
      o = std::min(o + grid.stride, n - patch);
      axis_origins[a].push_back(o);
    }
  }
  for (Index z : axis_origins[0])
    for (Index y : axis_origins[1])
      for (Index x : axis_origins[2]) grid.origins.push_back({z, y, x});
  return grid;
}

Volume pad_to(const Volume& v, const Dims& target, const std::array<Index, 3>& before) {
  for (int a = 0; a < 3; ++a)
    if (target[a] < v.dims()[a] + before[a]) throw ParameterError("pad_to: target smaller than input");
  if (target == v.dims()) return v;
  Volume out(target, v.spacing(), 0.0f);
  const Dims& g = v.dims();
  for (Index z = 0; z < g.d; ++z)
    for (Index y = 0; y < g.h; ++y)
      for (Index x = 0; x < g.w; ++x) out(z + before[0], y + before[1], x + before[2]) = v(z, y, x);
  return out;
}

}  // namespace vesselseg
