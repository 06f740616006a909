#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vesselseg/rng.hpp"
#include "vesselseg/tensor.hpp"
#include "vesselseg/volume.hpp"

namespace testing {

using namespace vesselseg;

template <typename S>
Tensor<S> random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  typename Tensor<S>::Array a(shape.numel());
  for (Index i = 0; i < a.size(); ++i) a[i] = static_cast<S>(lo + (hi - lo) * uniform01(rng));
  return Tensor<S>(shape, std::move(a));
}

inline BinaryMask random_mask(Rng& rng, const Dims& dims, double p) {
  BinaryMask m(dims, Spacing());
  for (auto& v : m.data()) v = uniform01(rng) < p ? 1 : 0;
  return m;
}

/// Set of voxels within `r` (Euclidean) of a few random centers.
inline BinaryMask random_blobs(Rng& rng, const Dims& dims, int blobs, double rmin, double rmax) {
  BinaryMask m(dims, Spacing());
  for (int b = 0; b < blobs; ++b) {
    const double cz = uniform01(rng) * dims.d, cy = uniform01(rng) * dims.h, cx = uniform01(rng) * dims.w;
    const double r = rmin + (rmax - rmin) * uniform01(rng);
    for (Index z = 0; z < dims.d; ++z)
      for (Index y = 0; y < dims.h; ++y)
        for (Index x = 0; x < dims.w; ++x) {
          const double dz = z + 0.5 - cz, dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          if (dz * dz + dy * dy + dx * dx <= r * r) m.set(z, y, x, true);
        }
  }
  return m;
}

/// Straight tube along W of the given radius around axis (cz, cy), x in [x0, x1).
inline BinaryMask tube(const Dims& dims, double cz, double cy, double radius, Index x0, Index x1) {
  BinaryMask m(dims, Spacing());
  for (Index z = 0; z < dims.d; ++z)
    for (Index y = 0; y < dims.h; ++y)
      for (Index x = x0; x < x1; ++x) {
        const double dz = z - cz, dy = y - cy;
        if (dz * dz + dy * dy <= radius * radius) m.set(z, y, x, true);
      }
  return m;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vesselseg_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testing
