#pragma once

#include <array>
#include <string>
#include <vector>

#include "vesselseg/volume.hpp"

namespace vesselseg {

/// Histogram over [min, max] with `bins` equal bins; returns the bin edge that
/// maximizes the between-class variance, ties toward the lower edge.
/// Throws DegenerateInputError on a constant volume.
double otsu_threshold(const Volume& v, int bins = 256);

/// Foreground iff voxel > t.
BinaryMask apply_threshold(const Volume& v, double t);

enum class Neighborhood { faces6, edges18, full26 };
Neighborhood parse_neighborhood(const std::string& s);
const char* to_string(Neighborhood n);

/// Offsets of the chosen neighborhood, (dz, dy, dx).
std::vector<std::array<int, 3>> neighbor_offsets(Neighborhood n);

struct RegionGrowConfig {
  std::vector<std::array<Index, 3>> seeds;  ///< (z, y, x)
  double multiplier = 2.0;
  int iterations = 2;
  Neighborhood neighborhood = Neighborhood::faces6;
  int init_radius = 1;  ///< Chebyshev radius of the seed statistics window

  void validate(const Dims& dims) const;
};

/// Confidence-connected growing. Statistics start from the seed windows; each
/// round floods from the seeds through voxels with |x - mean| <= k * sd and
/// re-estimates (mean, sd) over the accepted region. sd is the sample
/// standard deviation. With sd = 0 the flood accepts exactly equal intensities.
BinaryMask confidence_region_grow(const Volume& v, const RegionGrowConfig& cfg);

/// Count of connected components of a mask under the given neighborhood.
int count_components(const BinaryMask& m, Neighborhood n);

}  // namespace vesselseg
