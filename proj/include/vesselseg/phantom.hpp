#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vesselseg/volume.hpp"

namespace vesselseg {

/// Stochastic description of one synthetic AVM case: an arterial tree grown
/// from a boundary root toward a nidus, a tangle of chords inside the nidus
/// sphere, and one draining vein leaving through the boundary.
struct PhantomSpec {
  Dims dims{64, 64, 64};
  Spacing spacing = Spacing::isotropic(0.5);
  std::uint64_t seed = 0;

  double root_radius = 1.75;        ///< mm
  double min_radius = 0.6;          ///< mm; a branch whose children would be thinner ends in the nidus
  double branch_angle = 35.0;       ///< degrees between parent and child direction
  double branch_angle_jitter = 15.0;  ///< degrees
  double length_ratio = 0.75;       ///< child / parent segment length
  double murray_exponent = 3.0;

  std::array<double, 3> nidus_center{32, 32, 32};  ///< voxel coordinates (z, y, x)
  double nidus_radius = 5.0;        ///< mm
  int nidus_segments = 12;
  double nidus_vessel_radius = 0.7;  ///< mm
  double vein_radius = 1.5;         ///< mm

  double intensity_vessel = 1000.0;
  double intensity_background = 100.0;
  double psf_sigma = 1.0;    ///< mm
  double noise_sigma = 40.0;

  void validate() const;
  friend bool operator==(const PhantomSpec&, const PhantomSpec&) = default;
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

enum class VesselKind { artery, nidus, vein };
const char* to_string(VesselKind k);

/// Node positions are physical (mm) and ordered like the grid axes (z, y, x),
/// so voxel (i, j, k) sits at (i*sz, j*sy, k*sx).
struct CenterlineNode {
  Eigen::Vector3d pos;
  double radius = 0;  ///< radius of the vessel entering this node
};

struct CenterlineEdge {
  int parent = 0, child = 0;
  double radius = 0;
  VesselKind kind = VesselKind::artery;
};

struct Bifurcation {
  int parent_edge = 0, left_edge = 0, right_edge = 0;
};

struct CenterlineGraph {
  std::vector<CenterlineNode> nodes;
  std::vector<CenterlineEdge> edges;
  std::vector<Bifurcation> bifurcations;
  int root = 0;  ///< arterial root, on the grid boundary
  int hub = 0;   ///< nidus node the vein drains from

  /// Index of the edge entering `node`, or -1 for the root.
  int incoming_edge(int node) const;
  friend bool operator==(const CenterlineGraph& a, const CenterlineGraph& b);
};

CenterlineGraph generate_centerlines(const PhantomSpec& spec);

/// Capsule union as the exact mask; blurred, noisy intensities as the image.
std::pair<Volume, BinaryMask> rasterize(const CenterlineGraph& g, const PhantomSpec& spec);

/// Mask only (no intensity model), for geometric checks.
BinaryMask rasterize_mask(const CenterlineGraph& g, const Dims& dims, const Spacing& spacing);

/// Separable Gaussian blur with clamp-to-edge borders; sigma in mm.
Volume gaussian_blur(const Volume& v, double sigma_mm);

/// Voxel inside the root artery, two radii in from the boundary.
std::array<Index, 3> arterial_seed(const CenterlineGraph& g, const Spacing& spacing, const Dims& dims);

struct PhantomCase {
  std::string id;
  PhantomSpec spec;
  Volume image;
  BinaryMask mask;
  std::array<Index, 3> seed_voxel{};
};

/// Cases with per-case jitter of radii (+-20%) and nidus placement, each with
/// its own seed derived from `seed`.
std::vector<PhantomCase> make_dataset(int n_cases, const PhantomSpec& base, std::uint64_t seed);

/// Writes `<id>_image` and `<id>_mask` fixture pairs plus manifest.json.
void write_dataset(const std::vector<PhantomCase>& cases, const std::filesystem::path& dir);

/// Reads a dataset written by write_dataset; the argument is the directory or
/// its manifest.json.
std::vector<PhantomCase> read_dataset(const std::filesystem::path& dir_or_manifest);

}  // namespace vesselseg
