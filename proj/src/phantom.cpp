#include "vesselseg/phantom.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "vesselseg/error.hpp"
#include "vesselseg/rng.hpp"
#include "vesselseg/volume_io.hpp"

namespace vesselseg {

namespace {

using Vec3 = Eigen::Vector3d;

Vec3 extent_mm(const Dims& d, const Spacing& s) {
  return {static_cast<double>(d.d - 1) * s.sz, static_cast<double>(d.h - 1) * s.sy,
          static_cast<double>(d.w - 1) * s.sx};
}

Vec3 to_mm(const std::array<double, 3>& v, const Spacing& s) { return {v[0] * s.sz, v[1] * s.sy, v[2] * s.sx}; }

Vec3 clamp_box(const Vec3& p, const Vec3& hi) { return p.cwiseMax(Vec3::Zero()).cwiseMin(hi); }

Vec3 random_unit(Rng& rng) {
  for (;;) {
    Vec3 v(normal01(rng), normal01(rng), normal01(rng));
    if (v.norm() > 1e-9) return v.normalized();
  }
}

Vec3 random_perpendicular(const Vec3& d, Rng& rng) {
  for (;;) {
    Vec3 v = random_unit(rng);
    v -= v.dot(d) * d;
    if (v.norm() > 1e-6) return v.normalized();
  }
}

// Distance along `dir` from `p` to the box [0, hi].
double exit_distance(const Vec3& p, const Vec3& dir, const Vec3& hi) {
  double t = INFINITY;
  for (int a = 0; a < 3; ++a) {
    if (dir[a] > 1e-12) t = std::min(t, (hi[a] - p[a]) / dir[a]);
    if (dir[a] < -1e-12) t = std::min(t, -p[a] / dir[a]);
  }
  return t;
}

double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  const double t = len2 > 0 ? std::clamp((p - a).dot(ab) / len2, 0.0, 1.0) : 0.0;
  return (p - (a + t * ab)).norm();
}

struct Builder {
  const PhantomSpec& spec;
  Rng rng;
  CenterlineGraph g;
  Vec3 hi, nidus;
  std::vector<int> nidus_nodes;

  int add_node(const Vec3& p, double r) {
    g.nodes.push_back({p, r});
    return static_cast<int>(g.nodes.size()) - 1;
  }
  int add_edge(int a, int b, double r, VesselKind k) {
    g.edges.push_back({a, b, r, k});
    g.nodes[static_cast<size_t>(b)].radius = r;
    return static_cast<int>(g.edges.size()) - 1;
  }

  // Grows one arterial segment from `from` and recurses into its children.
  // Returns the index of the created edge.
  int grow(int from, Vec3 dir, double r, double length) {
    const double m = spec.murray_exponent;
    const double f = 0.3 + 0.4 * uniform01(rng);
    const double rl = r * std::pow(f, 1.0 / m);
    const double rr = r * std::pow(1.0 - f, 1.0 / m);
    if (std::min(rl, rr) < spec.min_radius) {
      const int target = nidus_nodes[uniform_index(rng, nidus_nodes.size())];
      return add_edge(from, target, r, VesselKind::artery);
    }
    const Vec3 start = g.nodes[static_cast<size_t>(from)].pos;
    const int end = add_node(clamp_box(start + length * dir, hi), r);
    const int e = add_edge(from, end, r, VesselKind::artery);

    const Vec3 axis = random_perpendicular(dir, rng);
    const double pi = std::numbers::pi;
    auto child_dir = [&](double sign) {
      const double deg = spec.branch_angle + spec.branch_angle_jitter * (2 * uniform01(rng) - 1);
      Vec3 d = Eigen::AngleAxisd(sign * deg * pi / 180.0, axis) * dir;
      const Vec3 to_nidus = nidus - g.nodes[static_cast<size_t>(end)].pos;
      if (to_nidus.norm() > 1e-9) d = (d + 0.5 * to_nidus.normalized()).normalized();
      return d;
    };
    const Vec3 dl = child_dir(1.0), dr = child_dir(-1.0);
    const int left = grow(end, dl, rl, length * spec.length_ratio);
    const int right = grow(end, dr, rr, length * spec.length_ratio);
    g.bifurcations.push_back({e, left, right});
    return e;
  }
};

}  // namespace

void PhantomSpec::validate() const {
  if (dims.d < 2 || dims.h < 2 || dims.w < 2) throw ParameterError("phantom dims must be >= 2 per axis");
  if (!(root_radius > 0 && min_radius > 0 && nidus_radius > 0 && vein_radius > 0 && nidus_vessel_radius > 0))
    throw ParameterError("phantom radii must be positive");
  if (!(min_radius < root_radius)) throw ParameterError("min_radius must be below root_radius");
  if (!(murray_exponent > 0)) throw ParameterError("murray_exponent must be positive");
  if (!(length_ratio > 0 && length_ratio <= 1)) throw ParameterError("length_ratio must be in (0, 1]");
  if (nidus_segments < 0) throw ParameterError("nidus_segments must be >= 0");
  if (psf_sigma < 0 || noise_sigma < 0) throw ParameterError("psf_sigma and noise_sigma must be >= 0");
  const Vec3 c = to_mm(nidus_center, spacing), hi = extent_mm(dims, spacing);
  for (int a = 0; a < 3; ++a)
    if (c[a] - nidus_radius < 0 || c[a] + nidus_radius > hi[a])
      throw ParameterError("nidus sphere exceeds the grid");
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = {{"dims", {s.dims.d, s.dims.h, s.dims.w}},
       {"spacing_mm", {s.spacing.sx, s.spacing.sy, s.spacing.sz}},
       {"seed", s.seed},
       {"root_radius", s.root_radius},
       {"min_radius", s.min_radius},
       {"branch_angle", s.branch_angle},
       {"branch_angle_jitter", s.branch_angle_jitter},
       {"length_ratio", s.length_ratio},
       {"murray_exponent", s.murray_exponent},
       {"nidus_center", s.nidus_center},
       {"nidus_radius", s.nidus_radius},
       {"nidus_segments", s.nidus_segments},
       {"nidus_vessel_radius", s.nidus_vessel_radius},
       {"vein_radius", s.vein_radius},
       {"intensity_vessel", s.intensity_vessel},
       {"intensity_background", s.intensity_background},
       {"psf_sigma", s.psf_sigma},
       {"noise_sigma", s.noise_sigma}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  if (j.contains("dims")) {
    const auto d = j.at("dims").get<std::array<Index, 3>>();
    s.dims = {d[0], d[1], d[2]};
  }
  if (j.contains("spacing_mm")) {
    const auto sp = j.at("spacing_mm").get<std::array<double, 3>>();
    s.spacing = Spacing(sp[0], sp[1], sp[2]);
  }
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("seed", s.seed);
  opt("root_radius", s.root_radius);
  opt("min_radius", s.min_radius);
  opt("branch_angle", s.branch_angle);
  opt("branch_angle_jitter", s.branch_angle_jitter);
  opt("length_ratio", s.length_ratio);
  opt("murray_exponent", s.murray_exponent);
  opt("nidus_center", s.nidus_center);
  opt("nidus_radius", s.nidus_radius);
  opt("nidus_segments", s.nidus_segments);
  opt("nidus_vessel_radius", s.nidus_vessel_radius);
  opt("vein_radius", s.vein_radius);
  opt("intensity_vessel", s.intensity_vessel);
  opt("intensity_background", s.intensity_background);
  opt("psf_sigma", s.psf_sigma);
  opt("noise_sigma", s.noise_sigma);
}

const char* to_string(VesselKind k) {
  switch (k) {
    case VesselKind::artery: return "artery";
    case VesselKind::nidus: return "nidus";
    case VesselKind::vein: return "vein";
  }
  return "?";
}

int CenterlineGraph::incoming_edge(int node) const {
  for (size_t e = 0; e < edges.size(); ++e)
    if (edges[e].child == node && edges[e].kind == VesselKind::artery) return static_cast<int>(e);
  return -1;
}

bool operator==(const CenterlineGraph& a, const CenterlineGraph& b) {
  if (a.nodes.size() != b.nodes.size() || a.edges.size() != b.edges.size() || a.root != b.root || a.hub != b.hub)
    return false;
  for (size_t i = 0; i < a.nodes.size(); ++i)
    if (a.nodes[i].pos != b.nodes[i].pos || a.nodes[i].radius != b.nodes[i].radius) return false;
  for (size_t i = 0; i < a.edges.size(); ++i) {
    const auto &x = a.edges[i], &y = b.edges[i];
    if (x.parent != y.parent || x.child != y.child || x.radius != y.radius || x.kind != y.kind) return false;
  }
  return true;
}

CenterlineGraph generate_centerlines(const PhantomSpec& spec) {
  spec.validate();
  Builder b{spec, make_rng(spec.seed, "phantom.centerlines"), {}, extent_mm(spec.dims, spec.spacing),
            to_mm(spec.nidus_center, spec.spacing), {}};

  // Nidus: a hub at the center chained through random points in the sphere.
  b.g.hub = b.add_node(b.nidus, spec.nidus_vessel_radius);
  b.nidus_nodes.push_back(b.g.hub);
  const double reach = std::max(0.0, spec.nidus_radius - spec.nidus_vessel_radius);
  for (int i = 0; i < spec.nidus_segments; ++i) {
    const Vec3 p = b.nidus + reach * std::cbrt(uniform01(b.rng)) * random_unit(b.rng);
    const int n = b.add_node(p, spec.nidus_vessel_radius);
    b.add_edge(b.nidus_nodes.back(), n, spec.nidus_vessel_radius, VesselKind::nidus);
    b.nidus_nodes.push_back(n);
  }

  // Arterial root: a point on a random boundary face, central 60% of the face.
  const int axis = static_cast<int>(uniform_index(b.rng, 3));
  const bool far_side = uniform01(b.rng) < 0.5;
  Vec3 root;
  for (int a = 0; a < 3; ++a) root[a] = b.hi[a] * (0.2 + 0.6 * uniform01(b.rng));
  root[axis] = far_side ? b.hi[axis] : 0.0;
  b.g.root = b.add_node(root, spec.root_radius);
  const Vec3 to_nidus = b.nidus - root;
  b.grow(b.g.root, to_nidus.normalized(), spec.root_radius, 0.4 * to_nidus.norm());

  // Vein: straight trunk from the hub to the boundary, leaving away from the root.
  Vec3 dir = random_unit(b.rng);
  if (dir.dot(to_nidus) < 0) dir = -dir;
  const Vec3 exit = clamp_box(b.nidus + exit_distance(b.nidus, dir, b.hi) * dir, b.hi);
  const int out = b.add_node(exit, spec.vein_radius);
  b.add_edge(b.g.hub, out, spec.vein_radius, VesselKind::vein);
  return std::move(b.g);
}

BinaryMask rasterize_mask(const CenterlineGraph& g, const Dims& dims, const Spacing& sp) {
  BinaryMask m(dims, sp);
  const double s[3] = {sp.sz, sp.sy, sp.sx};
  for (const auto& e : g.edges) {
    const Vec3 a = g.nodes[static_cast<size_t>(e.parent)].pos, b = g.nodes[static_cast<size_t>(e.child)].pos;
    Index lo[3], hi[3];
    for (int ax = 0; ax < 3; ++ax) {
      lo[ax] = std::max<Index>(0, static_cast<Index>(std::floor((std::min(a[ax], b[ax]) - e.radius) / s[ax])));
      hi[ax] = std::min<Index>(dims[ax] - 1, static_cast<Index>(std::ceil((std::max(a[ax], b[ax]) + e.radius) / s[ax])));
    }
    for (Index z = lo[0]; z <= hi[0]; ++z)
      for (Index y = lo[1]; y <= hi[1]; ++y)
        for (Index x = lo[2]; x <= hi[2]; ++x) {
          const Vec3 p(static_cast<double>(z) * s[0], static_cast<double>(y) * s[1], static_cast<double>(x) * s[2]);
          if (point_segment_distance(p, a, b) <= e.radius) m.set(z, y, x, true);
        }
  }
  return m;
}

Volume gaussian_blur(const Volume& v, double sigma_mm) {
  if (sigma_mm <= 0) return v;
  const Dims& d = v.dims();
  Eigen::ArrayXd buf = v.data().cast<double>();
  Eigen::ArrayXd tmp(buf.size());
  for (int axis = 0; axis < 3; ++axis) {
    const double sig = sigma_mm / v.spacing().along(axis);
    const Index radius = static_cast<Index>(std::ceil(3.0 * sig));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double total = 0;
    for (Index i = -radius; i <= radius; ++i)
      total += k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * static_cast<double>(i * i) / (sig * sig));
    for (double& w : k) w /= total;
    const Index n = d[axis];
    const Index step = axis == 0 ? d.h * d.w : (axis == 1 ? d.w : 1);
    for (Index z = 0; z < d.d; ++z)
      for (Index y = 0; y < d.h; ++y)
        for (Index x = 0; x < d.w; ++x) {
          const Index i = d.linear(z, y, x);
          const Index pos = axis == 0 ? z : (axis == 1 ? y : x);
          double acc = 0;
          for (Index t = -radius; t <= radius; ++t) {
            const Index q = std::clamp<Index>(pos + t, 0, n - 1);
            acc += k[static_cast<size_t>(t + radius)] * buf[i + (q - pos) * step];
          }
          tmp[i] = acc;
        }
    buf.swap(tmp);
  }
  return Volume(d, v.spacing(), buf.cast<float>());
}

std::pair<Volume, BinaryMask> rasterize(const CenterlineGraph& g, const PhantomSpec& spec) {
  BinaryMask mask = rasterize_mask(g, spec.dims, spec.spacing);
  Volume img(spec.dims, spec.spacing, static_cast<float>(spec.intensity_background));
  for (Index i = 0; i < img.size(); ++i)
    if (mask.at(i)) img.data()[i] = static_cast<float>(spec.intensity_vessel);
  img = gaussian_blur(img, spec.psf_sigma);
  if (spec.noise_sigma > 0) {
    Rng rng = make_rng(spec.seed, "phantom.noise");
    for (Index i = 0; i < img.size(); ++i) img.data()[i] += static_cast<float>(spec.noise_sigma * normal01(rng));
  }
  return {std::move(img), std::move(mask)};
}

std::array<Index, 3> arterial_seed(const CenterlineGraph& g, const Spacing& sp, const Dims& dims) {
  const Vec3 root = g.nodes[static_cast<size_t>(g.root)].pos;
  Vec3 target = root;
  for (const auto& e : g.edges)
    if (e.parent == g.root) {
      const Vec3 next = g.nodes[static_cast<size_t>(e.child)].pos;
      const double len = (next - root).norm();
      target = root + std::min(2.0 * e.radius, 0.5 * len) * (next - root) / std::max(len, 1e-12);
      break;
    }
  const double s[3] = {sp.sz, sp.sy, sp.sx};
  std::array<Index, 3> v{};
  for (int a = 0; a < 3; ++a) v[static_cast<size_t>(a)] = std::clamp<Index>(std::llround(target[a] / s[a]), 0, dims[a] - 1);
  return v;
}

std::vector<PhantomCase> make_dataset(int n_cases, const PhantomSpec& base, std::uint64_t seed) {
  if (n_cases < 2) throw ParameterError("a dataset needs at least 2 cases");
  base.validate();
  std::vector<PhantomCase> out;
  for (int i = 0; i < n_cases; ++i) {
    Rng rng = make_rng(seed, "phantom.case", static_cast<std::uint64_t>(i));
    PhantomSpec s = base;
    s.seed = substream_seed(seed, "phantom.case.seed", static_cast<std::uint64_t>(i));
    auto jitter = [&](double v) { return v * (0.8 + 0.4 * uniform01(rng)); };
    s.root_radius = jitter(base.root_radius);
    s.min_radius = std::min(jitter(base.min_radius), 0.95 * s.root_radius);
    s.nidus_radius = jitter(base.nidus_radius);
    s.nidus_vessel_radius = jitter(base.nidus_vessel_radius);
    s.vein_radius = jitter(base.vein_radius);
    for (int a = 0; a < 3; ++a) {
      const double sp = base.spacing.along(a);
      const double margin = s.nidus_radius / sp + 1.0;
      const double n = static_cast<double>(base.dims[a] - 1);
      const double c = base.nidus_center[static_cast<size_t>(a)] + 0.15 * n * (2 * uniform01(rng) - 1);
      s.nidus_center[static_cast<size_t>(a)] = std::clamp(c, margin, n - margin);
    }
    const CenterlineGraph g = generate_centerlines(s);
    auto [img, mask] = rasterize(g, s);
    char id[16];
    std::snprintf(id, sizeof id, "case%02d", i + 1);
    out.push_back({id, s, std::move(img), std::move(mask), arterial_seed(g, s.spacing, s.dims)});
  }
  return out;
}

void write_dataset(const std::vector<PhantomCase>& cases, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"cases", nlohmann::json::array()}};
  for (const auto& c : cases) {
    save_volume(c.image, dir / (c.id + "_image.f32"));
    save_mask(c.mask, dir / (c.id + "_mask.f32"));
    manifest["cases"].push_back({{"id", c.id},
                                 {"image", c.id + "_image.f32"},
                                 {"mask", c.id + "_mask.f32"},
                                 {"seed_voxel", c.seed_voxel},
                                 {"spec", c.spec}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

std::vector<PhantomCase> read_dataset(const std::filesystem::path& p) {
  const auto manifest_path = std::filesystem::is_directory(p) ? p / "manifest.json" : p;
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("manifest", "cannot open " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  const auto dir = manifest_path.parent_path();
  std::vector<PhantomCase> out;
  for (const auto& c : j.at("cases")) {
    PhantomCase pc;
    pc.id = c.at("id").get<std::string>();
    pc.image = load_volume(dir / c.at("image").get<std::string>());
    pc.mask = load_mask(dir / c.at("mask").get<std::string>());
    if (c.contains("seed_voxel")) pc.seed_voxel = c.at("seed_voxel").get<std::array<Index, 3>>();
    if (c.contains("spec")) pc.spec = c.at("spec").get<PhantomSpec>();
    out.push_back(std::move(pc));
  }
  if (out.size() < 2) throw FormatError("cases", "manifest lists fewer than 2 cases");
  return out;
}

}  // namespace vesselseg
