#include <doctest.h>

#include <queue>

#include "oracles.hpp"
#include "support.hpp"
#include "vesselseg/baselines.hpp"
#include "vesselseg/metrics.hpp"
#include "vesselseg/phantom.hpp"

using namespace vesselseg;
using oracles::brute_force_otsu;

namespace {

BinaryMask flood(const BinaryMask& allowed, std::array<Index, 3> seed) {
  BinaryMask out(allowed.dims(), allowed.spacing());
  std::queue<std::array<Index, 3>> q;
  q.push(seed);
  out.set(seed[0], seed[1], seed[2], true);
  const Index off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  while (!q.empty()) {
    auto p = q.front();
    q.pop();
    for (const auto& o : off) {
      const Index z = p[0] + o[0], y = p[1] + o[1], x = p[2] + o[2];
      if (!allowed.dims().contains(z, y, x) || !allowed(z, y, x) || out(z, y, x)) continue;
      out.set(z, y, x, true);
      q.push({z, y, x});
    }
  }
  return out;
}

bool subset(const BinaryMask& a, const BinaryMask& b) {
  for (Index i = 0; i < a.size(); ++i)
    if (a.at(i) && !b.at(i)) return false;
  return true;
}

}  // namespace

TEST_SUITE("baselines") {

TEST_CASE("otsu on a two-valued volume") {
  Volume v(Dims{4, 4, 4}, Spacing(), 10.0f);
  for (Index i = 0; i < 20; ++i) v.data()[i * 3] = 100.0f;
  const double t = otsu_threshold(v);
  CHECK(t > 10.0);
  CHECK(t < 100.0);
  BinaryMask m = apply_threshold(v, t);
  for (Index i = 0; i < v.size(); ++i) CHECK(m.at(i) == (v.data()[i] == 100.0f));
  CHECK_THROWS_AS(otsu_threshold(Volume(Dims{2, 2, 2}, Spacing(), 3.0f)), DegenerateInputError);
}

TEST_CASE("otsu equals exhaustive between-class variance maximization") {
  Rng rng(1);
  for (int t = 0; t < 30; ++t) {
    Volume v(Dims{6, 7, 8}, Spacing());
    const double split = uniform01(rng);
    for (Index i = 0; i < v.size(); ++i)
      v.data()[i] = static_cast<float>(uniform01(rng) < split ? normal01(rng) * 5 : 40 + normal01(rng) * 8);
    for (int bins : {2, 16, 256}) CHECK(otsu_threshold(v, bins) == brute_force_otsu(v, bins));
  }
  for (const auto& c : make_dataset(4, PhantomSpec{}, 31)) CHECK(otsu_threshold(c.image) == brute_force_otsu(c.image, 256));
}

TEST_CASE("threshold application") {
  Rng rng(2);
  Volume v(Dims{5, 5, 5}, Spacing());
  for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(normal01(rng));
  CHECK(apply_threshold(v, v.data().minCoeff() - 1.0).count() == v.size());
  CHECK(apply_threshold(v, v.data().maxCoeff() + 1.0).count() == 0);
  CHECK(apply_threshold(v, v.data().maxCoeff()).count() == 0);
  for (double t1 = -2; t1 < 2; t1 += 0.25) CHECK(subset(apply_threshold(v, t1 + 0.25), apply_threshold(v, t1)));
}

TEST_CASE("otsu dice on default phantoms stays in band") {
  auto cases = make_dataset(20, PhantomSpec{}, 5150);
  for (const auto& c : cases) {
    const double d = overlap_metrics(apply_threshold(c.image, otsu_threshold(c.image)), c.mask).dice;
    CHECK(d >= 0.4);
    CHECK(d <= 0.95);
  }
}

TEST_CASE("neighborhoods") {
  CHECK(neighbor_offsets(Neighborhood::faces6).size() == 6);
  CHECK(neighbor_offsets(Neighborhood::edges18).size() == 18);
  CHECK(neighbor_offsets(Neighborhood::full26).size() == 26);
  CHECK(parse_neighborhood("6") == Neighborhood::faces6);
  CHECK(parse_neighborhood("full26") == Neighborhood::full26);
  CHECK_THROWS_AS(parse_neighborhood("8"), ParameterError);
}

TEST_CASE("region growing on a constant volume fills the grid") {
  Volume v(Dims{5, 6, 7}, Spacing(), 42.0f);
  RegionGrowConfig cfg;
  cfg.seeds = {{2, 3, 4}};
  CHECK(confidence_region_grow(v, cfg).count() == v.size());
}

TEST_CASE("region growing returns the seeded bright component") {
  Rng rng(3);
  Volume v(Dims{12, 12, 12}, Spacing(), 10.0f);
  BinaryMask bright(v.dims(), v.spacing());
  auto box = [&](Index z0, Index z1, Index y0, Index y1, Index x0, Index x1) {
    for (Index z = z0; z < z1; ++z)
      for (Index y = y0; y < y1; ++y)
        for (Index x = x0; x < x1; ++x) bright.set(z, y, x, true);
  };
  box(1, 6, 1, 6, 1, 11);
  box(3, 4, 3, 4, 1, 11);
  box(8, 11, 2, 10, 2, 10);  // separate component
  box(5, 8, 8, 9, 8, 9);     // diagonal contact only: not 6-connected to the slab above
  for (Index i = 0; i < v.size(); ++i)
    if (bright.at(i)) v.data()[i] = uniform01(rng) < 0.5 ? 99.0f : 101.0f;
  RegionGrowConfig cfg;
  cfg.seeds = {{3, 3, 5}};
  BinaryMask got = confidence_region_grow(v, cfg);
  CHECK(got == flood(bright, cfg.seeds[0]));
  CHECK(count_components(got, Neighborhood::faces6) == 1);
}

TEST_CASE("region growing on phantoms: connected, seeded, monotone in k") {
  auto cases = make_dataset(3, PhantomSpec{}, 77);
  for (const auto& c : cases) {
    RegionGrowConfig cfg;
    cfg.seeds = {c.seed_voxel};
    cfg.multiplier = 2.0;
    cfg.iterations = 2;
    BinaryMask r = confidence_region_grow(c.image, cfg);
    CHECK(r(c.seed_voxel[0], c.seed_voxel[1], c.seed_voxel[2]));
    CHECK(count_components(r, Neighborhood::faces6) == 1);

    // One round: every multiplier starts from the same seed statistics, so the
    // accepted sets nest.
    cfg.iterations = 1;
    BinaryMask prev(r.dims(), r.spacing());
    for (double k : {1.0, 1.5, 2.0, 2.5, 3.0}) {
      cfg.multiplier = k;
      BinaryMask m = confidence_region_grow(c.image, cfg);
      CHECK(subset(prev, m));
      prev = m;
    }
  }
}

TEST_CASE("region growing configuration errors") {
  Volume v(Dims{4, 4, 4}, Spacing(), 1.0f);
  RegionGrowConfig cfg;
  CHECK_THROWS_AS(confidence_region_grow(v, cfg), ParameterError);
  cfg.seeds = {{4, 0, 0}};
  CHECK_THROWS_AS(confidence_region_grow(v, cfg), ParameterError);
  cfg.seeds = {{0, 0, 0}};
  cfg.multiplier = 0;
  CHECK_THROWS_AS(confidence_region_grow(v, cfg), ParameterError);
  cfg.multiplier = 2;
  cfg.iterations = 0;
  CHECK_THROWS_AS(confidence_region_grow(v, cfg), ParameterError);
}

}  // TEST_SUITE
