#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "vesselseg/inference.hpp"
#include "vesselseg/parallel.hpp"

using namespace vesselseg;

namespace {

Volume random_volume(Rng& rng, const Dims& d) {
  Volume v(d, Spacing());
  for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(normal01(rng));
  return v;
}

PatchPredictor constant_predictor(float c) {
  return [c](const Eigen::ArrayXf& in) { return Eigen::ArrayXf::Constant(in.size(), c); };
}

// Depends only on each voxel's own value.
PatchPredictor pointwise() {
  return [](const Eigen::ArrayXf& in) { return Eigen::ArrayXf(1.0f / (1.0f + (-in).exp())); };
}

}  // namespace

TEST_SUITE("inference") {

TEST_CASE("gaussian window") {
  const Index p = 5;
  auto w = gaussian_window(p, 1.0);
  CHECK(w[(2 * p + 2) * p + 2] == 1.0);
  CHECK(w.maxCoeff() == 1.0);
  for (Index z = 0; z < p; ++z)
    for (Index y = 0; y < p; ++y)
      for (Index x = 0; x < p; ++x) {
        const double v = w[(z * p + y) * p + x];
        CHECK(v == w[((p - 1 - z) * p + y) * p + x]);
        CHECK(v == w[(z * p + (p - 1 - y)) * p + (p - 1 - x)]);
        CHECK(v == doctest::Approx(w[(x * p + z) * p + y]).epsilon(1e-15));
      }
  // Even size: center at 1.5, so the inner 2^3 block holds exp(-3 * 0.25 / 2) and the corner exp(-3 * 2.25 / 2).
  auto e = gaussian_window(4, 1.0);
  CHECK(e[(1 * 4 + 1) * 4 + 1] == doctest::Approx(std::exp(-0.375)).epsilon(1e-15));
  CHECK(e[0] / e[(1 * 4 + 1) * 4 + 1] == doctest::Approx(std::exp(-3.0)).epsilon(1e-12));
  CHECK(gaussian_window(9, 0.1).minCoeff() == 1e-8);
  CHECK_THROWS_AS(gaussian_window(4, 0.0), ParameterError);
}

TEST_CASE("constant predictor is reproduced on every grid") {
  Rng rng(1);
  for (int t = 0; t < 60; ++t) {
    const Index p = Index{4} << (t % 3);
    const Dims d{1 + static_cast<Index>(uniform_index(rng, 40)), 1 + static_cast<Index>(uniform_index(rng, 40)),
                 1 + static_cast<Index>(uniform_index(rng, 40))};
    StitchConfig cfg;
    cfg.patch_size = p;
    Volume out = sliding_window_predict(random_volume(rng, d), constant_predictor(0.7f), cfg);
    CHECK(out.dims() == d);
    CHECK((out.data() - 0.7f).abs().maxCoeff() <= 1e-6f);
  }
}

TEST_CASE("a single patch equals one forward call") {
  Rng rng(2);
  Volume v = random_volume(rng, Dims{8, 8, 8});
  StitchConfig cfg;
  cfg.patch_size = 8;
  Eigen::ArrayXf direct = pointwise()(v.data());
  Volume out = sliding_window_predict(v, [](const Eigen::ArrayXf& in) { return Eigen::ArrayXf(in * 3.0f - 1.0f); }, cfg);
  CHECK((out.data() == v.data() * 3.0f - 1.0f).all());
  CHECK((sliding_window_predict(v, pointwise(), cfg).data() == direct).all());
}

TEST_CASE("two overlapping patches blend with the window weights") {
  // Patches at W origins 0 and 2; each predicts the W coordinate of its first voxel.
  Volume v(Dims{4, 4, 6}, Spacing());
  for (Index z = 0; z < 4; ++z)
    for (Index y = 0; y < 4; ++y)
      for (Index x = 0; x < 6; ++x) v(z, y, x) = static_cast<float>(x);
  StitchConfig cfg;
  cfg.patch_size = 4;
  const double sigma = 0.125 * 4;
  Volume out = sliding_window_predict(
      v, [](const Eigen::ArrayXf& in) { return Eigen::ArrayXf::Constant(in.size(), in[0]); }, cfg);
  auto g = [&](double i) { return std::exp(-(i - 1.5) * (i - 1.5) / (2 * sigma * sigma)); };
  for (Index x = 0; x < 6; ++x) {
    double expect;
    if (x < 2) expect = 0;
    else if (x >= 4) expect = 2;
    else expect = (g(static_cast<double>(x)) * 0 + g(static_cast<double>(x - 2)) * 2) / (g(static_cast<double>(x)) + g(static_cast<double>(x - 2)));
    CHECK(out(1, 2, x) == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("pointwise predictors are translation consistent") {
  Rng rng(3);
  Volume v = random_volume(rng, Dims{21, 18, 27});
  StitchConfig cfg;
  cfg.patch_size = 8;
  Volume full = sliding_window_predict(v, pointwise(), cfg);
  Volume shifted = crop(v, BBox{{3, 1, 5}, {18, 18, 27}});
  Volume part = sliding_window_predict(shifted, pointwise(), cfg);
  for (Index z = 0; z < 15; ++z)
    for (Index y = 0; y < 17; ++y)
      for (Index x = 0; x < 22; ++x) CHECK(std::abs(part(z, y, x) - full(z + 3, y + 1, x + 5)) <= 1e-6f);
}

TEST_CASE("output is independent of the thread count") {
  Rng rng(4);
  Volume v = random_volume(rng, Dims{20, 13, 17});
  StitchConfig cfg;
  cfg.patch_size = 8;
  auto mixing = [](const Eigen::ArrayXf& in) {
    return Eigen::ArrayXf((in + in.reverse() * 0.5f).tanh());
  };
  const int before = num_threads();
  set_num_threads(1);
  Volume a = sliding_window_predict(v, mixing, cfg);
  set_num_threads(3);
  Volume b = sliding_window_predict(v, mixing, cfg);
  set_num_threads(before);
  CHECK((a.data() == b.data()).all());
}

TEST_CASE("binarization and config") {
  Volume s(Dims{1, 1, 4}, Spacing());
  s.data() << 0.2f, 0.5f, 0.50001f, 0.9f;
  BinaryMask m = binarize(s);
  CHECK_FALSE(m.at(0));
  CHECK_FALSE(m.at(1));
  CHECK(m.at(2));
  CHECK(m.at(3));
  CHECK(binarize(s, 0.1).count() == 4);
  StitchConfig c;
  c.overlap_fraction = 1.0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = StitchConfig{};
  nlohmann::json j = c;
  StitchConfig back;
  back.patch_size = 3;
  j.get_to(back);
  CHECK(back == c);
}

}  // TEST_SUITE
