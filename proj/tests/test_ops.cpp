#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "vesselseg/ops.hpp"
#include "vesselseg/parallel.hpp"

using namespace vesselseg;
using testing::random_tensor;

namespace {

// Direct six-fold loop over output voxels and kernel taps.
template <typename S>
std::vector<double> naive_conv3d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int s, int pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const Index k = ws.d();
  auto out_len = [&](Index n) { return (n + 2 * pad - k) / s + 1; };
  const Index od = out_len(xs.d()), oh = out_len(xs.h()), ow = out_len(xs.w());
  std::vector<double> y(static_cast<size_t>(xs.n() * ws.n() * od * oh * ow), 0.0);
  auto xat = [&](Index n, Index c, Index z, Index yy, Index xx) -> double {
    if (z < 0 || yy < 0 || xx < 0 || z >= xs.d() || yy >= xs.h() || xx >= xs.w()) return 0.0;
    return x.value()[(((n * xs.c() + c) * xs.d() + z) * xs.h() + yy) * xs.w() + xx];
  };
  size_t o = 0;
  for (Index n = 0; n < xs.n(); ++n)
    for (Index co = 0; co < ws.n(); ++co)
      for (Index z = 0; z < od; ++z)
        for (Index yy = 0; yy < oh; ++yy)
          for (Index xx = 0; xx < ow; ++xx, ++o) {
            double acc = b.defined() ? static_cast<double>(b.value()[co]) : 0.0;
            for (Index ci = 0; ci < xs.c(); ++ci)
              for (Index a = 0; a < k; ++a)
                for (Index bb = 0; bb < k; ++bb)
                  for (Index c = 0; c < k; ++c)
                    acc += static_cast<double>(w.value()[(((co * ws.c() + ci) * k + a) * k + bb) * k + c]) *
                           xat(n, ci, z * s - pad + a, yy * s - pad + bb, xx * s - pad + c);
            y[o] = acc;
          }
  return y;
}

template <typename S>
double dot(const Tensor<S>& a, const Tensor<S>& b) {
  return (a.value().template cast<double>() * b.value().template cast<double>()).sum();
}

}  // namespace

TEST_SUITE("ops") {

TEST_CASE("conv3d scalar affine and identity kernel") {
  Tape<double> tape(false);
  Tensor<double> x(Shape(1, 1, 1, 1, 1), Tensor<double>::Array::Constant(1, 2.0));
  Tensor<double> w(Shape(1, 1, 1, 1, 1), Tensor<double>::Array::Constant(1, 3.0));
  Tensor<double> b(Shape(1, 1, 1, 1, 1), Tensor<double>::Array::Constant(1, 1.0));
  CHECK(conv3d(tape, x, w, b, 1, 0).item() == 7.0);

  Rng rng(1);
  auto v = random_tensor<double>(rng, Shape(2, 1, 5, 4, 6));
  Tensor<double> id(Shape(1, 1, 3, 3, 3));
  id.value()[13] = 1.0;
  auto y = conv3d(tape, v, id, Tensor<double>(), 1, 1);
  CHECK(y.shape() == v.shape());
  CHECK((y.value() == v.value()).all());

  CHECK_THROWS_AS(conv3d(tape, v, random_tensor<double>(rng, Shape(1, 2, 3, 3, 3)), Tensor<double>(), 1, 1),
                  ParameterError);
}

TEST_CASE("conv3d matches a naive loop") {
  Tape<float> tape(false);
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(100 + static_cast<unsigned>(seed));
    auto x = random_tensor<float>(rng, Shape(1, 2, 4, 4, 4));
    auto w = random_tensor<float>(rng, Shape(3, 2, 3, 3, 3));
    auto b = random_tensor<float>(rng, Shape(1, 3, 1, 1, 1));
    for (int s : {1, 2}) {
      auto y = conv3d(tape, x, w, b, s, 1);
      auto ref = naive_conv3d(x, w, b, s, 1);
      REQUIRE(static_cast<size_t>(y.numel()) == ref.size());
      CHECK(y.shape() == Shape(1, 3, s == 1 ? 4 : 2, s == 1 ? 4 : 2, s == 1 ? 4 : 2));
      double err = 0;
      for (size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(y.value()[static_cast<Index>(i)] - ref[i]));
      CHECK(err < 1e-5);
    }
  }
  // Wider channels and odd extents exercise the blocked kernel paths.
  Rng rng(7);
  auto x = random_tensor<float>(rng, Shape(2, 5, 7, 9, 6));
  auto w = random_tensor<float>(rng, Shape(4, 5, 3, 3, 3));
  auto b = random_tensor<float>(rng, Shape(1, 4, 1, 1, 1));
  auto y = conv3d(tape, x, w, b, 2, 1);
  auto ref = naive_conv3d(x, w, b, 2, 1);
  double err = 0;
  for (size_t i = 0; i < ref.size(); ++i) err = std::max(err, std::abs(y.value()[static_cast<Index>(i)] - ref[i]));
  CHECK(err < 1e-5);
}

TEST_CASE("conv3d transpose examples") {
  Tape<double> tape(false);
  Tensor<double> x(Shape(1, 1, 1, 1, 1), Tensor<double>::Array::Constant(1, -1.5));
  Tensor<double> ones(Shape(1, 1, 2, 2, 2), Tensor<double>::Array::Ones(8));
  auto y = conv3d_transpose(tape, x, ones, 2);
  CHECK(y.shape() == Shape(1, 1, 2, 2, 2));
  CHECK((y.value() == -1.5).all());

  Rng rng(3);
  auto w = random_tensor<double>(rng, Shape(3, 2, 2, 2, 2));
  auto z = conv3d_transpose(tape, Tensor<double>(Shape(1, 3, 3, 3, 3)), w, 2);
  CHECK(z.shape() == Shape(1, 2, 6, 6, 6));
  CHECK((z.value() == 0.0).all());
}

TEST_CASE("conv3d and its transpose are adjoint") {
  Tape<double> tape(false);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(substream_seed(11, "adjoint", seed));
    for (Index n : {4, 6}) {
      auto x = random_tensor<double>(rng, Shape(1, 2, n, n, n));
      auto w = random_tensor<double>(rng, Shape(3, 2, 2, 2, 2));
      auto y = random_tensor<double>(rng, Shape(1, 3, n / 2, n / 2, n / 2));
      const double lhs = dot(conv3d(tape, x, w, Tensor<double>(), 2, 0), y);
      const double rhs = dot(x, conv3d_transpose(tape, y, w, 2));
      CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max(1.0, std::abs(lhs)));
    }
  }
}

TEST_CASE("instance norm examples") {
  Tape<double> tape(false);
  Tensor<double> x(Shape(1, 1, 1, 1, 2));
  x.value() << 0.0, 2.0;
  Tensor<double> g(Shape(1, 1, 1, 1, 1), Tensor<double>::Array::Ones(1));
  Tensor<double> b(Shape(1, 1, 1, 1, 1));
  auto y = instance_norm(tape, x, g, b, 0.0);
  CHECK(y.value()[0] == doctest::Approx(-1.0));
  CHECK(y.value()[1] == doctest::Approx(1.0));

  Rng rng(4);
  auto r = random_tensor<double>(rng, Shape(2, 3, 3, 3, 3));
  Tensor<double> g0(Shape(1, 3, 1, 1, 1));
  Tensor<double> beta(Shape(1, 3, 1, 1, 1));
  beta.value() << 0.5, -1.0, 2.0;
  auto z = instance_norm(tape, r, g0, beta, 1e-5);
  for (Index n = 0; n < 2; ++n)
    for (Index c = 0; c < 3; ++c) CHECK((z.value().segment((n * 3 + c) * 27, 27) == beta.value()[c]).all());
}

TEST_CASE("elementwise and structural examples") {
  Tape<double> tape(false);
  Tensor<double> v(Shape(1, 1, 1, 1, 3));
  v.value() << 5.0, -2.0, 0.0;
  auto y = leaky_relu(tape, v, 0.01);
  CHECK(y.value()[0] == 5.0);
  CHECK(y.value()[1] == doctest::Approx(-0.02));
  CHECK(y.value()[2] == 0.0);

  CHECK(sigmoid(tape, Tensor<double>::scalar(0.0)).item() == 0.5);
  auto big = sigmoid(tape, Tensor<double>::scalar(-800.0)).item();
  CHECK(std::isfinite(big));

  Tensor<double> a(Shape(1, 8, 4, 4, 4)), b(Shape(1, 16, 4, 4, 4));
  auto c = concat_channels(tape, a, b);
  CHECK(c.shape() == Shape(1, 24, 4, 4, 4));
  CHECK_THROWS_AS(concat_channels(tape, a, Tensor<double>(Shape(1, 2, 4, 4, 2))), ParameterError);

  Tensor<double> hot(Shape(1, 1, 5, 5, 5));
  hot.value()[(2 * 5 + 2) * 5 + 2] = 1.0;
  auto d = maxpool3(tape, hot);
  for (Index z = 0; z < 5; ++z)
    for (Index yy = 0; yy < 5; ++yy)
      for (Index x = 0; x < 5; ++x) {
        const bool inside = z >= 1 && z <= 3 && yy >= 1 && yy <= 3 && x >= 1 && x <= 3;
        CHECK(d.value()[(z * 5 + yy) * 5 + x] == (inside ? 1.0 : 0.0));
      }
}

TEST_CASE("pooling against a brute-force filter") {
  Tape<double> tape(false);
  Rng rng(5);
  auto x = random_tensor<double>(rng, Shape(2, 2, 4, 5, 3));
  auto mx = maxpool3(tape, x);
  auto mn = minpool3(tape, x);
  const Shape& s = x.shape();
  for (Index sl = 0; sl < 4; ++sl)
    for (Index z = 0; z < s.d(); ++z)
      for (Index yy = 0; yy < s.h(); ++yy)
        for (Index xx = 0; xx < s.w(); ++xx) {
          double hi = -1e300, lo = 1e300;
          for (Index a = -1; a <= 1; ++a)
            for (Index b = -1; b <= 1; ++b)
              for (Index c = -1; c <= 1; ++c) {
                const Index zz = z + a, y2 = yy + b, x2 = xx + c;
                if (zz < 0 || y2 < 0 || x2 < 0 || zz >= s.d() || y2 >= s.h() || x2 >= s.w()) continue;
                const double v = x.value()[sl * s.spatial() + (zz * s.h() + y2) * s.w() + x2];
                hi = std::max(hi, v);
                lo = std::min(lo, v);
              }
          const Index i = sl * s.spatial() + (z * s.h() + yy) * s.w() + xx;
          CHECK(mx.value()[i] == hi);
          CHECK(mn.value()[i] == lo);
        }
}

TEST_CASE("pooling ties route gradient to the lowest linear index") {
  Tape<double> tape;
  Tensor<double> x(Shape(1, 1, 3, 3, 3), Tensor<double>::Array::Ones(27), true);
  auto y = maxpool3(tape, x);
  // All values tie: the window centered at c sends its gradient to its corner max(c - 1, 0).
  tape.backward(sum(tape, y));
  Tensor<double>::Array expect = Tensor<double>::Array::Zero(27);
  for (Index z = 0; z < 3; ++z)
    for (Index yy = 0; yy < 3; ++yy)
      for (Index xx = 0; xx < 3; ++xx)
        expect[(std::max<Index>(z - 1, 0) * 3 + std::max<Index>(yy - 1, 0)) * 3 + std::max<Index>(xx - 1, 0)] += 1.0;
  CHECK(expect[0] == 8.0);
  CHECK((x.grad() == expect).all());

  // minpool3(x) == -maxpool3(-x) for values and gradients.
  Rng rng(6);
  Tape<double> t1, t2;
  auto base = random_tensor<double>(rng, Shape(1, 2, 4, 4, 4));
  for (Index i = 0; i < base.numel(); i += 5) base.value()[i] = 0.25;  // force ties
  auto w = random_tensor<double>(rng, base.shape());
  Tensor<double> p = base.clone(), q = base.clone();
  p.set_requires_grad(true);
  q.set_requires_grad(true);
  auto lhs = minpool3(t1, p);
  auto neg = linear_combination<double>(t2, {{-1.0, q}});
  auto rhs = linear_combination<double>(t2, {{-1.0, maxpool3(t2, neg)}});
  CHECK((lhs.value() == rhs.value()).all());
  t1.backward(sum(t1, mul(t1, lhs, w)));
  t2.backward(sum(t2, mul(t2, rhs, w)));
  CHECK((p.grad() == q.grad()).all());
}

TEST_CASE("backward examples and contract") {
  Rng rng(8);
  {
    Tape<double> tape;
    auto x = random_tensor<double>(rng, Shape(2, 3, 2, 1, 4));
    x.set_requires_grad(true);
    tape.backward(sum(tape, x));
    CHECK((x.grad() == 1.0).all());
  }
  {
    Tape<double> tape;
    auto x = random_tensor<double>(rng, Shape(1, 2, 3, 3, 3));
    x.set_requires_grad(true);
    auto loss = linear_combination<double>(tape, {{0.5, sum(tape, mul(tape, x, x))}});
    tape.backward(loss);
    CHECK(((x.grad() - x.value()).abs() < 1e-15).all());
  }
  {
    Tape<double> tape;
    auto x = random_tensor<double>(rng, Shape(1, 1, 2, 2, 2));
    auto other = random_tensor<double>(rng, Shape(1, 1, 2, 2, 2));
    x.set_requires_grad(true);
    other.set_requires_grad(true);
    auto y = sigmoid(tape, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
    Tape<double> t2;
    t2.backward(sum(t2, sigmoid(t2, x)));
    CHECK((other.grad() == 0.0).all());
  }
}

TEST_CASE("backward leaves forward activations untouched") {
  Rng rng(9);
  Tape<double> tape;
  auto x = random_tensor<double>(rng, Shape(1, 2, 4, 4, 4));
  auto w = random_tensor<double>(rng, Shape(3, 2, 3, 3, 3));
  auto b = random_tensor<double>(rng, Shape(1, 3, 1, 1, 1));
  Tensor<double> g(Shape(1, 3, 1, 1, 1), Tensor<double>::Array::Ones(3), true);
  Tensor<double> be(Shape(1, 3, 1, 1, 1), true);
  w.set_requires_grad(true);
  auto h1 = conv3d(tape, x, w, b, 1, 1);
  auto h2 = instance_norm(tape, h1, g, be, 1e-5);
  auto h3 = leaky_relu(tape, h2, 0.01);
  auto h4 = maxpool3(tape, h3);
  auto h5 = sigmoid(tape, h4);
  std::vector<Tensor<double>> acts{x, h1, h2, h3, h4, h5};
  std::vector<Tensor<double>::Array> before;
  for (auto& a : acts) before.push_back(a.value());
  tape.backward(sum(tape, h5));
  for (size_t i = 0; i < acts.size(); ++i) CHECK((acts[i].value() == before[i]).all());
  CHECK(tape.size() == 0);
}

TEST_CASE("forward and backward are independent of thread count") {
  auto run = [](int threads) {
    set_num_threads(threads);
    Rng rng(10);
    Tape<float> tape;
    auto x = random_tensor<float>(rng, Shape(2, 4, 8, 8, 8));
    auto w = random_tensor<float>(rng, Shape(6, 4, 3, 3, 3));
    auto wt = random_tensor<float>(rng, Shape(6, 2, 2, 2, 2));
    w.set_requires_grad(true);
    wt.set_requires_grad(true);
    auto h = conv3d(tape, x, w, Tensor<float>(), 2, 1);
    auto u = conv3d_transpose(tape, h, wt, 2);
    auto p = minpool3(tape, maxpool3(tape, u));
    auto y = sum(tape, mul(tape, p, p));
    tape.backward(y);
    set_num_threads(1);
    std::vector<float> out{y.item()};
    for (Index i = 0; i < w.numel(); ++i) out.push_back(w.grad()[i]);
    for (Index i = 0; i < wt.numel(); ++i) out.push_back(wt.grad()[i]);
    return out;
  };
  auto a = run(1), b = run(1), c = run(3);
  CHECK(a == b);
  REQUIRE(a.size() == c.size());
  for (size_t i = 0; i < a.size(); ++i)
    CHECK(std::abs(a[i] - c[i]) <= 1e-6f * std::max(1.0f, std::abs(a[i])));
}

}  // TEST_SUITE
