#include "vesselseg/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "vesselseg/losses.hpp"
#include "vesselseg/rng.hpp"

namespace vesselseg {

namespace {

using T = Tensor<double>;
using LossFn = std::function<T(Tape<double>&, const std::vector<T>&)>;

T random_tensor(Rng& rng, const Shape& s, double lo = -1.0, double hi = 1.0) {
  T t(s);
  for (Index i = 0; i < t.numel(); ++i) t.value()[i] = lo + (hi - lo) * uniform01(rng);
  return t;
}

// Distinct values (i + 0.5) / n in random order: every pairwise gap is at
// least 1/n, far above the finite-difference step, so pooling selections and
// ReLU kinks never flip during a probe.
T distinct_tensor(Rng& rng, const Shape& s, double lo = 0.0, double hi = 1.0) {
  const Index n = s.numel();
  std::vector<Index> order(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  for (Index i = n - 1; i > 0; --i)
    std::swap(order[static_cast<size_t>(i)], order[uniform_index(rng, static_cast<std::uint64_t>(i + 1))]);
  T t(s);
  for (Index i = 0; i < n; ++i)
    t.value()[i] = lo + (hi - lo) * (static_cast<double>(order[static_cast<size_t>(i)]) + 0.5) / static_cast<double>(n);
  return t;
}

T binary_tensor(Rng& rng, const Shape& s, double p = 0.4) {
  T t(s);
  for (Index i = 0; i < t.numel(); ++i) t.value()[i] = uniform01(rng) < p ? 1.0 : 0.0;
  return t;
}

// Projects a tensor output onto fixed random weights so every output element
// contributes to the scalar being differentiated.
T project(Tape<double>& tape, const T& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, "gradcheck.projection");
  return sum(tape, mul(tape, y, random_tensor(rng, y.shape())));
}

GradcheckEntry primitive(std::string name, std::function<double(std::uint64_t)> run) {
  return {std::move(name), 1e-5, std::move(run)};
}

}  // namespace

double gradcheck_relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
  return std::abs(analytic - numeric) / denom;
}

double check_gradients_at(std::vector<T> inputs, const LossFn& loss, const std::vector<std::pair<size_t, Index>>& probes,
                          double step) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<double> tape;
    T l = loss(tape, inputs);
    tape.backward(l);
  }
  auto eval = [&] {
    Tape<double> off(false);
    return loss(off, inputs).item();
  };
  double worst = 0.0;
  for (const auto& [which, i] : probes) {
    T& t = inputs[which];
    const double saved = t.value()[i];
    t.value()[i] = saved + step;
    const double up = eval();
    t.value()[i] = saved - step;
    const double down = eval();
    t.value()[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    worst = std::max(worst, gradcheck_relative_error(t.grad()[i], numeric));
  }
  return worst;
}

double check_gradients(std::vector<T> inputs, const LossFn& loss, double step) {
  std::vector<std::pair<size_t, Index>> probes;
  for (size_t k = 0; k < inputs.size(); ++k)
    for (Index i = 0; i < inputs[k].numel(); ++i) probes.emplace_back(k, i);
  return check_gradients_at(std::move(inputs), loss, probes, step);
}

bool GradcheckReport::passed() const {
  return std::all_of(results.begin(), results.end(), [](const GradcheckResult& r) { return r.passed(); });
}

void GradcheckReport::print(std::ostream& os) const {
  for (const auto& r : results) {
    os << std::left << std::setw(26) << r.name << " max_rel_err=" << std::scientific << std::setprecision(3)
       << r.max_rel_error << " tol=" << r.tolerance << " seeds=" << std::defaultfloat << r.seeds << "  "
       << (r.passed() ? "PASS" : "FAIL") << "\n";
  }
  os << "gradcheck " << (passed() ? "PASSED" : "FAILED") << " in " << std::fixed << std::setprecision(2) << seconds
     << " s\n"
     << std::defaultfloat;
}

GradcheckReport run_gradcheck(const std::vector<GradcheckEntry>& entries, int seeds) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckReport report;
  for (const auto& e : entries) {
    GradcheckResult r{e.name, 0.0, e.tolerance, seeds};
    for (int s = 0; s < seeds; ++s) {
      const double err = e.run(substream_seed(0x6d5a, e.name, static_cast<std::uint64_t>(s)));
      r.max_rel_error = std::isnan(err) ? INFINITY : std::max(r.max_rel_error, err);
    }
    report.results.push_back(r);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::vector<GradcheckEntry> default_gradcheck_entries() {
  std::vector<GradcheckEntry> e;

  e.push_back(primitive("conv3d", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "conv3d");
    const int stride = 1 + static_cast<int>(uniform_index(rng, 2));
    std::vector<T> in{random_tensor(rng, Shape(2, 2, 4, 4, 4)), random_tensor(rng, Shape(3, 2, 3, 3, 3)),
                      random_tensor(rng, Shape(1, 3, 1, 1, 1))};
    return check_gradients(in, [&](Tape<double>& t, const std::vector<T>& v) {
      return project(t, conv3d(t, v[0], v[1], v[2], stride, 1), seed);
    });
  }));

  e.push_back(primitive("conv3d_transpose", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "conv3d_transpose");
    std::vector<T> in{random_tensor(rng, Shape(2, 3, 3, 3, 3)), random_tensor(rng, Shape(3, 2, 2, 2, 2))};
    return check_gradients(in, [&](Tape<double>& t, const std::vector<T>& v) {
      return project(t, conv3d_transpose(t, v[0], v[1], 2), seed);
    });
  }));

  e.push_back(primitive("instance_norm", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "instance_norm");
    std::vector<T> in{random_tensor(rng, Shape(2, 2, 3, 3, 3)), random_tensor(rng, Shape(1, 2, 1, 1, 1), 0.5, 1.5),
                      random_tensor(rng, Shape(1, 2, 1, 1, 1))};
    return check_gradients(in, [&](Tape<double>& t, const std::vector<T>& v) {
      return project(t, instance_norm(t, v[0], v[1], v[2], 1e-5), seed);
    });
  }));

  e.push_back(primitive("leaky_relu", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "leaky_relu");
    T x = random_tensor(rng, Shape(1, 2, 3, 3, 3));
    for (Index i = 0; i < x.numel(); ++i)
      while (std::abs(x.value()[i]) < 1e-3) x.value()[i] = uniform01(rng) * 2 - 1;
    // Linear on both sides of the excluded band, so a wider step only cuts roundoff.
    return check_gradients(
        {x}, [&](Tape<double>& t, const std::vector<T>& v) { return project(t, leaky_relu(t, v[0], 0.01), seed); }, 9e-4);
  }));

  e.push_back(primitive("sigmoid", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "sigmoid");
    return check_gradients({random_tensor(rng, Shape(1, 2, 3, 3, 3), -4, 4)},
                           [&](Tape<double>& t, const std::vector<T>& v) { return project(t, sigmoid(t, v[0]), seed); });
  }));

  e.push_back(primitive("concat_channels", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "concat_channels");
    std::vector<T> in{random_tensor(rng, Shape(2, 1, 2, 3, 2)), random_tensor(rng, Shape(2, 2, 2, 3, 2))};
    return check_gradients(in, [&](Tape<double>& t, const std::vector<T>& v) {
      return project(t, concat_channels(t, v[0], v[1]), seed);
    });
  }));

  e.push_back(primitive("maxpool3", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "maxpool3");
    return check_gradients({distinct_tensor(rng, Shape(1, 2, 4, 4, 4))}, [&](Tape<double>& t, const std::vector<T>& v) {
      return project(t, maxpool3(t, v[0]), seed);
    });
  }));

  e.push_back(primitive("minpool3", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "minpool3");
    return check_gradients({distinct_tensor(rng, Shape(1, 2, 4, 4, 4))}, [&](Tape<double>& t, const std::vector<T>& v) {
      return project(t, minpool3(t, v[0]), seed);
    });
  }));

  e.push_back(primitive("add", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "add");
    std::vector<T> in{random_tensor(rng, Shape(1, 2, 2, 2, 3)), random_tensor(rng, Shape(1, 2, 2, 2, 3))};
    return check_gradients(in, [&](Tape<double>& t, const std::vector<T>& v) { return project(t, add(t, v[0], v[1]), seed); });
  }));

  e.push_back(primitive("sub", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "sub");
    std::vector<T> in{random_tensor(rng, Shape(1, 2, 2, 2, 3)), random_tensor(rng, Shape(1, 2, 2, 2, 3))};
    return check_gradients(in, [&](Tape<double>& t, const std::vector<T>& v) { return project(t, sub(t, v[0], v[1]), seed); });
  }));

  e.push_back(primitive("mul", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "mul");
    std::vector<T> in{random_tensor(rng, Shape(1, 2, 2, 2, 3)), random_tensor(rng, Shape(1, 2, 2, 2, 3))};
    return check_gradients(in, [&](Tape<double>& t, const std::vector<T>& v) { return project(t, mul(t, v[0], v[1]), seed); });
  }));

  e.push_back(primitive("sum", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "sum");
    return check_gradients({random_tensor(rng, Shape(1, 3, 2, 2, 2))}, [&](Tape<double>& t, const std::vector<T>& v) {
      return mul(t, sum(t, v[0]), sum(t, v[0]));
    });
  }));

  e.push_back(primitive("linear_combination", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "linear_combination");
    const double a = uniform01(rng) * 2 - 1, b = uniform01(rng) * 2 - 1;
    std::vector<T> in{random_tensor(rng, Shape(1, 2, 2, 2, 2)), random_tensor(rng, Shape(1, 2, 2, 2, 2))};
    return check_gradients(in, [&](Tape<double>& t, const std::vector<T>& v) {
      return project(t, linear_combination<double>(t, {{a, v[0]}, {b, v[1]}}), seed);
    });
  }));

  e.push_back(primitive("binary_cross_entropy", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "binary_cross_entropy");
    std::vector<T> in{random_tensor(rng, Shape(1, 1, 3, 3, 3), 0.05, 0.95), binary_tensor(rng, Shape(1, 1, 3, 3, 3), 0.5)};
    return check_gradients(in, [](Tape<double>& t, const std::vector<T>& v) { return binary_cross_entropy(t, v[0], v[1]); });
  }));

  e.push_back(primitive("soft_dice", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "soft_dice");
    std::vector<T> in{random_tensor(rng, Shape(1, 1, 3, 3, 3), 0, 1), random_tensor(rng, Shape(1, 1, 3, 3, 3), 0, 1)};
    return check_gradients(in, [](Tape<double>& t, const std::vector<T>& v) { return soft_dice(t, v[0], v[1], 1.0); });
  }));

  e.push_back(primitive("cldice", [](std::uint64_t seed) {
    Rng rng = make_rng(seed, "cldice");
    std::vector<T> in;
    for (int i = 0; i < 4; ++i) in.push_back(random_tensor(rng, Shape(1, 1, 3, 3, 3), 0, 1));
    return check_gradients(in, [](Tape<double>& t, const std::vector<T>& v) {
      return cldice_from_skeletons(t, v[0], v[1], v[2], v[3], 1.0);
    });
  }));

  // Composite objectives, differentiated end to end through the soft skeleton.
  e.push_back({"loss.soft_cldice", 1e-4, [](std::uint64_t seed) {
                 Rng rng = make_rng(seed, "loss.soft_cldice");
                 const Shape s(1, 1, 6, 6, 6);
                 const T target = binary_tensor(rng, s);
                 return check_gradients({distinct_tensor(rng, s, 0.02, 0.98)}, [&](Tape<double>& t, const std::vector<T>& v) {
                   return soft_cldice_loss(t, v[0], target, 3, 1.0);
                 });
               }});

  auto combo_entry = [](bool use_cldice) {
    return [use_cldice](std::uint64_t seed) {
      Rng rng = make_rng(seed, use_cldice ? "loss.combo_cldice" : "loss.combo");
      LossConfig cfg;
      cfg.skeleton_iterations = 3;
      cfg.deep_supervision_weights = LossConfig::halving_weights(3);
      std::vector<T> heads, targets;
      for (Index e = 8; e >= 2; e /= 2) {
        heads.push_back(distinct_tensor(rng, Shape(1, 1, e, e, e), 0.02, 0.98));
        targets.push_back(binary_tensor(rng, Shape(1, 1, e, e, e)));
      }
      return check_gradients(heads, [&](Tape<double>& t, const std::vector<T>& v) {
        UNetOutputs<double> out{v[0], {v[1], v[2]}};
        return combo_loss(t, out, targets, cfg, use_cldice);
      });
    };
  };
  e.push_back({"loss.combo", 1e-4, combo_entry(false)});
  e.push_back({"loss.combo_cldice", 1e-4, combo_entry(true)});
  return e;
}

}  // namespace vesselseg
