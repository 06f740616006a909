#include "vesselseg/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "vesselseg/error.hpp"

namespace vesselseg {

double otsu_threshold(const Volume& v, int bins) {
  if (bins < 2) throw ParameterError("otsu needs at least 2 bins");
  if (v.size() == 0) throw DegenerateInputError("otsu on an empty volume");
  const double lo = v.data().minCoeff(), hi = v.data().maxCoeff();
  if (!(hi > lo)) throw DegenerateInputError("otsu on a constant volume");
  const double width = (hi - lo) / bins;
  std::vector<std::int64_t> hist(static_cast<size_t>(bins), 0);
  for (Index i = 0; i < v.size(); ++i) {
    const auto b = static_cast<int>((v.data()[i] - lo) / width);
    ++hist[static_cast<size_t>(std::clamp(b, 0, bins - 1))];
  }

  // Class statistics in bin-index units: counts and index sums are integers,
  // so every candidate's score is computed from exact inputs.
  std::int64_t n_total = 0, s_total = 0;
  for (int b = 0; b < bins; ++b) {
    n_total += hist[static_cast<size_t>(b)];
    s_total += static_cast<std::int64_t>(b) * hist[static_cast<size_t>(b)];
  }
  std::int64_t n0 = 0, s0 = 0;
  double best = -1;
  int best_k = 1;
  for (int k = 1; k < bins; ++k) {
    n0 += hist[static_cast<size_t>(k - 1)];
    s0 += static_cast<std::int64_t>(k - 1) * hist[static_cast<size_t>(k - 1)];
    const std::int64_t n1 = n_total - n0, s1 = s_total - s0;
    if (n0 == 0 || n1 == 0) continue;
    const double w0 = static_cast<double>(n0) / static_cast<double>(n_total);
    const double w1 = static_cast<double>(n1) / static_cast<double>(n_total);
    const double d = static_cast<double>(s0) / static_cast<double>(n0) - static_cast<double>(s1) / static_cast<double>(n1);
    const double score = w0 * w1 * d * d;
    if (score > best) {
      best = score;
      best_k = k;
    }
  }
  return lo + best_k * width;
}

BinaryMask apply_threshold(const Volume& v, double t) {
  BinaryMask m(v.dims(), v.spacing());
  for (Index i = 0; i < v.size(); ++i) m.data()[static_cast<size_t>(i)] = v.data()[i] > t ? 1 : 0;
  return m;
}

Neighborhood parse_neighborhood(const std::string& s) {
  if (s == "6" || s == "faces6") return Neighborhood::faces6;
  if (s == "18" || s == "edges18") return Neighborhood::edges18;
  if (s == "26" || s == "full26") return Neighborhood::full26;
  throw ParameterError("unknown neighborhood '" + s + "' (expected 6, 18 or 26)");
}

const char* to_string(Neighborhood n) {
  switch (n) {
    case Neighborhood::faces6: return "faces6";
    case Neighborhood::edges18: return "edges18";
    case Neighborhood::full26: return "full26";
  }
  return "?";
}

std::vector<std::array<int, 3>> neighbor_offsets(Neighborhood n) {
  const int max_l1 = n == Neighborhood::faces6 ? 1 : (n == Neighborhood::edges18 ? 2 : 3);
  std::vector<std::array<int, 3>> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int l1 = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (l1 > 0 && l1 <= max_l1) out.push_back({dz, dy, dx});
      }
  return out;
}

void RegionGrowConfig::validate(const Dims& dims) const {
  if (seeds.empty()) throw ParameterError("region growing needs at least one seed");
  for (const auto& s : seeds)
    if (!dims.contains(s[0], s[1], s[2]))
      throw ParameterError("seed (" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) +
                           ") is outside the grid");
  if (!(multiplier > 0)) throw ParameterError("multiplier must be > 0");
  if (iterations < 1) throw ParameterError("iterations must be >= 1");
  if (init_radius < 0) throw ParameterError("init_radius must be >= 0");
}

namespace {

struct Stats {
  double mean = 0, sd = 0;
};

template <typename Pred>
Stats region_stats(const Volume& v, Pred in_region) {
  double sum = 0;
  Index n = 0;
  for (Index i = 0; i < v.size(); ++i)
    if (in_region(i)) {
      sum += v.data()[i];
      ++n;
    }
  const double mean = sum / static_cast<double>(n);
  double ss = 0;
  for (Index i = 0; i < v.size(); ++i)
    if (in_region(i)) {
      const double d = v.data()[i] - mean;
      ss += d * d;
    }
  return {mean, n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0};
}

}  // namespace

BinaryMask confidence_region_grow(const Volume& v, const RegionGrowConfig& cfg) {
  const Dims& d = v.dims();
  cfg.validate(d);

  std::vector<std::uint8_t> window(static_cast<size_t>(v.size()), 0);
  const Index r = cfg.init_radius;
  for (const auto& s : cfg.seeds)
    for (Index z = std::max<Index>(0, s[0] - r); z <= std::min(d.d - 1, s[0] + r); ++z)
      for (Index y = std::max<Index>(0, s[1] - r); y <= std::min(d.h - 1, s[1] + r); ++y)
        for (Index x = std::max<Index>(0, s[2] - r); x <= std::min(d.w - 1, s[2] + r); ++x)
          window[static_cast<size_t>(d.linear(z, y, x))] = 1;
  Stats st = region_stats(v, [&](Index i) { return window[static_cast<size_t>(i)] != 0; });

  const auto offsets = neighbor_offsets(cfg.neighborhood);
  BinaryMask region(d, v.spacing());
  for (int it = 0; it < cfg.iterations; ++it) {
    const double lo = st.mean - cfg.multiplier * st.sd, hi = st.mean + cfg.multiplier * st.sd;
    std::fill(region.data().begin(), region.data().end(), 0);
    std::deque<std::array<Index, 3>> queue;
    for (const auto& s : cfg.seeds)
      if (!region(s[0], s[1], s[2])) {
        region.set(s[0], s[1], s[2], true);
        queue.push_back(s);
      }
    while (!queue.empty()) {
      const auto p = queue.front();
      queue.pop_front();
      for (const auto& o : offsets) {
        const Index z = p[0] + o[0], y = p[1] + o[1], x = p[2] + o[2];
        if (!d.contains(z, y, x) || region(z, y, x)) continue;
        const double val = v(z, y, x);
        if (val < lo || val > hi) continue;
        region.set(z, y, x, true);
        queue.push_back({z, y, x});
      }
    }
    st = region_stats(v, [&](Index i) { return region.at(i); });
  }
  return region;
}

int count_components(const BinaryMask& m, Neighborhood n) {
  const Dims& d = m.dims();
  const auto offsets = neighbor_offsets(n);
  std::vector<std::uint8_t> seen(static_cast<size_t>(m.size()), 0);
  std::vector<std::array<Index, 3>> stack;
  int count = 0;
  for (Index z = 0; z < d.d; ++z)
    for (Index y = 0; y < d.h; ++y)
      for (Index x = 0; x < d.w; ++x) {
        const Index i = d.linear(z, y, x);
        if (!m.at(i) || seen[static_cast<size_t>(i)]) continue;
        ++count;
        seen[static_cast<size_t>(i)] = 1;
        stack.push_back({z, y, x});
        while (!stack.empty()) {
          const auto p = stack.back();
          stack.pop_back();
          for (const auto& o : offsets) {
            const Index zz = p[0] + o[0], yy = p[1] + o[1], xx = p[2] + o[2];
            if (!d.contains(zz, yy, xx)) continue;
            const Index j = d.linear(zz, yy, xx);
            if (!m.at(j) || seen[static_cast<size_t>(j)]) continue;
            seen[static_cast<size_t>(j)] = 1;
            stack.push_back({zz, yy, xx});
          }
        }
      }
  return count;
}

}  // namespace vesselseg
