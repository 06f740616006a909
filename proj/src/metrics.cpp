#include "vesselseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "vesselseg/error.hpp"

namespace vesselseg {

namespace {

void check_grids(const BinaryMask& a, const BinaryMask& b) {
  if (!(a.dims() == b.dims()))
    throw ParameterError("mask grids differ: (" + std::to_string(a.dims().d) + "," + std::to_string(a.dims().h) + "," +
                         std::to_string(a.dims().w) + ") vs (" + std::to_string(b.dims().d) + "," +
                         std::to_string(b.dims().h) + "," + std::to_string(b.dims().w) + ")");
}

double ratio(Index num, Index den) { return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den); }

double harmonic(double p, double r) { return p + r == 0 ? 0.0 : 2 * p * r / (p + r); }

constexpr int kCenter = 13;

int nb_index(int dz, int dy, int dx) { return (dz + 1) * 9 + (dy + 1) * 3 + (dx + 1); }

struct NeighborTables {
  std::array<std::vector<int>, 27> adj26;  // 26-adjacency among the 26 neighbors
  std::array<std::vector<int>, 27> adj6_n18;  // 6-adjacency among N18 members
  std::array<bool, 27> in_n18{};
  std::array<int, 6> faces{};

  NeighborTables() {
    int f = 0;
    for (int i = 0; i < 27; ++i) {
      const int zi = i / 9 - 1, yi = i / 3 % 3 - 1, xi = i % 3 - 1;
      const int l1 = std::abs(zi) + std::abs(yi) + std::abs(xi);
      in_n18[i] = i != kCenter && l1 <= 2;
      if (l1 == 1) faces[f++] = i;
    }
    for (int i = 0; i < 27; ++i) {
      if (i == kCenter) continue;
      const int zi = i / 9 - 1, yi = i / 3 % 3 - 1, xi = i % 3 - 1;
      for (int j = 0; j < 27; ++j) {
        if (j == kCenter || j == i) continue;
        const int dz = std::abs(zi - (j / 9 - 1)), dy = std::abs(yi - (j / 3 % 3 - 1)), dx = std::abs(xi - (j % 3 - 1));
        if (std::max({dz, dy, dx}) == 1) adj26[i].push_back(j);
        if (in_n18[i] && in_n18[j] && dz + dy + dx == 1) adj6_n18[i].push_back(j);
      }
    }
  }
};

const NeighborTables& tables() {
  static const NeighborTables t;
  return t;
}

// Components of the marked set reachable over `adj`, optionally counting only
// those touching one of `required`.
template <typename Marked>
int count_components(Marked marked, const std::array<std::vector<int>, 27>& adj, const int* required, int n_required) {
  std::array<bool, 27> seen{};
  int stack[27];
  int count = 0;
  auto flood = [&](int s) {
    int top = 0;
    stack[top++] = s;
    seen[s] = true;
    while (top) {
      const int p = stack[--top];
      for (int q : adj[p])
        if (!seen[q] && marked(q)) {
          seen[q] = true;
          stack[top++] = q;
        }
    }
  };
  if (required) {
    for (int k = 0; k < n_required; ++k) {
      const int s = required[k];
      if (marked(s) && !seen[s]) {
        ++count;
        flood(s);
      }
    }
  } else {
    for (int s = 0; s < 27; ++s)
      if (s != kCenter && marked(s) && !seen[s]) {
        ++count;
        flood(s);
      }
  }
  return count;
}

}  // namespace

OverlapCounts count_overlap(const BinaryMask& pred, const BinaryMask& gt) {
  check_grids(pred, gt);
  OverlapCounts c;
  const auto& p = pred.data();
  const auto& g = gt.data();
  for (size_t i = 0; i < p.size(); ++i) {
    c.tp += p[i] && g[i];
    c.fp += p[i] && !g[i];
    c.fn += !p[i] && g[i];
  }
  return c;
}

Overlap overlap_metrics(const BinaryMask& pred, const BinaryMask& gt) {
  const OverlapCounts c = count_overlap(pred, gt);
  return {ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn), ratio(c.tp, c.tp + c.fn), ratio(c.tp, c.tp + c.fp)};
}

bool is_simple_point(const std::array<bool, 27>& nb) {
  const auto& t = tables();
  // Foreground neighbors form exactly one 26-component.
  const int t26 = count_components([&](int i) { return nb[i]; }, t.adj26, nullptr, 0);
  if (t26 != 1) return false;
  // Background in N18 has exactly one 6-component touching a face neighbor.
  const int t6 = count_components([&](int i) { return t.in_n18[i] && !nb[i]; }, t.adj6_n18, t.faces.data(), 6);
  return t6 == 1;
}

BinaryMask skeletonize3d(const BinaryMask& m) {
  const Dims& d = m.dims();
  BinaryMask s = m;
  auto fg = [&](Index z, Index y, Index x) { return d.contains(z, y, x) && s(z, y, x); };
  auto neighborhood = [&](Index z, Index y, Index x) {
    std::array<bool, 27> nb{};
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) nb[nb_index(dz, dy, dx)] = fg(z + dz, y + dy, x + dx);
    return nb;
  };
  static constexpr int kDirs[6][3] = {{0, -1, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, -1}, {1, 0, 0}, {-1, 0, 0}};

  std::vector<std::array<Index, 3>> fg_list;
  for (Index z = 0; z < d.d; ++z)
    for (Index y = 0; y < d.h; ++y)
      for (Index x = 0; x < d.w; ++x)
        if (s(z, y, x)) fg_list.push_back({z, y, x});

  std::vector<std::array<Index, 3>> candidates;
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& dir : kDirs) {
      candidates.clear();
      for (const auto& p : fg_list) {
        if (!s(p[0], p[1], p[2])) continue;
        if (fg(p[0] + dir[0], p[1] + dir[1], p[2] + dir[2])) continue;  // not a border point on this side
        const auto nb = neighborhood(p[0], p[1], p[2]);
        int neighbors = 0;
        for (int i = 0; i < 27; ++i) neighbors += i != kCenter && nb[i];
        if (neighbors == 1) continue;  // endpoint
        if (!is_simple_point(nb)) continue;
        candidates.push_back(p);
      }
      // Removal is sequential: each candidate is re-tested against the
      // current state so that parallel deletions cannot break topology.
      for (const auto& p : candidates) {
        if (!is_simple_point(neighborhood(p[0], p[1], p[2]))) continue;
        s.set(p[0], p[1], p[2], false);
        changed = true;
      }
    }
    std::erase_if(fg_list, [&](const auto& p) { return !s(p[0], p[1], p[2]); });
  }
  return s;
}

Overlap centerline_metrics(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask& sp, const BinaryMask& sg) {
  check_grids(pred, gt);
  check_grids(pred, sp);
  check_grids(gt, sg);
  Index sp_n = 0, sp_in = 0, sg_n = 0, sg_in = 0;
  for (Index i = 0; i < pred.size(); ++i) {
    if (sp.at(i)) {
      ++sp_n;
      sp_in += gt.at(i);
    }
    if (sg.at(i)) {
      ++sg_n;
      sg_in += pred.at(i);
    }
  }
  const double precision = ratio(sp_in, sp_n), recall = ratio(sg_in, sg_n);
  return {harmonic(precision, recall), recall, precision};
}

Overlap centerline_metrics(const BinaryMask& pred, const BinaryMask& gt) {
  check_grids(pred, gt);
  return centerline_metrics(pred, gt, skeletonize3d(pred), skeletonize3d(gt));
}

std::array<double, 6> MetricsRecord::values() const {
  return {vessel.dice, vessel.recall, vessel.precision, centerline.dice, centerline.recall, centerline.precision};
}

MetricsRecord evaluate_case(const std::string& method, const std::string& case_id, const BinaryMask& pred,
                            const BinaryMask& gt) {
  return {method, case_id, overlap_metrics(pred, gt), centerline_metrics(pred, gt)};
}

std::vector<AggregateRow> aggregate(const std::vector<MetricsRecord>& records) {
  if (records.empty()) throw ParameterError("aggregate needs at least one record");
  std::vector<AggregateRow> rows;
  for (const auto& r : records) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& a) { return a.method == r.method; });
    if (it == rows.end()) {
      rows.push_back({r.method, 0, {}, {}});
      it = rows.end() - 1;
    }
    ++it->n;
    const auto v = r.values();
    for (int k = 0; k < 6; ++k) it->mean[k] += v[k];
  }
  for (auto& row : rows) {
    for (auto& m : row.mean) m /= row.n;
    for (const auto& r : records) {
      if (r.method != row.method) continue;
      const auto v = r.values();
      for (int k = 0; k < 6; ++k) row.std[k] += (v[k] - row.mean[k]) * (v[k] - row.mean[k]);
    }
    for (auto& s : row.std) s = std::sqrt(s / row.n);
  }
  return rows;
}

namespace {

std::string fmt(double v, const char* f = "%.6f") {
  char buf[32];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

void csv_header(std::ostream& os, const char* second) {
  os << "method," << second;
  for (const char* c : kMetricColumns) os << "," << c;
  os << "\n";
}

}  // namespace

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records) {
  csv_header(os, "case_id");
  for (const auto& r : records) {
    os << r.method << "," << r.case_id;
    for (double v : r.values()) os << "," << fmt(v);
    os << "\n";
  }
  if (records.empty()) return;
  for (const auto& a : aggregate(records)) {
    os << a.method << ",ALL";
    for (double v : a.mean) os << "," << fmt(v);
    os << "\n";
  }
}

void write_aggregate_csv(std::ostream& os, const std::vector<AggregateRow>& rows) {
  csv_header(os, "stat");
  for (const auto& a : rows) {
    os << a.method << ",mean";
    for (double v : a.mean) os << "," << fmt(v);
    os << "\n" << a.method << ",std";
    for (double v : a.std) os << "," << fmt(v);
    os << "\n";
  }
}

namespace {

size_t method_width(const std::vector<std::string>& names) {
  size_t w = 6;
  for (const auto& n : names) w = std::max(w, n.size());
  return w + 2;
}

void table_header(std::ostream& os, size_t w, size_t cell) {
  std::string line(w, ' ');
  line += std::string(cell * 3 / 2 - 3, ' ') + "Vessel" + std::string(cell * 3 - (cell * 3 / 2 - 3) - 6, ' ');
  line += std::string(cell * 3 / 2 - 5, ' ') + "Centerline";
  os << line << "\n";
  os << std::string(w, ' ');
  for (int g = 0; g < 2; ++g)
    for (const char* c : {"Dice", "Re", "Pr"}) {
      std::string s(c);
      os << std::string(cell - s.size(), ' ') << s;
    }
  os << "\n";
}

}  // namespace

void print_case_table(std::ostream& os, const std::vector<MetricsRecord>& records) {
  std::vector<std::string> names;
  for (const auto& r : records) names.push_back(r.method);
  const size_t w = method_width(names), cell = 8;
  std::vector<std::string> cases;
  for (const auto& r : records)
    if (std::find(cases.begin(), cases.end(), r.case_id) == cases.end()) cases.push_back(r.case_id);
  for (const auto& c : cases) {
    os << "Case " << c << "\n";
    table_header(os, w, cell);
    for (const auto& r : records) {
      if (r.case_id != c) continue;
      os << r.method << std::string(w - r.method.size(), ' ');
      for (double v : r.values()) {
        const std::string s = fmt(v, "%.2f");
        os << std::string(cell - s.size(), ' ') << s;
      }
      os << "\n";
    }
    os << "\n";
  }
}

void print_aggregate_table(std::ostream& os, const std::vector<AggregateRow>& rows) {
  std::vector<std::string> names;
  for (const auto& r : rows) names.push_back(r.method);
  const size_t w = method_width(names), cell = 13;
  table_header(os, w, cell);
  for (const auto& r : rows) {
    os << r.method << std::string(w - r.method.size(), ' ');
    for (int k = 0; k < 6; ++k) {
      const std::string s = fmt(r.mean[k], "%.2f") + "+-" + fmt(r.std[k], "%.2f");
      os << std::string(cell - s.size(), ' ') << s;
    }
    os << "\n";
  }
}

}  // namespace vesselseg
