#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "vesselseg/volume.hpp"

namespace vesselseg {

/// Ratios with an empty denominator are reported as 1.0; Dice from a zero
/// precision and recall is 0.
struct Overlap {
  double dice = 1, recall = 1, precision = 1;
};

struct OverlapCounts {
  Index tp = 0, fp = 0, fn = 0;
};

OverlapCounts count_overlap(const BinaryMask& pred, const BinaryMask& gt);
Overlap overlap_metrics(const BinaryMask& pred, const BinaryMask& gt);

/// Topology-preserving 3D thinning: simple border voxels are peeled in six
/// directional subiterations until nothing changes. Voxels with exactly one
/// 26-neighbor are kept as endpoints. Out-of-grid voxels count as background.
BinaryMask skeletonize3d(const BinaryMask& m);

/// True if removing the center of a 3x3x3 neighborhood (index 13, z-major)
/// preserves topology under 26/6 connectivity.
bool is_simple_point(const std::array<bool, 27>& nb);

/// Precision = |skel(pred) & gt| / |skel(pred)|, recall = |skel(gt) & pred| / |skel(gt)|.
Overlap centerline_metrics(const BinaryMask& pred, const BinaryMask& gt);
/// Same, with skeletons already computed.
Overlap centerline_metrics(const BinaryMask& pred, const BinaryMask& gt, const BinaryMask& skel_pred,
                           const BinaryMask& skel_gt);

struct MetricsRecord {
  std::string method;
  std::string case_id;
  Overlap vessel;
  Overlap centerline;

  std::array<double, 6> values() const;
};

MetricsRecord evaluate_case(const std::string& method, const std::string& case_id, const BinaryMask& pred,
                            const BinaryMask& gt);

struct AggregateRow {
  std::string method;
  int n = 0;
  std::array<double, 6> mean{};
  std::array<double, 6> std{};  ///< population standard deviation
};

/// One row per method, in order of first appearance.
std::vector<AggregateRow> aggregate(const std::vector<MetricsRecord>& records);

inline constexpr std::array<const char*, 6> kMetricColumns{"v_dice", "v_re", "v_pr", "c_dice", "c_re", "c_pr"};

/// method, case_id, v_dice, v_re, v_pr, c_dice, c_re, c_pr; per-case rows
/// followed by one `case_id=ALL` mean row per method.
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRecord>& records);
/// Same columns with `stat` in place of case_id: mean and std rows per method.
void write_aggregate_csv(std::ostream& os, const std::vector<AggregateRow>& rows);

/// Aligned per-case table (one block per case, methods as rows).
void print_case_table(std::ostream& os, const std::vector<MetricsRecord>& records);
/// Aligned mean +- std table, methods as rows.
void print_aggregate_table(std::ostream& os, const std::vector<AggregateRow>& rows);

}  // namespace vesselseg
