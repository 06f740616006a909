#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "vesselseg/config.hpp"
#include "vesselseg/metrics.hpp"
#include "vesselseg/phantom.hpp"

namespace vesselseg {

inline constexpr const char* kMethodThreshold = "Threshold";
inline constexpr const char* kMethodRegionGrow = "RegionGrowing";
inline constexpr const char* kMethodCombo = "UNet_combo";
inline constexpr const char* kMethodComboClDice = "UNet_combo+clDice";

/// Otsu (plus offset) on the raw image.
BinaryMask run_threshold_baseline(const Volume& image, const BaselineConfig& cfg);
/// Confidence-connected growing from the given seeds.
BinaryMask run_regiongrow_baseline(const Volume& image, const std::vector<std::array<Index, 3>>& seeds,
                                   const BaselineConfig& cfg);

struct LoocvResult {
  std::vector<MetricsRecord> records;  ///< per method, per case
  std::vector<AggregateRow> aggregate;
};

/// Both baselines on every case, then leave-one-out training and prediction
/// for the combo and combo+clDice objectives. Writes config.json,
/// metrics.csv, aggregate.csv, tables.txt and per-fold artifacts under
/// `out_dir`. `log` receives progress lines.
LoocvResult run_loocv(const ExperimentConfig& cfg, const std::vector<PhantomCase>& cases,
                      const std::filesystem::path& out_dir, std::ostream& log);

}  // namespace vesselseg
