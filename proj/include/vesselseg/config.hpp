#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>

#include "vesselseg/baselines.hpp"
#include "vesselseg/inference.hpp"
#include "vesselseg/losses.hpp"
#include "vesselseg/phantom.hpp"
#include "vesselseg/training.hpp"
#include "vesselseg/unet.hpp"

namespace vesselseg {

inline constexpr int kConfigVersion = 1;

enum class Profile { paper, desk };
Profile parse_profile(const std::string& s);
const char* to_string(Profile p);

struct BaselineConfig {
  int otsu_bins = 256;
  double threshold_offset = 0.0;
  double multiplier = 2.0;
  int iterations = 2;
  Neighborhood neighborhood = Neighborhood::faces6;
  int init_radius = 1;
  friend bool operator==(const BaselineConfig&, const BaselineConfig&) = default;
};

/// Everything a run needs. A profile supplies the defaults; fields present in
/// a config document override them.
struct ExperimentConfig {
  int config_version = kConfigVersion;
  Profile profile = Profile::desk;
  std::uint64_t seed = 0;
  UNetConfig unet;
  LossConfig loss;
  TrainConfig train;
  StitchConfig stitch;
  BaselineConfig baseline;
  PhantomSpec phantom;
  int cases = 5;
  std::string dataset;     ///< manifest path or directory; empty = generate phantoms
  std::string output_dir;

  static ExperimentConfig for_profile(Profile p);
  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Starts from the document's profile (or `fallback`) and applies its fields.
ExperimentConfig config_from_json(const nlohmann::json& j, Profile fallback = Profile::desk);
ExperimentConfig load_config(const std::filesystem::path& path, Profile fallback = Profile::desk);
void echo_config(const ExperimentConfig& c, const std::filesystem::path& out_dir);

}  // namespace vesselseg
