#include "vesselseg/config.hpp"

#include <fstream>

#include "vesselseg/error.hpp"

namespace vesselseg {

Profile parse_profile(const std::string& s) {
  if (s == "paper") return Profile::paper;
  if (s == "desk") return Profile::desk;
  throw ParameterError("unknown profile '" + s + "' (expected paper or desk)");
}

const char* to_string(Profile p) { return p == Profile::paper ? "paper" : "desk"; }

ExperimentConfig ExperimentConfig::for_profile(Profile p) {
  ExperimentConfig c;
  c.profile = p;
  if (p == Profile::paper) {
    c.unet = UNetConfig::paper();
    c.loss = LossConfig{};
    c.train = TrainConfig{};
    c.train.patch_size = 64;
    c.stitch.patch_size = 64;
    return c;
  }
  c.unet = UNetConfig::desk();
  c.loss.skeleton_iterations = 5;
  c.loss.deep_supervision_weights = LossConfig::halving_weights(c.unet.deep_supervision_heads);
  c.train.patch_size = 32;
  c.train.epochs = 30;
  c.train.batches_per_epoch = 25;
  // Half-foreground sampling left speckle false positives in vessel-free
  // corners after this few steps; a third keeps enough background in view.
  c.train.foreground_patch_fraction = 0.33;
  c.stitch.patch_size = 32;
  return c;
}

void ExperimentConfig::validate() const {
  if (config_version != kConfigVersion)
    throw ParameterError("config_version " + std::to_string(config_version) + " is not supported (expected " +
                         std::to_string(kConfigVersion) + ")");
  unet.validate();
  loss.validate();
  train.validate(unet);
  stitch.validate();
  if (static_cast<int>(loss.deep_supervision_weights.size()) != unet.deep_supervision_heads)
    throw ParameterError("deep_supervision_weights has " + std::to_string(loss.deep_supervision_weights.size()) +
                         " entries for " + std::to_string(unet.deep_supervision_heads) + " heads");
  if (stitch.patch_size % unet.patch_divisor() != 0)
    throw ParameterError("stitch patch_size must be a multiple of " + std::to_string(unet.patch_divisor()));
  if (cases < 3) throw ParameterError("cross-validation needs at least 3 cases");
  if (baseline.otsu_bins < 2) throw ParameterError("otsu_bins must be >= 2");
  if (!(baseline.multiplier > 0) || baseline.iterations < 1) throw ParameterError("invalid region growing settings");
  phantom.validate();
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"config_version", c.config_version},
          {"profile", to_string(c.profile)},
          {"seed", c.seed},
          {"unet", c.unet},
          {"loss", c.loss},
          {"train", c.train},
          {"stitch", c.stitch},
          {"baseline",
           {{"otsu_bins", c.baseline.otsu_bins},
            {"threshold_offset", c.baseline.threshold_offset},
            {"multiplier", c.baseline.multiplier},
            {"iterations", c.baseline.iterations},
            {"neighborhood", to_string(c.baseline.neighborhood)},
            {"init_radius", c.baseline.init_radius}}},
          {"phantom", c.phantom},
          {"cases", c.cases},
          {"dataset", c.dataset},
          {"output_dir", c.output_dir}};
}

ExperimentConfig config_from_json(const nlohmann::json& j, Profile fallback) {
  try {
    const Profile p = j.contains("profile") ? parse_profile(j.at("profile").get<std::string>()) : fallback;
    ExperimentConfig c = ExperimentConfig::for_profile(p);
    if (j.contains("config_version")) j.at("config_version").get_to(c.config_version);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("unet")) {
      nlohmann::json merged = c.unet;
      merged.update(j.at("unet"));
      c.unet = merged.get<UNetConfig>();
    }
    if (j.contains("loss")) {
      // A new head count without explicit weights gets the halving default.
      if (j.contains("unet") && j.at("unet").contains("deep_supervision_heads") &&
          !j.at("loss").contains("deep_supervision_weights"))
        c.loss.deep_supervision_weights = LossConfig::halving_weights(c.unet.deep_supervision_heads);
      j.at("loss").get_to(c.loss);
    } else if (j.contains("unet") && j.at("unet").contains("deep_supervision_heads")) {
      c.loss.deep_supervision_weights = LossConfig::halving_weights(c.unet.deep_supervision_heads);
    }
    if (j.contains("train")) j.at("train").get_to(c.train);
    if (j.contains("stitch")) j.at("stitch").get_to(c.stitch);
    if (j.contains("baseline")) {
      const auto& b = j.at("baseline");
      c.baseline.otsu_bins = b.value("otsu_bins", c.baseline.otsu_bins);
      c.baseline.threshold_offset = b.value("threshold_offset", c.baseline.threshold_offset);
      c.baseline.multiplier = b.value("multiplier", c.baseline.multiplier);
      c.baseline.iterations = b.value("iterations", c.baseline.iterations);
      c.baseline.init_radius = b.value("init_radius", c.baseline.init_radius);
      if (b.contains("neighborhood")) c.baseline.neighborhood = parse_neighborhood(b.at("neighborhood").get<std::string>());
    }
    if (j.contains("phantom")) j.at("phantom").get_to(c.phantom);
    if (j.contains("cases")) j.at("cases").get_to(c.cases);
    if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
    if (j.contains("output_dir")) j.at("output_dir").get_to(c.output_dir);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("invalid config: ") + e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path, Profile fallback) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j, fallback);
}

void echo_config(const ExperimentConfig& c, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir / "config.json") << to_json(c).dump(2) << "\n";
}

}  // namespace vesselseg
