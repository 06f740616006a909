#pragma once

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <functional>

#include "vesselseg/unet.hpp"
#include "vesselseg/volume.hpp"

namespace vesselseg {

struct StitchConfig {
  Index patch_size = 32;
  double overlap_fraction = 0.5;
  double gaussian_sigma_fraction = 0.125;  ///< sigma = fraction * patch_size
  double binarize_threshold = 0.5;

  void validate() const;
  friend bool operator==(const StitchConfig&, const StitchConfig&) = default;
};

void to_json(nlohmann::json& j, const StitchConfig& c);
void from_json(const nlohmann::json& j, StitchConfig& c);

/// Separable Gaussian over a p^3 patch, centered at (p-1)/2 with value 1 at the
/// (possibly off-grid) center, floored at 1e-8. W fastest.
Eigen::ArrayXd gaussian_window(Index p, double sigma);

/// Maps one p^3 input patch (W fastest) to a p^3 score patch.
using PatchPredictor = std::function<Eigen::ArrayXf(const Eigen::ArrayXf&)>;

/// Zero-pads the volume onto the patch grid, predicts every patch, blends the
/// scores with Gaussian weights in 64-bit buffers and crops back to the input
/// grid. Patches are predicted in parallel but accumulated in grid order, so
/// the result does not depend on the thread count.
Volume sliding_window_predict(const Volume& v, const PatchPredictor& predict, const StitchConfig& cfg);

/// Predictor running the network's main head on a single patch.
PatchPredictor unet_predictor(const UNet<float>& model, Index patch_size);

/// z-score normalization followed by sliding-window prediction.
Volume predict_volume(const UNet<float>& model, const Volume& image, const StitchConfig& cfg);

/// Foreground iff score > t.
BinaryMask binarize(const Volume& score, double t = 0.5);

}  // namespace vesselseg
