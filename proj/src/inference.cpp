#include "vesselseg/inference.hpp"

#include <algorithm>
#include <cmath>

#include "vesselseg/error.hpp"
#include "vesselseg/parallel.hpp"

namespace vesselseg {

void StitchConfig::validate() const {
  if (patch_size < 1) throw ParameterError("patch_size must be >= 1");
  if (!(overlap_fraction >= 0 && overlap_fraction < 1)) throw ParameterError("overlap_fraction must be in [0, 1)");
  if (!(gaussian_sigma_fraction > 0)) throw ParameterError("gaussian_sigma_fraction must be > 0");
  if (!(binarize_threshold > 0 && binarize_threshold < 1)) throw ParameterError("binarize_threshold must be in (0, 1)");
}

void to_json(nlohmann::json& j, const StitchConfig& c) {
  j = {{"patch_size", c.patch_size},
       {"overlap_fraction", c.overlap_fraction},
       {"gaussian_sigma_fraction", c.gaussian_sigma_fraction},
       {"binarize_threshold", c.binarize_threshold}};
}

void from_json(const nlohmann::json& j, StitchConfig& c) {
  if (j.contains("patch_size")) j.at("patch_size").get_to(c.patch_size);
  if (j.contains("overlap_fraction")) j.at("overlap_fraction").get_to(c.overlap_fraction);
  if (j.contains("gaussian_sigma_fraction")) j.at("gaussian_sigma_fraction").get_to(c.gaussian_sigma_fraction);
  if (j.contains("binarize_threshold")) j.at("binarize_threshold").get_to(c.binarize_threshold);
}

Eigen::ArrayXd gaussian_window(Index p, double sigma) {
  if (p < 1) throw ParameterError("window size must be >= 1");
  if (!(sigma > 0)) throw ParameterError("window sigma must be > 0");
  const double c = static_cast<double>(p - 1) / 2.0;
  Eigen::ArrayXd g(p);
  for (Index i = 0; i < p; ++i) {
    const double t = static_cast<double>(i) - c;
    g[i] = std::exp(-t * t / (2 * sigma * sigma));
  }
  Eigen::ArrayXd w(p * p * p);
  for (Index z = 0; z < p; ++z)
    for (Index y = 0; y < p; ++y)
      for (Index x = 0; x < p; ++x) w[(z * p + y) * p + x] = std::max(g[z] * g[y] * g[x], 1e-8);
  return w;
}

Volume sliding_window_predict(const Volume& v, const PatchPredictor& predict, const StitchConfig& cfg) {
  cfg.validate();
  const Index p = cfg.patch_size;
  const PatchGrid grid = plan_patches(v.dims(), p, cfg.overlap_fraction);
  const Volume padded = pad_to(v, grid.padded, grid.pad_before);
  const Dims& pd = grid.padded;
  const Eigen::ArrayXd window = gaussian_window(p, cfg.gaussian_sigma_fraction * static_cast<double>(p));

  Eigen::ArrayXd num = Eigen::ArrayXd::Zero(pd.count()), den = Eigen::ArrayXd::Zero(pd.count());
  const Index n_patches = static_cast<Index>(grid.origins.size());
  const Index chunk = std::max<Index>(1, 4 * num_threads());
  std::vector<Eigen::ArrayXf> scores(static_cast<size_t>(chunk));
  for (Index first = 0; first < n_patches; first += chunk) {
    const Index count = std::min(chunk, n_patches - first);
    parallel_for(count, [&](std::int64_t k) {
      const auto& o = grid.origins[static_cast<size_t>(first + k)];
      Eigen::ArrayXf in(p * p * p);
      for (Index z = 0; z < p; ++z)
        for (Index y = 0; y < p; ++y)
          for (Index x = 0; x < p; ++x) in[(z * p + y) * p + x] = padded(o[0] + z, o[1] + y, o[2] + x);
      Eigen::ArrayXf s = predict(in);
      if (s.size() != in.size()) throw ContractError("predictor returned a patch of the wrong size");
      scores[static_cast<size_t>(k)] = std::move(s);
    });
    for (Index k = 0; k < count; ++k) {
      const auto& o = grid.origins[static_cast<size_t>(first + k)];
      const auto& s = scores[static_cast<size_t>(k)];
      for (Index z = 0; z < p; ++z)
        for (Index y = 0; y < p; ++y)
          for (Index x = 0; x < p; ++x) {
            const Index li = (z * p + y) * p + x;
            const Index gi = pd.linear(o[0] + z, o[1] + y, o[2] + x);
            num[gi] += window[li] * static_cast<double>(s[li]);
            den[gi] += window[li];
          }
    }
  }

  const Dims& d = v.dims();
  Volume out(d, v.spacing());
  const auto& b = grid.pad_before;
  for (Index z = 0; z < d.d; ++z)
    for (Index y = 0; y < d.h; ++y)
      for (Index x = 0; x < d.w; ++x) {
        const Index gi = pd.linear(z + b[0], y + b[1], x + b[2]);
        out(z, y, x) = static_cast<float>(num[gi] / den[gi]);
      }
  return out;
}

PatchPredictor unet_predictor(const UNet<float>& model, Index patch_size) {
  if (patch_size % model.config().patch_divisor() != 0)
    throw ParameterError("patch size " + std::to_string(patch_size) + " is not a multiple of " +
                         std::to_string(model.config().patch_divisor()));
  return [&model, patch_size](const Eigen::ArrayXf& in) {
    Tape<float> tape(false);
    Tensor<float> x(Shape(1, 1, patch_size, patch_size, patch_size), in);
    return Eigen::ArrayXf(model.forward(tape, x).main.value());
  };
}

Volume predict_volume(const UNet<float>& model, const Volume& image, const StitchConfig& cfg) {
  return sliding_window_predict(zscore_normalize(image), unet_predictor(model, cfg.patch_size), cfg);
}

BinaryMask binarize(const Volume& score, double t) {
  BinaryMask m(score.dims(), score.spacing());
  for (Index i = 0; i < score.size(); ++i) m.data()[static_cast<size_t>(i)] = score.data()[i] > t ? 1 : 0;
  return m;
}

}  // namespace vesselseg
