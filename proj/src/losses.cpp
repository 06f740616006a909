#include "vesselseg/losses.hpp"

#include <cmath>
#include <numeric>

namespace vesselseg {

using nlohmann::json;

void LossConfig::validate() const {
  if (!(alpha >= 0 && alpha <= 1)) throw ParameterError("alpha must lie in [0, 1]");
  if (!(beta >= 0 && beta <= 1)) throw ParameterError("beta must lie in [0, 1]");
  if (skeleton_iterations < 1) throw ParameterError("skeleton_iterations must be >= 1");
  if (!(smooth_eps >= 0)) throw ParameterError("smooth_eps must be non-negative");
  if (deep_supervision_weights.empty()) throw ParameterError("deep_supervision_weights is empty");
  double total = 0;
  for (double w : deep_supervision_weights) {
    if (!(w >= 0)) throw ParameterError("deep supervision weights must be non-negative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ParameterError("deep supervision weights must sum to 1");
}

std::vector<double> LossConfig::halving_weights(int heads) {
  std::vector<double> w(static_cast<size_t>(heads));
  double total = 0;
  for (int i = 0; i < heads; ++i) total += w[static_cast<size_t>(i)] = std::ldexp(1.0, -i);
  for (double& v : w) v /= total;
  return w;
}

void to_json(json& j, const LossConfig& c) {
  j = json{{"alpha", c.alpha},
           {"beta", c.beta},
           {"skeleton_iterations", c.skeleton_iterations},
           {"smooth_eps", c.smooth_eps},
           {"deep_supervision_weights", c.deep_supervision_weights}};
}

void from_json(const json& j, LossConfig& c) {
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.beta);
  c.skeleton_iterations = j.value("skeleton_iterations", c.skeleton_iterations);
  c.smooth_eps = j.value("smooth_eps", c.smooth_eps);
  c.deep_supervision_weights = j.value("deep_supervision_weights", c.deep_supervision_weights);
}

template <typename S>
Tensor<S> cross_entropy(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target) {
  return binary_cross_entropy(tape, pred, target);
}

template <typename S>
Tensor<S> soft_dice_loss(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target, double eps) {
  return soft_dice(tape, pred, target, static_cast<S>(eps));
}

template <typename S>
Tensor<S> soft_skeleton(Tape<S>& tape, const Tensor<S>& x, int iterations) {
  if (iterations < 1) throw ParameterError("soft_skeleton: iterations must be >= 1");
  auto relu = [&](const Tensor<S>& t) { return leaky_relu(tape, t, S(0)); };
  auto open = [&](const Tensor<S>& t) { return maxpool3(tape, minpool3(tape, t)); };

  Tensor<S> img = x;
  Tensor<S> skel = relu(sub(tape, img, open(img)));
  for (int i = 0; i < iterations; ++i) {
    img = minpool3(tape, img);
    Tensor<S> delta = relu(sub(tape, img, open(img)));
    skel = add(tape, skel, relu(sub(tape, delta, mul(tape, skel, delta))));
  }
  return skel;
}

template <typename S>
Tensor<S> soft_cldice_loss(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target, int iterations,
                           double eps) {
  if (!(pred.shape() == target.shape()))
    throw ParameterError("soft_cldice_loss: shape mismatch " + pred.shape().str() + " vs " + target.shape().str());
  const Tensor<S> skel_pred = soft_skeleton(tape, pred, iterations);
  const Tensor<S> skel_target = soft_skeleton(tape, target, iterations);
  return cldice_from_skeletons(tape, skel_pred, pred, skel_target, target, static_cast<S>(eps));
}

template <typename S>
Tensor<S> combo_loss_single(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target, const LossConfig& cfg,
                            bool use_cldice) {
  const S a = static_cast<S>(cfg.alpha), b = static_cast<S>(cfg.beta);
  const Tensor<S> ce = cross_entropy(tape, pred, target);
  const Tensor<S> dice = soft_dice_loss(tape, pred, target, cfg.smooth_eps);
  if (!use_cldice) return linear_combination<S>(tape, {{S(1) - a, ce}, {a, dice}});
  const Tensor<S> cl = soft_cldice_loss(tape, pred, target, cfg.skeleton_iterations, cfg.smooth_eps);
  return linear_combination<S>(tape, {{S(1) - a, ce}, {a * (S(1) - b), dice}, {a * b, cl}});
}

template <typename S>
Tensor<S> combo_loss(Tape<S>& tape, const UNetOutputs<S>& outputs, const std::vector<Tensor<S>>& targets,
                     const LossConfig& cfg, bool use_cldice) {
  const auto heads = outputs.heads();
  if (heads.size() != targets.size())
    throw ParameterError("combo_loss: " + std::to_string(heads.size()) + " heads but " +
                         std::to_string(targets.size()) + " targets");
  if (heads.size() != cfg.deep_supervision_weights.size())
    throw ParameterError("combo_loss: " + std::to_string(heads.size()) + " heads but " +
                         std::to_string(cfg.deep_supervision_weights.size()) + " deep supervision weights");
  std::vector<std::pair<S, Tensor<S>>> terms;
  for (size_t h = 0; h < heads.size(); ++h)
    terms.emplace_back(static_cast<S>(cfg.deep_supervision_weights[h]),
                       combo_loss_single(tape, heads[h], targets[h], cfg, use_cldice));
  return linear_combination(tape, terms);
}

#define VESSELSEG_INSTANTIATE_LOSSES(S)                                                                          \
  template Tensor<S> cross_entropy(Tape<S>&, const Tensor<S>&, const Tensor<S>&);                                \
  template Tensor<S> soft_dice_loss(Tape<S>&, const Tensor<S>&, const Tensor<S>&, double);                       \
  template Tensor<S> soft_skeleton(Tape<S>&, const Tensor<S>&, int);                                             \
  template Tensor<S> soft_cldice_loss(Tape<S>&, const Tensor<S>&, const Tensor<S>&, int, double);                \
  template Tensor<S> combo_loss_single(Tape<S>&, const Tensor<S>&, const Tensor<S>&, const LossConfig&, bool);   \
  template Tensor<S> combo_loss(Tape<S>&, const UNetOutputs<S>&, const std::vector<Tensor<S>>&, const LossConfig&, \
                                bool);

VESSELSEG_INSTANTIATE_LOSSES(float)
VESSELSEG_INSTANTIATE_LOSSES(double)

}  // namespace vesselseg
