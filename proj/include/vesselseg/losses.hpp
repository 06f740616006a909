#pragma once

#include <nlohmann/json.hpp>

#include <vector>

#include "vesselseg/ops.hpp"
#include "vesselseg/unet.hpp"

namespace vesselseg {

/// Weights of the two training objectives.
///
///   combo          = (1 - alpha) CE + alpha Dice
///   combo + clDice = (1 - alpha) CE + alpha ((1 - beta) Dice + beta clDice)
///
/// applied per supervision head and summed with `deep_supervision_weights`
/// (finest head first).
struct LossConfig {
  double alpha = 0.5;
  double beta = 0.5;
  int skeleton_iterations = 10;
  double smooth_eps = 1.0;
  std::vector<double> deep_supervision_weights{8.0 / 15, 4.0 / 15, 2.0 / 15, 1.0 / 15};

  void validate() const;
  /// Halving weights 2^-i normalized to sum to one, finest first.
  static std::vector<double> halving_weights(int heads);

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

template <typename S>
Tensor<S> cross_entropy(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target);

template <typename S>
Tensor<S> soft_dice_loss(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target, double eps = 1.0);

/// Differentiable skeleton from iterated 3x3x3 min/max pooling:
///   skel = relu(x - open(x));  repeat k times:
///   x = erode(x); delta = relu(x - open(x)); skel += relu(delta - skel * delta)
template <typename S>
Tensor<S> soft_skeleton(Tape<S>& tape, const Tensor<S>& x, int iterations);

template <typename S>
Tensor<S> soft_cldice_loss(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target, int iterations,
                           double eps = 1.0);

/// Deep-supervised combo loss; `targets` holds one target per head, finest first.
template <typename S>
Tensor<S> combo_loss(Tape<S>& tape, const UNetOutputs<S>& outputs, const std::vector<Tensor<S>>& targets,
                     const LossConfig& cfg, bool use_cldice);

/// Single-head form of combo_loss.
template <typename S>
Tensor<S> combo_loss_single(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target, const LossConfig& cfg,
                            bool use_cldice);

}  // namespace vesselseg
