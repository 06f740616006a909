#pragma once

#include <utility>
#include <vector>

#include "vesselseg/tensor.hpp"

namespace vesselseg {

// Differentiable primitives. The set is closed: every network activation and
// every loss term in the library is built from these, and each one has a
// finite-difference check in the gradcheck suite.
//
// All functions take the Tape first; when the tape is recording and any input
// requires grad, the result requires grad and a backward closure is recorded.

/// Cross-correlation. x: (N,Cin,D,H,W), w: (Cout,Cin,k,k,k), b: (1,Cout,1,1,1) or undefined.
/// Output extent per axis is floor((D + 2*padding - k) / stride) + 1.
template <typename S>
Tensor<S> conv3d(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride,
                 int padding);

/// Transposed convolution with kernel == stride (non-overlapping upsampling).
/// x: (N,Cin,D,H,W), w: (Cin,Cout,k,k,k) -> (N,Cout,kD,kH,kW). Adjoint of conv3d
/// with the same weights, stride k and no padding.
template <typename S>
Tensor<S> conv3d_transpose(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& w, int stride);

/// Per-(n,c) standardization with population variance, then per-channel affine.
/// gamma, beta: (1,C,1,1,1).
template <typename S>
Tensor<S> instance_norm(Tape<S>& tape, const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps);

/// x >= 0 passes through; otherwise scaled by `slope`. slope = 0 gives ReLU.
template <typename S>
Tensor<S> leaky_relu(Tape<S>& tape, const Tensor<S>& x, S slope);

template <typename S>
Tensor<S> sigmoid(Tape<S>& tape, const Tensor<S>& x);

template <typename S>
Tensor<S> concat_channels(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);

/// 3x3x3 max filter, stride 1, shape preserving; out-of-grid samples ignored.
/// Gradient goes to the selected element, ties broken by lowest linear index.
template <typename S>
Tensor<S> maxpool3(Tape<S>& tape, const Tensor<S>& x);

/// 3x3x3 min filter; equals -maxpool3(-x) including tie-breaking.
template <typename S>
Tensor<S> minpool3(Tape<S>& tape, const Tensor<S>& x);

template <typename S>
Tensor<S> add(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> sub(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);
template <typename S>
Tensor<S> mul(Tape<S>& tape, const Tensor<S>& a, const Tensor<S>& b);

/// Sum of all elements, as a (1,1,1,1,1) tensor.
template <typename S>
Tensor<S> sum(Tape<S>& tape, const Tensor<S>& x);

/// sum_k weight_k * term_k over same-shaped tensors.
template <typename S>
Tensor<S> linear_combination(Tape<S>& tape, const std::vector<std::pair<S, Tensor<S>>>& terms);

/// Mean binary cross-entropy with pred clamped to [1e-7, 1-1e-7].
template <typename S>
Tensor<S> binary_cross_entropy(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target);

/// -(2 sum(p t) + eps) / (sum(p) + sum(t) + eps).
template <typename S>
Tensor<S> soft_dice(Tape<S>& tape, const Tensor<S>& pred, const Tensor<S>& target, S eps);

/// Negative harmonic mean of topology precision (skeleton of pred inside target)
/// and topology sensitivity (skeleton of target inside pred), eps-smoothed.
template <typename S>
Tensor<S> cldice_from_skeletons(Tape<S>& tape, const Tensor<S>& skel_pred, const Tensor<S>& pred,
                                const Tensor<S>& skel_target, const Tensor<S>& target, S eps);

inline constexpr double kProbClamp = 1e-7;

}  // namespace vesselseg
