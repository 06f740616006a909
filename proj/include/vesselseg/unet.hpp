#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

#include "vesselseg/checkpoint.hpp"
#include "vesselseg/ops.hpp"
#include "vesselseg/volume.hpp"

namespace vesselseg {

/// Architecture of the 3D UNet: a strided-convolution encoder, a
/// transposed-convolution decoder with skip connections, and sigmoid
/// segmentation heads on the last `deep_supervision_heads` decoder stages.
struct UNetConfig {
  int num_downsamples = 4;
  int base_channels = 32;
  int channel_cap = 320;
  int kernel = 3;
  int convs_per_stage = 2;
  double leaky_slope = 0.01;
  int deep_supervision_heads = 4;
  int in_channels = 1;
  int out_channels = 1;
  double norm_eps = 1e-5;

  /// 64^3 patches, 32 base kernels doubling per stage, four downsamples, four heads.
  static UNetConfig paper();
  /// CPU-sized variant: 8 base channels, three downsamples, cap 64.
  static UNetConfig desk();

  void validate() const;
  int channels(int stage) const;
  /// Patch edge lengths the network accepts must be multiples of this.
  int patch_divisor() const { return 1 << num_downsamples; }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

void to_json(nlohmann::json& j, const UNetConfig& c);
void from_json(const nlohmann::json& j, UNetConfig& c);

/// Closed-form parameter count for a configuration.
Index parameter_count(const UNetConfig& cfg);

template <typename S>
struct UNetOutputs {
  Tensor<S> main;               ///< full resolution
  std::vector<Tensor<S>> aux;   ///< 1/2, 1/4, ... resolution

  /// main followed by aux, i.e. finest to coarsest.
  std::vector<Tensor<S>> heads() const;
};

template <typename S>
class UNet {
public:
  UNet(const UNetConfig& cfg, std::uint64_t seed);

  const UNetConfig& config() const { return cfg_; }
  UNetOutputs<S> forward(Tape<S>& tape, const Tensor<S>& x) const;

  NamedTensors<S>& parameters() { return params_; }
  const NamedTensors<S>& parameters() const { return params_; }
  Index parameter_count() const;

  /// Deep copy with independent parameter storage.
  UNet clone() const;

  void save(const std::filesystem::path& stem, const nlohmann::json& extra = nlohmann::json::object()) const;
  static UNet load(const std::filesystem::path& stem);

private:
  struct ConvUnit {
    Tensor<S> weight, bias, gamma, beta;
    int stride = 1;
  };
  struct Head {
    Tensor<S> weight, bias;
  };

  Tensor<S> run_unit(Tape<S>& tape, const ConvUnit& u, const Tensor<S>& x) const;

  UNetConfig cfg_;
  std::vector<std::vector<ConvUnit>> encoder_;   // per stage
  std::vector<Tensor<S>> upsamplers_;            // per decoder stage
  std::vector<std::vector<ConvUnit>> decoder_;   // per decoder stage, index = resolution level
  std::vector<Head> heads_;                      // index = resolution level
  NamedTensors<S> params_;
};

/// Deep-supervision targets: level 0 is the input, level i+1 is the 2x2x2
/// max-pool of level i (a voxel is foreground iff any of its 8 children is).
std::vector<BinaryMask> downsample_targets(const BinaryMask& gt, int levels);

/// Factor-2 max-pool of a (N,C,D,H,W) tensor; extents must be even.
template <typename S>
Tensor<S> max_downsample2(const Tensor<S>& x);

extern template class UNet<float>;
extern template class UNet<double>;

}  // namespace vesselseg
