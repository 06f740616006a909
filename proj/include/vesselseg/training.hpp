#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vesselseg/losses.hpp"
#include "vesselseg/rng.hpp"
#include "vesselseg/unet.hpp"
#include "vesselseg/volume.hpp"

namespace vesselseg {

enum class LrSchedule { constant, poly };

struct TrainConfig {
  int batch_size = 2;
  Index patch_size = 64;
  int epochs = 250;
  int batches_per_epoch = 50;
  double lr0 = 0.01;
  double momentum = 0.99;
  LrSchedule lr_schedule = LrSchedule::poly;
  double poly_power = 0.9;
  double grad_clip_norm = 12.0;  ///< global L2 clip; 0 disables
  double foreground_patch_fraction = 0.5;
  int val_patches = 8;           ///< fixed validation patches drawn once per fold
  bool use_cldice = false;
  std::uint64_t seed = 0;

  void validate(const UNetConfig& net) const;
  double lr_at(int epoch) const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct FoldPlan {
  std::string test;
  std::string val;
  std::vector<std::string> train;
};

/// One fold per case; the validation case is the next id cyclically and the
/// rest train. `seed` is accepted for interface stability; the rule is fixed.
std::vector<FoldPlan> plan_folds(const std::vector<std::string>& case_ids, std::uint64_t seed = 0);

/// A case prepared for training: z-scored image, mask and foreground index list.
struct TrainingCase {
  std::string id;
  Volume image;
  BinaryMask mask;
  std::vector<Index> foreground;

  TrainingCase(std::string id, const Volume& raw, BinaryMask mask);
};

struct PatchSample {
  std::array<Index, 3> center{};
  std::array<Index, 3> origin{};  ///< may be negative when the grid is smaller than the patch
  Eigen::ArrayXf image;            ///< p^3, zero outside the grid
  BinaryMask mask;
};

/// With probability foreground_patch_fraction the center is a uniform
/// foreground voxel, otherwise uniform over the grid; the patch is shifted
/// inward to stay within bounds.
PatchSample sample_patch(const TrainingCase& c, Index patch, double foreground_fraction, Rng& rng);

/// Nesterov momentum in its lookahead form:
///   v <- mu v - lr grad(theta + mu v);  theta <- theta + v
/// lookahead() moves parameters to theta + mu v (saving theta); step() restores
/// theta and applies the update using the gradients found there.
template <typename S>
class NesterovSgd {
public:
  NesterovSgd(NamedTensors<S>& params, double momentum);

  void lookahead();
  void step(double lr);
  const std::vector<typename Tensor<S>::Array>& velocity() const { return v_; }

private:
  NamedTensors<S>& params_;
  S mu_;
  std::vector<typename Tensor<S>::Array> v_, saved_;
  bool looking_ = false;
};

/// A batch in network layout: inputs (B,1,p,p,p) and one target per head.
struct Batch {
  Tensor<float> input;
  std::vector<Tensor<float>> targets;
};

Batch make_batch(const std::vector<PatchSample>& samples, int heads);

/// Owns a model and its optimizer state; one call to step() is one update.
class Trainer {
public:
  Trainer(UNet<float>& model, LossConfig loss, double momentum, double grad_clip_norm, bool use_cldice);

  /// Returns the loss evaluated at the lookahead point.
  double step(const Batch& batch, double lr);

private:
  UNet<float>& model_;
  LossConfig loss_;
  NesterovSgd<float> opt_;
  double clip_;
  bool use_cldice_;
};

struct HistoryRow {
  int epoch = 0;
  long step = 0;
  double train_loss = 0;
  double val_dice = 0;
  double lr = 0;
};

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows);

struct TrainResult {
  std::vector<HistoryRow> history;
  double best_val_dice = -1;
  int best_epoch = 0;
  std::filesystem::path best_checkpoint;   ///< stem
  std::filesystem::path final_checkpoint;  ///< stem
};

/// Raised when the training loss stops being finite.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Patchwise vessel Dice of the model's main head on fixed validation patches.
double validation_dice(const UNet<float>& model, const std::vector<PatchSample>& patches);

using ProgressFn = std::function<void(const HistoryRow&)>;

/// Trains one fold from scratch and writes history.csv, best.{bin,json} and
/// final.{bin,json} into `out_dir`.
TrainResult train_fold(const std::vector<const TrainingCase*>& train, const TrainingCase& val,
                       const UNetConfig& net, const LossConfig& loss, const TrainConfig& cfg,
                       const std::filesystem::path& out_dir, const ProgressFn& progress = {});

extern template class NesterovSgd<float>;
extern template class NesterovSgd<double>;

}  // namespace vesselseg
