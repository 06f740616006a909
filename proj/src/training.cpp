#include "vesselseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "vesselseg/error.hpp"

namespace vesselseg {

void TrainConfig::validate(const UNetConfig& net) const {
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (patch_size < 1 || patch_size % net.patch_divisor() != 0)
    throw ParameterError("patch_size " + std::to_string(patch_size) + " must be a positive multiple of " +
                         std::to_string(net.patch_divisor()));
  if (epochs < 1 || batches_per_epoch < 1) throw ParameterError("epochs and batches_per_epoch must be >= 1");
  if (!(lr0 >= 0)) throw ParameterError("lr0 must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ParameterError("momentum must be in [0, 1)");
  if (!(foreground_patch_fraction >= 0 && foreground_patch_fraction <= 1))
    throw ParameterError("foreground_patch_fraction must be in [0, 1]");
  if (val_patches < 1) throw ParameterError("val_patches must be >= 1");
  if (grad_clip_norm < 0) throw ParameterError("grad_clip_norm must be >= 0");
}

double TrainConfig::lr_at(int epoch) const {
  if (lr_schedule == LrSchedule::constant) return lr0;
  return lr0 * std::pow(1.0 - static_cast<double>(epoch) / epochs, poly_power);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"patch_size", c.patch_size},
       {"epochs", c.epochs},
       {"batches_per_epoch", c.batches_per_epoch},
       {"lr0", c.lr0},
       {"momentum", c.momentum},
       {"lr_schedule", c.lr_schedule == LrSchedule::poly ? "poly" : "constant"},
       {"poly_power", c.poly_power},
       {"grad_clip_norm", c.grad_clip_norm},
       {"foreground_patch_fraction", c.foreground_patch_fraction},
       {"val_patches", c.val_patches},
       {"use_cldice", c.use_cldice},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("batch_size", c.batch_size);
  opt("patch_size", c.patch_size);
  opt("epochs", c.epochs);
  opt("batches_per_epoch", c.batches_per_epoch);
  opt("lr0", c.lr0);
  opt("momentum", c.momentum);
  if (j.contains("lr_schedule")) {
    const auto s = j.at("lr_schedule").get<std::string>();
    if (s == "poly") c.lr_schedule = LrSchedule::poly;
    else if (s == "constant") c.lr_schedule = LrSchedule::constant;
    else throw ParameterError("lr_schedule must be 'poly' or 'constant', got '" + s + "'");
  }
  opt("poly_power", c.poly_power);
  opt("grad_clip_norm", c.grad_clip_norm);
  opt("foreground_patch_fraction", c.foreground_patch_fraction);
  opt("val_patches", c.val_patches);
  opt("use_cldice", c.use_cldice);
  opt("seed", c.seed);
}

std::vector<FoldPlan> plan_folds(const std::vector<std::string>& ids, std::uint64_t) {
  if (ids.size() < 3) throw ParameterError("cross-validation needs at least 3 cases, got " + std::to_string(ids.size()));
  std::vector<FoldPlan> folds;
  const size_t n = ids.size();
  for (size_t i = 0; i < n; ++i) {
    FoldPlan f{ids[i], ids[(i + 1) % n], {}};
    for (size_t k = 0; k < n; ++k)
      if (k != i && k != (i + 1) % n) f.train.push_back(ids[k]);
    folds.push_back(std::move(f));
  }
  return folds;
}

TrainingCase::TrainingCase(std::string id_, const Volume& raw, BinaryMask m)
    : id(std::move(id_)), image(zscore_normalize(raw)), mask(std::move(m)) {
  if (!(mask.dims() == image.dims())) throw ParameterError("case " + id + ": image and mask grids differ");
  for (Index i = 0; i < mask.size(); ++i)
    if (mask.at(i)) foreground.push_back(i);
}

PatchSample sample_patch(const TrainingCase& c, Index p, double fg_fraction, Rng& rng) {
  const Dims& d = c.image.dims();
  PatchSample s;
  const bool want_fg = uniform01(rng) < fg_fraction;
  Index lin;
  if (want_fg && !c.foreground.empty())
    lin = c.foreground[uniform_index(rng, c.foreground.size())];
  else
    lin = static_cast<Index>(uniform_index(rng, static_cast<std::uint64_t>(d.count())));
  s.center = {lin / (d.h * d.w), lin / d.w % d.h, lin % d.w};
  for (int a = 0; a < 3; ++a) {
    const Index n = d[a];
    const Index o = s.center[static_cast<size_t>(a)] - p / 2;
    s.origin[static_cast<size_t>(a)] = n >= p ? std::clamp<Index>(o, 0, n - p) : -(p - n) / 2;
  }
  s.image = Eigen::ArrayXf::Zero(p * p * p);
  s.mask = BinaryMask({p, p, p}, c.mask.spacing());
  for (Index z = 0; z < p; ++z)
    for (Index y = 0; y < p; ++y)
      for (Index x = 0; x < p; ++x) {
        const Index gz = s.origin[0] + z, gy = s.origin[1] + y, gx = s.origin[2] + x;
        if (!d.contains(gz, gy, gx)) continue;
        s.image[(z * p + y) * p + x] = c.image(gz, gy, gx);
        s.mask.set(z, y, x, c.mask(gz, gy, gx));
      }
  return s;
}

template <typename S>
NesterovSgd<S>::NesterovSgd(NamedTensors<S>& params, double momentum) : params_(params), mu_(static_cast<S>(momentum)) {
  for (auto& [name, t] : params_) {
    v_.push_back(Tensor<S>::Array::Zero(t.numel()));
    saved_.emplace_back();
  }
}

template <typename S>
void NesterovSgd<S>::lookahead() {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].second;
    saved_[i] = t.value();
    t.value() = saved_[i] + mu_ * v_[i];
  }
  looking_ = true;
}

template <typename S>
void NesterovSgd<S>::step(double lr) {
  const S l = static_cast<S>(lr);
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].second;
    if (looking_) t.value() = saved_[i];
    v_[i] = mu_ * v_[i] - l * t.grad();
    t.value() += v_[i];
  }
  looking_ = false;
}

template class NesterovSgd<float>;
template class NesterovSgd<double>;

Batch make_batch(const std::vector<PatchSample>& samples, int heads) {
  if (samples.empty()) throw ParameterError("empty batch");
  const Index p = samples.front().mask.dims().d;
  const Index vox = p * p * p;
  const auto n = static_cast<Index>(samples.size());
  Batch b;
  b.input = Tensor<float>(Shape(n, 1, p, p, p));
  Tensor<float> target(Shape(n, 1, p, p, p));
  for (Index i = 0; i < n; ++i) {
    const auto& s = samples[static_cast<size_t>(i)];
    b.input.value().segment(i * vox, vox) = s.image;
    for (Index k = 0; k < vox; ++k) target.value()[i * vox + k] = s.mask.at(k) ? 1.0f : 0.0f;
  }
  b.targets.push_back(target);
  for (int h = 1; h < heads; ++h) b.targets.push_back(max_downsample2(b.targets.back()));
  return b;
}

Trainer::Trainer(UNet<float>& model, LossConfig loss, double momentum, double grad_clip_norm, bool use_cldice)
    : model_(model), loss_(std::move(loss)), opt_(model.parameters(), momentum), clip_(grad_clip_norm),
      use_cldice_(use_cldice) {
  loss_.validate();
}

double Trainer::step(const Batch& batch, double lr) {
  auto& params = model_.parameters();
  for (auto& [name, t] : params) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  opt_.lookahead();
  Tape<float> tape;
  const UNetOutputs<float> out = model_.forward(tape, batch.input);
  const Tensor<float> loss = combo_loss(tape, out, batch.targets, loss_, use_cldice_);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    opt_.step(0.0);
    return value;
  }
  tape.backward(loss);
  if (clip_ > 0) {
    double sq = 0;
    for (const auto& [name, t] : params) sq += t.grad().template cast<double>().square().sum();
    const double norm = std::sqrt(sq);
    if (norm > clip_) {
      const auto scale = static_cast<float>(clip_ / norm);
      for (auto& [name, t] : params) t.grad() *= scale;
    }
  }
  opt_.step(lr);
  return value;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<HistoryRow>& rows) {
  std::ofstream os(path);
  os << "epoch,step,train_loss,val_dice,lr\n" << std::setprecision(9);
  for (const auto& r : rows) os << r.epoch << "," << r.step << "," << r.train_loss << "," << r.val_dice << "," << r.lr << "\n";
}

double validation_dice(const UNet<float>& model, const std::vector<PatchSample>& patches) {
  Index tp = 0, fp = 0, fn = 0;
  for (const auto& s : patches) {
    const Index p = s.mask.dims().d;
    Tape<float> tape(false);
    const Tensor<float> x(Shape(1, 1, p, p, p), s.image);
    const auto out = model.forward(tape, x).main;
    for (Index k = 0; k < out.numel(); ++k) {
      const bool pr = out.value()[k] > 0.5f, gt = s.mask.at(k);
      tp += pr && gt;
      fp += pr && !gt;
      fn += !pr && gt;
    }
  }
  const Index den = 2 * tp + fp + fn;
  return den == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(den);
}

TrainResult train_fold(const std::vector<const TrainingCase*>& train, const TrainingCase& val, const UNetConfig& net,
                       const LossConfig& loss, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                       const ProgressFn& progress) {
  net.validate();
  cfg.validate(net);
  if (train.empty()) throw ParameterError("fold has no training cases");
  std::filesystem::create_directories(out_dir);

  UNet<float> model(net, substream_seed(cfg.seed, "train.init"));
  Trainer trainer(model, loss, cfg.momentum, cfg.grad_clip_norm, cfg.use_cldice);

  Rng val_rng = make_rng(cfg.seed, "train.val");
  std::vector<PatchSample> val_patches;
  for (int i = 0; i < cfg.val_patches; ++i) val_patches.push_back(sample_patch(val, cfg.patch_size, 0.5, val_rng));

  Rng rng = make_rng(cfg.seed, "train.patches");
  TrainResult result;
  result.best_checkpoint = out_dir / "best";
  result.final_checkpoint = out_dir / "final";
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.lr_at(epoch);
    double loss_sum = 0;
    for (int b = 0; b < cfg.batches_per_epoch; ++b) {
      std::vector<PatchSample> samples;
      for (int i = 0; i < cfg.batch_size; ++i) {
        const TrainingCase& c = *train[uniform_index(rng, train.size())];
        samples.push_back(sample_patch(c, cfg.patch_size, cfg.foreground_patch_fraction, rng));
      }
      const double l = trainer.step(make_batch(samples, net.deep_supervision_heads), lr);
      ++step;
      if (!std::isfinite(l)) {
        nlohmann::json diag = {{"epoch", epoch}, {"batch", b}, {"step", step}, {"loss", "nan"}, {"lr", lr}};
        std::ofstream(out_dir / "divergence.json") << diag.dump(2) << "\n";
        write_history_csv(out_dir / "history.csv", result.history);
        throw DivergenceError("training diverged: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(b));
      }
      loss_sum += l;
    }
    HistoryRow row{epoch, step, loss_sum / cfg.batches_per_epoch, validation_dice(model, val_patches), lr};
    result.history.push_back(row);
    if (progress) progress(row);
    if (row.val_dice > result.best_val_dice) {
      result.best_val_dice = row.val_dice;
      result.best_epoch = epoch;
      model.save(result.best_checkpoint, {{"epoch", epoch}, {"val_dice", row.val_dice}});
    }
  }
  model.save(result.final_checkpoint, {{"epoch", cfg.epochs - 1}, {"val_dice", result.history.back().val_dice}});
  write_history_csv(out_dir / "history.csv", result.history);
  return result;
}

}  // namespace vesselseg
