#include "vesselseg/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>

#include "vesselseg/baselines.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/inference.hpp"
#include "vesselseg/rng.hpp"
#include "vesselseg/training.hpp"
#include "vesselseg/volume_io.hpp"

namespace vesselseg {

BinaryMask run_threshold_baseline(const Volume& image, const BaselineConfig& cfg) {
  return apply_threshold(image, otsu_threshold(image, cfg.otsu_bins) + cfg.threshold_offset);
}

BinaryMask run_regiongrow_baseline(const Volume& image, const std::vector<std::array<Index, 3>>& seeds,
                                   const BaselineConfig& cfg) {
  RegionGrowConfig rg;
  rg.seeds = seeds;
  rg.multiplier = cfg.multiplier;
  rg.iterations = cfg.iterations;
  rg.neighborhood = cfg.neighborhood;
  rg.init_radius = cfg.init_radius;
  return confidence_region_grow(image, rg);
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

LoocvResult run_loocv(const ExperimentConfig& cfg, const std::vector<PhantomCase>& cases,
                      const std::filesystem::path& out_dir, std::ostream& log) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  echo_config(cfg, out_dir);
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<std::string> ids;
  std::map<std::string, size_t> index;
  std::vector<TrainingCase> prepared;
  for (size_t i = 0; i < cases.size(); ++i) {
    ids.push_back(cases[i].id);
    index[cases[i].id] = i;
    prepared.emplace_back(cases[i].id, cases[i].image, cases[i].mask);
  }
  const auto folds = plan_folds(ids, cfg.seed);

  std::vector<MetricsRecord> records;
  for (const auto& c : cases) {
    const BinaryMask thr = run_threshold_baseline(c.image, cfg.baseline);
    const BinaryMask rg = run_regiongrow_baseline(c.image, {c.seed_voxel}, cfg.baseline);
    records.push_back(evaluate_case(kMethodThreshold, c.id, thr, c.mask));
    records.push_back(evaluate_case(kMethodRegionGrow, c.id, rg, c.mask));
    log << "[baselines] " << c.id << " threshold dice=" << std::fixed << std::setprecision(3)
        << records[records.size() - 2].vessel.dice << " regiongrow dice=" << records.back().vessel.dice << "\n"
        << std::defaultfloat;
  }

  for (const bool use_cldice : {false, true}) {
    const std::string method = use_cldice ? kMethodComboClDice : kMethodCombo;
    const std::string variant_dir = use_cldice ? "unet_combo_cldice" : "unet_combo";
    for (size_t f = 0; f < folds.size(); ++f) {
      const FoldPlan& fold = folds[f];
      TrainConfig tc = cfg.train;
      tc.use_cldice = use_cldice;
      // Both objectives share initialization and patch order within a fold.
      tc.seed = substream_seed(cfg.seed, "loocv.fold", f);
      std::vector<const TrainingCase*> train;
      for (const auto& id : fold.train) train.push_back(&prepared[index.at(id)]);
      const auto fold_dir = out_dir / variant_dir / ("fold_" + fold.test);
      const auto tf = std::chrono::steady_clock::now();
      TrainResult tr;
      try {
        tr = train_fold(train, prepared[index.at(fold.val)], cfg.unet, cfg.loss, tc, fold_dir);
      } catch (const DivergenceError& e) {
        throw Error("stage train (" + method + ", fold " + fold.test + "): " + e.what());
      }
      const UNet<float> model = UNet<float>::load(tr.best_checkpoint);
      const PhantomCase& test = cases[index.at(fold.test)];
      const Volume score = predict_volume(model, test.image, cfg.stitch);
      const BinaryMask pred = binarize(score, cfg.stitch.binarize_threshold);
      save_volume(score, fold_dir / "score.f32");
      save_mask(pred, fold_dir / "pred.f32");
      records.push_back(evaluate_case(method, fold.test, pred, test.mask));
      log << "[" << method << "] fold test=" << fold.test << " val=" << fold.val << " best_epoch=" << tr.best_epoch
          << " val_dice=" << std::fixed << std::setprecision(3) << tr.best_val_dice
          << " test_dice=" << records.back().vessel.dice << " cl_dice=" << records.back().centerline.dice << " ("
          << std::setprecision(1) << seconds_since(tf) << " s)\n"
          << std::defaultfloat;
    }
  }

  // Table order: baselines first, then the two networks.
  std::vector<MetricsRecord> ordered;
  for (const char* m : {kMethodThreshold, kMethodRegionGrow, kMethodCombo, kMethodComboClDice})
    for (const auto& id : ids)
      for (const auto& r : records)
        if (r.method == m && r.case_id == id) ordered.push_back(r);

  LoocvResult result{ordered, aggregate(ordered)};
  {
    std::ofstream os(out_dir / "metrics.csv");
    write_metrics_csv(os, result.records);
  }
  {
    std::ofstream os(out_dir / "aggregate.csv");
    write_aggregate_csv(os, result.aggregate);
  }
  {
    std::ofstream os(out_dir / "tables.txt");
    os << "Per-case results\n\n";
    print_case_table(os, result.records);
    os << "Mean +- std over " << cases.size() << " cases\n\n";
    print_aggregate_table(os, result.aggregate);
  }
  print_aggregate_table(log, result.aggregate);
  log << "loocv finished in " << std::fixed << std::setprecision(1) << seconds_since(t0) << " s\n" << std::defaultfloat;
  return result;
}

}  // namespace vesselseg
