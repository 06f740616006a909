#include "vesselseg/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "vesselseg/baselines.hpp"
#include "vesselseg/config.hpp"
#include "vesselseg/error.hpp"
#include "vesselseg/gradcheck.hpp"
#include "vesselseg/inference.hpp"
#include "vesselseg/metrics.hpp"
#include "vesselseg/parallel.hpp"
#include "vesselseg/phantom.hpp"
#include "vesselseg/pipeline.hpp"
#include "vesselseg/training.hpp"
#include "vesselseg/volume_io.hpp"

namespace vesselseg {

namespace {

namespace fs = std::filesystem;

struct CommonOptions {
  std::string config;
  std::string profile = "desk";
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_config = true) {
  if (with_config) {
    cmd->add_option("--config", o.config, "Experiment config JSON");
    cmd->add_option("--profile", o.profile, "Default profile: paper or desk")->check(CLI::IsMember({"paper", "desk"}));
  }
  cmd->add_option_function<std::uint64_t>(
      "--seed",
      [&o](const std::uint64_t& s) {
        o.seed = s;
        o.seed_given = true;
      },
      "Root seed");
  cmd->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve_config(const CommonOptions& o) {
  const Profile p = parse_profile(o.profile);
  ExperimentConfig c = o.config.empty() ? ExperimentConfig::for_profile(p) : load_config(o.config, p);
  if (o.seed_given) c.seed = o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  return c;
}

std::vector<std::array<Index, 3>> parse_seeds(const std::string& s) {
  // "z,y,x;z,y,x"
  std::vector<std::array<Index, 3>> seeds;
  std::stringstream all(s);
  std::string item;
  while (std::getline(all, item, ';')) {
    if (item.empty()) continue;
    std::array<Index, 3> v{};
    std::stringstream one(item);
    std::string part;
    int k = 0;
    while (std::getline(one, part, ',')) {
      if (k >= 3) throw ParameterError("seed '" + item + "' must have three coordinates z,y,x");
      try {
        v[static_cast<size_t>(k++)] = std::stoll(part);
      } catch (const std::exception&) {
        throw ParameterError("seed '" + item + "' is not a list of integers");
      }
    }
    if (k != 3) throw ParameterError("seed '" + item + "' must have three coordinates z,y,x");
    seeds.push_back(v);
  }
  if (seeds.empty()) throw ParameterError("--seeds is empty");
  return seeds;
}

void append_metrics_row(const fs::path& csv, const MetricsRecord& r) {
  const bool fresh = !fs::exists(csv);
  std::ofstream os(csv, std::ios::app);
  if (fresh) {
    os << "method,case_id";
    for (const char* c : kMetricColumns) os << "," << c;
    os << "\n";
  }
  os << r.method << "," << r.case_id << std::fixed << std::setprecision(6);
  for (double v : r.values()) os << "," << v;
  os << "\n";
}

void print_record(std::ostream& out, const MetricsRecord& r) {
  out << std::fixed << std::setprecision(6);
  for (size_t k = 0; k < kMetricColumns.size(); ++k) out << kMetricColumns[k] << "=" << r.values()[k] << (k + 1 < 6 ? " " : "\n");
  out << std::defaultfloat;
}

std::vector<PhantomCase> dataset_for(const ExperimentConfig& c, const fs::path& out, std::ostream& log) {
  if (!c.dataset.empty()) return read_dataset(c.dataset);
  log << "generating " << c.cases << " phantoms\n";
  auto cases = make_dataset(c.cases, c.phantom, substream_seed(c.seed, "phantom"));
  write_dataset(cases, out / "data");
  return cases;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"3D vessel segmentation: phantoms, baselines, UNet training and evaluation", "vesselseg"};
  app.require_subcommand(1);
  std::string stage = "setup";

  // phantom
  CommonOptions ph;
  int n_cases = 5;
  auto* cmd_phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  add_common(cmd_phantom, ph);
  cmd_phantom->add_option("--cases", n_cases, "Number of cases")->required();
  cmd_phantom->add_option("--out", ph.out, "Output directory")->required();

  // baseline
  CommonOptions bl;
  std::string method, volume_path, gt_path, metrics_csv, seeds_text, neighborhood = "6", case_id;
  double threshold_offset = 0, multiplier = 2.0;
  int iterations = 2, bins = 256;
  auto* cmd_baseline = app.add_subcommand("baseline", "Run a classical baseline on one volume");
  add_common(cmd_baseline, bl, false);
  cmd_baseline->add_option("method", method, "otsu or regiongrow")->required()->check(CLI::IsMember({"otsu", "regiongrow"}));
  cmd_baseline->add_option("--volume", volume_path, "Input volume")->required();
  cmd_baseline->add_option("--out", bl.out, "Output mask path")->required();
  cmd_baseline->add_option("--gt", gt_path, "Ground-truth mask; enables metrics");
  cmd_baseline->add_option("--metrics", metrics_csv, "CSV to append the metrics row to");
  cmd_baseline->add_option("--case", case_id, "Case id for the metrics row");
  cmd_baseline->add_option("--threshold-offset", threshold_offset, "Added to the Otsu threshold");
  cmd_baseline->add_option("--bins", bins, "Otsu histogram bins");
  cmd_baseline->add_option("--seeds", seeds_text, "Region growing seeds 'z,y,x;z,y,x'");
  cmd_baseline->add_option("--multiplier", multiplier, "Standard deviation multiplier");
  cmd_baseline->add_option("--iterations", iterations, "Region growing iterations");
  cmd_baseline->add_option("--neighborhood", neighborhood, "6, 18 or 26")->check(CLI::IsMember({"6", "18", "26"}));

  // train
  CommonOptions tr;
  std::string data_dir, val_case;
  bool cldice = false;
  auto* cmd_train = app.add_subcommand("train", "Train one UNet on a dataset");
  add_common(cmd_train, tr);
  cmd_train->add_option("--data", data_dir, "Dataset directory or manifest");
  cmd_train->add_option("--val", val_case, "Validation case id (default: last case)");
  cmd_train->add_flag("--cldice", cldice, "Use the combo+clDice objective");
  cmd_train->add_option("--out", tr.out, "Output directory")->required();

  // predict
  CommonOptions pr;
  std::string ckpt, mask_out;
  auto* cmd_predict = app.add_subcommand("predict", "Sliding-window prediction of one volume");
  add_common(cmd_predict, pr);
  cmd_predict->add_option("--checkpoint", ckpt, "Checkpoint stem (without .json/.bin)")->required();
  cmd_predict->add_option("--volume", volume_path, "Input volume")->required();
  cmd_predict->add_option("--out", pr.out, "Output score volume path")->required();
  cmd_predict->add_option("--mask-out", mask_out, "Output binary mask path");

  // eval
  CommonOptions ev;
  std::string pred_path;
  std::string eval_method = "prediction";
  auto* cmd_eval = app.add_subcommand("eval", "Vessel and centerline metrics of a mask against ground truth");
  add_common(cmd_eval, ev, false);
  cmd_eval->add_option("--pred", pred_path, "Predicted mask")->required();
  cmd_eval->add_option("--gt", gt_path, "Ground-truth mask")->required();
  cmd_eval->add_option("--method", eval_method, "Method name for the metrics row");
  cmd_eval->add_option("--case", case_id, "Case id for the metrics row");
  cmd_eval->add_option("--metrics", metrics_csv, "CSV to append the metrics row to");

  // loocv
  CommonOptions lo;
  auto* cmd_loocv = app.add_subcommand("loocv", "Leave-one-out study of all four methods");
  add_common(cmd_loocv, lo);
  cmd_loocv->add_option("--data", data_dir, "Dataset directory or manifest (default: generate phantoms)");
  cmd_loocv->add_option("--out", lo.out, "Output directory")->required();

  // gradcheck
  CommonOptions gc;
  int gc_seeds = 20;
  auto* cmd_gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable primitive");
  add_common(cmd_gradcheck, gc, false);
  cmd_gradcheck->add_option("--seeds", gc_seeds, "Random trials per primitive")->check(CLI::PositiveNumber);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*cmd_phantom) {
      set_num_threads(ph.threads);
      stage = "config";
      ExperimentConfig c = resolve_config(ph);
      if (n_cases < 2) throw ParameterError("--cases must be >= 2");
      stage = "phantom";
      const auto cases = make_dataset(n_cases, c.phantom, c.seed);
      write_dataset(cases, ph.out);
      for (const auto& pc : cases)
        out << pc.id << ": foreground " << std::fixed << std::setprecision(2)
            << 100.0 * static_cast<double>(pc.mask.count()) / static_cast<double>(pc.mask.size()) << "%\n"
            << std::defaultfloat;
      return kExitOk;
    }

    if (*cmd_baseline) {
      set_num_threads(bl.threads);
      stage = "config";
      BaselineConfig b;
      b.otsu_bins = bins;
      b.threshold_offset = threshold_offset;
      b.multiplier = multiplier;
      b.iterations = iterations;
      b.neighborhood = parse_neighborhood(neighborhood);
      if (method == "regiongrow" && seeds_text.empty()) throw ParameterError("regiongrow requires --seeds");
      stage = "load";
      const Volume v = load_volume(volume_path);
      stage = "baseline";
      BinaryMask m = method == "otsu" ? run_threshold_baseline(v, b) : run_regiongrow_baseline(v, parse_seeds(seeds_text), b);
      save_mask(m, bl.out);
      if (method == "otsu") out << "threshold=" << otsu_threshold(v, bins) + threshold_offset << "\n";
      out << "foreground=" << m.count() << "\n";
      if (!gt_path.empty()) {
        stage = "eval";
        const MetricsRecord r = evaluate_case(method == "otsu" ? kMethodThreshold : kMethodRegionGrow,
                                              case_id.empty() ? fs::path(volume_path).stem().string() : case_id, m,
                                              load_mask(gt_path));
        print_record(out, r);
        if (!metrics_csv.empty()) append_metrics_row(metrics_csv, r);
      }
      return kExitOk;
    }

    if (*cmd_train) {
      set_num_threads(tr.threads);
      stage = "config";
      ExperimentConfig c = resolve_config(tr);
      if (!data_dir.empty()) c.dataset = data_dir;
      c.validate();
      echo_config(c, tr.out);
      stage = "data";
      const auto cases = dataset_for(c, tr.out, out);
      std::vector<TrainingCase> prepared;
      for (const auto& pc : cases) prepared.emplace_back(pc.id, pc.image, pc.mask);
      const std::string val = val_case.empty() ? prepared.back().id : val_case;
      const TrainingCase* vc = nullptr;
      std::vector<const TrainingCase*> train;
      for (const auto& p : prepared) {
        if (p.id == val)
          vc = &p;
        else
          train.push_back(&p);
      }
      if (!vc) throw ParameterError("validation case '" + val + "' is not in the dataset");
      stage = "train";
      TrainConfig t = c.train;
      t.seed = substream_seed(c.seed, "train");
      t.use_cldice = cldice;
      const auto res = train_fold(train, *vc, c.unet, c.loss, t, tr.out, [&](const HistoryRow& r) {
        out << "epoch " << r.epoch << " step " << r.step << " loss " << r.train_loss << " val_dice " << r.val_dice
            << " lr " << r.lr << "\n";
      });
      out << "best epoch " << res.best_epoch << " val_dice " << res.best_val_dice << "\n";
      return kExitOk;
    }

    if (*cmd_predict) {
      set_num_threads(pr.threads);
      stage = "config";
      ExperimentConfig c = resolve_config(pr);
      stage = "load";
      const UNet<float> model = UNet<float>::load(ckpt);
      const Volume v = load_volume(volume_path);
      stage = "predict";
      StitchConfig sc = c.stitch;
      if (sc.patch_size % model.config().patch_divisor() != 0) sc.patch_size = model.config().patch_divisor();
      const Volume score = predict_volume(model, v, sc);
      save_volume(score, pr.out);
      if (!mask_out.empty()) save_mask(binarize(score, sc.binarize_threshold), mask_out);
      out << "wrote " << pr.out << "\n";
      return kExitOk;
    }

    if (*cmd_eval) {
      set_num_threads(ev.threads);
      stage = "load";
      const BinaryMask p = load_mask(pred_path), g = load_mask(gt_path);
      stage = "eval";
      const MetricsRecord r = evaluate_case(eval_method, case_id.empty() ? fs::path(pred_path).stem().string() : case_id, p, g);
      print_record(out, r);
      if (!metrics_csv.empty()) append_metrics_row(metrics_csv, r);
      return kExitOk;
    }

    if (*cmd_loocv) {
      set_num_threads(lo.threads);
      stage = "config";
      ExperimentConfig c = resolve_config(lo);
      if (!data_dir.empty()) c.dataset = data_dir;
      c.validate();
      stage = "data";
      const auto cases = dataset_for(c, lo.out, out);
      stage = "loocv";
      run_loocv(c, cases, lo.out, out);
      return kExitOk;
    }

    if (*cmd_gradcheck) {
      set_num_threads(gc.threads);
      stage = "gradcheck";
      const GradcheckReport report = run_gradcheck(default_gradcheck_entries(), gc_seeds);
      report.print(out);
      return report.exit_code();
    }
  } catch (const ParameterError& e) {
    err << "configuration error (" << stage << "): " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "input error (" << stage << ", field '" << e.field() << "'): " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "failed in stage " << stage << ": " << e.what() << "\n";
    return kExitVerificationFailed;
  }
  return kExitUsage;
}

}  // namespace vesselseg
