// Acceptance runner: one PASS/FAIL line per criterion, exit 1 if any fails.
#include <CLI11.hpp>
#include <malloc.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "oracles.hpp"
#include "support.hpp"
#include "vesselseg/baselines.hpp"
#include "vesselseg/gradcheck.hpp"
#include "vesselseg/inference.hpp"
#include "vesselseg/pipeline.hpp"
#include "vesselseg/training.hpp"

using namespace vesselseg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

Outcome gradient_suite() {
  const GradcheckReport r = run_gradcheck(default_gradcheck_entries(), 20);
  double worst_prim = 0, worst_loss = 0;
  int seeds = 1 << 30;
  for (const auto& res : r.results) {
    (res.name.rfind("loss.", 0) == 0 ? worst_loss : worst_prim) =
        std::max(res.name.rfind("loss.", 0) == 0 ? worst_loss : worst_prim, res.max_rel_error);
    seeds = std::min(seeds, res.seeds);
  }
  Outcome o;
  o.pass = r.exit_code() == 0 && seeds >= 20 && r.seconds < 120 && worst_prim < 1e-5 && worst_loss < 1e-4;
  o.detail = std::to_string(r.results.size()) + " entries, " + std::to_string(seeds) + " seeds, max rel err " +
             num(worst_prim) + " (primitives) " + num(worst_loss) + " (losses), " + num(r.seconds, 3) + " s";
  return o;
}

Outcome metric_oracle() {
  std::vector<BinaryMask> masks, skels;
  for (int bits = 0; bits < 256; ++bits) {
    BinaryMask m(Dims{2, 2, 2}, Spacing());
    for (int i = 0; i < 8; ++i) m.set(i >> 2, (i >> 1) & 1, i & 1, (bits >> i) & 1);
    skels.push_back(skeletonize3d(m));
    masks.push_back(std::move(m));
  }
  long mismatches = 0, pairs = 0;
  for (size_t i = 0; i < 256; ++i)
    for (size_t j = 0; j < 256; ++j, ++pairs) {
      mismatches += !oracles::same(overlap_metrics(masks[i], masks[j]), oracles::brute_vessel(masks[i], masks[j]));
      mismatches += !oracles::same(centerline_metrics(masks[i], masks[j], skels[i], skels[j]),
                                   oracles::brute_centerline(masks[i], masks[j], skels[i], skels[j]));
    }
  Rng rng(2024);
  for (int t = 0; t < 100; ++t, ++pairs) {
    BinaryMask p = testing::random_mask(rng, Dims{8, 8, 8}, 0.1 + 0.004 * t);
    BinaryMask g = testing::random_blobs(rng, Dims{8, 8, 8}, 2, 1, 3.5);
    mismatches += !oracles::same(overlap_metrics(p, g), oracles::brute_vessel(p, g));
    mismatches += !oracles::same(centerline_metrics(p, g),
                                 oracles::brute_centerline(p, g, skeletonize3d(p), skeletonize3d(g)));
  }
  int skeleton_failures = 0;
  for (int t = 0; t < 100; ++t) {
    BinaryMask m = testing::random_blobs(rng, Dims{12, 12, 12}, 1 + t % 4, 1.0, 3.5);
    BinaryMask s = skeletonize3d(m);
    if (!(skeletonize3d(s) == s) || count_components(s, Neighborhood::full26) != count_components(m, Neighborhood::full26))
      ++skeleton_failures;
  }
  return {mismatches == 0 && skeleton_failures == 0, std::to_string(pairs) + " pairs, " + std::to_string(mismatches) +
                                                          " mismatches; skeleton failures " +
                                                          std::to_string(skeleton_failures) + "/100"};
}

Outcome adjointness() {
  Tape<double> tape(false);
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(substream_seed(7, "adjoint", seed));
    auto x = testing::random_tensor<double>(rng, Shape(1, 2, 6, 6, 6));
    auto w = testing::random_tensor<double>(rng, Shape(3, 2, 2, 2, 2));
    auto y = testing::random_tensor<double>(rng, Shape(1, 3, 3, 3, 3));
    const double lhs = (conv3d(tape, x, w, Tensor<double>(), 2, 0).value() * y.value()).sum();
    const double rhs = (x.value() * conv3d_transpose(tape, y, w, 2).value()).sum();
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
  }
  return {worst <= 1e-5, "20 seeds, max relative gap " + num(worst)};
}

Outcome stitching_identity() {
  Rng rng(5);
  double worst = 0;
  int grids = 0;
  for (Index p : {8, 16, 32})
    for (int t = 0; t < 20; ++t, ++grids) {
      const Dims d{1 + static_cast<Index>(uniform_index(rng, 70)), 1 + static_cast<Index>(uniform_index(rng, 70)),
                   1 + static_cast<Index>(uniform_index(rng, 70))};
      Volume v(d, Spacing());
      StitchConfig cfg;
      cfg.patch_size = p;
      Volume out = sliding_window_predict(
          v, [](const Eigen::ArrayXf& in) { return Eigen::ArrayXf::Constant(in.size(), 0.7f); }, cfg);
      worst = std::max(worst, static_cast<double>((out.data() - 0.7f).abs().maxCoeff()));
    }
  return {worst <= 1e-6, std::to_string(grids) + " grids, max deviation " + num(worst)};
}

Outcome overfit() {
  Rng rng(6);
  BinaryMask m = testing::tube(Dims{16, 16, 16}, 8, 8, 2.5, 0, 16);
  Volume raw(m.dims(), m.spacing());
  for (Index i = 0; i < raw.size(); ++i) raw.data()[i] = static_cast<float>((m.at(i) ? 3.0 : 0.0) + 0.3 * normal01(rng));
  TrainingCase c("patch", raw, m);
  const Batch batch = make_batch({sample_patch(c, 16, 1.0, rng)}, 3);
  UNet<float> model(UNetConfig::desk(), 7);
  LossConfig lc;
  lc.deep_supervision_weights = LossConfig::halving_weights(3);
  Trainer trainer(model, lc, 0.99, 12.0, false);
  const auto t0 = Clock::now();
  for (int i = 0; i < 200; ++i) trainer.step(batch, 0.01);
  const double secs = seconds_since(t0);
  Tape<float> tape(false);
  const double loss = combo_loss(tape, model.forward(tape, batch.input), batch.targets, lc, false).item();
  return {loss <= -0.45 && secs < 60, "combo loss " + num(loss) + " after 200 steps in " + num(secs, 3) + " s"};
}

double mean_of(const LoocvResult& r, const std::string& method, int column) {
  for (const auto& a : r.aggregate)
    if (a.method == method) return a.mean[static_cast<size_t>(column)];
  return std::nan("");
}

struct Study {
  LoocvResult result;
  double seconds = 0;
};

Study loocv(const fs::path& out) {
  fs::remove_all(out);
  ExperimentConfig cfg = ExperimentConfig::for_profile(Profile::desk);
  cfg.validate();
  const auto cases = make_dataset(cfg.cases, cfg.phantom, substream_seed(cfg.seed, "phantom"));
  std::ofstream log(fs::path(out.string() + ".log"));
  const auto t0 = Clock::now();
  Study s{run_loocv(cfg, cases, out, log), 0};
  s.seconds = seconds_since(t0);
  return s;
}

Outcome end_to_end(const Study& s) {
  const auto& r = s.result;
  const double cv = mean_of(r, kMethodCombo, 0), cc = mean_of(r, kMethodCombo, 3);
  const double kv = mean_of(r, kMethodComboClDice, 0), kc = mean_of(r, kMethodComboClDice, 3);
  const double tv = mean_of(r, kMethodThreshold, 0), rv = mean_of(r, kMethodRegionGrow, 0);
  const bool quality = cv >= 0.80 && cc >= 0.80 && kv >= 0.80 && kc >= 0.80;
  const bool order = std::min(cv, kv) > std::max(tv, rv);
  const ExperimentConfig cfg = ExperimentConfig::for_profile(Profile::desk);
  const bool budget = cfg.train.epochs <= 60 && s.seconds < 45 * 60;
  return {quality && order && budget,
          "vessel/centerline Dice combo " + num(cv, 3) + "/" + num(cc, 3) + ", combo+clDice " + num(kv, 3) + "/" +
              num(kc, 3) + "; threshold " + num(tv, 3) + ", region growing " + num(rv, 3) + "; " +
              num(s.seconds / 60, 3) + " min"};
}

Outcome ablation(const Study& s) {
  const double gap = std::abs(mean_of(s.result, kMethodCombo, 0) - mean_of(s.result, kMethodComboClDice, 0));
  return {gap <= 0.05, "|vessel Dice gap| " + num(gap, 3)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  int compared = 0, differing = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    const auto ext = rel.extension().string();
    const bool checkpoint = ext == ".bin" || (ext == ".json" && rel.filename().string().find("pred") == std::string::npos &&
                                              rel.filename().string().find("score") == std::string::npos);
    if (!checkpoint && ext != ".csv") continue;
    if (rel.filename() == "config.json" || rel.parent_path().filename() == "data") continue;
    ++compared;
    if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) ++differing;
  }
  return {compared > 0 && differing == 0,
          std::to_string(compared) + " checkpoint/CSV files compared, " + std::to_string(differing) + " differ"};
}

Outcome baselines() {
  int volumes = 0, otsu_mismatch = 0;
  Rng rng(9);
  for (int t = 0; t < 20; ++t, ++volumes) {
    Volume v(Dims{10, 11, 12}, Spacing());
    const double split = uniform01(rng);
    for (Index i = 0; i < v.size(); ++i)
      v.data()[i] = static_cast<float>(uniform01(rng) < split ? normal01(rng) * 4 : 30 + normal01(rng) * 9);
    otsu_mismatch += otsu_threshold(v) != oracles::brute_force_otsu(v, 256);
  }
  const auto cases = make_dataset(5, PhantomSpec{}, 4242);
  int rg_bad = 0, nonmonotone = 0;
  for (const auto& c : cases) {
    ++volumes;
    otsu_mismatch += otsu_threshold(c.image) != oracles::brute_force_otsu(c.image, 256);
    RegionGrowConfig cfg;
    cfg.seeds = {c.seed_voxel};
    cfg.multiplier = 2.0;
    cfg.iterations = 2;
    const BinaryMask r = confidence_region_grow(c.image, cfg);
    if (!r(c.seed_voxel[0], c.seed_voxel[1], c.seed_voxel[2]) || count_components(r, Neighborhood::faces6) != 1) ++rg_bad;
    Index prev = 0;
    for (double k = 1.0; k <= 3.0; k += 0.25) {
      cfg.multiplier = k;
      const Index n = confidence_region_grow(c.image, cfg).count();
      if (n < prev) ++nonmonotone;
      prev = n;
    }
  }
  return {otsu_mismatch == 0 && rg_bad == 0 && nonmonotone == 0,
          "Otsu mismatches " + std::to_string(otsu_mismatch) + "/" + std::to_string(volumes) +
              "; region growing bad regions " + std::to_string(rg_bad) + ", size decreases " + std::to_string(nonmonotone)};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"vesselseg acceptance"};
  std::string work = (fs::temp_directory_path() / "vesselseg_acceptance").string();
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory for the phantom studies");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  bool all = true;
  auto report = [&](int id, const char* name, const Outcome& o) {
    all = all && o.pass;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " " << name << ": " << o.detail << std::endl;
  };
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  if (wanted(1)) report(1, "gradient suite", gradient_suite());
  if (wanted(2)) report(2, "metric oracle", metric_oracle());
  if (wanted(3)) report(3, "conv adjointness", adjointness());
  if (wanted(4)) report(4, "stitching identity", stitching_identity());
  if (wanted(5)) report(5, "overfit sanity", overfit());
  if (wanted(6) || wanted(7) || wanted(8)) {
    const Study first = loocv(fs::path(work) / "loocv_a");
    if (wanted(6)) report(6, "phantom LOOCV", end_to_end(first));
    if (wanted(7)) report(7, "ablation parity", ablation(first));
    if (wanted(8)) {
      loocv(fs::path(work) / "loocv_b");
      report(8, "determinism", determinism(fs::path(work) / "loocv_a", fs::path(work) / "loocv_b"));
    }
  }
  if (wanted(9)) report(9, "baseline correctness", baselines());
  return all ? 0 : 1;
}
