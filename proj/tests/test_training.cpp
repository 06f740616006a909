#include <doctest.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "vesselseg/training.hpp"

using namespace vesselseg;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

TrainingCase tube_case(const std::string& id, Index n, Rng& rng) {
  BinaryMask m = testing::tube(Dims{n, n, n}, n / 2, n / 2, 2.5, 0, n);
  Volume raw(m.dims(), m.spacing());
  for (Index i = 0; i < raw.size(); ++i) raw.data()[i] = static_cast<float>((m.at(i) ? 3.0 : 0.0) + 0.3 * normal01(rng));
  return TrainingCase(id, raw, m);
}

UNetConfig small_net() {
  UNetConfig c = UNetConfig::desk();
  c.base_channels = 4;
  return c;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("fold plans") {
  auto folds = plan_folds({"a", "b", "c", "d", "e"});
  REQUIRE(folds.size() == 5);
  CHECK(folds[0].test == "a");
  CHECK(folds[0].val == "b");
  CHECK(folds[0].train == std::vector<std::string>{"c", "d", "e"});
  CHECK(folds[4].test == "e");
  CHECK(folds[4].val == "a");
  CHECK(folds[4].train == std::vector<std::string>{"b", "c", "d"});
  for (const auto& f : folds) {
    CHECK(f.test != f.val);
    CHECK(std::find(f.train.begin(), f.train.end(), f.test) == f.train.end());
    CHECK(std::find(f.train.begin(), f.train.end(), f.val) == f.train.end());
  }
  CHECK(plan_folds({"x", "y", "z"})[2].train == std::vector<std::string>{"y"});
  CHECK_THROWS_AS(plan_folds({"x", "y"}), ParameterError);
}

TEST_CASE("foreground patches contain the single foreground voxel") {
  BinaryMask m(Dims{20, 20, 20}, Spacing());
  m.set(17, 2, 9, true);
  Volume raw(m.dims(), m.spacing());
  Rng rng(1);
  for (Index i = 0; i < raw.size(); ++i) raw.data()[i] = static_cast<float>(normal01(rng));
  TrainingCase c("one", raw, m);
  for (int i = 0; i < 200; ++i) {
    auto s = sample_patch(c, 8, 1.0, rng);
    CHECK(s.mask.count() == 1);
    for (int a = 0; a < 3; ++a) {
      CHECK(s.origin[static_cast<size_t>(a)] >= 0);
      CHECK(s.origin[static_cast<size_t>(a)] + 8 <= 20);
    }
    CHECK(s.image[((17 - s.origin[0]) * 8 + (2 - s.origin[1])) * 8 + (9 - s.origin[2])] == c.image(17, 2, 9));
  }
}

TEST_CASE("background patch centers are uniform over the grid") {
  const Index n = 8;
  Volume raw(Dims{n, n, n}, Spacing());
  for (Index i = 0; i < raw.size(); ++i) raw.data()[i] = static_cast<float>(i % 7);
  BinaryMask m(raw.dims(), raw.spacing());
  m.set(0, 0, 0, true);
  TrainingCase c("u", raw, m);
  Rng rng(2);
  const int draws = 10000;
  std::vector<int> hits(static_cast<size_t>(n * n * n), 0);
  for (int i = 0; i < draws; ++i) {
    auto s = sample_patch(c, 4, 0.0, rng);
    ++hits[static_cast<size_t>((s.center[0] * n + s.center[1]) * n + s.center[2])];
  }
  const double expect = static_cast<double>(draws) / static_cast<double>(n * n * n);
  const double sd = std::sqrt(expect * (1 - 1.0 / static_cast<double>(n * n * n)));
  for (int h : hits) CHECK(std::abs(h - expect) <= 5 * sd);
}

TEST_CASE("patch bounds on small and large grids") {
  Rng rng(3);
  TrainingCase big = tube_case("b", 24, rng);
  for (int i = 0; i < 1000; ++i) {
    auto s = sample_patch(big, 16, 0.5, rng);
    for (int a = 0; a < 3; ++a) {
      CHECK(s.origin[static_cast<size_t>(a)] >= 0);
      CHECK(s.origin[static_cast<size_t>(a)] + 16 <= 24);
    }
  }
  // Grid smaller than the patch: centered, zero outside.
  TrainingCase small = tube_case("s", 6, rng);
  auto s = sample_patch(small, 8, 0.5, rng);
  CHECK(s.origin == std::array<Index, 3>{-1, -1, -1});
  CHECK(s.image[0] == 0.0f);
  CHECK(s.image[((1) * 8 + 1) * 8 + 1] == small.image(0, 0, 0));
}

TEST_CASE("nesterov matches a reference loop on a quadratic") {
  Rng rng(4);
  NamedTensors<double> params{{"a", testing::random_tensor<double>(rng, Shape(1, 1, 1, 2, 3))},
                              {"b", testing::random_tensor<double>(rng, Shape(1, 1, 1, 1, 4))}};
  std::vector<Eigen::ArrayXd> theta, vel;
  for (const auto& [n, t] : params) {
    theta.push_back(t.value());
    vel.push_back(Eigen::ArrayXd::Zero(t.numel()));
  }
  const double mu = 0.9, lr = 0.05;
  NesterovSgd<double> opt(params, mu);
  for (int step = 0; step < 100; ++step) {
    opt.lookahead();
    // f = 0.5 |theta|^2, so the gradient at the lookahead point is the point itself.
    for (auto& [n, t] : params) {
      t.set_requires_grad(true);
      t.grad() = t.value();
    }
    opt.step(lr);
    for (size_t i = 0; i < theta.size(); ++i)
      for (Index k = 0; k < theta[i].size(); ++k) {
        const double g = theta[i][k] + mu * vel[i][k];
        vel[i][k] = mu * vel[i][k] - lr * g;
        theta[i][k] = theta[i][k] + vel[i][k];
      }
  }
  for (size_t i = 0; i < theta.size(); ++i) CHECK((params[i].second.value() == theta[i]).all());
  CHECK(params[0].second.value().abs().maxCoeff() < 1e-3);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  UNet<float> model(small_net(), 5);
  UNet<float> before = model.clone();
  Rng rng(5);
  TrainingCase c = tube_case("z", 16, rng);
  LossConfig lc;
  lc.deep_supervision_weights = LossConfig::halving_weights(3);
  Trainer trainer(model, lc, 0.99, 12.0, false);
  for (int i = 0; i < 3; ++i) trainer.step(make_batch({sample_patch(c, 16, 0.5, rng)}, 3), 0.0);
  for (size_t i = 0; i < model.parameters().size(); ++i)
    CHECK((model.parameters()[i].second.value() == before.parameters()[i].second.value()).all());
}

TEST_CASE("desk network overfits a single patch") {
  Rng rng(6);
  TrainingCase c = tube_case("o", 16, rng);
  const Batch batch = make_batch({sample_patch(c, 16, 1.0, rng)}, 3);
  UNet<float> model(UNetConfig::desk(), 7);
  LossConfig lc;
  lc.deep_supervision_weights = LossConfig::halving_weights(3);
  Trainer trainer(model, lc, 0.99, 12.0, false);
  const auto t0 = std::chrono::steady_clock::now();
  double best = 1e9;
  for (int i = 0; i < 200; ++i) best = std::min(best, trainer.step(batch, 0.01));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Tape<float> tape(false);
  const double final_loss = combo_loss(tape, model.forward(tape, batch.input), batch.targets, lc, false).item();
  MESSAGE("overfit loss " << final_loss << " in " << secs << " s");
  CHECK(final_loss <= -0.45);
  CHECK(secs < 60.0);
}

TEST_CASE("fold training is seed-deterministic and reloadable") {
  Rng rng(8);
  TrainingCase a = tube_case("a", 24, rng), b = tube_case("b", 24, rng), v = tube_case("v", 24, rng);
  TrainConfig cfg;
  cfg.patch_size = 16;
  cfg.epochs = 3;
  cfg.batches_per_epoch = 2;
  cfg.batch_size = 1;
  cfg.val_patches = 2;
  cfg.seed = 99;
  LossConfig lc;
  lc.deep_supervision_weights = LossConfig::halving_weights(3);
  const UNetConfig net = small_net();

  auto d1 = testing::scratch_dir("fold1"), d2 = testing::scratch_dir("fold2"), d3 = testing::scratch_dir("fold3");
  auto r1 = train_fold({&a, &b}, v, net, lc, cfg, d1);
  auto r2 = train_fold({&a, &b}, v, net, lc, cfg, d2);
  for (const char* f : {"final.bin", "best.bin", "history.csv"}) CHECK(slurp(d1 / f) == slurp(d2 / f));
  TrainConfig other = cfg;
  other.seed = 100;
  train_fold({&a, &b}, v, net, lc, other, d3);
  CHECK(slurp(d1 / "final.bin") != slurp(d3 / "final.bin"));

  REQUIRE(r1.history.size() == 3);
  for (size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].epoch == static_cast<int>(i));
    CHECK(r1.history[i].step == static_cast<long>(2 * (i + 1)));
    CHECK(r1.history[i].lr == cfg.lr_at(static_cast<int>(i)));
  }

  // The saved best model reproduces its recorded validation Dice.
  Rng val_rng = make_rng(cfg.seed, "train.val");
  std::vector<PatchSample> val;
  for (int i = 0; i < cfg.val_patches; ++i) val.push_back(sample_patch(v, cfg.patch_size, 0.5, val_rng));
  CHECK(validation_dice(UNet<float>::load(r1.best_checkpoint), val) == r1.best_val_dice);
  CHECK(r1.history[static_cast<size_t>(r1.best_epoch)].val_dice == r1.best_val_dice);
}

TEST_CASE("learning rate schedule and configuration checks") {
  TrainConfig c;
  c.epochs = 10;
  CHECK(c.lr_at(0) == c.lr0);
  CHECK(c.lr_at(5) == doctest::Approx(c.lr0 * std::pow(0.5, 0.9)));
  for (int e = 1; e < 10; ++e) CHECK(c.lr_at(e) < c.lr_at(e - 1));
  c.lr_schedule = LrSchedule::constant;
  CHECK(c.lr_at(9) == c.lr0);

  const UNetConfig net = UNetConfig::desk();
  TrainConfig ok;
  ok.patch_size = 32;
  ok.validate(net);
  for (auto mutate : std::vector<std::function<void(TrainConfig&)>>{
           [](TrainConfig& t) { t.patch_size = 20; }, [](TrainConfig& t) { t.momentum = 1.0; },
           [](TrainConfig& t) { t.batch_size = 0; }, [](TrainConfig& t) { t.foreground_patch_fraction = 1.5; },
           [](TrainConfig& t) { t.val_patches = 0; }, [](TrainConfig& t) { t.lr0 = -1; }}) {
    TrainConfig bad = ok;
    mutate(bad);
    CHECK_THROWS_AS(bad.validate(net), ParameterError);
  }

  nlohmann::json j = ok;
  TrainConfig back;
  j.get_to(back);
  CHECK(back == ok);
  j["lr_schedule"] = "cosine";
  CHECK_THROWS_AS(j.get_to(back), ParameterError);
}

}  // TEST_SUITE
