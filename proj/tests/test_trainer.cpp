#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <memory>
#include <sstream>

#include "quadrank/fixtures.hpp"
#include "quadrank/trainer.hpp"

using namespace quadrank;

namespace fs = std::filesystem;

namespace {

std::vector<PairSource> tiny_sources(std::uint64_t seed = 1) {
  Rng rng(seed);
  auto images = std::make_shared<std::vector<GrayImage>>();
  images->push_back(synthetic_texture(64, 64, rng));
  images->push_back(synthetic_texture(64, 64, rng));
  return {warp_source(images, kSmallWarpMax)};
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.arch = "linear";
  cfg.epochs = 10;
  cfg.quads_per_pair = 300;
  cfg.batch_size = 100;
  cfg.heldout_count = 200;
  cfg.heldout_every = 5;
  cfg.seed = 3;
  return cfg;
}

double quad_loss(const ResponseModel& m, const Quadruple& q) {
  const auto r = quad_responses(m, std::span<const Quadruple>(&q, 1));
  return hinge(agreement(r[0]));
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("quadrank_trainer_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Train, ZeroEpochsReturnsInitialModel) {
  TrainConfig cfg = small_config();
  cfg.epochs = 0;
  const auto sources = tiny_sources();
  const TrainResult r = train(cfg, sources);
  EXPECT_EQ(r.model, build_model("linear", cfg.seed));
  EXPECT_TRUE(r.log.epochs.empty());
  EXPECT_TRUE(r.log.heldout.empty());
}

TEST(Train, TinyDatasetHalvesLoss) {
  TrainConfig cfg;
  cfg.arch = "linear";
  cfg.epochs = 50;
  cfg.seed = 1;
  cfg.heldout_every = 0;
  const auto sources = tiny_sources();
  const TrainResult r = train(cfg, sources);
  ASSERT_EQ(r.log.epochs.size(), 50u);
  ASSERT_EQ(r.log.heldout.size(), 2u);
  const double initial = r.log.heldout.front().mean_loss;
  const double final_loss = r.log.heldout.back().mean_loss;
  EXPECT_LE(final_loss, 0.5 * initial) << "initial " << initial << " final " << final_loss;
  EXPECT_LE(r.log.final_heldout_misrank(), r.log.initial_heldout_misrank());
  EXPECT_LT(r.log.epochs.back().mean_loss, r.log.epochs.front().mean_loss);
}

TEST(Train, DeterministicUnderSeed) {
  const auto sources = tiny_sources();
  const TrainResult a = train(small_config(), sources);
  const TrainResult b = train(small_config(), sources);
  EXPECT_EQ(encode_model(a.model), encode_model(b.model));
  EXPECT_EQ(train_log_csv(a.log, 3), train_log_csv(b.log, 3));
  TrainConfig other = small_config();
  other.seed = 4;
  EXPECT_NE(encode_model(train(other, sources).model), encode_model(a.model));
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const fs::path dir = scratch("resume");
  const auto sources = tiny_sources();
  TrainConfig cfg = small_config();
  cfg.arch = "c(5,1,2,0),b,e,c(13,2,1,0)";
  cfg.checkpoint_every = 4;
  cfg.checkpoint_dir = dir;
  const TrainResult full = train(cfg, sources);
  EXPECT_TRUE(fs::exists(checkpoint_path(cfg, 4)));
  EXPECT_TRUE(fs::exists(checkpoint_path(cfg, 8)));
  EXPECT_TRUE(fs::exists(checkpoint_path(cfg, 10)));

  TrainConfig resumed = cfg;
  resumed.checkpoint_every = 0;
  resumed.resume_from = checkpoint_path(cfg, 4);
  const TrainResult rest = train(resumed, sources);
  EXPECT_EQ(encode_model(rest.model), encode_model(full.model));
  EXPECT_EQ(rest.optimizer, full.optimizer);
  ASSERT_EQ(rest.log.epochs.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(rest.log.epochs[i].epoch, full.log.epochs[4 + i].epoch);
    EXPECT_EQ(rest.log.epochs[i].mean_loss, full.log.epochs[4 + i].mean_loss);
    EXPECT_EQ(rest.log.epochs[i].rng_digest, full.log.epochs[4 + i].rng_digest);
  }
  const ModelFile last = load_model_file(checkpoint_path(cfg, 10));
  ASSERT_TRUE(last.training.has_value());
  EXPECT_EQ(last.training->epoch, 10u);
  EXPECT_EQ(last.model, full.model);
  fs::remove_all(dir);
}

TEST(Train, FrozenIdentityPairsStayRanked) {
  Rng rng(5);
  const GrayImage img = synthetic_texture(64, 64, rng);
  auto pair = std::make_shared<const CorrespondencePair>(make_aligned_pair(img, img));
  const std::vector<PairSource> sources{fixed_source(pair)};
  TrainConfig cfg = small_config();
  cfg.arch = "mlp32";
  cfg.sampling = QuadSampling::frozen();
  const TrainResult r = train(cfg, sources);
  EXPECT_LT(r.log.final_heldout_misrank(), 0.05);
  for (const auto& e : r.log.epochs) EXPECT_TRUE(std::isfinite(e.mean_loss));
}

TEST(TrainStep, UpdateIsDescentDirectionOnMisrankedQuadruple) {
  // A full first Adadelta step moves every coordinate by about 3e-3, which
  // can overshoot on a single quadruple; a shortened step along the same
  // update must lower the loss.
  const auto sources = tiny_sources(7);
  Rng rng(8);
  const CorrespondencePair pair = sources[0](rng);
  for (const char* arch : {"linear", "mlp32"}) {
    int checked = 0;
    for (int attempt = 0; attempt < 400 && checked < 10; ++attempt) {
      ResponseModel m = build_model(arch, 100 + attempt);
      const Quadruple q = sample_quadruple(pair, rng);
      const double before = quad_loss(m, q);
      if (agreement(quad_responses(m, std::span<const Quadruple>(&q, 1))[0]) > 0) continue;
      const std::vector<float> w0(m.params().begin(), m.params().end());
      AdadeltaState st(m.param_count());
      const StepResult s = train_step(m, st, std::span<const Quadruple>(&q, 1));
      EXPECT_NEAR(s.mean_loss, before, 1e-5);
      EXPECT_EQ(s.misrank_fraction, 1.0);
      for (std::size_t k = 0; k < w0.size(); ++k) m.params()[k] = w0[k] + 0.01f * (m.params()[k] - w0[k]);
      EXPECT_LT(quad_loss(m, q), before) << arch;
      ++checked;
    }
    EXPECT_EQ(checked, 10) << arch;
  }
}

TEST(TrainStep, NonFiniteLossAbortsBeforeUpdate) {
  const auto sources = tiny_sources();
  Rng rng(9);
  const CorrespondencePair pair = sources[0](rng);
  const Quadruple q = sample_quadruple(pair, rng);
  ResponseModel m = build_model("linear", 1);
  m.params()[289] = std::numeric_limits<float>::quiet_NaN();
  const ResponseModel before = m;
  AdadeltaState st(m.param_count());
  EXPECT_THROW(train_step(m, st, std::span<const Quadruple>(&q, 1)), Error);
  EXPECT_EQ(st, AdadeltaState(m.param_count()));
  EXPECT_EQ(encode_model(m), encode_model(before));
}

TEST(Train, NonFiniteCheckpointLeavesFileIntact) {
  const fs::path dir = scratch("nan");
  ResponseModel m = build_model("linear", 1);
  m.params()[0] = std::numeric_limits<float>::infinity();
  const TrainingState ts{2, AdadeltaState(m.param_count())};
  save_model(m, dir / "bad.qrnk", &ts);
  const std::string bytes = read_file(dir / "bad.qrnk");
  TrainConfig cfg = small_config();
  cfg.resume_from = dir / "bad.qrnk";
  cfg.checkpoint_every = 1;
  cfg.checkpoint_dir = dir;
  const auto sources = tiny_sources();
  EXPECT_THROW(train(cfg, sources), Error);
  EXPECT_EQ(read_file(dir / "bad.qrnk"), bytes);
  EXPECT_FALSE(fs::exists(checkpoint_path(cfg, 3)));
  fs::remove_all(dir);
}

TEST(Train, ConfigValidation) {
  const auto sources = tiny_sources();
  TrainConfig cfg = small_config();
  cfg.batch_size = 400;
  EXPECT_THROW(train(cfg, sources), Error);
  cfg = small_config();
  cfg.checkpoint_every = 2;
  EXPECT_THROW(train(cfg, sources), Error);
  EXPECT_THROW(train(small_config(), std::vector<PairSource>{}), Error);
  TrainConfig resume = small_config();
  const fs::path dir = scratch("plain");
  save_model(build_model("linear", 0), dir / "plain.qrnk");
  resume.resume_from = dir / "plain.qrnk";
  EXPECT_THROW(train(resume, sources), Error);
  fs::remove_all(dir);
}

TEST(Train, HeldoutSetIsIndependentOfTrainingDraws) {
  const auto sources = tiny_sources();
  const auto a = make_heldout_set(sources, 300, 11, {});
  const auto b = make_heldout_set(sources, 300, 11, {});
  ASSERT_EQ(a.size(), 300u);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i].patches[3].values, b[i].patches[3].values);
  // epoch callback sees each epoch in order
  std::vector<std::size_t> seen;
  TrainConfig cfg = small_config();
  cfg.epochs = 3;
  train(cfg, sources, [&](const EpochRecord& r) { seen.push_back(r.epoch); });
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
}

TEST(TrainLogCsv, Layout) {
  TrainLog log;
  log.heldout.push_back({0, 1.0, 0.5});
  log.epochs.push_back({1, 0, 0.75, 0.25, 1.5, 0xabcdefull});
  std::istringstream in(train_log_csv(log, 5));
  std::string l;
  std::getline(in, l);
  EXPECT_EQ(l, "# quadrank " + std::string(kVersion) + " seed=5");
  std::getline(in, l);
  EXPECT_EQ(l, "kind,epoch,source,mean_loss,misrank_fraction,rng_digest");
  std::getline(in, l);
  EXPECT_EQ(l, "heldout,0,,1,0.5,");
  std::getline(in, l);
  EXPECT_EQ(l, "train,1,0,0.75,0.25,0000000000abcdef");
  const std::string timed = train_log_csv(log, 5, true);
  EXPECT_NE(timed.find("train,1,0,0.75,0.25,0000000000abcdef,1.500"), std::string::npos);
}

TEST(Checkpoint, PathNaming) {
  TrainConfig cfg;
  cfg.checkpoint_dir = "ck";
  cfg.checkpoint_stem = "lin";
  EXPECT_EQ(checkpoint_path(cfg, 42), fs::path("ck") / "lin_epoch000042.qrnk");
}
