#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"

using namespace agglom3d;

namespace {

std::vector<TeacherSpec> toy_teachers() {
  return {oracle::toy_teacher("a", 4, LossKind::kL2), oracle::toy_teacher("b", 3, LossKind::kCosine)};
}

StudentModel toy_student(std::uint64_t seed = 1) {
  auto sc = StudentConfig::for_teachers(toy_teachers(), {Point3::Constant(-0.1), Point3::Constant(1.1)});
  sc.pe_frequencies = 2;
  sc.trunk_widths = {16};
  sc.init_seed = seed;
  return init_student(sc);
}

std::vector<TeacherLossPlan> plans() {
  std::vector<TeacherLossPlan> p;
  for (const auto& t : toy_teachers()) p.push_back(map_teacher_loss(t));
  return p;
}

Batch toy_batch(int n = 32, std::uint64_t seed = 2) {
  const auto scenes = oracle::linear_toy(1, n, seed, toy_teachers(), {0.0, 0.1});
  Batch b;
  b.points = scenes[0].cloud.points;
  b.targets = scenes[0].bank.features;
  b.masks.assign(2, std::vector<bool>(static_cast<std::size_t>(n), true));
  return b;
}

TrainConfig small_config(ObjectiveMode mode = ObjectiveMode::kStabilized) {
  TrainConfig tc;
  tc.lr0 = 1e-2;
  tc.epochs = 4;
  tc.scenes_per_batch = 2;
  tc.points_per_scene = 64;
  tc.mode = mode;
  tc.seed = 3;
  return tc;
}

}  // namespace

TEST(TrainStep, ZeroLearningRateLeavesParametersBitExact) {
  auto state = TrainState::start(toy_student());
  const auto before = state.model.params.flatten();
  const auto rec = train_step(state, toy_batch(), plans(), ObjectiveMode::kStabilized, 0.0);
  EXPECT_TRUE(rec.finite);
  EXPECT_EQ(state.model.params.flatten(), before);
  EXPECT_EQ(state.step, 1u);
}

TEST(TrainStep, MatchesHandWrittenAdam) {
  const AdamConfig adam;
  const double lr = 1e-3;
  auto state = TrainState::start(toy_student());
  const auto batch = toy_batch();
  Eigen::VectorXd theta = state.model.params.flatten();
  Eigen::VectorXd m = Eigen::VectorXd::Zero(theta.size()), v = m;
  for (int t = 1; t <= 3; ++t) {
    StudentModel probe = state.model;
    const Eigen::VectorXd g = evaluate_objective(probe, batch, plans(), ObjectiveMode::kStabilized).grads.params.flatten();
    train_step(state, batch, plans(), ObjectiveMode::kStabilized, lr, adam);
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      m[i] = 0.9 * m[i] + 0.1 * g[i];
      v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
      const double mh = m[i] / (1.0 - std::pow(0.9, t));
      const double vh = v[i] / (1.0 - std::pow(0.999, t));
      theta[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_LT((state.model.params.flatten() - theta).cwiseAbs().maxCoeff(), 1e-12) << "step " << t;
  }
}

TEST(TrainStep, FirstStepMovesEachParameterByAboutLr) {
  auto state = TrainState::start(toy_student());
  const auto before = state.model.params.flatten();
  const auto g = evaluate_objective(state.model, toy_batch(), plans(), ObjectiveMode::kStabilized).grads.params.flatten();
  train_step(state, toy_batch(), plans(), ObjectiveMode::kStabilized, 1e-3);
  const Eigen::VectorXd delta = state.model.params.flatten() - before;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    if (std::abs(g[i]) > 1e-4) {
      EXPECT_NEAR(delta[i], -1e-3 * (g[i] > 0 ? 1.0 : -1.0), 1e-6);
    }
  }
}

TEST(TrainStep, RepeatedStepsReduceTheObjective) {
  auto state = TrainState::start(toy_student());
  const auto batch = toy_batch(64);
  const double first = train_step(state, batch, plans(), ObjectiveMode::kUnweighted, 1e-2).breakdown.total;
  double last = first;
  for (int i = 0; i < 199; ++i) last = train_step(state, batch, plans(), ObjectiveMode::kUnweighted, 1e-2).breakdown.total;
  EXPECT_LT(last, 0.5 * first);
}

TEST(TrainStep, EmptyTeacherMaskIsContractError) {
  auto state = TrainState::start(toy_student());
  auto batch = toy_batch();
  batch.masks[1].assign(batch.masks[1].size(), false);
  EXPECT_THROW(train_step(state, batch, plans(), ObjectiveMode::kStabilized, 1e-3), ContractError);
}

TEST(EvaluateObjective, MaskedPointsContributeNothing) {
  const auto model = toy_student();
  auto batch = toy_batch(20);
  // Mask out the last 5 points for every teacher, then compare with the
  // batch that simply omits them.
  Batch trimmed;
  trimmed.points.assign(batch.points.begin(), batch.points.begin() + 15);
  for (auto& m : batch.masks) {
    for (std::size_t i = 15; i < 20; ++i) m[i] = false;
  }
  for (std::size_t t = 0; t < 2; ++t) {
    trimmed.targets.push_back(batch.targets[t].topRows(15));
    trimmed.masks.push_back(std::vector<bool>(15, true));
  }
  for (auto mode : {ObjectiveMode::kStabilized, ObjectiveMode::kUnweighted}) {
    const auto a = evaluate_objective(model, batch, plans(), mode);
    const auto b = evaluate_objective(model, trimmed, plans(), mode);
    EXPECT_NEAR(a.objective.breakdown.total, b.objective.breakdown.total, 1e-12);
    EXPECT_LT((a.grads.params.flatten() - b.grads.params.flatten()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(EvaluateObjective, ScalarGradientMatchesFiniteDifference) {
  auto model = toy_student();
  model.params.log_sigma << 0.4, -0.3;
  const auto batch = toy_batch();
  for (auto mode : {ObjectiveMode::kStabilized, ObjectiveMode::kNaiveLogSigma, ObjectiveMode::kAutoWeight}) {
    const auto g = evaluate_objective(model, batch, plans(), mode).grads.params.log_sigma;
    for (Eigen::Index i = 0; i < 2; ++i) {
      auto p = model, m = model;
      p.params.log_sigma[i] += 1e-6;
      m.params.log_sigma[i] -= 1e-6;
      const double num = (evaluate_objective(p, batch, plans(), mode).objective.breakdown.total -
                          evaluate_objective(m, batch, plans(), mode).objective.breakdown.total) /
                         2e-6;
      EXPECT_NEAR(g[i], num, 1e-6 * std::max(1.0, std::abs(num)));
    }
  }
}

TEST(Train, OneEpochOneBatchIsOneStep) {
  auto tc = small_config();
  tc.epochs = 1;
  const auto scenes = oracle::linear_toy(2, 100, 4, toy_teachers(), {0.0, 0.1});
  const auto r = train(scenes, toy_teachers(), toy_student(), tc);
  EXPECT_EQ(r.steps_taken, 1u);
  EXPECT_EQ(r.log.steps.size(), 1u);
  EXPECT_EQ(r.log.epochs.size(), 1u);
}

TEST(Train, StepCountAndLearningRateSchedule) {
  auto tc = small_config();
  tc.scenes_per_batch = 2;
  const auto scenes = oracle::linear_toy(5, 80, 5, toy_teachers(), {0.0, 0.1});
  const auto r = train(scenes, toy_teachers(), toy_student(), tc);
  EXPECT_EQ(r.steps_taken, 4u * 3u);
  for (const auto& e : r.log.epochs) EXPECT_DOUBLE_EQ(e.lr, 1e-2 * std::pow(0.95, e.epoch));
  for (const auto& s : r.log.steps) EXPECT_GE(s.breakdown.total, 0.0);
}

TEST(Train, DeterministicForFixedSeed) {
  const auto scenes = oracle::linear_toy(4, 80, 6, toy_teachers(), {0.0, 0.2});
  auto tc = small_config();
  tc.augment.flip = true;
  tc.augment.elastic = true;
  const auto a = train(scenes, toy_teachers(), toy_student(), tc);
  const auto b = train(scenes, toy_teachers(), toy_student(), tc);
  EXPECT_EQ(a.model.params.flatten(), b.model.params.flatten());
  EXPECT_EQ(log_to_jsonl(a.log), log_to_jsonl(b.log));
  tc.seed = 4;
  const auto c = train(scenes, toy_teachers(), toy_student(), tc);
  EXPECT_NE(a.model.params.flatten(), c.model.params.flatten());
}

TEST(Train, WritesOneCheckpointPerEpoch) {
  const auto dir = std::filesystem::temp_directory_path() / "agglom3d_test_trainer_ck";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto scenes = oracle::linear_toy(2, 50, 7, toy_teachers(), {0.0, 0.1});
  const auto r = train(scenes, toy_teachers(), toy_student(), small_config(), {dir});
  for (int e = 0; e < 4; ++e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.a3ck", e);
    ASSERT_TRUE(std::filesystem::exists(dir / name));
  }
  EXPECT_EQ(read_checkpoint(dir / "epoch_003.a3ck").model.params.flatten(), r.model.params.flatten());
  std::filesystem::remove_all(dir);
}

TEST(Train, RejectsBadConfig) {
  const auto scenes = oracle::linear_toy(1, 20, 8, toy_teachers(), {0.0, 0.1});
  auto tc = small_config();
  tc.lr0 = 0.0;
  EXPECT_THROW(train(scenes, toy_teachers(), toy_student(), tc), ValidationError);
  tc = small_config();
  tc.epochs = 0;
  EXPECT_THROW(train(scenes, toy_teachers(), toy_student(), tc), ValidationError);
  EXPECT_THROW(train({}, toy_teachers(), toy_student(), small_config()), ContractError);
}

TEST(SigmaTrajectory, StartsAtOneAndHasOneRowPerEpoch) {
  const auto scenes = oracle::linear_toy(2, 60, 9, toy_teachers(), {0.0, 0.1});
  const auto r = train(scenes, toy_teachers(), toy_student(), small_config());
  const auto t = sigma_trajectory(r.log);
  ASSERT_EQ(t.per_epoch.size(), 4u);
  for (double s : t.per_epoch[0]) EXPECT_EQ(s, 1.0);
  const auto csv = t.to_csv();
  EXPECT_EQ(csv.rfind("epoch,sigma_a,sigma_b,status\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.find("collapse"), std::string::npos);
}

TEST(SigmaTrajectory, MarksCollapseEpoch) {
  const auto r = train(oracle::collapse_toy_scenes(), oracle::collapse_toy_teachers(), oracle::collapse_toy_student(),
                       oracle::collapse_toy_config(ObjectiveMode::kNaiveLogSigma));
  ASSERT_TRUE(r.log.collapse);
  const auto t = sigma_trajectory(r.log);
  ASSERT_TRUE(t.collapse_epoch);
  EXPECT_EQ(static_cast<std::size_t>(*t.collapse_epoch) + 1, t.per_epoch.size());
  EXPECT_NE(t.to_csv().find(",collapse\n"), std::string::npos);
}

TEST(SigmaTrajectory, UnweightedLogIsContractError) {
  const auto scenes = oracle::linear_toy(1, 30, 10, toy_teachers(), {0.0, 0.1});
  auto tc = small_config(ObjectiveMode::kUnweighted);
  tc.epochs = 1;
  const auto r = train(scenes, toy_teachers(), toy_student(), tc);
  EXPECT_THROW(sigma_trajectory(r.log), ContractError);
}
