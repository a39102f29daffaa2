#include <gtest/gtest.h>

#include <filesystem>

#include "oracles.hpp"

using namespace agglom3d;

namespace {

const std::filesystem::path kConfigs = AGGLOM3D_CONFIG_DIR;

RunConfig tiny_config() {
  auto c = load_config(kConfigs / "default.json");
  c.scene.num_objects = 3;
  c.scene.points_per_object = 120;
  c.scene.voxel_size = 0.05;
  c.scene.num_scans = 2;
  c.scene.frames_per_scan = 3;
  c.student.trunk_widths = {16};
  c.trainer.epochs = 2;
  c.trainer.points_per_scene = 128;
  return c;
}

}  // namespace

TEST(Rig, ScansTogetherSeeMostOfTheLayout) {
  const auto c = load_config(kConfigs / "default.json");
  const auto layout = build_layout(c);
  std::vector<bool> seen(layout.size(), false);
  const auto k = rig_intrinsics(c.scene);
  for (int scan = 0; scan < c.scene.num_scans; ++scan) {
    for (int f = 0; f < c.scene.frames_per_scan; ++f) {
      const auto pose = rig_pose(c.scene, scan, f);
      pose.validate();
      const auto depth = render_depth(layout, pose, k, c.scene.splat_radius);
      for (const auto& corr : compute_correspondences(layout, pose, k, depth, c.fusion.depth_tol)) seen[corr.point_index] = true;
    }
  }
  const auto n = std::count(seen.begin(), seen.end(), true);
  EXPECT_GT(static_cast<double>(n) / static_cast<double>(layout.size()), 0.5);
}

TEST(Dataset, OneBankPerScanAlignedWithLayout) {
  const auto c = tiny_config();
  const auto d = build_dataset(c);
  ASSERT_EQ(d.scenes.size(), 2u);
  for (const auto& s : d.scenes) {
    EXPECT_EQ(s.bank.num_points(), d.layout.size());
    EXPECT_EQ(s.bank.num_teachers(), c.teachers.size());
  }
  // Scans use different trajectories, so their banks differ.
  EXPECT_NE(d.scenes[0].bank.counts, d.scenes[1].bank.counts);
}

TEST(Pipeline, ErrorCellIsRecordedAndOthersRun) {
  auto c = tiny_config();
  c.pipeline.seeds = {1};
  c.pipeline.cells = {{"ok", {"lseg-like", "dino-like"}, ObjectiveMode::kStabilized},
                      {"no-vocab", {"dino-like"}, ObjectiveMode::kUnweighted},
                      {"after", {"lseg-like"}, ObjectiveMode::kUnweighted}};
  const auto dir = std::filesystem::temp_directory_path() / "agglom3d_test_pipeline";
  std::filesystem::remove_all(dir);
  const auto report = run_pipeline(c, dir);
  ASSERT_EQ(report.cells.size(), 3u);
  EXPECT_EQ(report.cells[0].status, "ok");
  EXPECT_EQ(report.cells[1].status, "error");
  EXPECT_NE(report.cells[1].error.find("text-aligned"), std::string::npos);
  EXPECT_EQ(report.cells[2].status, "ok");
  ASSERT_TRUE(report.cells[0].metrics);
  EXPECT_GE(report.cells[0].metrics->miou, 0.0);
  EXPECT_LE(report.cells[0].metrics->miou, 1.0);
  for (const char* f : {"report.json", "report.txt", "manifest.json", "seed1_ok_log.jsonl", "seed1_ok_sigma.csv", "seed1_ok.a3ck"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  }
  EXPECT_FALSE(std::filesystem::exists(dir / "seed1_after_sigma.csv"));
  const auto again = run_pipeline(c);
  EXPECT_EQ(again.cells[0].metrics->miou, report.cells[0].metrics->miou);
  std::filesystem::remove_all(dir);
}

TEST(Pipeline, EmptyCellListIsConfigError) {
  auto c = tiny_config();
  c.pipeline.cells.clear();
  EXPECT_THROW(run_pipeline(c), ConfigError);
}

// A noiseless, unconfused text-aligned teacher and a student trained long on
// one layout: labels match ground truth on the observed points, and a layout
// whose objects are 5% larger scores close to in-domain.
TEST(EndToEnd, NoiselessTeacherGivesNearPerfectLabels) {
  auto c = load_config(kConfigs / "default.json");
  c.scene.num_objects = 4;
  c.scene.points_per_object = 200;
  c.scene.voxel_size = 0.04;
  c.scene.num_scans = 2;
  // Wider splats hand boundary points their neighbour's label.
  c.scene.splat_radius = 0;
  auto t = lseg_like();
  t.dim = 16;
  t.noise_std = 0.0;
  t.view_confusion_prob = 0.0;
  c.teachers = {t};
  c.student.pe_frequencies = 8;
  c.student.trunk_widths = {96, 96};
  c.trainer.lr0 = 3e-3;
  c.trainer.lr_decay = 0.995;
  c.trainer.epochs = 500;
  c.trainer.scenes_per_batch = 2;
  c.trainer.points_per_scene = 2048;
  c.objective = ObjectiveMode::kUnweighted;
  const auto data = build_dataset(c);
  const auto result = train(data.scenes, c.teachers, make_student(c, c.teachers), c.train_config());
  ASSERT_FALSE(result.log.collapse);
  const auto vocab = vocabulary_from_teacher(t, c.scene.num_classes);
  const auto labels = ov_segment(result.model, data.layout, vocab, c.teachers);
  std::size_t observed = 0, right = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bool seen = false;
    for (const auto& s : data.scenes) seen = seen || s.bank.mask[i];
    if (!seen) continue;
    ++observed;
    right += labels[i] == (*data.layout.labels)[i] ? 1 : 0;
  }
  ASSERT_GT(observed, 0u);
  EXPECT_GE(static_cast<double>(right) / static_cast<double>(observed), 0.99);

  const auto in_domain = compute_metrics(labels, *data.layout.labels, c.scene.num_classes);
  const auto shifted = cross_domain_eval(result.model, {build_layout(c, 1.05)}, vocab, c.teachers);
  EXPECT_NEAR(shifted.miou, in_domain.miou, 0.1);
}
