#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agglom3d/binary_io.hpp"
#include "agglom3d/config.hpp"
#include "agglom3d/evalsuite.hpp"
#include "agglom3d/fusion.hpp"
#include "agglom3d/geometry.hpp"
#include "agglom3d/scene.hpp"
#include "agglom3d/student.hpp"
#include "agglom3d/teachers.hpp"
#include "agglom3d/trainer.hpp"

namespace agglom3d {

inline CameraIntrinsics rig_intrinsics(const SceneSection& s) {
  return {s.focal_px, s.focal_px, 0.5 * (s.image_width - 1), 0.5 * (s.image_height - 1), s.image_width, s.image_height};
}

// Cameras stand inside the room on a circle around its centre, looking down
// across to the far side. Each scan starts at a different phase.
inline Pose rig_pose(const SceneSection& s, int scan, int frame) {
  const double ex = s.extent[0], ey = s.extent[1], ez = s.extent[2];
  const double phase = 2.0 * std::numbers::pi * (frame + 0.6180339887498949 * scan) / s.frames_per_scan;
  const double r = 0.35 * std::min(ex, ey);
  const Point3 dir(std::cos(phase), std::sin(phase), 0.0);
  const Point3 centre(0.5 * ex, 0.5 * ey, 0.0);
  const Point3 eye = centre + r * dir + Point3(0.0, 0.0, 0.75 * ez);
  const Point3 target = centre - 0.6 * r * dir + Point3(0.0, 0.0, 0.2 * ez);
  return look_at(eye, target);
}

inline std::uint64_t frame_seed(std::uint64_t root, int scan, int frame) {
  return derive_seed({tag("frame"), root, static_cast<std::uint64_t>(scan), static_cast<std::uint64_t>(frame)});
}

inline SceneBounds bounds_for(const SceneSection& s) {
  constexpr double kMargin = 0.1;
  return {Point3::Constant(-kMargin), Point3(s.extent[0], s.extent[1], s.extent[2]) + Point3::Constant(kMargin)};
}

inline PointCloud build_layout(const RunConfig& c, double size_scale = 1.0) {
  return voxel_downsample(generate_scene(c.layout_spec(size_scale)), c.scene.voxel_size);
}

// All frames of one scan with one rendered map per teacher.
inline std::vector<FrameObservation> simulate_scan(const PointCloud& cloud, const RunConfig& c, int scan) {
  std::vector<FrameObservation> out;
  const auto k = rig_intrinsics(c.scene);
  for (int f = 0; f < c.scene.frames_per_scan; ++f) {
    FrameObservation obs;
    obs.frame.intrinsics = k;
    obs.frame.pose = rig_pose(c.scene, scan, f);
    obs.frame.depth = render_depth(cloud, obs.frame.pose, k, c.scene.splat_radius);
    const auto seed = frame_seed(c.seed, scan, f);
    for (const auto& t : c.teachers) obs.maps.push_back(render_feature_map(cloud, obs.frame, t, seed, c.scene.splat_radius).map);
    out.push_back(std::move(obs));
  }
  return out;
}

struct Dataset {
  PointCloud layout;
  std::vector<TrainingScene> scenes;  // one per scan, all sharing the layout
};

inline Dataset build_dataset(const RunConfig& c) {
  Dataset d{build_layout(c), {}};
  for (int s = 0; s < c.scene.num_scans; ++s) {
    const auto frames = simulate_scan(d.layout, c, s);
    d.scenes.push_back({d.layout, fuse_views(d.layout, frames, c.teachers, c.fusion.depth_tol)});
  }
  return d;
}

inline std::vector<std::size_t> teacher_indices(const RunConfig& c, const std::vector<std::string>& names) {
  std::vector<std::size_t> idx;
  for (const auto& n : names) {
    bool found = false;
    for (std::size_t i = 0; i < c.teachers.size(); ++i) {
      if (c.teachers[i].name == n) {
        idx.push_back(i);
        found = true;
      }
    }
    if (!found) throw ConfigError("unknown teacher '" + n + "'");
  }
  return idx;
}

inline FusedFeatureBank bank_subset(const FusedFeatureBank& bank, const std::vector<std::size_t>& teachers) {
  FusedFeatureBank out;
  for (auto t : teachers) out.features.push_back(bank.features[t]);
  out.counts = bank.counts;
  out.mask = bank.mask;
  return out;
}

inline StudentModel make_student(const RunConfig& c, const std::vector<TeacherSpec>& teachers) {
  auto sc = StudentConfig::for_teachers(teachers, bounds_for(c.scene));
  sc.pe_frequencies = c.student.pe_frequencies;
  sc.trunk_widths = c.student.trunk_widths;
  sc.init_seed = c.student_seed();
  return init_student(sc);
}

struct CellOutcome {
  std::string name;
  std::uint64_t seed = 0;
  ObjectiveMode mode = ObjectiveMode::kStabilized;
  std::vector<std::string> teachers;
  std::string status;  // ok | collapse | error
  std::optional<Metrics> metrics;
  std::optional<Collapse> collapse;
  std::string error;
  std::optional<TrainResult> training;
};

// Train one {teacher subset x objective} cell on a prepared dataset and
// evaluate open-vocabulary labelling on the layout.
inline CellOutcome run_cell(const RunConfig& c, const Dataset& data, const PipelineCell& cell,
                            const TrainHooks& hooks = {}) {
  CellOutcome out{cell.name, c.seed, cell.mode, cell.teachers, "ok", std::nullopt, std::nullopt, {}, std::nullopt};
  try {
    const auto idx = teacher_indices(c, cell.teachers);
    std::vector<TeacherSpec> teachers;
    for (auto i : idx) teachers.push_back(c.teachers[i]);
    std::vector<TrainingScene> scenes;
    for (const auto& s : data.scenes) scenes.push_back({s.cloud, bank_subset(s.bank, idx)});
    RunConfig cc = c;
    cc.objective = cell.mode;
    auto result = train(scenes, teachers, make_student(cc, teachers), cc.train_config(), hooks);
    if (result.log.collapse) {
      out.status = "collapse";
      out.collapse = result.log.collapse;
    } else {
      const auto vocab = vocabulary_from_teacher(teachers[text_aligned_head(teachers)], c.scene.num_classes);
      const auto labels = ov_segment(result.model, data.layout, vocab, teachers);
      out.metrics = compute_metrics(labels, *data.layout.labels, c.scene.num_classes);
    }
    out.training = std::move(result);
  } catch (const std::exception& e) {
    out.status = "error";
    out.error = e.what();
  }
  return out;
}

struct PipelineReport {
  std::vector<CellOutcome> cells;
  nlohmann::json manifest;  // artifact name -> digest
};

inline nlohmann::json cell_json(const CellOutcome& o) {
  nlohmann::json j{{"cell", o.name}, {"seed", o.seed}, {"mode", std::string(to_string(o.mode))}, {"teachers", o.teachers},
                   {"status", o.status}};
  if (o.metrics) {
    j["miou"] = o.metrics->miou;
    j["macc"] = o.metrics->macc;
  }
  if (o.collapse) j["collapse"] = {{"step", o.collapse->step}, {"epoch", o.collapse->epoch}, {"reason", o.collapse->reason}};
  if (!o.error.empty()) j["error"] = o.error;
  if (o.training) j["final_scales"] = current_scales(o.training->model, o.mode);
  return j;
}

inline std::string report_text(const std::vector<CellOutcome>& cells) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %20s %-16s %-9s %7s %7s\n", "cell", "seed", "mode", "status", "mIoU", "mAcc");
  os << line;
  for (const auto& o : cells) {
    if (o.metrics) {
      std::snprintf(line, sizeof line, "%-28s %20llu %-16s %-9s %7.4f %7.4f\n", o.name.c_str(),
                    static_cast<unsigned long long>(o.seed), std::string(to_string(o.mode)).c_str(), o.status.c_str(),
                    o.metrics->miou, o.metrics->macc);
    } else {
      std::snprintf(line, sizeof line, "%-28s %20llu %-16s %-9s %7s %7s\n", o.name.c_str(),
                    static_cast<unsigned long long>(o.seed), std::string(to_string(o.mode)).c_str(), o.status.c_str(), "-",
                    "-");
    }
    os << line;
  }
  return os.str();
}

// gen -> fuse -> train -> eval for every (seed, cell). A failing cell is
// recorded and the remaining cells still run. With an output directory, each
// cell's log, sigma trajectory and final checkpoint are written alongside
// report.json / report.txt and a digest manifest.
inline PipelineReport run_pipeline(const RunConfig& base, const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  if (base.pipeline.cells.empty()) throw ConfigError("pipeline.cells: at least one cell is required");
  PipelineReport report;
  report.manifest = nlohmann::json::object();
  const auto seeds = base.pipeline.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : base.pipeline.seeds;
  if (out_dir) io::ensure_dir(*out_dir);
  auto emit = [&](const std::string& name, std::string_view text) {
    if (!out_dir) return;
    io::write_text(*out_dir / name, text);
    report.manifest[name] = io::digest({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  };
  for (auto seed : seeds) {
    RunConfig c = base;
    c.seed = seed;
    const Dataset data = build_dataset(c);
    for (const auto& cell : c.pipeline.cells) {
      auto outcome = run_cell(c, data, cell);
      if (out_dir && outcome.training) {
        const std::string stem = "seed" + std::to_string(seed) + "_" + cell.name;
        emit(stem + "_log.jsonl", log_to_jsonl(outcome.training->log));
        if (uses_sigma(cell.mode)) emit(stem + "_sigma.csv", sigma_trajectory(outcome.training->log).to_csv());
        const auto ck = encode_checkpoint(outcome.training->model, outcome.training->steps_taken);
        io::write_file(*out_dir / (stem + ".a3ck"), ck);
        report.manifest[stem + ".a3ck"] = io::digest(ck);
      }
      report.cells.push_back(std::move(outcome));
    }
  }
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& o : report.cells) rows.push_back(cell_json(o));
  emit("report.json", rows.dump(2) + "\n");
  emit("report.txt", report_text(report.cells));
  if (out_dir) io::write_text(*out_dir / "manifest.json", report.manifest.dump(2) + "\n");
  return report;
}

}  // namespace agglom3d
