#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "agglom3d/binary_io.hpp"
#include "agglom3d/errors.hpp"
#include "agglom3d/evalsuite.hpp"
#include "agglom3d/fusion.hpp"
#include "agglom3d/objective.hpp"
#include "agglom3d/scene.hpp"
#include "agglom3d/teachers.hpp"
#include "agglom3d/trainer.hpp"

namespace agglom3d {

// Scene layout, scanning rig and dataset size.
struct SceneSection {
  std::array<double, 3> extent{4.0, 4.0, 2.5};
  int num_objects = 6;
  int num_classes = 6;
  int points_per_object = 300;
  bool floor_and_walls = true;
  double size_min = 0.25;
  double size_max = 0.6;
  double voxel_size = 0.02;
  int num_scans = 8;         // scans of the same layout, each with its own trajectory
  int frames_per_scan = 6;
  int image_width = 64;
  int image_height = 48;
  double focal_px = 40.0;
  int splat_radius = 1;
};

struct FusionSection {
  double depth_tol = 0.04;
  DeMeanMode de_mean_mode = DeMeanMode::kPerPoint;
};

struct StudentSection {
  int pe_frequencies = 4;
  std::vector<int> trunk_widths{48, 48};
};

struct EvalSection {
  bool ensemble = false;
  ProbeMode probe_mode = ProbeMode::kConcat;
  int probe_head = 0;
  double ridge_lambda = 1e-3;
  ProbeSolver probe_solver = ProbeSolver::kRidge;
  int probe_steps = 500;
  double probe_lr = 0.1;
  double probe_train_fraction = 0.5;
  int kmeans_k = 6;
  int kmeans_max_iters = 100;
  bool kmeans_normalize = true;
  double hist_lo = -1.5;
  double hist_hi = 1.5;
  int hist_bins = 30;
  double domain_b_size_scale = 1.15;

  ProbeConfig probe_config(ProbeMode mode, std::size_t head = 0) const {
    return {mode, head, ridge_lambda, probe_solver, probe_steps, probe_lr};
  }
};

struct PipelineCell {
  std::string name;
  std::vector<std::string> teachers;
  ObjectiveMode mode = ObjectiveMode::kStabilized;
};

struct PipelineSection {
  std::vector<std::uint64_t> seeds;  // empty = root seed only
  std::vector<PipelineCell> cells;
};

struct RunConfig {
  std::uint64_t seed = 0;
  SceneSection scene;
  std::vector<TeacherSpec> teachers;
  FusionSection fusion;
  StudentSection student;
  ObjectiveMode objective = ObjectiveMode::kStabilized;
  TrainConfig trainer;  // trainer.seed and trainer.mode are derived, not read
  EvalSection eval;
  PipelineSection pipeline;

  SyntheticSceneSpec layout_spec(double size_scale = 1.0) const {
    SyntheticSceneSpec s;
    s.seed = derive_seed({tag("layout"), seed});
    s.extent = scene.extent;
    s.num_objects = scene.num_objects;
    s.num_classes = scene.num_classes;
    s.points_per_object = scene.points_per_object;
    s.floor_and_walls = scene.floor_and_walls;
    s.size_min = scene.size_min * size_scale;
    s.size_max = scene.size_max * size_scale;
    return s;
  }

  TrainConfig train_config() const {
    TrainConfig t = trainer;
    t.seed = derive_seed({tag("trainer"), seed});
    t.mode = objective;
    return t;
  }

  std::uint64_t student_seed() const { return derive_seed({tag("student"), seed}); }
};

namespace config_detail {

// Reads fields from one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const nlohmann::json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown configuration key '" + where(key) + "'");
    }
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline ObjectiveMode mode_from(const std::string& s, const std::string& where) {
  const auto m = parse_objective_mode(s);
  if (!m) throw ConfigError(where + ": unknown objective mode '" + s + "'");
  return *m;
}

inline std::string probe_mode_name(ProbeMode m) {
  switch (m) {
    case ProbeMode::kConcat:
      return "concat";
    case ProbeMode::kAverage:
      return "average";
    case ProbeMode::kSingle:
      return "single";
  }
  return "concat";
}

inline ProbeMode probe_mode_from(const std::string& s, const std::string& where) {
  if (s == "concat") return ProbeMode::kConcat;
  if (s == "average") return ProbeMode::kAverage;
  if (s == "single") return ProbeMode::kSingle;
  throw ConfigError(where + ": unknown probe mode '" + s + "'");
}

inline TeacherSpec parse_teacher(const nlohmann::json& j, const std::string& path) {
  ObjectReader r(j, path);
  TeacherSpec t;
  r.get("name", t.name);
  if (t.name.empty()) throw ConfigError(path + ".name: required");
  r.get("dim", t.dim);
  r.get("text_aligned", t.text_aligned);
  r.get("prototype_seed", t.prototype_seed);
  r.get("noise_std", t.noise_std);
  r.get("mean_shift", t.mean_shift);
  r.get("spike_prob", t.spike_prob);
  r.get("spike_scale", t.spike_scale);
  r.get("view_confusion_prob", t.view_confusion_prob);
  if (const auto* loss = r.child("loss"); loss && !loss->is_null()) {
    const auto k = parse_loss_kind(loss->get<std::string>());
    if (!k) throw ConfigError(path + ".loss: unknown loss '" + loss->get<std::string>() + "'");
    t.loss = k;
  }
  if (const auto* dm = r.child("demean"); dm && !dm->is_null()) t.demean = dm->get<bool>();
  r.get("prototype_aliases", t.prototype_aliases);
  r.finish();
  try {
    t.validate();
  } catch (const ValidationError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return t;
}

inline nlohmann::json teacher_json(const TeacherSpec& t) {
  nlohmann::json j{{"name", t.name},
                   {"dim", t.dim},
                   {"text_aligned", t.text_aligned},
                   {"prototype_seed", t.prototype_seed},
                   {"noise_std", t.noise_std},
                   {"mean_shift", t.mean_shift},
                   {"spike_prob", t.spike_prob},
                   {"spike_scale", t.spike_scale},
                   {"view_confusion_prob", t.view_confusion_prob},
                   {"prototype_aliases", t.prototype_aliases}};
  j["loss"] = t.loss ? nlohmann::json(std::string(to_string(*t.loss))) : nlohmann::json(nullptr);
  j["demean"] = t.demean ? nlohmann::json(*t.demean) : nlohmann::json(nullptr);
  return j;
}

}  // namespace config_detail

// Every field except `teachers` has a default; unknown keys are errors.
inline RunConfig parse_config(const nlohmann::json& doc) {
  using config_detail::ObjectReader;
  RunConfig c;
  ObjectReader root(doc, "");
  root.get("seed", c.seed);

  if (const auto* j = root.child("scene")) {
    ObjectReader r(*j, "scene");
    auto& s = c.scene;
    r.get("extent", s.extent);
    r.get("num_objects", s.num_objects);
    r.get("num_classes", s.num_classes);
    r.get("points_per_object", s.points_per_object);
    r.get("floor_and_walls", s.floor_and_walls);
    r.get("size_min", s.size_min);
    r.get("size_max", s.size_max);
    r.get("voxel_size", s.voxel_size);
    r.get("num_scans", s.num_scans);
    r.get("frames_per_scan", s.frames_per_scan);
    r.get("image_width", s.image_width);
    r.get("image_height", s.image_height);
    r.get("focal_px", s.focal_px);
    r.get("splat_radius", s.splat_radius);
    r.finish();
    if (s.num_scans < 1 || s.frames_per_scan < 1) throw ConfigError("scene: num_scans and frames_per_scan must be >= 1");
    if (!(s.voxel_size > 0.0)) throw ConfigError("scene.voxel_size: must be > 0");
    try {
      c.layout_spec().validate();
    } catch (const ValidationError& e) {
      throw ConfigError(std::string("scene: ") + e.what());
    }
  }

  const auto* teachers = root.child("teachers");
  if (!teachers) throw ConfigError("missing required key 'teachers'");
  if (!teachers->is_array() || teachers->empty()) throw ConfigError("teachers: expected a non-empty list");
  for (std::size_t i = 0; i < teachers->size(); ++i) {
    c.teachers.push_back(config_detail::parse_teacher((*teachers)[i], "teachers[" + std::to_string(i) + "]"));
  }

  if (const auto* j = root.child("fusion")) {
    ObjectReader r(*j, "fusion");
    r.get("depth_tol", c.fusion.depth_tol);
    std::string mode = c.fusion.de_mean_mode == DeMeanMode::kPerPoint ? "per_point" : "per_channel";
    r.get("de_mean_mode", mode);
    if (mode == "per_point") {
      c.fusion.de_mean_mode = DeMeanMode::kPerPoint;
    } else if (mode == "per_channel") {
      c.fusion.de_mean_mode = DeMeanMode::kPerChannel;
    } else {
      throw ConfigError("fusion.de_mean_mode: expected per_point or per_channel");
    }
    r.finish();
  }

  if (const auto* j = root.child("student")) {
    ObjectReader r(*j, "student");
    r.get("pe_frequencies", c.student.pe_frequencies);
    r.get("trunk_widths", c.student.trunk_widths);
    r.finish();
  }

  if (const auto* j = root.child("objective")) {
    ObjectReader r(*j, "objective");
    std::string mode(to_string(c.objective));
    r.get("mode", mode);
    c.objective = config_detail::mode_from(mode, "objective.mode");
    r.finish();
  }

  if (const auto* j = root.child("trainer")) {
    ObjectReader r(*j, "trainer");
    auto& t = c.trainer;
    r.get("lr0", t.lr0);
    r.get("epochs", t.epochs);
    r.get("scenes_per_batch", t.scenes_per_batch);
    r.get("points_per_scene", t.points_per_scene);
    r.get("lr_decay", t.lr_decay);
    r.get("beta1", t.adam.beta1);
    r.get("beta2", t.adam.beta2);
    r.get("eps", t.adam.eps);
    r.get("augment_flip", t.augment.flip);
    r.get("augment_elastic", t.augment.elastic);
    r.get("elastic_granularity", t.augment.elastic_granularity);
    r.get("elastic_magnitude", t.augment.elastic_magnitude);
    r.get("collapse_window", t.collapse_window);
    r.finish();
    try {
      t.validate();
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }
  }

  if (const auto* j = root.child("eval")) {
    ObjectReader r(*j, "eval");
    auto& e = c.eval;
    r.get("ensemble", e.ensemble);
    std::string probe = config_detail::probe_mode_name(e.probe_mode);
    r.get("probe_mode", probe);
    e.probe_mode = config_detail::probe_mode_from(probe, "eval.probe_mode");
    r.get("probe_head", e.probe_head);
    r.get("ridge_lambda", e.ridge_lambda);
    std::string solver = e.probe_solver == ProbeSolver::kRidge ? "ridge" : "gradient";
    r.get("probe_solver", solver);
    if (solver == "ridge") {
      e.probe_solver = ProbeSolver::kRidge;
    } else if (solver == "gradient") {
      e.probe_solver = ProbeSolver::kGradient;
    } else {
      throw ConfigError("eval.probe_solver: unknown solver '" + solver + "'");
    }
    r.get("probe_steps", e.probe_steps);
    r.get("probe_lr", e.probe_lr);
    if (e.probe_steps < 1 || !(e.probe_lr > 0.0)) throw ConfigError("eval: probe_steps must be >= 1 and probe_lr > 0");
    r.get("probe_train_fraction", e.probe_train_fraction);
    r.get("kmeans_k", e.kmeans_k);
    r.get("kmeans_max_iters", e.kmeans_max_iters);
    r.get("kmeans_normalize", e.kmeans_normalize);
    r.get("hist_lo", e.hist_lo);
    r.get("hist_hi", e.hist_hi);
    r.get("hist_bins", e.hist_bins);
    r.get("domain_b_size_scale", e.domain_b_size_scale);
    r.finish();
  }

  if (const auto* j = root.child("pipeline")) {
    ObjectReader r(*j, "pipeline");
    r.get("seeds", c.pipeline.seeds);
    if (const auto* cells = r.child("cells")) {
      if (!cells->is_array()) throw ConfigError("pipeline.cells: expected a list");
      for (std::size_t i = 0; i < cells->size(); ++i) {
        const std::string path = "pipeline.cells[" + std::to_string(i) + "]";
        ObjectReader cr((*cells)[i], path);
        PipelineCell cell;
        cr.get("name", cell.name);
        cr.get("teachers", cell.teachers);
        std::string mode(to_string(cell.mode));
        cr.get("mode", mode);
        cell.mode = config_detail::mode_from(mode, path + ".mode");
        cr.finish();
        for (const auto& name : cell.teachers) {
          bool known = false;
          for (const auto& t : c.teachers) known = known || t.name == name;
          if (!known) throw ConfigError(path + ".teachers: unknown teacher '" + name + "'");
        }
        c.pipeline.cells.push_back(std::move(cell));
      }
    }
    r.finish();
  }
  root.finish();
  return c;
}

inline nlohmann::json serialize_config(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  const auto& s = c.scene;
  j["scene"] = {{"extent", s.extent},
                {"num_objects", s.num_objects},
                {"num_classes", s.num_classes},
                {"points_per_object", s.points_per_object},
                {"floor_and_walls", s.floor_and_walls},
                {"size_min", s.size_min},
                {"size_max", s.size_max},
                {"voxel_size", s.voxel_size},
                {"num_scans", s.num_scans},
                {"frames_per_scan", s.frames_per_scan},
                {"image_width", s.image_width},
                {"image_height", s.image_height},
                {"focal_px", s.focal_px},
                {"splat_radius", s.splat_radius}};
  j["teachers"] = nlohmann::json::array();
  for (const auto& t : c.teachers) j["teachers"].push_back(config_detail::teacher_json(t));
  j["fusion"] = {{"depth_tol", c.fusion.depth_tol},
                 {"de_mean_mode", c.fusion.de_mean_mode == DeMeanMode::kPerPoint ? "per_point" : "per_channel"}};
  j["student"] = {{"pe_frequencies", c.student.pe_frequencies}, {"trunk_widths", c.student.trunk_widths}};
  j["objective"] = {{"mode", std::string(to_string(c.objective))}};
  const auto& t = c.trainer;
  j["trainer"] = {{"lr0", t.lr0},
                  {"epochs", t.epochs},
                  {"scenes_per_batch", t.scenes_per_batch},
                  {"points_per_scene", t.points_per_scene},
                  {"lr_decay", t.lr_decay},
                  {"beta1", t.adam.beta1},
                  {"beta2", t.adam.beta2},
                  {"eps", t.adam.eps},
                  {"augment_flip", t.augment.flip},
                  {"augment_elastic", t.augment.elastic},
                  {"elastic_granularity", t.augment.elastic_granularity},
                  {"elastic_magnitude", t.augment.elastic_magnitude},
                  {"collapse_window", t.collapse_window}};
  const auto& e = c.eval;
  j["eval"] = {{"ensemble", e.ensemble},
               {"probe_mode", config_detail::probe_mode_name(e.probe_mode)},
               {"probe_head", e.probe_head},
               {"ridge_lambda", e.ridge_lambda},
               {"probe_solver", e.probe_solver == ProbeSolver::kRidge ? "ridge" : "gradient"},
               {"probe_steps", e.probe_steps},
               {"probe_lr", e.probe_lr},
               {"probe_train_fraction", e.probe_train_fraction},
               {"kmeans_k", e.kmeans_k},
               {"kmeans_max_iters", e.kmeans_max_iters},
               {"kmeans_normalize", e.kmeans_normalize},
               {"hist_lo", e.hist_lo},
               {"hist_hi", e.hist_hi},
               {"hist_bins", e.hist_bins},
               {"domain_b_size_scale", e.domain_b_size_scale}};
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : c.pipeline.cells) {
    cells.push_back({{"name", cell.name}, {"teachers", cell.teachers}, {"mode", std::string(to_string(cell.mode))}});
  }
  j["pipeline"] = {{"seeds", c.pipeline.seeds}, {"cells", cells}};
  return j;
}

inline RunConfig parse_config_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_config(doc);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return parse_config_text(std::string(bytes.begin(), bytes.end()));
}

}  // namespace agglom3d
