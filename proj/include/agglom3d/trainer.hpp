#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "agglom3d/errors.hpp"
#include "agglom3d/fusion.hpp"
#include "agglom3d/objective.hpp"
#include "agglom3d/rng.hpp"
#include "agglom3d/scene.hpp"
#include "agglom3d/student.hpp"

namespace agglom3d {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AugmentConfig {
  bool flip = false;
  bool elastic = false;
  double elastic_granularity = 0.2;
  double elastic_magnitude = 0.02;
};

struct TrainConfig {
  double lr0 = 1e-4;
  int epochs = 50;
  int scenes_per_batch = 2;
  int points_per_scene = 2048;
  double lr_decay = 0.95;  // multiplicative, per epoch
  AdamConfig adam;
  std::uint64_t seed = 0;
  ObjectiveMode mode = ObjectiveMode::kStabilized;
  AugmentConfig augment;
  DeMeanMode de_mean_mode = DeMeanMode::kPerPoint;
  int collapse_window = 3;  // consecutive epochs of negative, decreasing objective

  void validate() const {
    if (!(lr0 > 0.0)) throw ValidationError("trainer.lr0 must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ValidationError("trainer.lr_decay must be in (0, 1]");
    if (epochs < 1) throw ValidationError("trainer.epochs must be >= 1");
    if (scenes_per_batch < 1) throw ValidationError("trainer.scenes_per_batch must be >= 1");
    if (points_per_scene < 1) throw ValidationError("trainer.points_per_scene must be >= 1");
    if (collapse_window < 2) throw ValidationError("trainer.collapse_window must be >= 2");
  }

  double lr_at(int epoch) const { return lr0 * std::pow(lr_decay, epoch); }
};

struct TrainingScene {
  PointCloud cloud;
  FusedFeatureBank bank;
};

// Concatenated points of one step with per-teacher targets and masks.
struct Batch {
  std::vector<Point3> points;
  std::vector<Matrix> targets;
  std::vector<std::vector<bool>> masks;
};

struct TrainState {
  StudentModel model;
  Eigen::VectorXd adam_m;
  Eigen::VectorXd adam_v;
  std::uint64_t step = 0;
  int epoch = 0;

  static TrainState start(StudentModel model) {
    const auto n = static_cast<Eigen::Index>(model.parameter_count());
    return {std::move(model), Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0, 0};
  }
};

struct StepRecord {
  std::uint64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown breakdown;
  bool finite = true;
  std::string diagnostic;
};

// One bias-corrected Adam update at 1-based step t.
inline void adam_update(Eigen::VectorXd& theta, const Eigen::VectorXd& grad, Eigen::VectorXd& m, Eigen::VectorXd& v,
                        std::uint64_t t, double lr, const AdamConfig& cfg) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
}

struct ObjectiveEvaluation {
  ObjectiveResult objective;
  Gradients grads;
};

// Full objective and its gradient for every parameter, including the
// per-teacher scalars.
inline ObjectiveEvaluation evaluate_objective(const StudentModel& model, const Batch& batch,
                                              const std::vector<TeacherLossPlan>& plans, ObjectiveMode mode) {
  const std::size_t heads = model.num_heads();
  if (plans.size() != heads || batch.targets.size() != heads || batch.masks.size() != heads) {
    throw ContractError("batch, loss plans and student heads disagree on the number of teachers");
  }
  const auto cache = forward_cached(model, batch.points);
  std::vector<LossResult> losses;
  std::vector<double> raw;
  std::vector<double> scales;
  for (std::size_t i = 0; i < heads; ++i) {
    losses.push_back(distill_loss(plans[i].kind, cache.outputs[i], batch.targets[i], batch.masks[i]));
    raw.push_back(losses.back().value);
    scales.push_back(scale_from_raw(model.params.log_sigma[static_cast<Eigen::Index>(i)], mode));
  }
  auto objective = distill_total(raw, scales, mode);
  std::vector<Matrix> cotangents;
  for (std::size_t i = 0; i < heads; ++i) cotangents.push_back(objective.d_loss[i] * losses[i].grad);
  auto grads = backward(model, cache, cotangents);
  for (std::size_t i = 0; i < heads; ++i) {
    const auto s = static_cast<Eigen::Index>(i);
    grads.params.log_sigma[s] = objective.d_scale[i] * scale_raw_derivative(model.params.log_sigma[s], mode);
  }
  return {std::move(objective), std::move(grads)};
}

// forward -> per-teacher losses -> combined objective -> backward -> Adam.
// A non-finite objective leaves the parameters untouched; non-finite
// parameters after the update are reported. Either way `finite` is false.
inline StepRecord train_step(TrainState& state, const Batch& batch, const std::vector<TeacherLossPlan>& plans,
                             ObjectiveMode mode, double lr, const AdamConfig& adam = {}) {
  for (std::size_t i = 0; i < batch.masks.size(); ++i) {
    bool any = false;
    for (bool b : batch.masks[i]) any = any || b;
    if (!any) throw ContractError("teacher " + std::to_string(i) + " has no supervised point in the batch");
  }
  auto eval = evaluate_objective(state.model, batch, plans, mode);
  StepRecord rec;
  rec.step = state.step + 1;
  rec.epoch = state.epoch;
  rec.lr = lr;
  rec.breakdown = std::move(eval.objective.breakdown);
  const double total = rec.breakdown.total;
  if (!std::isfinite(total)) {
    rec.finite = false;
    rec.diagnostic = "non-finite objective at step " + std::to_string(rec.step);
    return rec;
  }
  if (mode == ObjectiveMode::kStabilized && total < 0.0) {
    throw ContractError("stabilized objective went negative at step " + std::to_string(rec.step));
  }
  Eigen::VectorXd theta = state.model.params.flatten();
  const Eigen::VectorXd grad = eval.grads.params.flatten();
  state.step = rec.step;
  if (lr != 0.0) {
    adam_update(theta, grad, state.adam_m, state.adam_v, state.step, lr, adam);
    state.model.params.assign(theta);
  } else {
    // Moments still advance; parameters stay bit-identical.
    Eigen::VectorXd scratch = theta;
    adam_update(scratch, grad, state.adam_m, state.adam_v, state.step, 0.0, adam);
  }
  if (!state.model.params.all_finite()) {
    rec.finite = false;
    rec.diagnostic = "non-finite parameter after step " + std::to_string(rec.step);
  }
  return rec;
}

// Targets per teacher after the configured de-mean, plus masks that exclude
// unobserved and zero-norm rows.
struct PreparedScene {
  const PointCloud* cloud = nullptr;
  std::vector<Matrix> targets;
  std::vector<std::vector<bool>> masks;
};

inline PreparedScene prepare_scene(const TrainingScene& scene, const std::vector<TeacherLossPlan>& plans,
                                   DeMeanMode de_mean_mode) {
  if (scene.bank.num_points() != scene.cloud.size()) throw ContractError("bank is not aligned with its point cloud");
  if (scene.bank.num_teachers() != plans.size()) throw ContractError("bank teacher count differs from the loss plans");
  PreparedScene p{&scene.cloud, {}, {}};
  for (std::size_t t = 0; t < plans.size(); ++t) {
    const Matrix& raw = scene.bank.features[t];
    Matrix target = raw;
    if (plans[t].demean_target) {
      target = de_mean_mode == DeMeanMode::kPerPoint ? de_mean(raw) : de_mean_per_channel(raw, scene.bank.mask);
    }
    std::vector<bool> mask(scene.cloud.size(), false);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      mask[i] = scene.bank.mask[i] && target.row(static_cast<Eigen::Index>(i)).norm() > 0.0;
    }
    p.targets.push_back(std::move(target));
    p.masks.push_back(std::move(mask));
  }
  return p;
}

inline Batch make_batch(const std::vector<const PreparedScene*>& scenes, const TrainConfig& config, int epoch,
                        const std::vector<std::size_t>& scene_ids) {
  Batch b;
  const std::size_t teachers = scenes.front()->targets.size();
  std::vector<std::vector<Eigen::RowVectorXd>> rows(teachers);
  b.masks.resize(teachers);
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& sc = *scenes[s];
    const std::uint64_t scene_seed = derive_seed({tag("batch"), config.seed, static_cast<std::uint64_t>(epoch), scene_ids[s]});
    const auto idx = sample_indices(sc.cloud->size(), static_cast<std::size_t>(config.points_per_scene), scene_seed);
    PointCloud sampled = sc.cloud->select(idx);
    if (config.augment.flip) {
      Rng rng(derive_seed({tag("flip"), scene_seed}));
      sampled = augment_flip(sampled, FlipAxis::kX, rng.uniform() < 0.5);
      sampled = augment_flip(sampled, FlipAxis::kY, rng.uniform() < 0.5);
    }
    if (config.augment.elastic) {
      sampled = augment_elastic(sampled, config.augment.elastic_granularity, config.augment.elastic_magnitude,
                                derive_seed({tag("elastic-aug"), scene_seed}));
    }
    b.points.insert(b.points.end(), sampled.points.begin(), sampled.points.end());
    for (std::size_t t = 0; t < teachers; ++t) {
      for (auto i : idx) {
        rows[t].push_back(sc.targets[t].row(static_cast<Eigen::Index>(i)));
        b.masks[t].push_back(sc.masks[t][i]);
      }
    }
  }
  for (std::size_t t = 0; t < teachers; ++t) {
    Matrix m(static_cast<Eigen::Index>(rows[t].size()), scenes.front()->targets[t].cols());
    for (std::size_t r = 0; r < rows[t].size(); ++r) m.row(static_cast<Eigen::Index>(r)) = rows[t][r];
    b.targets.push_back(std::move(m));
  }
  return b;
}

// Structured training failure: non-finite values, or an objective that keeps
// falling below zero.
struct Collapse {
  std::uint64_t step = 0;
  int epoch = 0;
  std::string reason;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  std::vector<double> start_scales;  // sigma_i (or w_i) before the epoch's first step
  double mean_total = 0.0;
  std::size_t steps = 0;
};

struct TrainLog {
  ObjectiveMode mode = ObjectiveMode::kStabilized;
  std::vector<std::string> teacher_names;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::optional<Collapse> collapse;
};

struct TrainResult {
  StudentModel model;
  TrainLog log;
  std::uint64_t steps_taken = 0;
};

struct TrainHooks {
  // Directory for per-epoch "A3D-CK" checkpoints; empty = none written.
  std::filesystem::path checkpoint_dir;
};

inline std::vector<double> current_scales(const StudentModel& model, ObjectiveMode mode) {
  std::vector<double> s;
  for (Eigen::Index i = 0; i < model.params.log_sigma.size(); ++i) s.push_back(scale_from_raw(model.params.log_sigma[i], mode));
  return s;
}

// epochs x ceil(num_scenes / scenes_per_batch) steps with lr0 * decay^epoch.
// Scene order is reshuffled each epoch from the seed.
inline TrainResult train(const std::vector<TrainingScene>& dataset, const std::vector<TeacherSpec>& teachers,
                         StudentModel initial, const TrainConfig& config, const TrainHooks& hooks = {}) {
  config.validate();
  if (dataset.empty()) throw ContractError("training needs at least one scene");
  if (initial.num_heads() != teachers.size()) throw ContractError("student heads do not match the teacher list");
  std::vector<TeacherLossPlan> plans;
  for (const auto& t : teachers) plans.push_back(map_teacher_loss(t));
  std::vector<PreparedScene> prepared;
  prepared.reserve(dataset.size());
  for (const auto& s : dataset) prepared.push_back(prepare_scene(s, plans, config.de_mean_mode));

  TrainResult result{{}, {}, 0};
  result.log.mode = config.mode;
  for (const auto& t : teachers) result.log.teacher_names.push_back(t.name);
  TrainState state = TrainState::start(std::move(initial));
  const auto batch = static_cast<std::size_t>(config.scenes_per_batch);

  for (int epoch = 0; epoch < config.epochs && !result.log.collapse; ++epoch) {
    state.epoch = epoch;
    const double lr = config.lr_at(epoch);
    EpochRecord er{epoch, lr, current_scales(state.model, config.mode), 0.0, 0};
    const auto order = sample_indices(dataset.size(), dataset.size(), derive_seed({tag("epoch-order"), config.seed, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t first = 0; first < order.size(); first += batch) {
      std::vector<const PreparedScene*> members;
      std::vector<std::size_t> ids;
      for (std::size_t j = first; j < std::min(order.size(), first + batch); ++j) {
        members.push_back(&prepared[order[j]]);
        ids.push_back(order[j]);
      }
      const Batch b = make_batch(members, config, epoch, ids);
      auto rec = train_step(state, b, plans, config.mode, lr, config.adam);
      const bool finite = rec.finite;
      er.mean_total += rec.breakdown.total;
      ++er.steps;
      if (!finite) result.log.collapse = Collapse{rec.step, epoch, rec.diagnostic};
      result.log.steps.push_back(std::move(rec));
      if (!finite) break;
    }
    if (er.steps > 0) er.mean_total /= static_cast<double>(er.steps);
    result.log.epochs.push_back(er);
    if (!hooks.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%03d.a3ck", epoch);
      write_checkpoint(hooks.checkpoint_dir / name, state.model, state.step);
    }
    if (!result.log.collapse) {
      const auto& ep = result.log.epochs;
      const auto w = static_cast<std::size_t>(config.collapse_window);
      if (ep.size() >= w) {
        bool falling = true;
        for (std::size_t j = ep.size() - w; j < ep.size() && falling; ++j) {
          falling = ep[j].mean_total < 0.0 && (j == ep.size() - w || ep[j].mean_total < ep[j - 1].mean_total);
        }
        if (falling) {
          result.log.collapse = Collapse{state.step, epoch,
                                         "objective negative and decreasing for " + std::to_string(w) + " consecutive epochs"};
        }
      }
    }
  }
  result.steps_taken = state.step;
  result.model = std::move(state.model);
  return result;
}

// --- logging ---------------------------------------------------------------

inline nlohmann::json step_to_json(const StepRecord& r, const std::vector<std::string>& names) {
  nlohmann::json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  nlohmann::json losses = nlohmann::json::object();
  nlohmann::json scales = nlohmann::json::object();
  for (std::size_t i = 0; i < r.breakdown.raw.size(); ++i) {
    const std::string key = i < names.size() ? names[i] : std::to_string(i);
    losses[key] = r.breakdown.raw[i];
    scales[key] = r.breakdown.scales[i];
  }
  j["loss"] = losses;
  j["sigma"] = scales;
  if (std::isfinite(r.breakdown.total)) {
    j["total"] = r.breakdown.total;
  } else {
    j["total"] = nullptr;
  }
  return j;
}

// JSON-lines training log, one record per step.
inline std::string log_to_jsonl(const TrainLog& log) {
  std::string out;
  for (const auto& r : log.steps) {
    out += step_to_json(r, log.teacher_names).dump();
    out += '\n';
  }
  return out;
}

struct SigmaTrajectory {
  std::vector<std::string> teacher_names;
  std::vector<std::vector<double>> per_epoch;  // sigma_i at the start of each epoch
  std::optional<int> collapse_epoch;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "epoch";
    for (const auto& n : teacher_names) os << ",sigma_" << n;
    os << ",status\n";
    for (std::size_t e = 0; e < per_epoch.size(); ++e) {
      os << e;
      for (double s : per_epoch[e]) os << ',' << s;
      os << ',' << (collapse_epoch && static_cast<int>(e) == *collapse_epoch ? "collapse" : "ok") << '\n';
    }
    return os.str();
  }
};

inline SigmaTrajectory sigma_trajectory(const TrainLog& log) {
  if (!uses_sigma(log.mode)) {
    throw ContractError("sigma trajectory needs a log from a sigma-weighted objective, got " + std::string(to_string(log.mode)));
  }
  SigmaTrajectory t{log.teacher_names, {}, std::nullopt};
  for (const auto& e : log.epochs) t.per_epoch.push_back(e.start_scales);
  if (log.collapse) t.collapse_epoch = log.collapse->epoch;
  return t;
}

}  // namespace agglom3d
