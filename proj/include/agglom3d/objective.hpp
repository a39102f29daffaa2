#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "agglom3d/errors.hpp"
#include "agglom3d/teachers.hpp"

namespace agglom3d {

struct LossResult {
  double value = 0.0;
  Matrix grad;  // d value / d F3D
};

namespace detail {

inline std::size_t check_loss_inputs(const Matrix& f3d, const Matrix& f2d, const std::vector<bool>& mask) {
  if (f3d.rows() != f2d.rows() || f3d.cols() != f2d.cols()) throw ContractError("student and teacher features differ in shape");
  if (mask.size() != static_cast<std::size_t>(f3d.rows())) throw ContractError("mask length differs from row count");
  std::size_t m = 0;
  for (bool b : mask) m += b ? 1 : 0;
  if (m == 0) throw ContractError("empty mask: no supervised rows");
  return m;
}

}  // namespace detail

inline constexpr double kDegenerateNorm = 1e-12;

// Mean over masked rows of 1 - cos(f3d, f2d). Student rows with norm below
// 1e-12 count as loss 1 with zero gradient.
inline LossResult cosine_loss(const Matrix& f3d, const Matrix& f2d, const std::vector<bool>& mask) {
  const auto rows = detail::check_loss_inputs(f3d, f2d, mask);
  const double inv_m = 1.0 / static_cast<double>(rows);
  LossResult out{0.0, Matrix::Zero(f3d.rows(), f3d.cols())};
  for (Eigen::Index r = 0; r < f3d.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    const double n3 = f3d.row(r).norm();
    const double n2 = f2d.row(r).norm();
    if (!(n2 > 0.0)) throw ContractError("teacher row " + std::to_string(r) + " has zero norm under the mask");
    if (n3 < kDegenerateNorm) {
      out.value += inv_m;
      continue;
    }
    const double dot = f3d.row(r).dot(f2d.row(r));
    const double cosine = dot / (n3 * n2);
    out.value += inv_m * (1.0 - cosine);
    out.grad.row(r) = -inv_m * (f2d.row(r) / (n3 * n2) - cosine * f3d.row(r) / (n3 * n3));
  }
  return out;
}

// Mean absolute error over masked entries; the subgradient at 0 is 0.
inline LossResult l1_loss(const Matrix& f3d, const Matrix& f2d, const std::vector<bool>& mask) {
  const auto rows = detail::check_loss_inputs(f3d, f2d, mask);
  const double inv_m = 1.0 / static_cast<double>(rows * static_cast<std::size_t>(f3d.cols()));
  LossResult out{0.0, Matrix::Zero(f3d.rows(), f3d.cols())};
  for (Eigen::Index r = 0; r < f3d.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    for (Eigen::Index c = 0; c < f3d.cols(); ++c) {
      const double d = f3d(r, c) - f2d(r, c);
      out.value += inv_m * std::abs(d);
      out.grad(r, c) = d > 0.0 ? inv_m : (d < 0.0 ? -inv_m : 0.0);
    }
  }
  return out;
}

// Mean squared error over masked entries.
inline LossResult l2_loss(const Matrix& f3d, const Matrix& f2d, const std::vector<bool>& mask) {
  const auto rows = detail::check_loss_inputs(f3d, f2d, mask);
  const double inv_m = 1.0 / static_cast<double>(rows * static_cast<std::size_t>(f3d.cols()));
  LossResult out{0.0, Matrix::Zero(f3d.rows(), f3d.cols())};
  for (Eigen::Index r = 0; r < f3d.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    for (Eigen::Index c = 0; c < f3d.cols(); ++c) {
      const double d = f3d(r, c) - f2d(r, c);
      out.value += inv_m * d * d;
      out.grad(r, c) = 2.0 * inv_m * d;
    }
  }
  return out;
}

inline LossResult distill_loss(LossKind kind, const Matrix& f3d, const Matrix& f2d, const std::vector<bool>& mask) {
  switch (kind) {
    case LossKind::kCosine:
      return cosine_loss(f3d, f2d, mask);
    case LossKind::kL1:
      return l1_loss(f3d, f2d, mask);
    case LossKind::kL2:
      return l2_loss(f3d, f2d, mask);
  }
  throw ContractError("unknown loss kind");
}

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::kCosine:
      return "cosine";
    case LossKind::kL1:
      return "l1";
    case LossKind::kL2:
      return "l2";
  }
  return "?";
}

inline std::optional<LossKind> parse_loss_kind(std::string_view s) {
  if (s == "cosine") return LossKind::kCosine;
  if (s == "l1") return LossKind::kL1;
  if (s == "l2") return LossKind::kL2;
  return std::nullopt;
}

struct TeacherLossPlan {
  LossKind kind = LossKind::kCosine;
  bool demean_target = false;

  bool operator==(const TeacherLossPlan&) const = default;
};

// lseg-like -> cosine, dino-like -> L1, sd-like -> cosine on de-meaned
// targets. Explicit loss/demean fields on the spec take precedence.
inline TeacherLossPlan map_teacher_loss(const TeacherSpec& teacher) {
  std::optional<TeacherLossPlan> plan;
  if (teacher.name == "lseg-like") {
    plan = TeacherLossPlan{LossKind::kCosine, false};
  } else if (teacher.name == "dino-like") {
    plan = TeacherLossPlan{LossKind::kL1, false};
  } else if (teacher.name == "sd-like") {
    plan = TeacherLossPlan{LossKind::kCosine, true};
  }
  if (teacher.loss) {
    if (!plan) plan = TeacherLossPlan{};
    plan->kind = *teacher.loss;
  }
  if (!plan) throw ConfigError("teachers." + teacher.name + ".loss: unknown teacher name and no explicit loss");
  if (teacher.demean) plan->demean_target = *teacher.demean;
  return *plan;
}

enum class ObjectiveMode { kStabilized, kNaiveLogSigma, kAutoWeight, kUnweighted };

inline std::string_view to_string(ObjectiveMode m) {
  switch (m) {
    case ObjectiveMode::kStabilized:
      return "stabilized";
    case ObjectiveMode::kNaiveLogSigma:
      return "naive_log_sigma";
    case ObjectiveMode::kAutoWeight:
      return "auto_weight";
    case ObjectiveMode::kUnweighted:
      return "unweighted";
  }
  return "?";
}

inline std::optional<ObjectiveMode> parse_objective_mode(std::string_view s) {
  for (auto m : {ObjectiveMode::kStabilized, ObjectiveMode::kNaiveLogSigma, ObjectiveMode::kAutoWeight,
                 ObjectiveMode::kUnweighted}) {
    if (to_string(m) == s) return m;
  }
  return std::nullopt;
}

inline bool uses_sigma(ObjectiveMode m) {
  return m == ObjectiveMode::kStabilized || m == ObjectiveMode::kNaiveLogSigma;
}

// Per-teacher view of one objective evaluation.
struct LossBreakdown {
  std::vector<double> raw;          // L_i
  std::vector<double> weighted;     // L_i / (2 sigma_i^2), w_i L_i, or L_i
  std::vector<double> regularizer;  // log(1 + sigma_i), log sigma_i, or 0
  std::vector<double> scales;       // sigma_i, or w_i under auto-weighting
  double total = 0.0;
};

struct ObjectiveResult {
  LossBreakdown breakdown;
  std::vector<double> d_loss;   // d total / d L_i
  std::vector<double> d_scale;  // d total / d sigma_i (or d w_i); zero when unweighted
};

// Combines per-teacher losses. `scales` holds sigma_i for the sigma modes and
// the learned weights w_i for auto-weighting; it is ignored when unweighted.
//   unweighted:       sum L_i
//   naive_log_sigma:  sum L_i / (2 sigma_i^2) + log sigma_i
//   stabilized:       sum L_i / (2 sigma_i^2) + log(1 + sigma_i)
//   auto_weight:      sum w_i L_i
inline ObjectiveResult distill_total(const std::vector<double>& losses, const std::vector<double>& scales,
                                     ObjectiveMode mode) {
  const std::size_t n = losses.size();
  if (mode != ObjectiveMode::kUnweighted && scales.size() != n) {
    throw ContractError("one scale per teacher loss is required");
  }
  ObjectiveResult out;
  auto& b = out.breakdown;
  b.raw = losses;
  b.weighted.assign(n, 0.0);
  b.regularizer.assign(n, 0.0);
  b.scales = mode == ObjectiveMode::kUnweighted ? std::vector<double>(n, 1.0) : scales;
  out.d_loss.assign(n, 1.0);
  out.d_scale.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double L = losses[i];
    switch (mode) {
      case ObjectiveMode::kUnweighted:
        b.weighted[i] = L;
        break;
      case ObjectiveMode::kAutoWeight: {
        const double w = scales[i];
        b.weighted[i] = w * L;
        out.d_loss[i] = w;
        out.d_scale[i] = L;
        break;
      }
      case ObjectiveMode::kStabilized:
      case ObjectiveMode::kNaiveLogSigma: {
        const double s = scales[i];
        if (!(s > 0.0)) throw ContractError("sigma must be > 0 in weighted objectives");
        b.weighted[i] = L / (2.0 * s * s);
        out.d_loss[i] = 1.0 / (2.0 * s * s);
        if (mode == ObjectiveMode::kStabilized) {
          b.regularizer[i] = std::log1p(s);
          out.d_scale[i] = -L / (s * s * s) + 1.0 / (1.0 + s);
        } else {
          b.regularizer[i] = std::log(s);
          out.d_scale[i] = -L / (s * s * s) + 1.0 / s;
        }
        break;
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) b.total += b.weighted[i] + b.regularizer[i];
  return out;
}

// Per-teacher scale derived from the model's raw scalar s_i, and d scale / d s_i.
inline double scale_from_raw(double raw, ObjectiveMode mode) {
  if (uses_sigma(mode)) return std::exp(raw);
  if (mode == ObjectiveMode::kAutoWeight) return 1.0 + raw;
  return 1.0;
}

inline double scale_raw_derivative(double raw, ObjectiveMode mode) {
  if (uses_sigma(mode)) return std::exp(raw);
  if (mode == ObjectiveMode::kAutoWeight) return 1.0;
  return 0.0;
}

}  // namespace agglom3d
