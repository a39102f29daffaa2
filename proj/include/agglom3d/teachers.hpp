#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "agglom3d/binary_io.hpp"
#include "agglom3d/errors.hpp"
#include "agglom3d/geometry.hpp"
#include "agglom3d/rng.hpp"
#include "agglom3d/scene.hpp"

namespace agglom3d {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class LossKind { kCosine, kL1, kL2 };

// Synthetic 2D foundation model. The distribution knobs mimic the observed
// shapes of real teachers: Gaussian-like spread, a shifted mean, and sparse
// large-magnitude spikes.
struct TeacherSpec {
  std::string name;
  int dim = 16;
  bool text_aligned = false;
  std::uint64_t prototype_seed = 0;
  double noise_std = 0.0;
  double mean_shift = 0.0;
  double spike_prob = 0.0;
  double spike_scale = 0.0;
  double view_confusion_prob = 0.0;
  // Optional overrides of the name-based distillation loss mapping.
  std::optional<LossKind> loss;
  std::optional<bool> demean;
  // (class, source): class `class` reuses the prototype of `source`, making
  // the teacher blind to that distinction.
  std::vector<std::pair<int, int>> prototype_aliases;

  void validate() const {
    if (dim < 2) throw ValidationError("teacher '" + name + "' needs dim >= 2");
    if (!(noise_std >= 0.0)) throw ValidationError("teacher '" + name + "' noise_std must be >= 0");
    if (!(spike_prob >= 0.0 && spike_prob <= 1.0)) throw ValidationError("teacher '" + name + "' spike_prob must be in [0,1]");
    if (!(spike_scale >= 0.0)) throw ValidationError("teacher '" + name + "' spike_scale must be >= 0");
    if (!(view_confusion_prob >= 0.0 && view_confusion_prob <= 1.0)) {
      throw ValidationError("teacher '" + name + "' view_confusion_prob must be in [0,1]");
    }
  }
};

inline TeacherSpec lseg_like() {
  TeacherSpec t;
  t.name = "lseg-like";
  t.dim = 32;
  t.text_aligned = true;
  t.prototype_seed = 101;
  t.noise_std = 0.15;
  t.view_confusion_prob = 0.10;
  return t;
}

inline TeacherSpec dino_like() {
  TeacherSpec t;
  t.name = "dino-like";
  t.dim = 24;
  t.prototype_seed = 202;
  t.noise_std = 0.10;
  t.view_confusion_prob = 0.05;
  return t;
}

inline TeacherSpec sd_like() {
  TeacherSpec t;
  t.name = "sd-like";
  t.dim = 48;
  t.prototype_seed = 303;
  t.noise_std = 0.20;
  t.mean_shift = 0.30;
  t.spike_prob = 0.02;
  t.spike_scale = 3.0;
  t.view_confusion_prob = 0.15;
  return t;
}

inline std::vector<TeacherSpec> default_teacher_trio() { return {lseg_like(), dino_like(), sd_like()}; }

inline constexpr int kMaxPrototypeRejections = 10000;
inline constexpr double kMaxPrototypeCosine = 0.5;

// K unit rows with pairwise |cosine| < 0.5, drawn by rejection sampling from
// the teacher's prototype seed, then aliased per prototype_aliases.
inline Matrix teacher_prototypes(const TeacherSpec& spec, int num_classes) {
  if (num_classes < 2) throw ValidationError("prototypes need K >= 2");
  spec.validate();
  Rng rng(derive_seed({tag("prototypes"), spec.prototype_seed}));
  Matrix protos(num_classes, spec.dim);
  int rejections = 0;
  for (int k = 0; k < num_classes;) {
    Eigen::RowVectorXd row(spec.dim);
    for (int d = 0; d < spec.dim; ++d) row[d] = rng.normal();
    const double n = row.norm();
    if (n < 1e-12) continue;
    row /= n;
    bool separated = true;
    for (int j = 0; j < k && separated; ++j) separated = std::abs(protos.row(j).dot(row)) < kMaxPrototypeCosine;
    if (separated) {
      protos.row(k++) = row;
    } else if (++rejections >= kMaxPrototypeRejections) {
      throw CapacityError("teacher '" + spec.name + "': cannot place " + std::to_string(num_classes) +
                          " separated prototypes in dimension " + std::to_string(spec.dim));
    }
  }
  for (const auto& [cls, source] : spec.prototype_aliases) {
    if (cls < 0 || cls >= num_classes || source < 0 || source >= num_classes) {
      throw ValidationError("teacher '" + spec.name + "': prototype alias out of range");
    }
    protos.row(cls) = protos.row(source);
  }
  return protos;
}

// Row-major, channel-fastest f32 feature image.
struct FeatureMap {
  int width = 0, height = 0, dim = 0;
  std::vector<float> values;

  FeatureMap() = default;
  FeatureMap(int w, int h, int d) : width(w), height(h), dim(d), values(static_cast<std::size_t>(w) * h * d, 0.0f) {}

  std::size_t offset(int u, int v) const { return (static_cast<std::size_t>(v) * width + u) * dim; }
  std::span<const float> pixel(int u, int v) const { return {values.data() + offset(u, v), static_cast<std::size_t>(dim)}; }
  std::span<float> pixel(int u, int v) { return {values.data() + offset(u, v), static_cast<std::size_t>(dim)}; }
};

struct TeacherRender {
  FeatureMap map;
  // Class whose prototype each pixel emitted (after confusion); -1 = no depth.
  std::vector<int> emitted_class;
  // Ground-truth class of the pixel's nearest point; -1 = no depth.
  std::vector<int> true_class;
};

// Synthetic teacher output for one view. Each valid-depth pixel takes the
// label of the point that won its z-buffer, is confused to another class with
// probability view_confusion_prob, and emits prototype + noise + shift
// (+ optional spike). Every pixel draws the same number of variates whatever
// the knob values, so renders that differ only in one knob stay paired.
inline TeacherRender render_feature_map(const PointCloud& scene, const Frame& frame, const TeacherSpec& spec,
                                        std::uint64_t frame_seed, int splat_radius = 1) {
  if (!scene.has_labels()) throw ValidationError("teacher rendering needs a labelled scene");
  spec.validate();
  const auto& k = frame.intrinsics;
  if (frame.depth.width != k.width || frame.depth.height != k.height) {
    throw ValidationError("frame depth does not match its intrinsics");
  }
  const Matrix protos = teacher_prototypes(spec, scene.num_classes);
  const auto zbuf = render_depth_indexed(scene, frame.pose, k, splat_radius);
  const auto npix = static_cast<std::size_t>(k.width) * k.height;
  TeacherRender out{FeatureMap(k.width, k.height, spec.dim), std::vector<int>(npix, -1), std::vector<int>(npix, -1)};
  const auto K = static_cast<std::uint64_t>(scene.num_classes);

  for (std::size_t idx = 0; idx < npix; ++idx) {
    if (!(frame.depth.values[idx] > 0.0f) || zbuf.winner[idx] < 0) continue;
    const int truth = (*scene.labels)[static_cast<std::size_t>(zbuf.winner[idx])];
    Rng rng(derive_seed({tag("teacher-pixel"), frame_seed, spec.prototype_seed, idx}));
    const double u_confuse = rng.uniform();
    const auto other = static_cast<int>(rng.below(K - 1));
    int cls = truth;
    if (u_confuse < spec.view_confusion_prob) cls = other < truth ? other : other + 1;

    float* px = out.map.values.data() + idx * static_cast<std::size_t>(spec.dim);
    for (int d = 0; d < spec.dim; ++d) {
      px[d] = static_cast<float>(protos(cls, d) + spec.noise_std * rng.normal() + spec.mean_shift);
    }
    const double u_spike = rng.uniform();
    const auto spike_channel = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.dim)));
    const double spike_sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    if (u_spike < spec.spike_prob) px[spike_channel] += static_cast<float>(spike_sign * spec.spike_scale);

    out.emitted_class[idx] = cls;
    out.true_class[idx] = truth;
  }
  return out;
}

// Observed channel values minus the emitted prototype and the mean shift:
// pure noise plus any spikes.
inline std::vector<double> prototype_residuals(const TeacherRender& render, const TeacherSpec& spec, int num_classes) {
  const Matrix protos = teacher_prototypes(spec, num_classes);
  std::vector<double> out;
  for (std::size_t idx = 0; idx < render.emitted_class.size(); ++idx) {
    const int cls = render.emitted_class[idx];
    if (cls < 0) continue;
    const float* px = render.map.values.data() + idx * static_cast<std::size_t>(spec.dim);
    for (int d = 0; d < spec.dim; ++d) out.push_back(static_cast<double>(px[d]) - protos(cls, d) - spec.mean_shift);
  }
  return out;
}

// Additive Gaussian jitter on feature values of observed pixels.
inline FeatureMap jitter_features(const FeatureMap& map, double std_dev, std::uint64_t seed) {
  FeatureMap out = map;
  if (std_dev == 0.0) return out;
  const auto npix = static_cast<std::size_t>(map.width) * map.height;
  for (std::size_t idx = 0; idx < npix; ++idx) {
    float* px = out.values.data() + idx * static_cast<std::size_t>(map.dim);
    bool observed = false;
    for (int d = 0; d < map.dim; ++d) observed = observed || px[d] != 0.0f;
    if (!observed) continue;
    Rng rng(derive_seed({tag("jitter"), seed, idx}));
    for (int d = 0; d < map.dim; ++d) px[d] += static_cast<float>(std_dev * rng.normal());
  }
  return out;
}

// Text-space class embeddings used for open-vocabulary labelling.
struct VocabularySet {
  int num_classes = 0;
  int dim = 0;
  Matrix embeddings;  // K x D, unit rows
};

// The synthetic text encoder of a text-aligned teacher is its prototype table.
inline VocabularySet vocabulary_from_teacher(const TeacherSpec& spec, int num_classes) {
  if (!spec.text_aligned) throw ContractError("teacher '" + spec.name + "' is not text-aligned; it has no vocabulary");
  return {num_classes, spec.dim, teacher_prototypes(spec, num_classes)};
}

// --- "A3D-FM v1" -----------------------------------------------------------

inline constexpr std::uint32_t kFeatureMapVersion = 1;

inline std::vector<std::uint8_t> encode_feature_map(const FeatureMap& map) {
  io::ByteWriter w;
  w.magic("A3FM");
  w.put<std::uint32_t>(kFeatureMapVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(map.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(map.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(map.dim));
  w.put_span<float>(map.values);
  return w.bytes();
}

inline FeatureMap decode_feature_map(std::span<const std::uint8_t> bytes, std::optional<int> expected_dim = std::nullopt) {
  io::ByteReader r(bytes);
  r.expect_magic("A3FM");
  r.expect_version(kFeatureMapVersion);
  FeatureMap map;
  map.width = static_cast<int>(r.get<std::uint32_t>());
  map.height = static_cast<int>(r.get<std::uint32_t>());
  const std::size_t dim_at = r.offset();
  map.dim = static_cast<int>(r.get<std::uint32_t>());
  if (expected_dim && *expected_dim != map.dim) {
    throw ValidationError("feature map dimension " + std::to_string(map.dim) + " does not match teacher dimension " +
                          std::to_string(*expected_dim) + " (header byte " + std::to_string(dim_at) + ")");
  }
  map.values = r.get_vector<float>(static_cast<std::size_t>(map.width) * map.height * map.dim);
  r.expect_end();
  for (float x : map.values) {
    if (!std::isfinite(x)) throw FormatError("non-finite feature value", r.offset());
  }
  return map;
}

inline void write_feature_map(const std::filesystem::path& path, const FeatureMap& map) {
  io::write_file(path, encode_feature_map(map));
}

inline FeatureMap load_feature_map(const std::filesystem::path& path, std::optional<int> expected_dim = std::nullopt) {
  return decode_feature_map(io::read_file(path), expected_dim);
}

}  // namespace agglom3d
