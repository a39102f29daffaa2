#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Core>

#include "agglom3d/binary_io.hpp"
#include "agglom3d/errors.hpp"
#include "agglom3d/rng.hpp"

namespace agglom3d {

using Point3 = Eigen::Vector3d;

// Labelled or unlabelled point set in meters.
struct PointCloud {
  std::vector<Point3> points;
  std::optional<std::vector<int>> labels;
  int num_classes = 0;  // K; meaningful only when labels are present
  std::string scene_id;

  std::size_t size() const noexcept { return points.size(); }
  bool has_labels() const noexcept { return labels.has_value(); }

  void validate() const {
    for (const auto& p : points) {
      if (!p.allFinite()) throw ValidationError("point cloud '" + scene_id + "' has a non-finite coordinate");
    }
    if (labels) {
      if (labels->size() != points.size()) throw ValidationError("label count differs from point count");
      if (num_classes < 2) throw ValidationError("labelled clouds need at least 2 classes");
      for (int l : *labels) {
        if (l < 0 || l >= num_classes) throw ValidationError("label out of range [0, K)");
      }
    }
  }

  Point3 centroid() const {
    Point3 c = Point3::Zero();
    for (const auto& p : points) c += p;
    return points.empty() ? c : Point3(c / static_cast<double>(points.size()));
  }

  // Gather a subset (indices may repeat).
  PointCloud select(const std::vector<std::size_t>& indices) const {
    PointCloud out;
    out.scene_id = scene_id;
    out.num_classes = num_classes;
    out.points.reserve(indices.size());
    for (auto i : indices) out.points.push_back(points[i]);
    if (labels) {
      out.labels.emplace();
      out.labels->reserve(indices.size());
      for (auto i : indices) out.labels->push_back((*labels)[i]);
    }
    return out;
  }
};

struct SyntheticSceneSpec {
  std::uint64_t seed = 0;
  std::array<double, 3> extent{4.0, 4.0, 2.5};
  int num_objects = 6;
  int num_classes = 6;
  int points_per_object = 400;
  bool floor_and_walls = true;
  // Half-size range of each object along every axis, in meters.
  double size_min = 0.2;
  double size_max = 0.5;

  void validate() const {
    for (double e : extent) {
      if (!(e > 0.0) || !std::isfinite(e)) throw ValidationError("scene extent components must be > 0");
    }
    if (num_objects < 1) throw ValidationError("num_objects must be >= 1");
    if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
    if (points_per_object < 1) throw ValidationError("points_per_object must be >= 1");
    if (!(size_min > 0.0) || size_max < size_min) throw ValidationError("object size range must satisfy 0 < size_min <= size_max");
  }
};

// Floor plus two walls each receive points_per_object samples.
inline constexpr int kSurfaceCount = 3;
inline constexpr int kFloorClass = 0;
inline constexpr int kWallClass = 1;

namespace detail {

inline Point3 sample_box_surface(Rng& rng, const Point3& center, const Point3& half) {
  // Pick a face with probability proportional to its area.
  const std::array<double, 3> face_area{half.y() * half.z(), half.x() * half.z(), half.x() * half.y()};
  const double total = 2.0 * (face_area[0] + face_area[1] + face_area[2]);
  double r = rng.uniform() * total;
  int axis = 2;
  int sign = 1;
  for (int a = 0; a < 3; ++a) {
    if (r < 2.0 * face_area[a]) {
      axis = a;
      sign = r < face_area[a] ? -1 : 1;
      break;
    }
    r -= 2.0 * face_area[a];
  }
  Point3 local;
  for (int a = 0; a < 3; ++a) local[a] = rng.uniform(-half[a], half[a]);
  local[axis] = sign * half[axis];
  return center + local;
}

inline Point3 sample_ellipsoid_surface(Rng& rng, const Point3& center, const Point3& radii) {
  Point3 dir;
  double n = 0.0;
  do {
    dir = Point3(rng.normal(), rng.normal(), rng.normal());
    n = dir.norm();
  } while (n < 1e-12);
  return center + radii.cwiseProduct(dir / n);
}

}  // namespace detail

// Synthetic room: optional floor (class 0) and two walls (class 1) followed by
// num_objects boxes/ellipsoids resting on the floor. Object placement is drawn
// before sizes are applied, so nearby size ranges give nearby layouts.
inline PointCloud generate_scene(const SyntheticSceneSpec& spec) {
  spec.validate();
  Rng rng(derive_seed({tag("scene"), spec.seed}));
  const Point3 extent(spec.extent[0], spec.extent[1], spec.extent[2]);
  const int ppo = spec.points_per_object;

  PointCloud cloud;
  cloud.scene_id = "scene-" + std::to_string(spec.seed);
  cloud.num_classes = spec.num_classes;
  cloud.labels.emplace();
  const std::size_t total =
      static_cast<std::size_t>(ppo) * (spec.num_objects + (spec.floor_and_walls ? kSurfaceCount : 0));
  cloud.points.reserve(total);
  cloud.labels->reserve(total);

  if (spec.floor_and_walls) {
    for (int i = 0; i < ppo; ++i) {
      cloud.points.emplace_back(rng.uniform(0.0, extent.x()), rng.uniform(0.0, extent.y()), 0.0);
      cloud.labels->push_back(kFloorClass);
    }
    for (int i = 0; i < ppo; ++i) {
      cloud.points.emplace_back(rng.uniform(0.0, extent.x()), 0.0, rng.uniform(0.0, extent.z()));
      cloud.labels->push_back(kWallClass);
    }
    for (int i = 0; i < ppo; ++i) {
      cloud.points.emplace_back(0.0, rng.uniform(0.0, extent.y()), rng.uniform(0.0, extent.z()));
      cloud.labels->push_back(kWallClass);
    }
  }

  const int first_object_class = (spec.floor_and_walls && spec.num_classes > 2) ? 2 : 0;
  const auto object_classes = static_cast<std::uint64_t>(spec.num_classes - first_object_class);
  for (int o = 0; o < spec.num_objects; ++o) {
    const bool is_box = rng.uniform() < 0.5;
    const int cls = first_object_class + static_cast<int>(rng.below(object_classes));
    const Point3 place(rng.uniform(), rng.uniform(), 0.0);
    Point3 half;
    for (int a = 0; a < 3; ++a) {
      half[a] = std::min(rng.uniform(spec.size_min, spec.size_max), 0.5 * extent[a]);
    }
    const Point3 center(half.x() + place.x() * (extent.x() - 2.0 * half.x()),
                        half.y() + place.y() * (extent.y() - 2.0 * half.y()), half.z());
    for (int i = 0; i < ppo; ++i) {
      cloud.points.push_back(is_box ? detail::sample_box_surface(rng, center, half)
                                    : detail::sample_ellipsoid_surface(rng, center, half));
      cloud.labels->push_back(cls);
    }
  }
  return cloud;
}

struct VoxelKey {
  std::int64_t ix = 0, iy = 0, iz = 0;

  static VoxelKey of(const Point3& p, double voxel_size) {
    return {static_cast<std::int64_t>(std::floor(p.x() / voxel_size)),
            static_cast<std::int64_t>(std::floor(p.y() / voxel_size)),
            static_cast<std::int64_t>(std::floor(p.z() / voxel_size))};
  }

  auto operator<=>(const VoxelKey&) const = default;
};

// One centroid per occupied voxel, ordered by key. Labels reduce to the
// majority label with ties going to the smallest class id.
inline PointCloud voxel_downsample(const PointCloud& cloud, double voxel_size) {
  if (!(voxel_size > 0.0)) throw ValidationError("voxel_size must be > 0");
  std::map<VoxelKey, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < cloud.size(); ++i) cells[VoxelKey::of(cloud.points[i], voxel_size)].push_back(i);

  PointCloud out;
  out.scene_id = cloud.scene_id;
  out.num_classes = cloud.num_classes;
  if (cloud.labels) out.labels.emplace();
  out.points.reserve(cells.size());
  for (const auto& [key, members] : cells) {
    Point3 sum = Point3::Zero();
    for (auto i : members) sum += cloud.points[i];
    out.points.push_back(members.size() == 1 ? cloud.points[members.front()]
                                             : Point3(sum / static_cast<double>(members.size())));
    if (cloud.labels) {
      std::map<int, int> votes;
      for (auto i : members) ++votes[(*cloud.labels)[i]];
      int best = votes.begin()->first;
      int best_count = votes.begin()->second;
      for (const auto& [label, count] : votes) {
        if (count > best_count) {
          best = label;
          best_count = count;
        }
      }
      out.labels->push_back(best);
    }
  }
  return out;
}

// Indices of a seeded uniform sample: without replacement when n <= N (partial
// Fisher-Yates), with replacement otherwise.
inline std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ValidationError("sample size must be >= 1");
  if (population == 0) throw ValidationError("cannot sample from an empty cloud");
  Rng rng(derive_seed({tag("sample"), seed}));
  std::vector<std::size_t> out;
  if (n <= population) {
    std::vector<std::size_t> idx(population);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(population - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    out = std::move(idx);
  } else {
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<std::size_t>(rng.below(population)));
  }
  return out;
}

inline PointCloud sample_points(const PointCloud& cloud, std::size_t n, std::uint64_t seed) {
  return cloud.select(sample_indices(cloud.size(), n, seed));
}

enum class FlipAxis { kX = 0, kY = 1 };

// Reflection about the cloud centroid along one horizontal axis.
inline PointCloud augment_flip(const PointCloud& cloud, FlipAxis axis, bool apply) {
  PointCloud out = cloud;
  if (!apply || cloud.points.empty()) return out;
  const int a = static_cast<int>(axis);
  const double c = cloud.centroid()[a];
  for (auto& p : out.points) p[a] = 2.0 * c - p[a];
  return out;
}

namespace detail {

// Per-node noise vector of the elastic field: Gaussian with std `magnitude`,
// norm clipped at 8 * magnitude.
inline Point3 elastic_node(std::int64_t ix, std::int64_t iy, std::int64_t iz, double magnitude, std::uint64_t seed) {
  Rng rng(derive_seed({tag("elastic"), seed, static_cast<std::uint64_t>(ix), static_cast<std::uint64_t>(iy),
                       static_cast<std::uint64_t>(iz)}));
  Point3 v(rng.normal(), rng.normal(), rng.normal());
  v *= magnitude;
  const double limit = 8.0 * magnitude;
  const double n = v.norm();
  if (n > limit) v *= limit / n;
  return v;
}

}  // namespace detail

// Displacement field at p: trilinear interpolation of node noise on a lattice
// of spacing `granularity` anchored at the origin.
inline Point3 elastic_displacement(const Point3& p, double granularity, double magnitude, std::uint64_t seed) {
  if (magnitude == 0.0) return Point3::Zero();
  const Point3 g = p / granularity;
  const std::int64_t x0 = static_cast<std::int64_t>(std::floor(g.x()));
  const std::int64_t y0 = static_cast<std::int64_t>(std::floor(g.y()));
  const std::int64_t z0 = static_cast<std::int64_t>(std::floor(g.z()));
  const double fx = g.x() - static_cast<double>(x0);
  const double fy = g.y() - static_cast<double>(y0);
  const double fz = g.z() - static_cast<double>(z0);
  Point3 d = Point3::Zero();
  for (int c = 0; c < 8; ++c) {
    const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
    const double w = (bx ? fx : 1.0 - fx) * (by ? fy : 1.0 - fy) * (bz ? fz : 1.0 - fz);
    d += w * detail::elastic_node(x0 + bx, y0 + by, z0 + bz, magnitude, seed);
  }
  return d;
}

inline PointCloud augment_elastic(const PointCloud& cloud, double granularity, double magnitude, std::uint64_t seed) {
  if (!(granularity > 0.0)) throw ValidationError("elastic granularity must be > 0");
  if (!(magnitude >= 0.0)) throw ValidationError("elastic magnitude must be >= 0");
  PointCloud out = cloud;
  if (magnitude == 0.0) return out;
  for (auto& p : out.points) p += elastic_displacement(p, granularity, magnitude, seed);
  return out;
}

// --- "A3D-PC v1" -----------------------------------------------------------

inline constexpr std::uint32_t kPointCloudVersion = 1;

inline std::vector<std::uint8_t> encode_point_cloud(const PointCloud& cloud) {
  io::ByteWriter w;
  w.magic("A3PC");
  w.put<std::uint32_t>(kPointCloudVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cloud.size()));
  w.put<std::uint8_t>(cloud.has_labels() ? 1 : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cloud.has_labels() ? cloud.num_classes : 0));
  for (const auto& p : cloud.points) {
    w.put(p.x());
    w.put(p.y());
    w.put(p.z());
  }
  if (cloud.labels) {
    for (int l : *cloud.labels) w.put<std::uint16_t>(static_cast<std::uint16_t>(l));
  }
  return w.bytes();
}

inline PointCloud decode_point_cloud(std::span<const std::uint8_t> bytes, std::string scene_id = {}) {
  io::ByteReader r(bytes);
  r.expect_magic("A3PC");
  r.expect_version(kPointCloudVersion);
  const auto n = r.get<std::uint32_t>();
  const auto has_labels = r.get<std::uint8_t>();
  const auto k = r.get<std::uint32_t>();
  const auto coords = r.get_vector<double>(static_cast<std::size_t>(n) * 3);
  PointCloud cloud;
  cloud.scene_id = std::move(scene_id);
  cloud.points.reserve(n);
  for (std::size_t i = 0; i < n; ++i) cloud.points.emplace_back(coords[3 * i], coords[3 * i + 1], coords[3 * i + 2]);
  if (has_labels) {
    const auto raw = r.get_vector<std::uint16_t>(n);
    cloud.labels.emplace(raw.begin(), raw.end());
    cloud.num_classes = static_cast<int>(k);
  }
  r.expect_end();
  cloud.validate();
  return cloud;
}

inline void write_point_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  io::write_file(path, encode_point_cloud(cloud));
}

inline PointCloud read_point_cloud(const std::filesystem::path& path) {
  return decode_point_cloud(io::read_file(path), path.stem().string());
}

}  // namespace agglom3d
