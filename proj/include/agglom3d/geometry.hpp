#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/LU>

#include "agglom3d/binary_io.hpp"
#include "agglom3d/errors.hpp"
#include "agglom3d/scene.hpp"

namespace agglom3d {

struct CameraIntrinsics {
  double fx = 100.0, fy = 100.0;
  double cx = 50.0, cy = 50.0;
  int width = 100, height = 100;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ValidationError("focal lengths must be > 0");
    if (width < 1 || height < 1) throw ValidationError("image size must be at least 1x1");
  }
};

// World-to-camera rigid transform: q = R p + t.
struct Pose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  static Pose identity() { return {}; }

  void validate() const {
    const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho < 1e-9)) throw ValidationError("pose rotation is not orthonormal");
    if (!(std::abs(rotation.determinant() - 1.0) <= 1e-9)) throw ValidationError("pose rotation must have det 1");
    if (!translation.allFinite()) throw ValidationError("pose translation is not finite");
  }

  Pose inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }

  Point3 apply(const Point3& p) const { return rotation * p + translation; }
};

// Camera at `eye` looking at `target`; camera axes are x right, y down, z forward.
inline Pose look_at(const Point3& eye, const Point3& target, const Point3& world_up = Point3::UnitZ()) {
  const Point3 forward = (target - eye).normalized();
  Point3 right = forward.cross(world_up);
  if (right.norm() < 1e-9) right = forward.cross(Point3::UnitY());
  right.normalize();
  const Point3 down = forward.cross(right);
  Pose pose;
  pose.rotation.row(0) = right.transpose();
  pose.rotation.row(1) = down.transpose();
  pose.rotation.row(2) = forward.transpose();
  pose.translation = -(pose.rotation * eye);
  return pose;
}

struct DepthMap {
  int width = 0, height = 0;
  std::vector<float> values;  // row-major meters; <= 0 means invalid

  DepthMap() = default;
  DepthMap(int w, int h) : width(w), height(h), values(static_cast<std::size_t>(w) * h, 0.0f) {}

  float at(int u, int v) const { return values[static_cast<std::size_t>(v) * width + u]; }
  float& at(int u, int v) { return values[static_cast<std::size_t>(v) * width + u]; }
};

struct Correspondence {
  std::size_t point_index = 0;
  int u = 0, v = 0;
  double cam_depth = 0.0;
};

struct PixelProjection {
  double u = 0.0, v = 0.0, depth = 0.0;
};

inline constexpr double kMinCameraDepth = 1e-6;

inline std::optional<PixelProjection> project_point(const Point3& p, const Pose& pose, const CameraIntrinsics& k) {
  const Point3 q = pose.apply(p);
  if (q.z() <= kMinCameraDepth) return std::nullopt;
  return PixelProjection{k.fx * q.x() / q.z() + k.cx, k.fy * q.y() / q.z() + k.cy, q.z()};
}

inline Point3 backproject_pixel(double u, double v, double depth, const Pose& pose, const CameraIntrinsics& k) {
  if (!(depth > 0.0)) throw ValidationError("backprojection depth must be > 0");
  const Point3 q((u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth);
  return pose.rotation.transpose() * (q - pose.translation);
}

// Nearest-integer pixel of a continuous projection.
inline int pixel_round(double x) { return static_cast<int>(std::floor(x + 0.5)); }

inline bool in_image(int u, int v, const CameraIntrinsics& k) { return u >= 0 && v >= 0 && u < k.width && v < k.height; }

// Z-buffer plus the index of the point that won each pixel (-1 where empty).
struct DepthRender {
  DepthMap depth;
  std::vector<std::int64_t> winner;
};

// Splats every point over the (2r+1)^2 Chebyshev neighborhood of its rounded
// pixel and keeps the minimum camera depth. Ties keep the lower point index,
// so the result does not depend on evaluation order.
inline DepthRender render_depth_indexed(const PointCloud& cloud, const Pose& pose, const CameraIntrinsics& k,
                                        int splat_radius = 1) {
  if (splat_radius < 0) throw ValidationError("splat_radius must be >= 0");
  k.validate();
  const auto npix = static_cast<std::size_t>(k.width) * k.height;
  std::vector<double> best(npix, std::numeric_limits<double>::infinity());
  DepthRender out{DepthMap(k.width, k.height), std::vector<std::int64_t>(npix, -1)};
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto proj = project_point(cloud.points[i], pose, k);
    if (!proj) continue;
    const int pu = pixel_round(proj->u), pv = pixel_round(proj->v);
    for (int v = std::max(0, pv - splat_radius); v <= std::min(k.height - 1, pv + splat_radius); ++v) {
      for (int u = std::max(0, pu - splat_radius); u <= std::min(k.width - 1, pu + splat_radius); ++u) {
        const auto idx = static_cast<std::size_t>(v) * k.width + u;
        if (proj->depth < best[idx]) {
          best[idx] = proj->depth;
          out.winner[idx] = static_cast<std::int64_t>(i);
        }
      }
    }
  }
  for (std::size_t idx = 0; idx < npix; ++idx) {
    if (out.winner[idx] >= 0) out.depth.values[idx] = static_cast<float>(best[idx]);
  }
  return out;
}

inline DepthMap render_depth(const PointCloud& cloud, const Pose& pose, const CameraIntrinsics& k, int splat_radius = 1) {
  return render_depth_indexed(cloud, pose, k, splat_radius).depth;
}

// A point corresponds to its rounded pixel when it projects inside the image
// onto a valid depth sample within depth_tol of its own camera depth.
inline std::vector<Correspondence> compute_correspondences(const PointCloud& cloud, const Pose& pose,
                                                           const CameraIntrinsics& k, const DepthMap& depth,
                                                           double depth_tol) {
  if (depth.width != k.width || depth.height != k.height) {
    throw ValidationError("depth map dimensions do not match intrinsics");
  }
  if (!(depth_tol > 0.0)) throw ValidationError("depth_tol must be > 0");
  std::vector<Correspondence> out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto proj = project_point(cloud.points[i], pose, k);
    if (!proj) continue;
    const int u = pixel_round(proj->u), v = pixel_round(proj->v);
    if (!in_image(u, v, k)) continue;
    const double d = depth.at(u, v);
    if (!(d > 0.0)) continue;
    if (std::abs(proj->depth - d) <= depth_tol) out.push_back({i, u, v, proj->depth});
  }
  return out;
}

// One posed view: everything needed to test visibility.
struct Frame {
  CameraIntrinsics intrinsics;
  Pose pose;
  DepthMap depth;
};

// --- "A3D-FR v1" -----------------------------------------------------------

inline constexpr std::uint32_t kFrameVersion = 1;

inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  io::ByteWriter w;
  w.magic("A3FR");
  w.put<std::uint32_t>(kFrameVersion);
  const auto& k = f.intrinsics;
  for (double x : {k.fx, k.fy, k.cx, k.cy, static_cast<double>(k.width), static_cast<double>(k.height)}) w.put(x);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) w.put(f.pose.rotation(r, c));
  }
  for (int r = 0; r < 3; ++r) w.put(f.pose.translation[r]);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.depth.width));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.depth.height));
  w.put_span<float>(f.depth.values);
  return w.bytes();
}

inline Frame decode_frame(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("A3FR");
  r.expect_version(kFrameVersion);
  Frame f;
  const auto intr = r.get_vector<double>(6);
  f.intrinsics = {intr[0], intr[1], intr[2], intr[3], static_cast<int>(intr[4]), static_cast<int>(intr[5])};
  const auto pose = r.get_vector<double>(12);
  for (int i = 0; i < 9; ++i) f.pose.rotation(i / 3, i % 3) = pose[static_cast<std::size_t>(i)];
  for (int i = 0; i < 3; ++i) f.pose.translation[i] = pose[static_cast<std::size_t>(9 + i)];
  const std::size_t dims_at = r.offset();
  const auto w = r.get<std::uint32_t>();
  const auto h = r.get<std::uint32_t>();
  if (static_cast<int>(w) != f.intrinsics.width || static_cast<int>(h) != f.intrinsics.height) {
    throw FormatError("depth map size does not match intrinsics", dims_at);
  }
  f.depth.width = static_cast<int>(w);
  f.depth.height = static_cast<int>(h);
  f.depth.values = r.get_vector<float>(static_cast<std::size_t>(w) * h);
  r.expect_end();
  f.intrinsics.validate();
  f.pose.validate();
  return f;
}

inline void write_frame(const std::filesystem::path& path, const Frame& f) { io::write_file(path, encode_frame(f)); }

inline Frame read_frame(const std::filesystem::path& path) { return decode_frame(io::read_file(path)); }

}  // namespace agglom3d
