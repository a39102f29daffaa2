#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "agglom3d/binary_io.hpp"
#include "agglom3d/errors.hpp"
#include "agglom3d/geometry.hpp"
#include "agglom3d/scene.hpp"
#include "agglom3d/teachers.hpp"

namespace agglom3d {

// Per-point supervision targets, one N x D_i matrix per teacher.
struct FusedFeatureBank {
  std::vector<Matrix> features;
  std::vector<std::uint32_t> counts;  // views contributing to each point
  std::vector<bool> mask;             // counts > 0

  std::size_t num_points() const noexcept { return counts.size(); }
  std::size_t num_teachers() const noexcept { return features.size(); }

  // Rows `indices` of every teacher slice (indices may repeat).
  FusedFeatureBank select(const std::vector<std::size_t>& indices) const {
    FusedFeatureBank out;
    for (const auto& f : features) {
      Matrix m(static_cast<Eigen::Index>(indices.size()), f.cols());
      for (std::size_t r = 0; r < indices.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = f.row(static_cast<Eigen::Index>(indices[r]));
      out.features.push_back(std::move(m));
    }
    for (auto i : indices) {
      out.counts.push_back(counts[i]);
      out.mask.push_back(mask[i]);
    }
    return out;
  }
};

// A frame together with one feature map per teacher (same order as teachers).
struct FrameObservation {
  Frame frame;
  std::vector<FeatureMap> maps;
};

// Mean of each teacher's pixel feature over the frames in which the point
// passes the z-buffer visibility test. Frames are accumulated in the order
// given.
inline FusedFeatureBank fuse_views(const PointCloud& cloud, const std::vector<FrameObservation>& frames,
                                   const std::vector<TeacherSpec>& teachers, double depth_tol) {
  const auto n = static_cast<Eigen::Index>(cloud.size());
  FusedFeatureBank bank;
  for (const auto& t : teachers) bank.features.push_back(Matrix::Zero(n, t.dim));
  bank.counts.assign(cloud.size(), 0);
  bank.mask.assign(cloud.size(), false);

  for (std::size_t f = 0; f < frames.size(); ++f) {
    const auto& obs = frames[f];
    const auto& k = obs.frame.intrinsics;
    if (obs.maps.size() != teachers.size()) {
      throw ValidationError("frame " + std::to_string(f) + " has " + std::to_string(obs.maps.size()) +
                            " feature maps for " + std::to_string(teachers.size()) + " teachers");
    }
    for (std::size_t t = 0; t < teachers.size(); ++t) {
      const auto& m = obs.maps[t];
      if (m.width != k.width || m.height != k.height || m.dim != teachers[t].dim) {
        throw ValidationError("frame " + std::to_string(f) + ", teacher '" + teachers[t].name +
                              "': feature map shape does not match frame size or teacher dim");
      }
    }
    for (const auto& c : compute_correspondences(cloud, obs.frame.pose, k, obs.frame.depth, depth_tol)) {
      const auto row = static_cast<Eigen::Index>(c.point_index);
      for (std::size_t t = 0; t < teachers.size(); ++t) {
        const auto px = obs.maps[t].pixel(c.u, c.v);
        for (int d = 0; d < teachers[t].dim; ++d) bank.features[t](row, d) += static_cast<double>(px[static_cast<std::size_t>(d)]);
      }
      ++bank.counts[c.point_index];
    }
  }
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (bank.counts[i] == 0) continue;
    bank.mask[i] = true;
    const double inv = 1.0 / static_cast<double>(bank.counts[i]);
    for (auto& f : bank.features) f.row(static_cast<Eigen::Index>(i)) *= inv;
  }
  return bank;
}

enum class DeMeanMode { kPerPoint, kPerChannel };

// Subtracts each row's scalar channel mean.
inline Matrix de_mean(const Matrix& x) {
  Matrix out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / static_cast<double>(x.cols());
    out.row(r).array() -= mu;
  }
  return out;
}

// Alternative reading: subtract the per-channel mean over observed rows.
// Unobserved rows stay zero.
inline Matrix de_mean_per_channel(const Matrix& x, const std::vector<bool>& mask) {
  Eigen::RowVectorXd mu = Eigen::RowVectorXd::Zero(x.cols());
  std::size_t count = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (!mask[static_cast<std::size_t>(r)]) continue;
    mu += x.row(r);
    ++count;
  }
  if (count == 0) return x;
  mu /= static_cast<double>(count);
  Matrix out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    if (mask[static_cast<std::size_t>(r)]) out.row(r) -= mu;
  }
  return out;
}

struct HistogramSpec {
  double lo = -1.0, hi = 1.0;
  int bins = 50;

  void validate() const {
    if (!(lo < hi)) throw ValidationError("histogram range needs lo < hi");
    if (bins < 1) throw ValidationError("histogram needs at least one bin");
  }
};

struct Histogram {
  std::vector<std::uint64_t> counts;
  std::uint64_t underflow = 0, overflow = 0;

  std::uint64_t total() const {
    std::uint64_t s = underflow + overflow;
    for (auto c : counts) s += c;
    return s;
  }

  // Mass outside the range plus the first and last bins.
  std::uint64_t tail_mass() const {
    std::uint64_t s = underflow + overflow + counts.front();
    if (counts.size() > 1) s += counts.back();
    return s;
  }
};

// Bins are [lo + i w, lo + (i+1) w); hi itself falls in the last bin.
inline Histogram feature_histogram(const Matrix& x, const HistogramSpec& spec) {
  spec.validate();
  Histogram h;
  h.counts.assign(static_cast<std::size_t>(spec.bins), 0);
  const double width = (spec.hi - spec.lo) / spec.bins;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double v = x(r, c);
      if (v < spec.lo) {
        ++h.underflow;
      } else if (v > spec.hi) {
        ++h.overflow;
      } else {
        const auto b = std::min(static_cast<std::size_t>((v - spec.lo) / width), h.counts.size() - 1);
        ++h.counts[b];
      }
    }
  }
  return h;
}

// Non-excess sample kurtosis m4 / m2^2 (3 for a Gaussian).
inline double sample_kurtosis(std::span<const double> x) {
  if (x.size() < 2) throw ContractError("kurtosis needs at least two values");
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double m2 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = (v - mean) * (v - mean);
    m2 += d;
    m4 += d * d;
  }
  m2 /= static_cast<double>(x.size());
  m4 /= static_cast<double>(x.size());
  if (!(m2 > 0.0)) throw ContractError("kurtosis of a constant sample is undefined");
  return m4 / (m2 * m2);
}

// --- "A3D-FB v1" -----------------------------------------------------------

inline constexpr std::uint32_t kBankVersion = 1;

inline std::vector<std::uint8_t> encode_bank(const FusedFeatureBank& bank) {
  io::ByteWriter w;
  w.magic("A3FB");
  w.put<std::uint32_t>(kBankVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bank.num_points()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(bank.num_teachers()));
  for (const auto& f : bank.features) w.put<std::uint32_t>(static_cast<std::uint32_t>(f.cols()));
  for (const auto& f : bank.features) {
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
      for (Eigen::Index c = 0; c < f.cols(); ++c) w.put(static_cast<float>(f(r, c)));
    }
  }
  w.put_span<std::uint32_t>(bank.counts);
  return w.bytes();
}

inline FusedFeatureBank decode_bank(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("A3FB");
  r.expect_version(kBankVersion);
  const auto n = r.get<std::uint32_t>();
  const auto teachers = r.get<std::uint32_t>();
  const auto dims = r.get_vector<std::uint32_t>(teachers);
  FusedFeatureBank bank;
  for (auto d : dims) {
    const auto raw = r.get_vector<float>(static_cast<std::size_t>(n) * d);
    Matrix m(n, d);
    for (std::size_t i = 0; i < raw.size(); ++i) m(static_cast<Eigen::Index>(i / d), static_cast<Eigen::Index>(i % d)) = raw[i];
    bank.features.push_back(std::move(m));
  }
  bank.counts = r.get_vector<std::uint32_t>(n);
  r.expect_end();
  bank.mask.resize(n);
  for (std::size_t i = 0; i < n; ++i) bank.mask[i] = bank.counts[i] > 0;
  return bank;
}

inline void write_bank(const std::filesystem::path& path, const FusedFeatureBank& bank) {
  io::write_file(path, encode_bank(bank));
}

inline FusedFeatureBank read_bank(const std::filesystem::path& path) { return decode_bank(io::read_file(path)); }

}  // namespace agglom3d
