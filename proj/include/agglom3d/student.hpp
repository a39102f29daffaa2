#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "agglom3d/binary_io.hpp"
#include "agglom3d/errors.hpp"
#include "agglom3d/rng.hpp"
#include "agglom3d/scene.hpp"
#include "agglom3d/teachers.hpp"

namespace agglom3d {

struct SceneBounds {
  Point3 min = Point3::Zero();
  Point3 max = Point3::Ones();

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (!(max[a] > min[a])) throw ValidationError("degenerate scene bounds: zero extent on an axis");
    }
  }
};

// Point -> [p_norm, sin(2^k pi p_norm), cos(2^k pi p_norm)] for k < L, with
// p_norm the position mapped to [-1, 1]^3 by the bounds.
inline Eigen::RowVectorXd positional_encode(const Point3& p, int frequencies, const SceneBounds& bounds) {
  if (frequencies < 0) throw ValidationError("positional encoding needs L >= 0");
  bounds.validate();
  Eigen::RowVectorXd out(3 + 6 * frequencies);
  Point3 pn;
  for (int a = 0; a < 3; ++a) pn[a] = 2.0 * (p[a] - bounds.min[a]) / (bounds.max[a] - bounds.min[a]) - 1.0;
  out.head<3>() = pn.transpose();
  for (int k = 0; k < frequencies; ++k) {
    const double scale = std::ldexp(std::numbers::pi, k);
    for (int a = 0; a < 3; ++a) {
      out[3 + 6 * k + a] = std::sin(scale * pn[a]);
      out[6 + 6 * k + a] = std::cos(scale * pn[a]);
    }
  }
  return out;
}

struct StudentConfig {
  int pe_frequencies = 4;
  std::vector<int> trunk_widths{64, 64};
  std::vector<int> head_dims;  // one per teacher, equal to the teacher dim
  std::uint64_t init_seed = 0;
  SceneBounds bounds;

  int input_dim() const { return 3 + 6 * pe_frequencies; }

  void validate() const {
    if (pe_frequencies < 0) throw ValidationError("pe_frequencies must be >= 0");
    for (int w : trunk_widths) {
      if (w < 1) throw ValidationError("trunk layer widths must be >= 1");
    }
    if (head_dims.empty()) throw ValidationError("student needs at least one head");
    for (int d : head_dims) {
      if (d < 1) throw ValidationError("head dims must be >= 1");
    }
    bounds.validate();
  }

  static StudentConfig for_teachers(const std::vector<TeacherSpec>& teachers, SceneBounds bounds) {
    StudentConfig c;
    for (const auto& t : teachers) c.head_dims.push_back(t.dim);
    c.bounds = bounds;
    return c;
  }
};

struct DenseLayer {
  Matrix weight;  // fan_out x fan_in
  Eigen::VectorXd bias;
};

// Trainable tensors, shared by the model and its gradients.
struct ParameterSet {
  std::vector<DenseLayer> trunk;
  std::vector<DenseLayer> heads;
  // One raw scalar per teacher. Under the sigma objectives sigma_i = exp(s_i);
  // under auto-weighting the loss weight is w_i = 1 + s_i.
  Eigen::VectorXd log_sigma;

  std::size_t size() const {
    std::size_t n = static_cast<std::size_t>(log_sigma.size());
    for (const auto* group : {&trunk, &heads}) {
      for (const auto& l : *group) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    }
    return n;
  }

  ParameterSet zeros_like() const {
    ParameterSet z = *this;
    for (auto* group : {&z.trunk, &z.heads}) {
      for (auto& l : *group) {
        l.weight.setZero();
        l.bias.setZero();
      }
    }
    z.log_sigma.setZero();
    return z;
  }

  // Trunk layers, then heads (weights row-major before biases), then scalars.
  Eigen::VectorXd flatten() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(size()));
    Eigen::Index at = 0;
    for (const auto* group : {&trunk, &heads}) {
      for (const auto& l : *group) {
        out.segment(at, l.weight.size()) = Eigen::Map<const Eigen::VectorXd>(l.weight.data(), l.weight.size());
        at += l.weight.size();
        out.segment(at, l.bias.size()) = l.bias;
        at += l.bias.size();
      }
    }
    out.segment(at, log_sigma.size()) = log_sigma;
    return out;
  }

  void assign(const Eigen::VectorXd& flat) {
    if (flat.size() != static_cast<Eigen::Index>(size())) throw ContractError("flat parameter vector has the wrong length");
    Eigen::Index at = 0;
    for (auto* group : {&trunk, &heads}) {
      for (auto& l : *group) {
        Eigen::Map<Eigen::VectorXd>(l.weight.data(), l.weight.size()) = flat.segment(at, l.weight.size());
        at += l.weight.size();
        l.bias = flat.segment(at, l.bias.size());
        at += l.bias.size();
      }
    }
    log_sigma = flat.segment(at, log_sigma.size());
  }

  bool all_finite() const {
    for (const auto* group : {&trunk, &heads}) {
      for (const auto& l : *group) {
        if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
      }
    }
    return log_sigma.allFinite();
  }
};

struct StudentModel {
  StudentConfig config;
  ParameterSet params;

  std::size_t num_heads() const { return params.heads.size(); }
  double sigma(std::size_t i) const { return std::exp(params.log_sigma[static_cast<Eigen::Index>(i)]); }
  std::size_t parameter_count() const { return params.size(); }
};

struct Gradients {
  ParameterSet params;
  std::size_t count = 0;  // points accumulated
};

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0, s_i = 0.
inline StudentModel init_student(const StudentConfig& config) {
  config.validate();
  Rng rng(derive_seed({tag("student-init"), config.init_seed}));
  auto make_layer = [&rng](int fan_in, int fan_out) {
    DenseLayer l{Matrix(fan_out, fan_in), Eigen::VectorXd::Zero(fan_out)};
    const double limit = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rng.uniform(-limit, limit);
    return l;
  };
  StudentModel m{config, {}};
  int width = config.input_dim();
  for (int w : config.trunk_widths) {
    m.params.trunk.push_back(make_layer(width, w));
    width = w;
  }
  for (int d : config.head_dims) m.params.heads.push_back(make_layer(width, d));
  m.params.log_sigma = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(config.head_dims.size()));
  return m;
}

inline Matrix encode_points(const std::vector<Point3>& points, const StudentConfig& config) {
  Matrix x(static_cast<Eigen::Index>(points.size()), config.input_dim());
  for (std::size_t i = 0; i < points.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = positional_encode(points[i], config.pe_frequencies, config.bounds);
  }
  return x;
}

// Activations retained for the reverse pass.
struct ForwardCache {
  std::vector<Matrix> activations;  // [0] = encoded input, then each trunk layer output
  std::vector<Matrix> outputs;      // per head, N x D_i
};

inline ForwardCache forward_cached(const StudentModel& model, const std::vector<Point3>& points) {
  ForwardCache cache;
  cache.activations.push_back(encode_points(points, model.config));
  for (const auto& layer : model.params.trunk) {
    Matrix z = cache.activations.back() * layer.weight.transpose();
    z.rowwise() += layer.bias.transpose();
    cache.activations.push_back(z.array().tanh().matrix());
  }
  const Matrix& features = cache.activations.back();
  for (const auto& head : model.params.heads) {
    Matrix y = features * head.weight.transpose();
    y.rowwise() += head.bias.transpose();
    cache.outputs.push_back(std::move(y));
  }
  return cache;
}

// Per-teacher student features F3D_i, one row per point.
inline std::vector<Matrix> forward(const StudentModel& model, const PointCloud& points) {
  return forward_cached(model, points.points).outputs;
}

// Reverse-mode gradient of sum_i <outputs_i, cotangents_i>. The log_sigma
// slot is left zero; the objective fills it.
inline Gradients backward(const StudentModel& model, const ForwardCache& cache, const std::vector<Matrix>& cotangents) {
  if (cotangents.size() != model.num_heads()) throw ContractError("one cotangent per head is required");
  for (std::size_t i = 0; i < cotangents.size(); ++i) {
    if (cotangents[i].rows() != cache.outputs[i].rows() || cotangents[i].cols() != cache.outputs[i].cols()) {
      throw ContractError("cotangent " + std::to_string(i) + " shape does not match head output");
    }
  }
  Gradients g{model.params.zeros_like(), static_cast<std::size_t>(cache.activations.front().rows())};
  const Matrix& features = cache.activations.back();
  Matrix d_features = Matrix::Zero(features.rows(), features.cols());
  for (std::size_t i = 0; i < cotangents.size(); ++i) {
    g.params.heads[i].weight = cotangents[i].transpose() * features;
    g.params.heads[i].bias = cotangents[i].colwise().sum().transpose();
    d_features += cotangents[i] * model.params.heads[i].weight;
  }
  for (std::size_t l = model.params.trunk.size(); l-- > 0;) {
    const Matrix& out = cache.activations[l + 1];
    const Matrix dz = (d_features.array() * (1.0 - out.array().square())).matrix();
    g.params.trunk[l].weight = dz.transpose() * cache.activations[l];
    g.params.trunk[l].bias = dz.colwise().sum().transpose();
    if (l > 0) d_features = dz * model.params.trunk[l].weight;
  }
  return g;
}

inline Gradients backward(const StudentModel& model, const PointCloud& points, const std::vector<Matrix>& cotangents) {
  return backward(model, forward_cached(model, points.points), cotangents);
}

// --- "A3D-CK v1" -----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  StudentModel model;
  std::uint64_t step = 0;
};

inline std::vector<std::uint8_t> encode_checkpoint(const StudentModel& model, std::uint64_t step) {
  io::ByteWriter w;
  w.magic("A3CK");
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto& c = model.config;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.pe_frequencies));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.trunk_widths.size()));
  for (int x : c.trunk_widths) w.put<std::uint32_t>(static_cast<std::uint32_t>(x));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.head_dims.size()));
  for (int x : c.head_dims) w.put<std::uint32_t>(static_cast<std::uint32_t>(x));
  w.put<std::uint64_t>(c.init_seed);
  for (int a = 0; a < 3; ++a) w.put(c.bounds.min[a]);
  for (int a = 0; a < 3; ++a) w.put(c.bounds.max[a]);
  w.put<std::uint64_t>(step);
  auto put_tensor = [&w](const double* data, Eigen::Index rows, Eigen::Index cols) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(rows));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(cols));
    w.put_span<double>({data, static_cast<std::size_t>(rows * cols)});
  };
  for (const auto* group : {&model.params.trunk, &model.params.heads}) {
    for (const auto& l : *group) {
      put_tensor(l.weight.data(), l.weight.rows(), l.weight.cols());
      put_tensor(l.bias.data(), l.bias.size(), 1);
    }
  }
  put_tensor(model.params.log_sigma.data(), model.params.log_sigma.size(), 1);
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("A3CK");
  r.expect_version(kCheckpointVersion);
  StudentConfig c;
  c.pe_frequencies = static_cast<int>(r.get<std::uint32_t>());
  c.trunk_widths.clear();
  const auto n_trunk = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_trunk; ++i) c.trunk_widths.push_back(static_cast<int>(r.get<std::uint32_t>()));
  const auto n_heads = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_heads; ++i) c.head_dims.push_back(static_cast<int>(r.get<std::uint32_t>()));
  c.init_seed = r.get<std::uint64_t>();
  for (int a = 0; a < 3; ++a) c.bounds.min[a] = r.get<double>();
  for (int a = 0; a < 3; ++a) c.bounds.max[a] = r.get<double>();
  Checkpoint ck{init_student(c), r.get<std::uint64_t>()};
  auto get_tensor = [&r](double* data, Eigen::Index rows, Eigen::Index cols) {
    const std::size_t at = r.offset();
    const auto rr = r.get<std::uint32_t>();
    const auto cc = r.get<std::uint32_t>();
    if (rr != rows || cc != cols) throw FormatError("tensor shape does not match the serialized config", at);
    const auto values = r.get_vector<double>(static_cast<std::size_t>(rows * cols));
    std::copy(values.begin(), values.end(), data);
  };
  for (auto* group : {&ck.model.params.trunk, &ck.model.params.heads}) {
    for (auto& l : *group) {
      get_tensor(l.weight.data(), l.weight.rows(), l.weight.cols());
      get_tensor(l.bias.data(), l.bias.size(), 1);
    }
  }
  get_tensor(ck.model.params.log_sigma.data(), ck.model.params.log_sigma.size(), 1);
  r.expect_end();
  return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const StudentModel& model, std::uint64_t step) {
  io::write_file(path, encode_checkpoint(model, step));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace agglom3d
