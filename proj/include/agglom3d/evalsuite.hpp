#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "agglom3d/binary_io.hpp"
#include "agglom3d/errors.hpp"
#include "agglom3d/fusion.hpp"
#include "agglom3d/rng.hpp"
#include "agglom3d/scene.hpp"
#include "agglom3d/student.hpp"
#include "agglom3d/teachers.hpp"

namespace agglom3d {

// Rows = ground truth, columns = prediction.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(int k = 0) : num_classes(k), counts(static_cast<std::size_t>(k) * k, 0) {}

  std::uint64_t at(int gt, int pred) const { return counts[static_cast<std::size_t>(gt) * num_classes + pred]; }
  std::uint64_t& at(int gt, int pred) { return counts[static_cast<std::size_t>(gt) * num_classes + pred]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

struct Metrics {
  ConfusionMatrix confusion;
  // nullopt where the class is excluded (see compute_metrics).
  std::vector<std::optional<double>> per_class_iou;
  std::vector<std::optional<double>> per_class_acc;
  double miou = 0.0;
  double macc = 0.0;
  std::size_t n_points = 0;
};

// IoU_k = TP / (TP + FP + FN), skipped when class k is absent from both ground
// truth and prediction. Accuracy_k = TP / (TP + FN), skipped when class k has
// no ground-truth points.
inline Metrics compute_metrics(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes) {
  if (pred.size() != gt.size()) throw ContractError("prediction and ground truth lengths differ");
  if (num_classes < 1) throw ContractError("metrics need at least one class");
  Metrics m{ConfusionMatrix(num_classes), {}, {}, 0.0, 0.0, pred.size()};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= num_classes || gt[i] < 0 || gt[i] >= num_classes) {
      throw ContractError("label out of range at point " + std::to_string(i));
    }
    ++m.confusion.at(gt[i], pred[i]);
  }
  double iou_sum = 0.0, acc_sum = 0.0;
  int iou_n = 0, acc_n = 0;
  for (int k = 0; k < num_classes; ++k) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < num_classes; ++j) {
      row += m.confusion.at(k, j);
      col += m.confusion.at(j, k);
    }
    const auto tp = m.confusion.at(k, k);
    const auto uni = row + col - tp;
    if (uni > 0) {
      const double iou = static_cast<double>(tp) / static_cast<double>(uni);
      m.per_class_iou.emplace_back(iou);
      iou_sum += iou;
      ++iou_n;
    } else {
      m.per_class_iou.emplace_back(std::nullopt);
    }
    if (row > 0) {
      const double acc = static_cast<double>(tp) / static_cast<double>(row);
      m.per_class_acc.emplace_back(acc);
      acc_sum += acc;
      ++acc_n;
    } else {
      m.per_class_acc.emplace_back(std::nullopt);
    }
  }
  m.miou = iou_n ? iou_sum / iou_n : 0.0;
  m.macc = acc_n ? acc_sum / acc_n : 0.0;
  return m;
}

inline nlohmann::json metrics_to_json(const Metrics& m) {
  auto opt_list = [](const std::vector<std::optional<double>>& v) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& x : v) {
      if (x) {
        a.push_back(*x);
      } else {
        a.push_back(nullptr);
      }
    }
    return a;
  };
  return {{"per_class_iou", opt_list(m.per_class_iou)},
          {"miou", m.miou},
          {"per_class_acc", opt_list(m.per_class_acc)},
          {"macc", m.macc},
          {"n_points", m.n_points}};
}

inline std::size_t text_aligned_head(const std::vector<TeacherSpec>& teachers) {
  for (std::size_t i = 0; i < teachers.size(); ++i) {
    if (teachers[i].text_aligned) return i;
  }
  throw ContractError("no text-aligned teacher configured");
}

namespace detail {

// Best cosine against the vocabulary; ties go to the smaller class id. A zero
// feature scores 0 against every class.
inline std::pair<int, double> best_class(const Eigen::RowVectorXd& f, const Matrix& vocab) {
  const double fn = f.norm();
  int best = 0;
  double best_sim = -std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < vocab.rows(); ++k) {
    const double vn = vocab.row(k).norm();
    const double sim = (fn > 0.0 && vn > 0.0) ? f.dot(vocab.row(k)) / (fn * vn) : 0.0;
    if (sim > best_sim) {
      best_sim = sim;
      best = static_cast<int>(k);
    }
  }
  return {best, best_sim};
}

inline void check_vocab(const Matrix& head_output, const VocabularySet& vocab) {
  if (head_output.cols() != vocab.embeddings.cols()) {
    throw ContractError("vocabulary dimension " + std::to_string(vocab.embeddings.cols()) +
                        " differs from the text-aligned head dimension " + std::to_string(head_output.cols()));
  }
}

}  // namespace detail

// Label = argmax_k cosine(text-aligned head feature, vocabulary row k).
inline std::vector<int> label_by_similarity(const Matrix& features, const VocabularySet& vocab) {
  detail::check_vocab(features, vocab);
  std::vector<int> labels(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    labels[static_cast<std::size_t>(r)] = detail::best_class(features.row(r), vocab.embeddings).first;
  }
  return labels;
}

inline std::vector<int> ov_segment(const StudentModel& model, const PointCloud& points, const VocabularySet& vocab,
                                   const std::vector<TeacherSpec>& teachers) {
  const auto head = text_aligned_head(teachers);
  const auto outputs = forward(model, points);
  return label_by_similarity(outputs[head], vocab);
}

// Per point, takes whichever of the student feature and the fused 2D feature
// attains the higher best-class similarity; ties favour the student.
inline std::vector<int> ensemble_labels(const Matrix& student, const Matrix& fused, const std::vector<bool>& mask,
                                        const VocabularySet& vocab) {
  detail::check_vocab(student, vocab);
  detail::check_vocab(fused, vocab);
  if (student.rows() != fused.rows() || mask.size() != static_cast<std::size_t>(student.rows())) {
    throw ContractError("student rows, fused rows and mask must align");
  }
  std::vector<int> labels(mask.size());
  for (Eigen::Index r = 0; r < student.rows(); ++r) {
    const auto [c3, s3] = detail::best_class(student.row(r), vocab.embeddings);
    int label = c3;
    if (mask[static_cast<std::size_t>(r)]) {
      const auto [c2, s2] = detail::best_class(fused.row(r), vocab.embeddings);
      if (s2 > s3) label = c2;
    }
    labels[static_cast<std::size_t>(r)] = label;
  }
  return labels;
}

inline std::vector<int> ensemble_2d3d(const StudentModel& model, const PointCloud& points, const FusedFeatureBank& bank,
                                      const VocabularySet& vocab, const std::vector<TeacherSpec>& teachers) {
  const auto head = text_aligned_head(teachers);
  if (bank.num_teachers() <= head) throw ContractError("bank lacks the text-aligned teacher");
  const auto outputs = forward(model, points);
  return ensemble_labels(outputs[head], bank.features[head], bank.mask, vocab);
}

// --- linear probing --------------------------------------------------------

enum class ProbeMode { kConcat, kAverage, kSingle };

enum class ProbeSolver { kRidge, kGradient };

struct ProbeConfig {
  ProbeMode mode = ProbeMode::kConcat;
  std::size_t head = 0;  // used by kSingle
  double lambda = 1e-3;
  ProbeSolver solver = ProbeSolver::kRidge;
  int steps = 500;   // gradient solver only
  double lr = 0.1;   // gradient solver only
};

// Frozen per-point features for the probe:
//   concat  - all head outputs side by side
//   average - mean of L2-normalized heads, zero-padded to the widest head
//   single  - head `cfg.head` alone
inline Matrix probe_features(const std::vector<Matrix>& heads, const ProbeConfig& cfg) {
  const Eigen::Index n = heads.front().rows();
  switch (cfg.mode) {
    case ProbeMode::kSingle:
      if (cfg.head >= heads.size()) throw ContractError("probe head index out of range");
      return heads[cfg.head];
    case ProbeMode::kConcat: {
      Eigen::Index width = 0;
      for (const auto& h : heads) width += h.cols();
      Matrix x(n, width);
      Eigen::Index at = 0;
      for (const auto& h : heads) {
        x.middleCols(at, h.cols()) = h;
        at += h.cols();
      }
      return x;
    }
    case ProbeMode::kAverage: {
      Eigen::Index width = 0;
      for (const auto& h : heads) width = std::max(width, h.cols());
      Matrix x = Matrix::Zero(n, width);
      for (const auto& h : heads) {
        for (Eigen::Index r = 0; r < n; ++r) {
          const double norm = h.row(r).norm();
          if (norm > 0.0) x.row(r).head(h.cols()) += h.row(r) / norm;
        }
      }
      return x / static_cast<double>(heads.size());
    }
  }
  throw ContractError("unknown probe mode");
}

// Closed-form ridge classifier on centred features with an unpenalized
// intercept; predicts by argmax over one-hot regression outputs.
struct RidgeClassifier {
  Matrix weights;              // D x K
  Eigen::RowVectorXd x_mean;   // 1 x D
  Eigen::RowVectorXd y_mean;   // 1 x K

  static RidgeClassifier fit(const Matrix& x, const std::vector<int>& labels, int num_classes, double lambda) {
    if (!(lambda > 0.0)) throw ContractError("ridge lambda must be > 0");
    if (static_cast<std::size_t>(x.rows()) != labels.size() || labels.empty()) throw ContractError("probe features and labels misaligned");
    const int first = labels.front();
    if (std::all_of(labels.begin(), labels.end(), [first](int l) { return l == first; })) {
      throw ContractError("linear probe needs at least two classes in the training split");
    }
    Matrix y = Matrix::Zero(x.rows(), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
    RidgeClassifier c;
    c.x_mean = x.colwise().mean();
    c.y_mean = y.colwise().mean();
    const Matrix xc = x.rowwise() - c.x_mean;
    const Matrix yc = y.rowwise() - c.y_mean;
    Eigen::MatrixXd gram = xc.transpose() * xc;
    gram.diagonal().array() += lambda;
    c.weights = gram.ldlt().solve(Eigen::MatrixXd(xc.transpose() * yc));
    return c;
  }

  std::vector<int> predict(const Matrix& x) const {
    Matrix scores = (x.rowwise() - x_mean) * weights;
    scores.rowwise() += y_mean;
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index k = 1; k < scores.cols(); ++k) {
        if (scores(r, k) > scores(r, best)) best = k;
      }
      out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
  }
};

// Multinomial logistic regression on standardized features, trained by
// full-batch gradient descent with an L2 penalty lambda on the weights.
struct SoftmaxClassifier {
  Matrix weights;             // D x K
  Eigen::RowVectorXd bias;    // 1 x K
  Eigen::RowVectorXd x_mean;  // 1 x D
  Eigen::RowVectorXd x_scale; // 1 x D

  static SoftmaxClassifier fit(const Matrix& x, const std::vector<int>& labels, int num_classes, double lambda,
                               int steps, double lr) {
    if (!(lambda >= 0.0)) throw ContractError("probe lambda must be >= 0");
    if (steps < 1 || !(lr > 0.0)) throw ContractError("gradient probe needs steps >= 1 and lr > 0");
    if (static_cast<std::size_t>(x.rows()) != labels.size() || labels.empty()) throw ContractError("probe features and labels misaligned");
    const int first = labels.front();
    if (std::all_of(labels.begin(), labels.end(), [first](int l) { return l == first; })) {
      throw ContractError("linear probe needs at least two classes in the training split");
    }
    SoftmaxClassifier c;
    c.x_mean = x.colwise().mean();
    const Matrix xc = x.rowwise() - c.x_mean;
    c.x_scale = (xc.colwise().squaredNorm() / static_cast<double>(x.rows())).array().sqrt();
    for (Eigen::Index j = 0; j < c.x_scale.size(); ++j) {
      if (!(c.x_scale[j] > 1e-12)) c.x_scale[j] = 1.0;
    }
    const Matrix xs = xc.array().rowwise() / c.x_scale.array();
    Matrix y = Matrix::Zero(x.rows(), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
    c.weights = Matrix::Zero(x.cols(), num_classes);
    c.bias = Eigen::RowVectorXd::Zero(num_classes);
    const double inv_n = 1.0 / static_cast<double>(x.rows());
    for (int it = 0; it < steps; ++it) {
      Matrix p = c.logits_standardized(xs);
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      const Matrix d = (p - y) * inv_n;
      c.weights -= lr * (xs.transpose() * d + lambda * c.weights);
      c.bias -= lr * d.colwise().sum();
    }
    return c;
  }

  Matrix logits_standardized(const Matrix& xs) const {
    Matrix z = xs * weights;
    z.rowwise() += bias;
    return z;
  }

  std::vector<int> predict(const Matrix& x) const {
    const Matrix xs = (x.rowwise() - x_mean).array().rowwise() / x_scale.array();
    const Matrix z = logits_standardized(xs);
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      Eigen::Index best = 0;
      for (Eigen::Index k = 1; k < z.cols(); ++k) {
        if (z(r, k) > z(r, best)) best = k;
      }
      out[static_cast<std::size_t>(r)] = static_cast<int>(best);
    }
    return out;
  }
};

inline Metrics probe_on_features(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& eval_x,
                                 const std::vector<int>& eval_y, int num_classes, const ProbeConfig& cfg) {
  if (cfg.solver == ProbeSolver::kGradient) {
    const auto clf = SoftmaxClassifier::fit(train_x, train_y, num_classes, cfg.lambda, cfg.steps, cfg.lr);
    return compute_metrics(clf.predict(eval_x), eval_y, num_classes);
  }
  const auto clf = RidgeClassifier::fit(train_x, train_y, num_classes, cfg.lambda);
  return compute_metrics(clf.predict(eval_x), eval_y, num_classes);
}

inline Metrics probe_on_features(const Matrix& train_x, const std::vector<int>& train_y, const Matrix& eval_x,
                                 const std::vector<int>& eval_y, int num_classes, double lambda) {
  return probe_on_features(train_x, train_y, eval_x, eval_y, num_classes, ProbeConfig{ProbeMode::kConcat, 0, lambda});
}

inline Metrics linear_probe(const StudentModel& model, const PointCloud& train, const PointCloud& eval,
                            const ProbeConfig& cfg) {
  if (!train.has_labels() || !eval.has_labels()) throw ContractError("linear probe needs labelled clouds");
  const Matrix train_x = probe_features(forward(model, train), cfg);
  const Matrix eval_x = probe_features(forward(model, eval), cfg);
  return probe_on_features(train_x, *train.labels, eval_x, *eval.labels, train.num_classes, cfg);
}

// --- k-means ---------------------------------------------------------------

struct KMeansResult {
  std::vector<int> assignments;
  Matrix centroids;
  std::vector<double> inertia_history;  // after each assignment pass
  int iterations = 0;
};

inline Matrix l2_normalize_rows(const Matrix& x) {
  Matrix out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

// k-means++ seeding followed by Lloyd iterations until the assignment stops
// changing or max_iters passes. Empty clusters keep their previous centroid.
inline KMeansResult kmeans(const Matrix& input, int k, std::uint64_t seed, int max_iters, bool normalize = true) {
  const Eigen::Index n = input.rows();
  if (k < 1 || k > n) throw ContractError("kmeans needs 1 <= k <= N");
  const Matrix x = normalize ? l2_normalize_rows(input) : input;
  Rng rng(derive_seed({tag("kmeans"), seed}));
  KMeansResult res;
  res.centroids.resize(k, x.cols());
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Eigen::Index pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
  for (int c = 0; c < k; ++c) {
    res.centroids.row(c) = x.row(pick);
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], (x.row(i) - res.centroids.row(c)).squaredNorm());
      total += d2[static_cast<std::size_t>(i)];
    }
    if (c + 1 == k) break;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= d2[static_cast<std::size_t>(i)];
        if (r < 0.0 && d2[static_cast<std::size_t>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
  }

  res.assignments.assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < std::max(1, max_iters); ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = (x.row(i) - res.centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      inertia += best_d;
      if (res.assignments[static_cast<std::size_t>(i)] != best) {
        res.assignments[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    res.inertia_history.push_back(inertia);
    res.iterations = iter + 1;
    if (!changed) break;
    Matrix sums = Matrix::Zero(k, x.cols());
    std::vector<std::size_t> sizes(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = res.assignments[static_cast<std::size_t>(i)];
      sums.row(c) += x.row(i);
      ++sizes[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < k; ++c) {
      if (sizes[static_cast<std::size_t>(c)] > 0) res.centroids.row(c) = sums.row(c) / static_cast<double>(sizes[static_cast<std::size_t>(c)]);
    }
  }
  return res;
}

// --- "A3D-AS v1": cluster assignments as u16 -----------------------------

inline constexpr std::uint32_t kAssignmentsVersion = 1;

inline std::vector<std::uint8_t> encode_assignments(const std::vector<int>& assignments) {
  io::ByteWriter w;
  w.magic("A3AS");
  w.put<std::uint32_t>(kAssignmentsVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(assignments.size()));
  for (int a : assignments) {
    if (a < 0 || a > 0xFFFF) throw ContractError("cluster id does not fit in u16");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(a));
  }
  return w.bytes();
}

inline std::vector<int> decode_assignments(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("A3AS");
  r.expect_version(kAssignmentsVersion);
  const auto n = r.get<std::uint32_t>();
  const auto raw = r.get_vector<std::uint16_t>(n);
  r.expect_end();
  return {raw.begin(), raw.end()};
}

// --- cross-domain ----------------------------------------------------------

// Zero-shot open-vocabulary labelling of another domain's scenes, pooled into
// one confusion matrix. No parameter is touched.
inline Metrics cross_domain_eval(const StudentModel& model, const std::vector<PointCloud>& scenes,
                                 const VocabularySet& vocab, const std::vector<TeacherSpec>& teachers) {
  std::vector<int> pred, gt;
  for (const auto& s : scenes) {
    if (!s.has_labels()) throw ContractError("cross-domain scenes must be labelled");
    if (s.num_classes != vocab.num_classes) {
      throw ContractError("domain class list (" + std::to_string(s.num_classes) + ") differs from the vocabulary (" +
                          std::to_string(vocab.num_classes) + ")");
    }
    const auto labels = ov_segment(model, s, vocab, teachers);
    pred.insert(pred.end(), labels.begin(), labels.end());
    gt.insert(gt.end(), s.labels->begin(), s.labels->end());
  }
  return compute_metrics(pred, gt, vocab.num_classes);
}

}  // namespace agglom3d
