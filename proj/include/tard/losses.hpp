#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tard/error.hpp"

namespace tard {

struct IdLossConfig {
  double epsilon = 0.1;  // label smoothing
};

struct TriHardConfig {
  double eta = 0.3;  // margin
  double lambda = 1.0;
  int P = 0;  // 0 skips the N == P*Q check
  int Q = 0;
};

enum class SigmaMode { kMedianHeuristic, kFixed };

struct TransferConfig {
  double gamma = 1.0;
  double rho = 0.001;
  SigmaMode sigma_mode = SigmaMode::kMedianHeuristic;
  double sigma = 1.0;  // used when sigma_mode == kFixed

  void validate() const {
    require(gamma >= 0 && rho >= 0, ErrorKind::kInvalidInput, "gamma and rho must be non-negative");
    require(sigma_mode != SigmaMode::kFixed || sigma > 0, ErrorKind::kInvalidInput, "fixed sigma must be positive");
  }
};

enum class Domain { kSource, kTarget };

// N x C' matrix of global features (one row per image).
struct DomainBatch {
  Eigen::MatrixXd features;
  Domain domain = Domain::kTarget;
};

struct LossValue {
  double value = 0.0;
  Eigen::MatrixXd grad;  // same shape as the differentiated input
};

// ---------------------------------------------------------------- ID loss

// Cross entropy of softmax(logits) against smoothed targets: 1 - eps on the
// true class and eps / (M - 1) elsewhere, averaged over the N rows.
inline LossValue id_loss(const Eigen::MatrixXd& logits, std::span<const int> labels, const IdLossConfig& cfg) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index m = logits.cols();
  require(n >= 1 && static_cast<Eigen::Index>(labels.size()) == n, ErrorKind::kShape,
          "id_loss needs one label per logit row");
  require(cfg.epsilon >= 0 && cfg.epsilon < 1, ErrorKind::kInvalidInput, "epsilon must lie in [0, 1)");
  require(m >= 2 || cfg.epsilon == 0, ErrorKind::kInvalidInput, "label smoothing needs at least 2 classes");
  LossValue out;
  out.grad.resize(n, m);
  const double off = m > 1 ? cfg.epsilon / static_cast<double>(m - 1) : 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    require(y >= 0 && y < m, ErrorKind::kInvalidInput, "label " + std::to_string(y) + " out of range");
    const double zmax = logits.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < m; ++j) sum += std::exp(logits(i, j) - zmax);
    const double lse = zmax + std::log(sum);
    for (Eigen::Index j = 0; j < m; ++j) {
      const double q = j == y ? 1.0 - cfg.epsilon : off;
      const double log_p = logits(i, j) - lse;
      if (q > 0) out.value -= q * log_p;
      out.grad(i, j) = (std::exp(log_p) - q) / static_cast<double>(n);
    }
  }
  out.value /= static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------- TriHard

struct TriHardResult {
  double value = 0.0;
  Eigen::MatrixXd grad;  // dL/dD, N x N
  std::vector<int> hardest_positive;
  std::vector<int> hardest_negative;
};

// Batch-hard triplet loss over a pairwise distance matrix: for each anchor
// the farthest positive and nearest negative, hinge with margin eta, mean
// over anchors. Ties select the lowest index.
inline TriHardResult trihard_loss(const Eigen::MatrixXd& dist, std::span<const int> labels, const TriHardConfig& cfg) {
  const Eigen::Index n = dist.rows();
  require(dist.cols() == n && static_cast<Eigen::Index>(labels.size()) == n, ErrorKind::kShape,
          "trihard_loss needs a square distance matrix with one label per row");
  require(cfg.eta >= 0, ErrorKind::kInvalidInput, "margin must be non-negative");
  if (cfg.P > 0 && cfg.Q > 0)
    require(n == static_cast<Eigen::Index>(cfg.P) * cfg.Q, ErrorKind::kBatchComposition, "batch size is not P*Q");
  TriHardResult out;
  out.grad = Eigen::MatrixXd::Zero(n, n);
  out.hardest_positive.assign(static_cast<std::size_t>(n), -1);
  out.hardest_negative.assign(static_cast<std::size_t>(n), -1);
  for (Eigen::Index a = 0; a < n; ++a) {
    int pos = -1;
    int neg = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (pos < 0 || dist(a, j) > dist(a, pos)) pos = static_cast<int>(j);
      } else if (neg < 0 || dist(a, j) < dist(a, neg)) {
        neg = static_cast<int>(j);
      }
    }
    if (pos < 0 || neg < 0)
      fail(ErrorKind::kBatchComposition, "anchor " + std::to_string(a) + " lacks a positive or a negative");
    out.hardest_positive[static_cast<std::size_t>(a)] = pos;
    out.hardest_negative[static_cast<std::size_t>(a)] = neg;
    const double hinge = dist(a, pos) - dist(a, neg) + cfg.eta;
    if (hinge > 0) {
      out.value += hinge;
      out.grad(a, pos) += 1.0 / static_cast<double>(n);
      out.grad(a, neg) -= 1.0 / static_cast<double>(n);
    }
  }
  out.value /= static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------- kernels

inline double rbf_kernel(const Eigen::Ref<const Eigen::VectorXd>& s, const Eigen::Ref<const Eigen::VectorXd>& t,
                         double sigma) {
  require(sigma > 0, ErrorKind::kInvalidInput, "rbf sigma must be positive");
  require(s.size() == t.size(), ErrorKind::kShape, "rbf_kernel dimension mismatch");
  return std::exp(-(s - t).squaredNorm() / (2.0 * sigma * sigma));
}

// Median of all pairwise Euclidean distances over the stacked rows of S and
// T, floored at 1e-6.
inline double median_heuristic_sigma(const Eigen::MatrixXd& S, const Eigen::MatrixXd& T) {
  Eigen::MatrixXd all(S.rows() + T.rows(), S.cols());
  all << S, T;
  std::vector<double> d;
  for (Eigen::Index i = 0; i < all.rows(); ++i)
    for (Eigen::Index j = i + 1; j < all.rows(); ++j) d.push_back((all.row(i) - all.row(j)).norm());
  if (d.empty()) return 1e-6;
  std::sort(d.begin(), d.end());
  const std::size_t k = d.size() / 2;
  const double med = d.size() % 2 ? d[k] : 0.5 * (d[k - 1] + d[k]);
  return std::max(med, 1e-6);
}

inline double resolve_sigma(const TransferConfig& cfg, const Eigen::MatrixXd& S, const Eigen::MatrixXd& T) {
  return cfg.sigma_mode == SigmaMode::kFixed ? cfg.sigma : median_heuristic_sigma(S, T);
}

struct DomainLoss {
  double value = 0.0;
  double sigma = 0.0;  // MMD only
  Eigen::MatrixXd grad_source;
  Eigen::MatrixXd grad_target;
};

// ---------------------------------------------------------------- MMD

// Biased squared MMD with an RBF kernel. Sigma is treated as a constant for
// the gradient even when it comes from the median heuristic.
inline DomainLoss mmd(const Eigen::MatrixXd& S, const Eigen::MatrixXd& T, const TransferConfig& cfg) {
  cfg.validate();
  require(S.rows() == T.rows(), ErrorKind::kBatchSize,
          "mmd needs equal source and target batch sizes (" + std::to_string(S.rows()) + " vs " +
              std::to_string(T.rows()) + ")");
  require(S.rows() >= 1 && S.cols() == T.cols(), ErrorKind::kShape, "mmd batches must share a feature width");
  const double ns = static_cast<double>(S.rows());
  const double nt = static_cast<double>(T.rows());
  DomainLoss out;
  out.sigma = resolve_sigma(cfg, S, T);
  const double inv2s2 = 1.0 / (2.0 * out.sigma * out.sigma);
  const double inv_s2 = 1.0 / (out.sigma * out.sigma);
  out.grad_source = Eigen::MatrixXd::Zero(S.rows(), S.cols());
  out.grad_target = Eigen::MatrixXd::Zero(T.rows(), T.cols());

  // within-domain blocks: each unordered pair appears twice in the sum
  auto within = [&](const Eigen::MatrixXd& X, double w, Eigen::MatrixXd& grad) {
    double sum = 0.0;
    for (Eigen::Index a = 0; a < X.rows(); ++a) {
      sum += 1.0;
      for (Eigen::Index b = a + 1; b < X.rows(); ++b) {
        const Eigen::RowVectorXd diff = X.row(a) - X.row(b);
        const double k = std::exp(-diff.squaredNorm() * inv2s2);
        sum += 2.0 * k;
        const Eigen::RowVectorXd g = (2.0 * w * k * inv_s2) * diff;
        grad.row(a) -= g;
        grad.row(b) += g;
      }
    }
    return sum * w;
  };
  out.value += within(S, 1.0 / (ns * ns), out.grad_source);
  out.value += within(T, 1.0 / (nt * nt), out.grad_target);

  const double wc = -2.0 / (ns * nt);
  double cross = 0.0;
  for (Eigen::Index a = 0; a < S.rows(); ++a)
    for (Eigen::Index b = 0; b < T.rows(); ++b) {
      const Eigen::RowVectorXd diff = S.row(a) - T.row(b);
      const double k = std::exp(-diff.squaredNorm() * inv2s2);
      cross += k;
      const Eigen::RowVectorXd g = (wc * k * inv_s2) * diff;
      out.grad_source.row(a) -= g;
      out.grad_target.row(b) += g;
    }
  out.value += wc * cross;
  return out;
}

inline DomainLoss mmd(const DomainBatch& S, const DomainBatch& T, const TransferConfig& cfg) {
  return mmd(S.features, T.features, cfg);
}

// ---------------------------------------------------------------- CORAL

// Sample covariance (D^T D - (1^T D)^T (1^T D) / N) / (N - 1).
inline Eigen::MatrixXd coral_covariance(const Eigen::MatrixXd& D) {
  const double n = static_cast<double>(D.rows());
  const Eigen::RowVectorXd col_sum = D.colwise().sum();
  return (D.transpose() * D - col_sum.transpose() * col_sum / n) / (n - 1.0);
}

// |Cov_s - Cov_t|_F^2 / (4 C'^2).
inline DomainLoss coral(const Eigen::MatrixXd& S, const Eigen::MatrixXd& T) {
  require(S.rows() >= 2 && T.rows() >= 2, ErrorKind::kInsufficientSamples, "coral needs at least 2 rows per domain");
  require(S.cols() == T.cols(), ErrorKind::kShape, "coral batches must share a feature width");
  const double c = static_cast<double>(S.cols());
  const Eigen::MatrixXd delta = coral_covariance(S) - coral_covariance(T);
  DomainLoss out;
  out.value = delta.squaredNorm() / (4.0 * c * c);
  const Eigen::MatrixXd cs = S.rowwise() - S.colwise().mean();
  const Eigen::MatrixXd ct = T.rowwise() - T.colwise().mean();
  out.grad_source = cs * delta / (c * c * (static_cast<double>(S.rows()) - 1.0));
  out.grad_target = -ct * delta / (c * c * (static_cast<double>(T.rows()) - 1.0));
  return out;
}

inline DomainLoss coral(const DomainBatch& S, const DomainBatch& T) { return coral(S.features, T.features); }

// ---------------------------------------------------------------- transfer

struct TransferLoss {
  double mmd = 0.0;
  double coral = 0.0;
  double value = 0.0;
  double sigma = 0.0;
  Eigen::MatrixXd grad_source;
  Eigen::MatrixXd grad_target;
};

// gamma * MMD + rho * CORAL.
inline TransferLoss transfer_loss(const Eigen::MatrixXd& S, const Eigen::MatrixXd& T, const TransferConfig& cfg) {
  const DomainLoss m = mmd(S, T, cfg);
  const DomainLoss c = coral(S, T);
  TransferLoss out;
  out.mmd = m.value;
  out.coral = c.value;
  out.sigma = m.sigma;
  out.value = cfg.gamma * m.value + cfg.rho * c.value;
  out.grad_source = cfg.gamma * m.grad_source + cfg.rho * c.grad_source;
  out.grad_target = cfg.gamma * m.grad_target + cfg.rho * c.grad_target;
  return out;
}

inline TransferLoss transfer_loss(const DomainBatch& S, const DomainBatch& T, const TransferConfig& cfg) {
  return transfer_loss(S.features, T.features, cfg);
}

// ---------------------------------------------------------------- joint

struct LossBreakdown {
  double l_tri = 0.0;
  double l_id = 0.0;
  double mmd = 0.0;
  double coral = 0.0;
  double l_tran = 0.0;
  double total = 0.0;

  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

// Unweighted sum L_tri + L_ID + L_tran; rejects non-finite terms by name.
inline LossBreakdown joint_loss(double l_tri, double l_id, double l_tran, double mmd_value = 0.0,
                                double coral_value = 0.0) {
  const std::pair<const char*, double> terms[] = {
      {"l_tri", l_tri}, {"l_id", l_id}, {"l_tran", l_tran}, {"mmd", mmd_value}, {"coral", coral_value}};
  for (const auto& [name, v] : terms)
    if (!std::isfinite(v)) fail(ErrorKind::kNumeric, std::string("non-finite loss term ") + name);
  LossBreakdown b;
  b.l_tri = l_tri;
  b.l_id = l_id;
  b.l_tran = l_tran;
  b.mmd = mmd_value;
  b.coral = coral_value;
  b.total = l_tri + l_id + l_tran;
  return b;
}

}  // namespace tard
