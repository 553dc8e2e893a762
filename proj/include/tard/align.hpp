#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "tard/backbone.hpp"
#include "tard/error.hpp"

namespace tard {

// r horizontal stripe descriptors, one unit-norm row per stripe. The
// pre-normalization rows are kept for backpropagation.
struct StripeMatrix {
  Eigen::MatrixXd stripes;  // r x C_l, unit rows (zero rows when degenerate)
  Eigen::MatrixXd pooled;   // r x C band means
  Eigen::MatrixXd reduced;  // r x C_l before normalization
  std::vector<bool> zero_flag;

  int r() const { return static_cast<int>(stripes.rows()); }
  int dim() const { return static_cast<int>(stripes.cols()); }
};

// Band means over H_f/r rows x W_f columns, optional 1x1 reduction, then
// l2 normalization of each stripe.
inline StripeMatrix compress_stripes(const FeatureMap& fm, int r, const RowMatrix* reduction = nullptr) {
  require(r >= 1, ErrorKind::kInvalidInput, "stripe count must be positive");
  require(fm.height % r == 0, ErrorKind::kShape,
          "feature height " + std::to_string(fm.height) + " not divisible by r=" + std::to_string(r));
  const int band = fm.height / r;
  StripeMatrix s;
  s.pooled = Eigen::MatrixXd::Zero(r, fm.channels);
  const double inv = 1.0 / (static_cast<double>(band) * fm.width);
  for (int i = 0; i < r; ++i) {
    const auto block = fm.values.middleCols(static_cast<Eigen::Index>(i) * band * fm.width,
                                            static_cast<Eigen::Index>(band) * fm.width);
    s.pooled.row(i) = block.rowwise().sum().transpose() * inv;
  }
  if (reduction) {
    require(reduction->cols() == fm.channels, ErrorKind::kShape, "stripe reduction width mismatch");
    s.reduced = s.pooled * reduction->transpose();
  } else {
    s.reduced = s.pooled;
  }
  s.stripes = Eigen::MatrixXd::Zero(s.reduced.rows(), s.reduced.cols());
  s.zero_flag.assign(static_cast<std::size_t>(r), false);
  for (int i = 0; i < r; ++i) {
    const double n = s.reduced.row(i).norm();
    if (n > 0.0) {
      s.stripes.row(i) = s.reduced.row(i) / n;
    } else {
      s.zero_flag[static_cast<std::size_t>(i)] = true;
    }
  }
  return s;
}

// Gradient of compress_stripes with respect to the feature map (and the
// reduction matrix, accumulated into d_reduction when both are given).
inline Eigen::MatrixXd compress_stripes_backward(const FeatureMap& fm, const StripeMatrix& s,
                                                 const Eigen::MatrixXd& d_stripes,
                                                 const RowMatrix* reduction = nullptr,
                                                 RowMatrix* d_reduction = nullptr) {
  const int r = s.r();
  Eigen::MatrixXd d_reduced(d_stripes.rows(), d_stripes.cols());
  for (int i = 0; i < r; ++i) {
    if (s.zero_flag[static_cast<std::size_t>(i)]) {
      d_reduced.row(i).setZero();
      continue;
    }
    const Eigen::VectorXd v = s.reduced.row(i).transpose();
    d_reduced.row(i) = unit_normalize_backward(v, d_stripes.row(i).transpose()).transpose();
  }
  Eigen::MatrixXd d_pooled;
  if (reduction) {
    d_pooled = d_reduced * (*reduction);
    if (d_reduction) *d_reduction += d_reduced.transpose() * s.pooled;
  } else {
    d_pooled = d_reduced;
  }
  const int band = fm.height / r;
  const double inv = 1.0 / (static_cast<double>(band) * fm.width);
  Eigen::MatrixXd d_fm(fm.channels, fm.values.cols());
  for (int i = 0; i < r; ++i) {
    const Eigen::VectorXd g = d_pooled.row(i).transpose() * inv;
    for (Eigen::Index col = static_cast<Eigen::Index>(i) * band * fm.width;
         col < static_cast<Eigen::Index>(i + 1) * band * fm.width; ++col)
      d_fm.col(col) = g;
  }
  return d_fm;
}

// Bounded stripe distance (e^x - 1) / (e^x + 1) = tanh(x / 2), x = |la - lb|.
inline double local_distance(const Eigen::Ref<const Eigen::VectorXd>& la, const Eigen::Ref<const Eigen::VectorXd>& lb) {
  require(la.size() == lb.size(), ErrorKind::kShape, "local_distance dimension mismatch");
  return std::tanh(0.5 * (la - lb).norm());
}

// d/d(la) of local_distance; d/d(lb) is the negation. Zero at la == lb.
inline Eigen::VectorXd local_distance_grad(const Eigen::Ref<const Eigen::VectorXd>& la,
                                           const Eigen::Ref<const Eigen::VectorXd>& lb) {
  const Eigen::VectorXd diff = la - lb;
  const double x = diff.norm();
  if (!(x > 0.0)) return Eigen::VectorXd::Zero(la.size());
  const double d = std::tanh(0.5 * x);
  return (0.5 * (1.0 - d * d) / x) * diff;
}

struct AlignmentResult {
  Eigen::MatrixXd dist_matrix;
  Eigen::MatrixXd cumulative;
  double total = 0.0;
  std::vector<std::pair<int, int>> path;  // zero-based (i, j)
};

// Monotone shortest path through the distance grid. Backtracking prefers
// the predecessor reached by a j-step when the two candidates tie.
inline AlignmentResult dp_align(const Eigen::MatrixXd& dist) {
  require(dist.rows() == dist.cols(), ErrorKind::kShape, "dp_align needs a square matrix");
  require(dist.rows() >= 1, ErrorKind::kShape, "dp_align needs a non-empty matrix");
  require(dist.allFinite(), ErrorKind::kInvalidInput, "dp_align entries must be finite");
  const int r = static_cast<int>(dist.rows());
  AlignmentResult res;
  res.dist_matrix = dist;
  Eigen::MatrixXd& D = res.cumulative;
  D.resize(r, r);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < r; ++j) {
      if (i == 0 && j == 0) {
        D(i, j) = dist(i, j);
      } else if (j == 0) {
        D(i, j) = D(i - 1, j) + dist(i, j);
      } else if (i == 0) {
        D(i, j) = D(i, j - 1) + dist(i, j);
      } else {
        D(i, j) = std::min(D(i - 1, j), D(i, j - 1)) + dist(i, j);
      }
    }
  }
  res.total = D(r - 1, r - 1);
  int i = r - 1;
  int j = r - 1;
  res.path.emplace_back(i, j);
  while (i > 0 || j > 0) {
    if (i == 0) {
      --j;
    } else if (j == 0) {
      --i;
    } else if (D(i, j - 1) <= D(i - 1, j)) {
      --j;
    } else {
      --i;
    }
    res.path.emplace_back(i, j);
  }
  std::reverse(res.path.begin(), res.path.end());
  return res;
}

inline double global_distance(const Eigen::Ref<const Eigen::VectorXd>& fa_unit,
                              const Eigen::Ref<const Eigen::VectorXd>& fb_unit) {
  require(fa_unit.size() == fb_unit.size(), ErrorKind::kShape, "global_distance dimension mismatch");
  return (fa_unit - fb_unit).norm();
}

// Everything pair_distance needs about one image.
struct Embedding {
  StripeMatrix local;
  GlobalFeature global;
};

struct PairDistance {
  double d_global = 0.0;
  double d_local = 0.0;
  double d_total = 0.0;
  double lambda = 1.0;
  AlignmentResult alignment;
};

inline Eigen::MatrixXd stripe_distance_matrix(const StripeMatrix& a, const StripeMatrix& b) {
  require(a.r() == b.r(), ErrorKind::kShape, "stripe counts differ");
  require(a.dim() == b.dim(), ErrorKind::kShape, "stripe dimensions differ");
  const int r = a.r();
  Eigen::MatrixXd d(r, r);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < r; ++j) d(i, j) = std::tanh(0.5 * (a.stripes.row(i) - b.stripes.row(j)).norm());
  return d;
}

// D_tri = D_l + lambda * d_g.
inline PairDistance pair_distance(const Embedding& a, const Embedding& b, double lambda = 1.0) {
  require(a.global.f_unit.size() == b.global.f_unit.size(), ErrorKind::kShape, "global dimensions differ");
  PairDistance p;
  p.lambda = lambda;
  p.alignment = dp_align(stripe_distance_matrix(a.local, b.local));
  p.d_local = p.alignment.total;
  p.d_global = global_distance(a.global.f_unit, b.global.f_unit);
  p.d_total = p.d_local + lambda * p.d_global;
  return p;
}

// Gradient sinks for one embedding.
struct EmbeddingGrad {
  Eigen::MatrixXd d_stripes;  // r x C_l, w.r.t. unit stripes
  Eigen::VectorXd d_f_unit;

  static EmbeddingGrad zeros_like(const Embedding& e) {
    return {Eigen::MatrixXd::Zero(e.local.stripes.rows(), e.local.stripes.cols()),
            Eigen::VectorXd::Zero(e.global.f_unit.size())};
  }
};

// Accumulates upstream * dD_tri/d(.) into ga and gb. The min in the DP
// recurrence contributes through the recovered path only.
inline void pair_distance_backward(const Embedding& a, const Embedding& b, const PairDistance& p, double upstream,
                                   EmbeddingGrad& ga, EmbeddingGrad& gb) {
  if (upstream == 0.0) return;
  for (const auto& [i, j] : p.alignment.path) {
    const Eigen::VectorXd g = upstream * local_distance_grad(a.local.stripes.row(i).transpose(),
                                                             b.local.stripes.row(j).transpose());
    ga.d_stripes.row(i) += g.transpose();
    gb.d_stripes.row(j) -= g.transpose();
  }
  if (p.lambda != 0.0 && p.d_global > 0.0) {
    const Eigen::VectorXd g = (upstream * p.lambda / p.d_global) * (a.global.f_unit - b.global.f_unit);
    ga.d_f_unit += g;
    gb.d_f_unit -= g;
  }
}

}  // namespace tard
