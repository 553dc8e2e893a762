#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tard/error.hpp"
#include "tard/imaging.hpp"
#include "tard/parallel.hpp"
#include "tard/rng.hpp"

namespace tard {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C x (H*W) activation grid; column index is y * width + x.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  Eigen::MatrixXd values;

  double at(int c, int y, int x) const { return values(c, y * width + x); }
};

struct GlobalFeature {
  Eigen::VectorXd f;
  Eigen::VectorXd f_unit;
  bool degenerate = false;
};

struct ClassLogits {
  Eigen::VectorXd z;
};

inline GlobalFeature make_global_feature(Eigen::VectorXd f) {
  GlobalFeature g;
  const double n = f.norm();
  g.degenerate = !(n > 0.0);
  g.f_unit = g.degenerate ? Eigen::VectorXd::Zero(f.size()) : Eigen::VectorXd(f / n);
  g.f = std::move(f);
  return g;
}

// Backprop through u = f / |f|.
inline Eigen::VectorXd unit_normalize_backward(const Eigen::VectorXd& f, const Eigen::VectorXd& d_unit) {
  const double n = f.norm();
  if (!(n > 0.0)) return Eigen::VectorXd::Zero(f.size());
  const Eigen::VectorXd u = f / n;
  return (d_unit - u * u.dot(d_unit)) / n;
}

struct BackboneConfig {
  int in_channels = 3;
  std::vector<int> widths{16, 32, 64};
  int embed_dim = 128;
  int num_classes = 2;
  int local_dim = 0;  // 0 disables the 1x1 stripe reduction

  int stride() const { return 1 << static_cast<int>(widths.size()); }
  int feature_channels() const { return widths.empty() ? in_channels : widths.back(); }
};

struct Param {
  std::string name;
  std::vector<int> shape;
  Eigen::VectorXd value;
  bool frozen = false;
};

// Flat parameter store. Layout: conv{k}.weight [Cout, Cin, 3, 3],
// conv{k}.bias [Cout] for each block, proj.weight [C', C], proj.bias [C'],
// optional local.weight [C_l, C], cls.weight [M, C'], cls.bias [M].
struct ModelParams {
  std::vector<Param> params;

  std::size_t size() const { return params.size(); }
  Param& operator[](std::size_t i) { return params[i]; }
  const Param& operator[](std::size_t i) const { return params[i]; }

  std::ptrdiff_t find(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<std::ptrdiff_t>(i);
    return -1;
  }
  Param& at(const std::string& name) {
    const auto i = find(name);
    if (i < 0) fail(ErrorKind::kInvalidInput, "no parameter named '" + name + "'");
    return params[static_cast<std::size_t>(i)];
  }
  const Param& at(const std::string& name) const { return const_cast<ModelParams*>(this)->at(name); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.value.size());
    return n;
  }
};

using Gradients = std::vector<Eigen::VectorXd>;

inline Gradients zero_gradients(const ModelParams& params) {
  Gradients g;
  g.reserve(params.size());
  for (const auto& p : params.params) g.push_back(Eigen::VectorXd::Zero(p.value.size()));
  return g;
}

inline void add_gradients(Gradients& into, const Gradients& other) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += other[i];
}

// Upstream gradient for one image. Empty members mean zero.
struct UpstreamGrad {
  Eigen::MatrixXd d_feature_map;
  Eigen::VectorXd d_f;
  Eigen::VectorXd d_logits;
};

struct ImageTape {
  std::vector<Eigen::MatrixXd> cols;  // im2col of each block input
  std::vector<Eigen::MatrixXd> act;   // post-ReLU, pre-pool
  std::vector<std::pair<int, int>> in_dims;
  FeatureMap feature_map;
  Eigen::VectorXd pooled;
  Eigen::VectorXd f;
};

class Tape {
 public:
  bool recorded() const { return !images_.empty(); }
  std::size_t size() const { return images_.size(); }
  const ImageTape& image(std::size_t i) const { return images_[i]; }
  void clear() { images_.clear(); }

 private:
  friend class Backbone;
  std::vector<ImageTape> images_;
};

namespace detail {

// 3x3 patches with edge-replicate padding: row (c*9 + ky*3 + kx), column y*W+x.
inline Eigen::MatrixXd im2col3x3(const Eigen::MatrixXd& in, int h, int w) {
  const int c_in = static_cast<int>(in.rows());
  Eigen::MatrixXd cols(c_in * 9, h * w);
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const int row = c * 9 + ky * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = std::clamp(y + ky - 1, 0, h - 1);
          for (int x = 0; x < w; ++x) {
            const int sx = std::clamp(x + kx - 1, 0, w - 1);
            cols(row, y * w + x) = in(c, sy * w + sx);
          }
        }
      }
  return cols;
}

inline Eigen::MatrixXd col2im3x3(const Eigen::MatrixXd& cols, int c_in, int h, int w) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(c_in, h * w);
  for (int c = 0; c < c_in; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const int row = c * 9 + ky * 3 + kx;
        for (int y = 0; y < h; ++y) {
          const int sy = std::clamp(y + ky - 1, 0, h - 1);
          for (int x = 0; x < w; ++x) {
            const int sx = std::clamp(x + kx - 1, 0, w - 1);
            out(c, sy * w + sx) += cols(row, y * w + x);
          }
        }
      }
  return out;
}

inline Eigen::MatrixXd avgpool2(const Eigen::MatrixXd& in, int h, int w) {
  const int oh = h / 2;
  const int ow = w / 2;
  Eigen::MatrixXd out(in.rows(), oh * ow);
  for (Eigen::Index c = 0; c < in.rows(); ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        out(c, y * ow + x) = 0.25 * (in(c, (2 * y) * w + 2 * x) + in(c, (2 * y) * w + 2 * x + 1) +
                                     in(c, (2 * y + 1) * w + 2 * x) + in(c, (2 * y + 1) * w + 2 * x + 1));
  return out;
}

inline Eigen::MatrixXd avgpool2_backward(const Eigen::MatrixXd& d_out, int h, int w) {
  const int ow = w / 2;
  Eigen::MatrixXd d_in(d_out.rows(), h * w);
  for (Eigen::Index c = 0; c < d_out.rows(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) d_in(c, y * w + x) = 0.25 * d_out(c, (y / 2) * ow + x / 2);
  return d_in;
}

}  // namespace detail

// Small convolutional feature extractor: per block a 3x3 conv with bias,
// ReLU and 2x2 average pooling; then global average pooling, a linear
// projection to the embedding f and a linear classifier over f.
class Backbone {
 public:
  Backbone() = default;

  Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    validate_config();
    Rng rng(derive_seed(seed, {0xba5eULL}));
    int c_in = cfg_.in_channels;
    for (std::size_t k = 0; k < cfg_.widths.size(); ++k) {
      const int c_out = cfg_.widths[k];
      add_param("conv" + std::to_string(k) + ".weight", {c_out, c_in, 3, 3}, std::sqrt(2.0 / (c_in * 9)), rng);
      add_param("conv" + std::to_string(k) + ".bias", {c_out}, 0.0, rng);
      c_in = c_out;
    }
    const int c = cfg_.feature_channels();
    add_param("proj.weight", {cfg_.embed_dim, c}, std::sqrt(1.0 / c), rng);
    add_param("proj.bias", {cfg_.embed_dim}, 0.0, rng);
    if (cfg_.local_dim > 0) add_param("local.weight", {cfg_.local_dim, c}, std::sqrt(1.0 / c), rng);
    add_param("cls.weight", {cfg_.num_classes, cfg_.embed_dim}, std::sqrt(1.0 / cfg_.embed_dim), rng);
    add_param("cls.bias", {cfg_.num_classes}, 0.0, rng);
  }

  Backbone(BackboneConfig cfg, ModelParams params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    validate_config();
    Backbone reference(cfg_, 0);
    require(reference.params_.size() == params_.size(), ErrorKind::kShape, "parameter count does not match config");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      require(reference.params_[i].name == params_[i].name && reference.params_[i].shape == params_[i].shape,
              ErrorKind::kShape, "parameter '" + params_[i].name + "' does not match config");
      require(params_[i].value.allFinite(), ErrorKind::kNumeric, "parameter '" + params_[i].name + "' not finite");
    }
  }

  const BackboneConfig& config() const { return cfg_; }
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }

  // Recovers the architecture from parameter shapes (checkpoint loading).
  static BackboneConfig infer_config(const ModelParams& params) {
    BackboneConfig cfg;
    cfg.widths.clear();
    for (int k = 0;; ++k) {
      const auto i = params.find("conv" + std::to_string(k) + ".weight");
      if (i < 0) break;
      const auto& shape = params[static_cast<std::size_t>(i)].shape;
      require(shape.size() == 4, ErrorKind::kShape, "conv weight must be 4-d");
      if (k == 0) cfg.in_channels = shape[1];
      cfg.widths.push_back(shape[0]);
    }
    cfg.embed_dim = params.at("proj.weight").shape.at(0);
    cfg.num_classes = params.at("cls.weight").shape.at(0);
    const auto li = params.find("local.weight");
    cfg.local_dim = li < 0 ? 0 : params[static_cast<std::size_t>(li)].shape.at(0);
    return cfg;
  }

  // Returns the feature maps. When a tape is given the global head is also
  // evaluated and everything needed by backward() is recorded.
  std::vector<FeatureMap> forward(std::span<const ModelInput> batch, Tape* tape = nullptr, int threads = 1) const {
    require(!batch.empty(), ErrorKind::kInvalidInput, "empty batch");
    const int h = batch[0].height;
    const int w = batch[0].width;
    for (const auto& in : batch)
      require(in.height == h && in.width == w, ErrorKind::kShape, "batch resolution is not uniform");
    const int s = cfg_.stride();
    require(h % s == 0 && w % s == 0, ErrorKind::kShape,
            "input " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by stride " + std::to_string(s));
    std::vector<FeatureMap> out(batch.size());
    if (tape) tape->images_.assign(batch.size(), ImageTape{});
    parallel_for(
        batch.size(),
        [&](std::size_t i) {
          ImageTape* t = tape ? &tape->images_[i] : nullptr;
          out[i] = forward_one(batch[i], t);
          if (t) {
            t->feature_map = out[i];
            t->pooled = out[i].values.rowwise().mean();
            t->f = project(t->pooled);
          }
        },
        threads);
    return out;
  }

  std::pair<GlobalFeature, ClassLogits> global_head(const FeatureMap& fm) const {
    require(fm.channels == cfg_.feature_channels(), ErrorKind::kShape, "feature map channel count mismatch");
    const Eigen::VectorXd pooled = fm.values.rowwise().mean();
    Eigen::VectorXd f = project(pooled);
    ClassLogits logits{classify(f)};
    return {make_global_feature(std::move(f)), std::move(logits)};
  }

  Eigen::VectorXd classify(const Eigen::VectorXd& f) const {
    return matrix(kClsWeight()) * f + params_[kClsWeight() + 1].value;
  }

  bool has_local_reduction() const { return cfg_.local_dim > 0; }
  RowMatrix local_reduction() const {
    require(has_local_reduction(), ErrorKind::kState, "no local reduction configured");
    return matrix(kProjWeight() + 2);
  }
  std::size_t local_reduction_index() const { return kProjWeight() + 2; }

  // Parameter gradients for the recorded forward pass; frozen parameters
  // receive exact zeros.
  Gradients backward(const Tape& tape, std::span<const UpstreamGrad> upstream, int threads = 1) const {
    if (!tape.recorded()) fail(ErrorKind::kState, "backward requested without a recorded forward pass");
    require(upstream.size() == tape.size(), ErrorKind::kShape, "upstream gradient count does not match batch");
    std::vector<Gradients> per_image(tape.size());
    parallel_for(
        tape.size(), [&](std::size_t i) { per_image[i] = backward_one(tape.image(i), upstream[i]); }, threads);
    Gradients total = zero_gradients(params_);
    for (const auto& g : per_image) add_gradients(total, g);
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].frozen) total[i].setZero();
    return total;
  }

 private:
  void validate_config() const {
    require(cfg_.in_channels >= 1 && !cfg_.widths.empty(), ErrorKind::kInvalidInput, "backbone needs conv blocks");
    for (int w : cfg_.widths) require(w >= 1, ErrorKind::kInvalidInput, "conv width must be positive");
    require(cfg_.embed_dim >= 1 && cfg_.num_classes >= 1 && cfg_.local_dim >= 0, ErrorKind::kInvalidInput,
            "invalid head dimensions");
  }

  void add_param(std::string name, std::vector<int> shape, double stddev, Rng& rng) {
    Param p;
    p.name = std::move(name);
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    p.shape = std::move(shape);
    p.value = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    if (stddev > 0)
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value[i] = rng.normal(0.0, stddev);
    params_.params.push_back(std::move(p));
  }

  std::size_t kProjWeight() const { return 2 * cfg_.widths.size(); }
  std::size_t kClsWeight() const { return kProjWeight() + (cfg_.local_dim > 0 ? 3 : 2); }

  Eigen::Map<const RowMatrix> matrix(std::size_t index) const {
    const Param& p = params_[index];
    const int rows = p.shape[0];
    const int cols = static_cast<int>(p.value.size() / rows);
    return Eigen::Map<const RowMatrix>(p.value.data(), rows, cols);
  }

  Eigen::VectorXd project(const Eigen::VectorXd& pooled) const {
    return matrix(kProjWeight()) * pooled + params_[kProjWeight() + 1].value;
  }

  FeatureMap forward_one(const ModelInput& in, ImageTape* tape) const {
    int h = in.height;
    int w = in.width;
    Eigen::MatrixXd x = Eigen::Map<const RowMatrix>(in.data.data(), 3, static_cast<Eigen::Index>(h) * w);
    require(cfg_.in_channels == 3, ErrorKind::kShape, "image inputs carry 3 channels");
    x.array() -= 1.0;
    for (std::size_t k = 0; k < cfg_.widths.size(); ++k) {
      Eigen::MatrixXd cols = detail::im2col3x3(x, h, w);
      Eigen::MatrixXd z = matrix(2 * k) * cols;
      z.colwise() += params_[2 * k + 1].value;
      Eigen::MatrixXd a = z.cwiseMax(0.0);
      x = detail::avgpool2(a, h, w);
      if (tape) {
        tape->cols.push_back(std::move(cols));
        tape->act.push_back(std::move(a));
        tape->in_dims.emplace_back(h, w);
      }
      h /= 2;
      w /= 2;
    }
    FeatureMap fm;
    fm.channels = static_cast<int>(x.rows());
    fm.height = h;
    fm.width = w;
    fm.values = std::move(x);
    return fm;
  }

  Gradients backward_one(const ImageTape& t, const UpstreamGrad& up) const {
    Gradients g = zero_gradients(params_);
    const FeatureMap& fm = t.feature_map;
    const std::size_t proj = kProjWeight();
    const std::size_t cls = kClsWeight();

    Eigen::VectorXd d_f = up.d_f.size() ? up.d_f : Eigen::VectorXd::Zero(cfg_.embed_dim);
    if (up.d_logits.size()) {
      Eigen::Map<RowMatrix>(g[cls].data(), cfg_.num_classes, cfg_.embed_dim) += up.d_logits * t.f.transpose();
      g[cls + 1] += up.d_logits;
      d_f += matrix(cls).transpose() * up.d_logits;
    }
    Eigen::Map<RowMatrix>(g[proj].data(), cfg_.embed_dim, fm.channels) += d_f * t.pooled.transpose();
    g[proj + 1] += d_f;
    const Eigen::VectorXd d_pooled = matrix(proj).transpose() * d_f;

    Eigen::MatrixXd d_x = up.d_feature_map.size() ? up.d_feature_map : Eigen::MatrixXd::Zero(fm.channels, fm.values.cols());
    require(d_x.rows() == fm.channels && d_x.cols() == fm.values.cols(), ErrorKind::kShape,
            "feature map gradient shape mismatch");
    d_x.colwise() += d_pooled / static_cast<double>(fm.values.cols());

    for (std::size_t kk = cfg_.widths.size(); kk-- > 0;) {
      const auto [h, w] = t.in_dims[kk];
      Eigen::MatrixXd d_a = detail::avgpool2_backward(d_x, h, w);
      const Eigen::MatrixXd& a = t.act[kk];
      for (Eigen::Index j = 0; j < d_a.size(); ++j)
        if (!(a.data()[j] > 0.0)) d_a.data()[j] = 0.0;
      const int c_out = cfg_.widths[kk];
      const int c_in = kk == 0 ? cfg_.in_channels : cfg_.widths[kk - 1];
      Eigen::Map<RowMatrix>(g[2 * kk].data(), c_out, c_in * 9) += d_a * t.cols[kk].transpose();
      g[2 * kk + 1] += d_a.rowwise().sum();
      if (kk > 0) d_x = detail::col2im3x3(matrix(2 * kk).transpose() * d_a, c_in, h, w);
    }
    return g;
  }

  BackboneConfig cfg_;
  ModelParams params_;
};

}  // namespace tard
