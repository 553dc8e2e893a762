#pragma once

#include <Eigen/Dense>

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tard/align.hpp"
#include "tard/backbone.hpp"
#include "tard/checkpoint.hpp"
#include "tard/config.hpp"
#include "tard/error.hpp"
#include "tard/imaging.hpp"
#include "tard/losses.hpp"
#include "tard/manifest.hpp"
#include "tard/parallel.hpp"
#include "tard/rng.hpp"

namespace tard {

enum class Regime { kBaseline, kExpanded, kTransfer };

inline std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::kBaseline: return "baseline";
    case Regime::kExpanded: return "expanded";
    case Regime::kTransfer: return "transfer";
  }
  return "unknown";
}

inline Regime parse_regime(std::string_view s) {
  if (s == "baseline") return Regime::kBaseline;
  if (s == "expanded") return Regime::kExpanded;
  if (s == "transfer") return Regime::kTransfer;
  fail(ErrorKind::kInvalidInput, "unknown regime '" + std::string(s) + "'");
}

inline Resolution parse_resolution(const std::string& s) {
  const auto x = s.find('x');
  require(x != std::string::npos, ErrorKind::kFormat, "resolution must look like HxW, got '" + s + "'");
  try {
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
  } catch (const std::exception&) {
    fail(ErrorKind::kFormat, "resolution must look like HxW, got '" + s + "'");
  }
}

inline std::string format_resolution(Resolution r) { return std::to_string(r.height) + "x" + std::to_string(r.width); }

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct TrainConfig {
  Regime regime = Regime::kBaseline;
  bool sss_train = false;
  bool sss_transfer = false;
  bool sss_test = false;
  VesselType target_type = VesselType::kWarship;
  std::optional<VesselType> transfer_type;
  int target_ids = 0;  // keep only the first k target identities (0 = all)
  int P = 4;
  int Q = 4;
  int epochs = 20;
  double step_size = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  std::uint64_t test_seed = 0;
  IdLossConfig id;
  TriHardConfig tri;
  TransferConfig transfer;
  SssParams sss;
  Resolution resolution = Resolution::desk();
  int r = 8;
  std::vector<int> widths{16, 32, 64};
  int embed_dim = 128;
  int local_dim = 0;
  int threads = 1;

  void validate() const {
    require(P >= 2 && Q >= 2 && P * Q >= 4, ErrorKind::kInvalidInput, "P and Q must be at least 2");
    require(epochs >= 1, ErrorKind::kInvalidInput, "epochs must be at least 1");
    require(step_size > 0, ErrorKind::kInvalidInput, "step_size must be positive");
    require(r >= 1, ErrorKind::kInvalidInput, "r must be positive");
    require(regime == Regime::kBaseline || transfer_type.has_value(), ErrorKind::kInvalidInput,
            "regime '" + std::string(to_string(regime)) + "' needs a transfer_type");
    transfer.validate();
    sss.validate();
    const int stride = 1 << static_cast<int>(widths.size());
    require(resolution.height % stride == 0 && resolution.width % stride == 0, ErrorKind::kShape,
            "resolution must be divisible by the backbone stride " + std::to_string(stride));
    require((resolution.height / stride) % r == 0, ErrorKind::kShape,
            "feature height must be divisible by the stripe count r");
  }

  static TrainConfig from(const KeyValueConfig& kv) {
    TrainConfig c;
    c.regime = parse_regime(kv.get("regime", "baseline"));
    c.sss_train = kv.get_bool("sss_train", c.sss_train);
    c.sss_transfer = kv.get_bool("sss_transfer", c.sss_transfer);
    c.sss_test = kv.get_bool("sss_test", c.sss_test);
    c.target_type = parse_vessel_type(kv.get("target_type", "warship"));
    const std::string tt = kv.get("transfer_type", "");
    if (!tt.empty()) c.transfer_type = parse_vessel_type(tt);
    c.target_ids = static_cast<int>(kv.get_int("target_ids", c.target_ids));
    c.P = static_cast<int>(kv.get_int("P", c.P));
    c.Q = static_cast<int>(kv.get_int("Q", c.Q));
    c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
    c.step_size = kv.get_double("step_size", c.step_size);
    c.beta1 = kv.get_double("beta1", c.beta1);
    c.beta2 = kv.get_double("beta2", c.beta2);
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
    c.test_seed = static_cast<std::uint64_t>(kv.get_int("test_seed", static_cast<long long>(c.test_seed)));
    c.id.epsilon = kv.get_double("epsilon", c.id.epsilon);
    c.tri.eta = kv.get_double("eta", c.tri.eta);
    c.tri.lambda = kv.get_double("lambda", c.tri.lambda);
    c.transfer.gamma = kv.get_double("gamma", c.transfer.gamma);
    c.transfer.rho = kv.get_double("rho", c.transfer.rho);
    const std::string sigma = kv.get("sigma", "median");
    if (sigma == "median") {
      c.transfer.sigma_mode = SigmaMode::kMedianHeuristic;
    } else {
      c.transfer.sigma_mode = SigmaMode::kFixed;
      c.transfer.sigma = kv.get_double("sigma", 1.0);
    }
    c.sss.angle_min_deg = kv.get_double("sss_min_deg", c.sss.angle_min_deg);
    c.sss.angle_max_deg = kv.get_double("sss_max_deg", c.sss.angle_max_deg);
    if (kv.has("resolution")) c.resolution = parse_resolution(kv.get("resolution", ""));
    c.r = static_cast<int>(kv.get_int("r", c.r));
    if (kv.has("widths")) {
      c.widths.clear();
      for (const auto& w : split_list(kv.get("widths", ""))) c.widths.push_back(std::stoi(w));
    }
    c.embed_dim = static_cast<int>(kv.get_int("embed_dim", c.embed_dim));
    c.local_dim = static_cast<int>(kv.get_int("local_dim", c.local_dim));
    c.threads = static_cast<int>(kv.get_int("threads", c.threads));
    return c;
  }

  // Every training-relevant key, so the canonical text fully determines a run.
  KeyValueConfig to_kv() const {
    KeyValueConfig kv;
    kv.set("regime", std::string(to_string(regime)));
    kv.set("sss_train", sss_train ? "true" : "false");
    kv.set("sss_transfer", sss_transfer ? "true" : "false");
    kv.set("sss_test", sss_test ? "true" : "false");
    kv.set("target_type", std::string(to_string(target_type)));
    kv.set("transfer_type", transfer_type ? std::string(to_string(*transfer_type)) : "");
    kv.set("target_ids", std::to_string(target_ids));
    kv.set("P", std::to_string(P));
    kv.set("Q", std::to_string(Q));
    kv.set("epochs", std::to_string(epochs));
    kv.set("step_size", format_double(step_size));
    kv.set("beta1", format_double(beta1));
    kv.set("beta2", format_double(beta2));
    kv.set("seed", std::to_string(seed));
    kv.set("test_seed", std::to_string(test_seed));
    kv.set("epsilon", format_double(id.epsilon));
    kv.set("eta", format_double(tri.eta));
    kv.set("lambda", format_double(tri.lambda));
    kv.set("gamma", format_double(transfer.gamma));
    kv.set("rho", format_double(transfer.rho));
    kv.set("sigma", transfer.sigma_mode == SigmaMode::kMedianHeuristic ? "median" : format_double(transfer.sigma));
    kv.set("sss_min_deg", format_double(sss.angle_min_deg));
    kv.set("sss_max_deg", format_double(sss.angle_max_deg));
    kv.set("resolution", format_resolution(resolution));
    kv.set("r", std::to_string(r));
    std::string w;
    for (std::size_t i = 0; i < widths.size(); ++i) w += (i ? "," : "") + std::to_string(widths[i]);
    kv.set("widths", w);
    kv.set("embed_dim", std::to_string(embed_dim));
    kv.set("local_dim", std::to_string(local_dim));
    return kv;
  }

  std::uint64_t digest() const { return fnv1a64(to_kv().canonical()); }

  BackboneConfig backbone(int num_classes) const {
    BackboneConfig b;
    b.widths = widths;
    b.embed_dim = embed_dim;
    b.local_dim = local_dim;
    b.num_classes = num_classes;
    return b;
  }
};

// ---------------------------------------------------------------- embedding

struct BatchForward {
  Tape tape;
  std::vector<FeatureMap> feature_maps;
  std::vector<Embedding> embeddings;
  Eigen::MatrixXd features;  // N x C', pre-normalization f
  Eigen::MatrixXd logits;    // N x M
};

inline BatchForward forward_batch(const Backbone& model, std::span<const ModelInput> batch, int r, int threads = 1,
                                  bool record = true) {
  BatchForward out;
  out.feature_maps = model.forward(batch, record ? &out.tape : nullptr, threads);
  const std::size_t n = batch.size();
  out.embeddings.resize(n);
  out.features.resize(static_cast<Eigen::Index>(n), model.config().embed_dim);
  out.logits.resize(static_cast<Eigen::Index>(n), model.config().num_classes);
  std::optional<RowMatrix> reduction;
  if (model.has_local_reduction()) reduction = model.local_reduction();
  for (std::size_t i = 0; i < n; ++i) {
    auto [global, logits] = model.global_head(out.feature_maps[i]);
    out.embeddings[i].local = compress_stripes(out.feature_maps[i], r, reduction ? &*reduction : nullptr);
    out.features.row(static_cast<Eigen::Index>(i)) = global.f.transpose();
    out.logits.row(static_cast<Eigen::Index>(i)) = logits.z.transpose();
    out.embeddings[i].global = std::move(global);
  }
  return out;
}

inline std::vector<Embedding> embed(const Backbone& model, std::span<const ModelInput> batch, int r, int threads = 1) {
  if (batch.empty()) return {};
  return forward_batch(model, batch, r, threads, false).embeddings;
}

// Pairwise D_tri over a batch; only i < j is computed and mirrored.
struct PairwiseDistances {
  Eigen::MatrixXd dist;
  std::vector<PairDistance> pairs;  // row-major upper triangle
  std::size_t n = 0;
  const PairDistance& at(std::size_t i, std::size_t j) const { return pairs[i * n + j]; }
};

inline PairwiseDistances pairwise_distances(std::span<const Embedding> embs, double lambda) {
  PairwiseDistances out;
  out.n = embs.size();
  out.dist = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(out.n), static_cast<Eigen::Index>(out.n));
  out.pairs.resize(out.n * out.n);
  for (std::size_t i = 0; i < out.n; ++i)
    for (std::size_t j = i + 1; j < out.n; ++j) {
      out.pairs[i * out.n + j] = pair_distance(embs[i], embs[j], lambda);
      out.dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = out.pairs[i * out.n + j].d_total;
      out.dist(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = out.pairs[i * out.n + j].d_total;
    }
  return out;
}

// ---------------------------------------------------------------- optimizer

inline void round_to_float(ModelParams& params) {
  for (auto& p : params.params)
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<double>(static_cast<float>(p.value[i]));
}

// Adam-style per-parameter steps. Parameters are rounded to float32 after
// every update so checkpoints reproduce them exactly.
class AdamOptimizer {
 public:
  AdamOptimizer() = default;
  AdamOptimizer(const ModelParams& params, double step, double beta1, double beta2, double eps)
      : step_(step), beta1_(beta1), beta2_(beta2), eps_(eps), m_(zero_gradients(params)), v_(zero_gradients(params)) {}

  void update(ModelParams& params, const Gradients& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (params[k].frozen) continue;
      Eigen::VectorXd& w = params[k].value;
      for (Eigen::Index i = 0; i < w.size(); ++i) {
        const double g = grads[k][i];
        m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
        v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
        const double upd = step_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
        w[i] = static_cast<double>(static_cast<float>(w[i] - upd));
      }
    }
  }

  void set_step(double s) { step_ = s; }
  long long steps_taken() const { return t_; }

 private:
  double step_ = 3e-4, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  Gradients m_, v_;
  long long t_ = 0;
};

// ---------------------------------------------------------------- data

// Letterboxed images with class labels (contiguous 0..M-1) and the original
// identity ids.
struct LabeledPool {
  std::vector<ModelInput> inputs;
  std::vector<int> labels;
  std::vector<int> identity_ids;
  std::vector<std::string> paths;

  std::size_t size() const { return inputs.size(); }
};

inline LabeledPool load_pool(const Manifest& manifest, const std::vector<const ManifestRecord*>& rows, Resolution res,
                             int threads) {
  LabeledPool pool;
  pool.inputs.resize(rows.size());
  parallel_for(
      rows.size(),
      [&](std::size_t i) { pool.inputs[i] = aspect_normalize(manifest.load(*rows[i]), res.height, res.width); },
      threads);
  for (const auto* r : rows) {
    pool.identity_ids.push_back(r->id);
    pool.paths.push_back(r->path);
  }
  return pool;
}

// Assigns contiguous class labels by ascending identity id.
inline int assign_class_labels(LabeledPool& pool) {
  std::map<int, int> index;
  for (int id : pool.identity_ids) index.emplace(id, 0);
  int next = 0;
  for (auto& [id, label] : index) label = next++;
  pool.labels.clear();
  for (int id : pool.identity_ids) pool.labels.push_back(index.at(id));
  return next;
}

// Identity ids of the target type, ascending, truncated to the first k.
inline std::vector<int> target_identities(const Manifest& m, VesselType type, int limit) {
  std::vector<int> ids;
  for (const auto& r : m.records)
    if (r.type == type) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (limit > 0 && static_cast<int>(ids.size()) > limit) ids.resize(static_cast<std::size_t>(limit));
  return ids;
}

struct PkBatch {
  std::vector<int> indices;  // into the pool
  std::vector<int> labels;
  bool resampled = false;  // some identity had fewer than Q images
};

// P distinct identities, Q images each.
inline PkBatch sample_pk_batch(std::span<const int> pool_labels, int P, int Q, Rng& rng) {
  require(P >= 1 && Q >= 1, ErrorKind::kInvalidInput, "P and Q must be positive");
  std::map<int, std::vector<int>> by_label;
  for (std::size_t i = 0; i < pool_labels.size(); ++i) by_label[pool_labels[i]].push_back(static_cast<int>(i));
  if (static_cast<int>(by_label.size()) < P)
    fail(ErrorKind::kDataset, "need " + std::to_string(P) + " identities, pool has " + std::to_string(by_label.size()));
  std::vector<int> keys;
  for (const auto& [k, v] : by_label) keys.push_back(k);
  for (int i = 0; i < P; ++i) std::swap(keys[static_cast<std::size_t>(i)], keys[static_cast<std::size_t>(i + rng.below(static_cast<int>(keys.size()) - i))]);
  PkBatch batch;
  for (int p = 0; p < P; ++p) {
    std::vector<int> members = by_label.at(keys[static_cast<std::size_t>(p)]);
    const int n = static_cast<int>(members.size());
    if (n >= Q) {
      for (int q = 0; q < Q; ++q) std::swap(members[static_cast<std::size_t>(q)], members[static_cast<std::size_t>(q + rng.below(n - q))]);
      for (int q = 0; q < Q; ++q) batch.indices.push_back(members[static_cast<std::size_t>(q)]);
    } else {
      batch.resampled = true;
      for (int q = 0; q < Q; ++q) batch.indices.push_back(members[static_cast<std::size_t>(rng.below(n))]);
    }
    for (int q = 0; q < Q; ++q) batch.labels.push_back(keys[static_cast<std::size_t>(p)]);
  }
  return batch;
}

struct SourceBatch {
  std::vector<int> indices;
  std::vector<ModelInput> inputs;
  Domain domain = Domain::kSource;
};

// Uniform draw of n_s source images (without replacement when the pool is
// large enough), with SSS applied when requested.
inline SourceBatch sample_transfer_batch(const LabeledPool& source, int n_s, Rng& pick, bool apply_sss,
                                         const SssParams& sss, Rng& sss_rng) {
  if (source.size() == 0) fail(ErrorKind::kDataset, "empty source pool");
  require(n_s >= 1, ErrorKind::kInvalidInput, "source batch size must be positive");
  SourceBatch out;
  const int n = static_cast<int>(source.size());
  if (n >= n_s) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < n_s; ++i) std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(i + pick.below(n - i))]);
    out.indices.assign(idx.begin(), idx.begin() + n_s);
  } else {
    for (int i = 0; i < n_s; ++i) out.indices.push_back(pick.below(n));
  }
  for (int i : out.indices) {
    const ModelInput& in = source.inputs[static_cast<std::size_t>(i)];
    out.inputs.push_back(apply_sss ? sss_augment(in, sss, sample_sss_angle(sss_rng, sss)) : in);
  }
  return out;
}

// ---------------------------------------------------------------- step

struct TargetBatch {
  std::vector<ModelInput> inputs;
  std::vector<int> labels;
};

struct TrainState {
  Backbone model;
  AdamOptimizer optimizer;
};

inline TrainState make_train_state(const TrainConfig& cfg, int num_classes) {
  TrainState s;
  s.model = Backbone(cfg.backbone(num_classes), cfg.seed);
  round_to_float(s.model.params());
  s.optimizer = AdamOptimizer(s.model.params(), cfg.step_size, cfg.beta1, cfg.beta2, cfg.adam_eps);
  return s;
}

// Gradients of the joint loss for one step (no update). Exposed separately
// so composite gradients can be checked against finite differences.
struct StepGradients {
  LossBreakdown losses;
  Gradients grads;
};

inline StepGradients joint_loss_gradients(const Backbone& model, const TargetBatch& target, const SourceBatch* source,
                                          const TrainConfig& cfg) {
  require(!target.inputs.empty() && target.inputs.size() == target.labels.size(), ErrorKind::kShape,
          "target batch needs one label per image");
  const bool transfer = cfg.regime == Regime::kTransfer;
  require(transfer == (source != nullptr), ErrorKind::kInvalidInput,
          "a source batch is required exactly when the regime is transfer");
  BatchForward fw = forward_batch(model, target.inputs, cfg.r, cfg.threads);
  const PairwiseDistances pd = pairwise_distances(fw.embeddings, cfg.tri.lambda);
  TriHardConfig tri = cfg.tri;
  tri.P = cfg.P;
  tri.Q = cfg.Q;
  const TriHardResult l_tri = trihard_loss(pd.dist, target.labels, tri);
  const LossValue l_id = id_loss(fw.logits, target.labels, cfg.id);

  std::optional<BatchForward> sw;
  TransferLoss l_tran;
  if (transfer) {
    sw = forward_batch(model, source->inputs, cfg.r, cfg.threads);
    require(sw->features.rows() == fw.features.rows(), ErrorKind::kBatchSize, "source and target batch sizes differ");
    l_tran = transfer_loss(sw->features, fw.features, cfg.transfer);
  }
  StepGradients out;
  out.losses = joint_loss(l_tri.value, l_id.value, l_tran.value, l_tran.mmd, l_tran.coral);

  const std::size_t n = target.inputs.size();
  std::vector<EmbeddingGrad> eg;
  for (const auto& e : fw.embeddings) eg.push_back(EmbeddingGrad::zeros_like(e));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double g = l_tri.grad(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +
                       l_tri.grad(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
      pair_distance_backward(fw.embeddings[i], fw.embeddings[j], pd.at(i, j), g, eg[i], eg[j]);
    }

  std::optional<RowMatrix> reduction;
  RowMatrix d_reduction;
  if (model.has_local_reduction()) {
    reduction = model.local_reduction();
    d_reduction = RowMatrix::Zero(reduction->rows(), reduction->cols());
  }
  std::vector<UpstreamGrad> up(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Embedding& e = fw.embeddings[i];
    up[i].d_feature_map = compress_stripes_backward(fw.feature_maps[i], e.local, eg[i].d_stripes,
                                                    reduction ? &*reduction : nullptr,
                                                    reduction ? &d_reduction : nullptr);
    up[i].d_f = unit_normalize_backward(e.global.f, eg[i].d_f_unit);
    if (transfer) up[i].d_f += l_tran.grad_target.row(static_cast<Eigen::Index>(i)).transpose();
    up[i].d_logits = l_id.grad.row(static_cast<Eigen::Index>(i)).transpose();
  }
  out.grads = model.backward(fw.tape, up, cfg.threads);
  if (transfer) {
    std::vector<UpstreamGrad> sup(source->inputs.size());
    for (std::size_t i = 0; i < sup.size(); ++i)
      sup[i].d_f = l_tran.grad_source.row(static_cast<Eigen::Index>(i)).transpose();
    add_gradients(out.grads, model.backward(sw->tape, sup, cfg.threads));
  }
  if (reduction) {
    const std::size_t k = model.local_reduction_index();
    if (!model.params()[k].frozen) out.grads[k] += Eigen::Map<const Eigen::VectorXd>(d_reduction.data(), d_reduction.size());
  }
  return out;
}

// One optimization step on the joint loss; returns the loss breakdown
// evaluated before the update.
inline LossBreakdown train_step(TrainState& state, const TargetBatch& target, const SourceBatch* source,
                                const TrainConfig& cfg) {
  StepGradients sg = joint_loss_gradients(state.model, target, source, cfg);
  for (const auto& g : sg.grads)
    if (!g.allFinite()) fail(ErrorKind::kNumeric, "non-finite parameter gradient");
  state.optimizer.update(state.model.params(), sg.grads);
  return sg.losses;
}

// ---------------------------------------------------------------- training

struct TrainingData {
  LabeledPool train;
  std::optional<LabeledPool> source;  // transfer regime only
  int num_classes = 0;
};

// Builds the training pools for a regime: baseline uses target train images;
// expanded appends the transfer type's images with their own labels;
// transfer keeps them aside for the domain loss.
inline TrainingData prepare_training_data(const TrainConfig& cfg, const Manifest& train_manifest,
                                          const Manifest* transfer_manifest = nullptr) {
  const std::vector<int> keep = target_identities(train_manifest, cfg.target_type, cfg.target_ids);
  std::vector<const ManifestRecord*> target_rows;
  for (const auto& r : train_manifest.records)
    if (r.type == cfg.target_type && r.split == Split::kTrain && std::binary_search(keep.begin(), keep.end(), r.id))
      target_rows.push_back(&r);
  if (target_rows.empty()) fail(ErrorKind::kDataset, "no training images of the target type");

  const Manifest& src_manifest = transfer_manifest ? *transfer_manifest : train_manifest;
  std::vector<const ManifestRecord*> source_rows;
  if (cfg.regime != Regime::kBaseline) {
    for (const auto& r : src_manifest.records)
      if (r.type == *cfg.transfer_type && r.type != cfg.target_type) source_rows.push_back(&r);
    if (source_rows.empty())
      fail(ErrorKind::kDataset, "no images of transfer type '" + std::string(to_string(*cfg.transfer_type)) + "'");
  }

  TrainingData data;
  if (cfg.regime == Regime::kExpanded) {
    std::vector<const ManifestRecord*> rows = target_rows;
    LabeledPool a = load_pool(train_manifest, target_rows, cfg.resolution, cfg.threads);
    LabeledPool b = load_pool(src_manifest, source_rows, cfg.resolution, cfg.threads);
    data.train = std::move(a);
    for (std::size_t i = 0; i < b.size(); ++i) {
      data.train.inputs.push_back(std::move(b.inputs[i]));
      data.train.identity_ids.push_back(b.identity_ids[i]);
      data.train.paths.push_back(b.paths[i]);
    }
  } else {
    data.train = load_pool(train_manifest, target_rows, cfg.resolution, cfg.threads);
  }
  data.num_classes = assign_class_labels(data.train);
  if (cfg.regime == Regime::kTransfer) {
    data.source = load_pool(src_manifest, source_rows, cfg.resolution, cfg.threads);
    assign_class_labels(*data.source);
  }
  return data;
}

enum StreamTag : std::uint64_t { kStreamPk = 11, kStreamSssTrain = 12, kStreamSource = 13, kStreamSssSource = 14 };

inline int steps_per_epoch(const TrainConfig& cfg, std::size_t train_images) {
  const std::size_t per = static_cast<std::size_t>(cfg.P) * cfg.Q;
  return static_cast<int>((train_images + per - 1) / per);
}

struct TrainResult {
  Backbone model;
  std::vector<LossBreakdown> log;
  Checkpoint checkpoint;
  int num_classes = 0;
};

using StepCallback = std::function<void(long long step, const LossBreakdown&)>;

inline TrainResult train(const TrainConfig& cfg, const TrainingData& data, const StepCallback& on_step = {}) {
  cfg.validate();
  TrainState state = make_train_state(cfg, data.num_classes);
  const int spe = steps_per_epoch(cfg, data.train.size());
  const int n_s = cfg.P * cfg.Q;
  TrainResult result;
  long long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int s = 0; s < spe; ++s, ++step) {
      const auto tag = static_cast<std::uint64_t>(step);
      Rng pk_rng(derive_seed(cfg.seed, {kStreamPk, tag}));
      Rng sss_rng(derive_seed(cfg.seed, {kStreamSssTrain, tag}));
      const PkBatch pk = sample_pk_batch(data.train.labels, cfg.P, cfg.Q, pk_rng);
      TargetBatch batch;
      batch.labels = pk.labels;
      for (int i : pk.indices) {
        const ModelInput& in = data.train.inputs[static_cast<std::size_t>(i)];
        batch.inputs.push_back(cfg.sss_train ? sss_augment(in, cfg.sss, sample_sss_angle(sss_rng, cfg.sss)) : in);
      }
      std::optional<SourceBatch> source;
      if (cfg.regime == Regime::kTransfer) {
        Rng pick(derive_seed(cfg.seed, {kStreamSource, tag}));
        Rng src_sss(derive_seed(cfg.seed, {kStreamSssSource, tag}));
        source = sample_transfer_batch(*data.source, n_s, pick, cfg.sss_transfer, cfg.sss, src_sss);
      }
      const LossBreakdown lb = train_step(state, batch, source ? &*source : nullptr, cfg);
      result.log.push_back(lb);
      if (on_step) on_step(step, lb);
    }
  }
  result.num_classes = data.num_classes;
  result.checkpoint.header.config_digest = cfg.digest();
  result.checkpoint.header.seed = cfg.seed;
  result.checkpoint.header.epoch = static_cast<std::uint32_t>(cfg.epochs);
  result.checkpoint.config_text = cfg.to_kv().canonical();
  result.checkpoint.params = state.model.params();
  result.model = std::move(state.model);
  return result;
}

inline TrainResult train(const TrainConfig& cfg, const Manifest& train_manifest, const Manifest* transfer_manifest = nullptr,
                         const StepCallback& on_step = {}) {
  cfg.validate();
  return train(cfg, prepare_training_data(cfg, train_manifest, transfer_manifest), on_step);
}

inline void write_loss_log(const std::filesystem::path& path, const std::vector<LossBreakdown>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write loss log '" + path.string() + "'");
  out << "step,l_tri,l_id,mmd,coral,l_tran,total\n";
  char buf[256];
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto& l = log[i];
    std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", i, l.l_tri, l.l_id, l.mmd, l.coral, l.l_tran,
                  l.total);
    out << buf;
  }
}

// Rebuilds a model from a checkpoint; the stored config supplies r, lambda
// and the input resolution.
struct LoadedModel {
  Backbone model;
  TrainConfig config;
  Checkpoint checkpoint;
};

inline LoadedModel load_model(const std::filesystem::path& path, std::optional<std::uint64_t> expected_digest = std::nullopt) {
  LoadedModel m;
  m.checkpoint = load_checkpoint(path, expected_digest);
  m.config = TrainConfig::from(KeyValueConfig::parse(m.checkpoint.config_text));
  m.model = Backbone(Backbone::infer_config(m.checkpoint.params), m.checkpoint.params);
  return m;
}

}  // namespace tard
