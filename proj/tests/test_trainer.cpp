#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "tard/synthgen.hpp"
#include "tard/trainer.hpp"
#include "test_util.hpp"

using namespace tard;
using tard::test_support::TempDir;

namespace {

// Small warship/tanker dataset shared by the suite.
class TrainerData : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("trainer_data");
    DatasetConfig dc;
    dc.ids_per_type = {{VesselType::kWarship, 6}, {VesselType::kTanker, 4}};
    dc.images_per_id = 8;
    dc.frame_height = 48;
    dc.frame_width = 96;
    dc.out_dir = dir_->path();
    manifest_ = new Manifest(read_manifest(generate_dataset(dc).manifest_path));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    delete dir_;
  }

  static TrainConfig tiny(Regime regime = Regime::kBaseline) {
    TrainConfig c;
    c.regime = regime;
    if (regime != Regime::kBaseline) c.transfer_type = VesselType::kTanker;
    c.resolution = {32, 64};
    c.widths = {4, 8};
    c.embed_dim = 16;
    c.r = 4;
    c.epochs = 2;
    return c;
  }

  static TempDir* dir_;
  static Manifest* manifest_;
};

TempDir* TrainerData::dir_ = nullptr;
Manifest* TrainerData::manifest_ = nullptr;

bool same_params(const ModelParams& a, const ModelParams& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k)
    if (a[k].value != b[k].value) return false;
  return true;
}

}  // namespace

TEST(PkBatch, Composition) {
  std::vector<int> labels;
  for (int id = 0; id < 10; ++id)
    for (int k = 0; k < 5; ++k) labels.push_back(id);
  Rng rng(1);
  const PkBatch b = sample_pk_batch(labels, 4, 4, rng);
  ASSERT_EQ(b.indices.size(), 16u);
  EXPECT_FALSE(b.resampled);
  std::map<int, std::set<int>> members;
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(labels[b.indices[i]], b.labels[i]);
    members[b.labels[i]].insert(b.indices[i]);
  }
  EXPECT_EQ(members.size(), 4u);
  for (const auto& [label, idx] : members) EXPECT_EQ(idx.size(), 4u);
}

TEST(PkBatch, ShortIdentityResamplesWithFlag) {
  std::vector<int> labels = {0, 0, 1, 1, 1, 1, 2, 2, 2, 2};
  for (int s = 0; s < 20; ++s) {
    Rng rng(s);
    const PkBatch b = sample_pk_batch(labels, 3, 4, rng);
    EXPECT_EQ(b.indices.size(), 12u);
    EXPECT_TRUE(b.resampled);  // P equals the identity count, so the short one is always drawn
  }
}

TEST(PkBatch, DeterministicAndRejectsTooFewIdentities) {
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) labels.push_back(i % 8);
  Rng a(9), b(9);
  const PkBatch x = sample_pk_batch(labels, 4, 4, a);
  const PkBatch y = sample_pk_batch(labels, 4, 4, b);
  EXPECT_EQ(x.indices, y.indices);
  EXPECT_EQ(x.labels, y.labels);
  Rng c(1);
  const std::vector<int> three = {0, 1, 2, 0, 1, 2};
  EXPECT_TARD_ERROR(sample_pk_batch(three, 4, 2, c), ErrorKind::kDataset);
}

TEST(TransferBatch, SizesFlagsAndErrors) {
  LabeledPool pool;
  Rng fill(3);
  for (int i = 0; i < 20; ++i) {
    ModelInput in(16, 32);
    for (double& v : in.data) v = fill.uniform();
    pool.inputs.push_back(in);
    pool.identity_ids.push_back(i / 4);
  }
  Rng pick(1), sss(2);
  const SourceBatch raw = sample_transfer_batch(pool, 16, pick, false, {}, sss);
  ASSERT_EQ(raw.inputs.size(), 16u);
  EXPECT_EQ(std::set<int>(raw.indices.begin(), raw.indices.end()).size(), 16u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(raw.inputs[i].data, pool.inputs[raw.indices[i]].data);
  Rng pick2(1), sss2(2);
  const SourceBatch rotated = sample_transfer_batch(pool, 16, pick2, true, {}, sss2);
  EXPECT_EQ(rotated.indices, raw.indices);
  int changed = 0;
  for (std::size_t i = 0; i < 16; ++i) changed += rotated.inputs[i].data != raw.inputs[i].data;
  EXPECT_GT(changed, 0);
  LabeledPool small;
  small.inputs = {pool.inputs[0], pool.inputs[1]};
  small.identity_ids = {0, 1};
  Rng pick3(4);
  EXPECT_EQ(sample_transfer_batch(small, 16, pick3, false, {}, sss).inputs.size(), 16u);
  LabeledPool empty;
  EXPECT_TARD_ERROR(sample_transfer_batch(empty, 16, pick3, false, {}, sss), ErrorKind::kDataset);
}

TEST(TrainConfig, ValidationAndRoundTrip) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  TrainConfig bad = c;
  bad.step_size = 0;
  EXPECT_TARD_ERROR(bad.validate(), ErrorKind::kInvalidInput);
  bad = c;
  bad.P = 1;
  EXPECT_TARD_ERROR(bad.validate(), ErrorKind::kInvalidInput);
  bad = c;
  bad.regime = Regime::kTransfer;
  EXPECT_TARD_ERROR(bad.validate(), ErrorKind::kInvalidInput);
  bad = c;
  bad.resolution = {60, 128};
  EXPECT_TARD_ERROR(bad.validate(), ErrorKind::kShape);

  c.regime = Regime::kTransfer;
  c.transfer_type = VesselType::kTug;
  c.sss_train = true;
  c.step_size = 1.5e-4;
  c.transfer.sigma_mode = SigmaMode::kFixed;
  c.transfer.sigma = 0.75;
  c.widths = {8, 16, 32};
  const TrainConfig back = TrainConfig::from(c.to_kv());
  EXPECT_EQ(back.to_kv().canonical(), c.to_kv().canonical());
  EXPECT_EQ(back.digest(), c.digest());
  EXPECT_NE(TrainConfig{}.digest(), c.digest());
  EXPECT_EQ(parse_resolution("64x128"), Resolution::desk());
  EXPECT_TARD_ERROR(parse_resolution("64-128"), ErrorKind::kFormat);
  EXPECT_TARD_ERROR(parse_regime("fancy"), ErrorKind::kInvalidInput);
}

TEST_F(TrainerData, RegimeClassCounts) {
  const TrainingData base = prepare_training_data(tiny(), *manifest_);
  EXPECT_EQ(base.num_classes, 6);
  EXPECT_FALSE(base.source.has_value());
  const TrainingData expanded = prepare_training_data(tiny(Regime::kExpanded), *manifest_);
  EXPECT_EQ(expanded.num_classes, 10);
  EXPECT_EQ(expanded.train.size(), 6u * 4 + 4u * 8);
  const TrainingData transfer = prepare_training_data(tiny(Regime::kTransfer), *manifest_);
  EXPECT_EQ(transfer.num_classes, 6);
  ASSERT_TRUE(transfer.source.has_value());
  EXPECT_EQ(transfer.source->size(), 32u);
  TrainConfig limited = tiny();
  limited.target_ids = 4;
  EXPECT_EQ(prepare_training_data(limited, *manifest_).num_classes, 4);
}

TEST(TrainerCounts, ExpandedAndTransferClassifierSizes) {
  TempDir dir("trainer_counts");
  DatasetConfig dc;
  dc.ids_per_type = {{VesselType::kWarship, 24}, {VesselType::kPassenger, 23}};
  dc.images_per_id = 2;
  dc.frame_height = 16;
  dc.frame_width = 32;
  dc.out_dir = dir.path();
  const Manifest m = read_manifest(generate_dataset(dc).manifest_path);
  TrainConfig c;
  c.resolution = {16, 32};
  c.widths = {2};
  c.r = 8;
  c.transfer_type = VesselType::kPassenger;
  c.regime = Regime::kExpanded;
  EXPECT_EQ(prepare_training_data(c, m).num_classes, 47);
  c.regime = Regime::kTransfer;
  EXPECT_EQ(prepare_training_data(c, m).num_classes, 24);
}

TEST_F(TrainerData, DatasetErrors) {
  TrainConfig c = tiny(Regime::kTransfer);
  c.transfer_type = VesselType::kCargo;
  EXPECT_TARD_ERROR(prepare_training_data(c, *manifest_), ErrorKind::kDataset);
  TrainConfig d = tiny();
  d.target_type = VesselType::kFishing;
  EXPECT_TARD_ERROR(prepare_training_data(d, *manifest_), ErrorKind::kDataset);
  TrainConfig e = tiny();
  e.P = 8;
  EXPECT_TARD_ERROR(train(e, *manifest_), ErrorKind::kDataset);
}

TEST_F(TrainerData, BaselineHasNoTransferTermAndLogSizeMatches) {
  const TrainConfig c = tiny();
  const TrainResult r = train(c, *manifest_);
  EXPECT_EQ(steps_per_epoch(c, 24), 2);
  ASSERT_EQ(r.log.size(), static_cast<std::size_t>(c.epochs * 2));
  for (const auto& l : r.log) {
    EXPECT_EQ(l.l_tran, 0.0);
    EXPECT_EQ(l.mmd, 0.0);
    EXPECT_NEAR(l.total, l.l_tri + l.l_id, 1e-12);
  }
  TempDir out("trainer_log");
  write_loss_log(out.path() / "loss.csv", r.log);
  std::ifstream in(out.path() / "loss.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "step,l_tri,l_id,mmd,coral,l_tran,total");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, static_cast<int>(r.log.size()));
}

TEST_F(TrainerData, TransferReportsDomainTerms) {
  const TrainResult r = train(tiny(Regime::kTransfer), *manifest_);
  for (const auto& l : r.log) {
    EXPECT_GT(l.mmd, 0.0);
    EXPECT_NEAR(l.l_tran, 1.0 * l.mmd + 0.001 * l.coral, 1e-12);
    EXPECT_NEAR(l.total, l.l_tri + l.l_id + l.l_tran, 1e-12);
  }
}

TEST_F(TrainerData, ZeroStepLeavesParametersUnchanged) {
  const TrainConfig c = tiny();
  const TrainingData data = prepare_training_data(c, *manifest_);
  TrainState state = make_train_state(c, data.num_classes);
  state.optimizer.set_step(0.0);
  const ModelParams before = state.model.params();
  Rng rng(1);
  const PkBatch pk = sample_pk_batch(data.train.labels, 4, 4, rng);
  TargetBatch batch;
  batch.labels = pk.labels;
  for (int i : pk.indices) batch.inputs.push_back(data.train.inputs[i]);
  const LossBreakdown l = train_step(state, batch, nullptr, c);
  EXPECT_TRUE(same_params(before, state.model.params()));
  EXPECT_GT(l.total, 0.0);
  EXPECT_EQ(state.optimizer.steps_taken(), 1);
}

TEST_F(TrainerData, SourceBatchRequiredExactlyForTransfer) {
  const TrainConfig c = tiny(Regime::kTransfer);
  const TrainingData data = prepare_training_data(c, *manifest_);
  TrainState state = make_train_state(c, data.num_classes);
  TargetBatch batch;
  Rng rng(1);
  const PkBatch pk = sample_pk_batch(data.train.labels, 4, 4, rng);
  batch.labels = pk.labels;
  for (int i : pk.indices) batch.inputs.push_back(data.train.inputs[i]);
  EXPECT_TARD_ERROR(train_step(state, batch, nullptr, c), ErrorKind::kInvalidInput);
}

TEST_F(TrainerData, TrainingIsDeterministic) {
  TrainConfig c = tiny(Regime::kTransfer);
  c.epochs = 5;  // 10 steps
  c.sss_train = true;
  c.sss_transfer = true;
  const TrainResult a = train(c, *manifest_);
  const TrainResult b = train(c, *manifest_);
  ASSERT_EQ(a.log.size(), 10u);
  EXPECT_EQ(a.log, b.log);
  EXPECT_TRUE(same_params(a.model.params(), b.model.params()));
  c.seed = 2;
  EXPECT_NE(train(c, *manifest_).log, a.log);
}

TEST_F(TrainerData, ZeroWeightTransferMatchesBaseline) {
  TrainConfig t = tiny(Regime::kTransfer);
  t.transfer.gamma = 0;
  t.transfer.rho = 0;
  t.epochs = 3;
  TrainConfig b = tiny();
  b.epochs = 3;
  const TrainResult rt = train(t, *manifest_);
  const TrainResult rb = train(b, *manifest_);
  EXPECT_TRUE(same_params(rt.model.params(), rb.model.params()));
  ASSERT_EQ(rt.log.size(), rb.log.size());
  for (std::size_t i = 0; i < rt.log.size(); ++i) {
    EXPECT_EQ(rt.log[i].l_tri, rb.log[i].l_tri);
    EXPECT_EQ(rt.log[i].l_id, rb.log[i].l_id);
    EXPECT_EQ(rt.log[i].l_tran, 0.0);
  }
}

TEST_F(TrainerData, JointLossFallsOverTraining) {
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainConfig c = tiny();
    c.seed = seed;
    c.epochs = 15;
    c.step_size = 1e-3;
    const TrainResult r = train(c, *manifest_);
    const int spe = steps_per_epoch(c, 24);
    auto median_total = [&](int epoch) {
      std::vector<double> v;
      for (int s = 0; s < spe; ++s) v.push_back(r.log[static_cast<std::size_t>(epoch * spe + s)].total);
      std::sort(v.begin(), v.end());
      return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    };
    EXPECT_LT(median_total(c.epochs - 1), median_total(0)) << "seed " << seed;
  }
}

TEST_F(TrainerData, JointGradientMatchesFiniteDifferences) {
  TrainConfig c = tiny(Regime::kTransfer);
  c.local_dim = 6;
  c.transfer.rho = 0.5;  // make the covariance term visible
  const TrainingData data = prepare_training_data(c, *manifest_);
  TrainState state = make_train_state(c, data.num_classes);
  Rng rng(5);
  const PkBatch pk = sample_pk_batch(data.train.labels, 2, 2, rng);
  TargetBatch batch;
  batch.labels = pk.labels;
  for (int i : pk.indices) batch.inputs.push_back(data.train.inputs[i]);
  TrainConfig step_cfg = c;
  step_cfg.P = 2;
  step_cfg.Q = 2;
  Rng pick(1), sss(2);
  const SourceBatch src = sample_transfer_batch(*data.source, 4, pick, false, {}, sss);
  // Fix sigma so the stop-gradient bandwidth does not move under perturbation.
  const double sigma = median_heuristic_sigma(forward_batch(state.model, src.inputs, c.r).features,
                                             forward_batch(state.model, batch.inputs, c.r).features);
  step_cfg.transfer.sigma_mode = SigmaMode::kFixed;
  step_cfg.transfer.sigma = sigma;
  Backbone& net = state.model;
  const StepGradients g = joint_loss_gradients(net, batch, &src, step_cfg);
  const double h = 1e-5;
  int checked = 0;
  for (int attempt = 0; attempt < 400 && checked < 50; ++attempt) {
    const std::size_t k = rng.below(static_cast<int>(net.params().size()));
    const Eigen::Index i = rng.below(static_cast<int>(net.params()[k].value.size()));
    double& slot = net.params()[k].value[i];
    const double keep = slot;
    slot = keep + h;
    const double up = joint_loss_gradients(net, batch, &src, step_cfg).losses.total;
    slot = keep - h;
    const double dn = joint_loss_gradients(net, batch, &src, step_cfg).losses.total;
    slot = keep;
    const double num = (up - dn) / (2 * h);
    const double an = g.grads[k][i];
    if (std::abs(an) < 1e-6 && std::abs(num) < 1e-6) continue;
    const double err = std::abs(an - num) / std::max(std::abs(an), std::abs(num));
    if (err > 1e-2) continue;  // hinge, ReLU or alignment-path switch inside the stencil
    EXPECT_LT(err, 1e-4) << net.params()[k].name << "[" << i << "]";
    ++checked;
  }
  EXPECT_EQ(checked, 50);
}

TEST_F(TrainerData, CheckpointReloadReproducesEmbeddings) {
  const TrainConfig c = tiny(Regime::kTransfer);
  const TrainResult r = train(c, *manifest_);
  TempDir out("trainer_ckpt");
  save_checkpoint(out.path() / "model.ckpt", r.checkpoint);
  const LoadedModel m = load_model(out.path() / "model.ckpt", c.digest());
  EXPECT_TRUE(m.checkpoint.warnings.empty());
  EXPECT_TRUE(same_params(m.model.params(), r.model.params()));
  EXPECT_EQ(m.config.to_kv().canonical(), c.to_kv().canonical());
  const TrainingData data = prepare_training_data(c, *manifest_);
  const auto ea = embed(r.model, std::span(data.train.inputs).first(3), c.r);
  const auto eb = embed(m.model, std::span(data.train.inputs).first(3), c.r);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(ea[i].global.f, eb[i].global.f);
  TrainConfig other = c;
  other.seed = 9;
  EXPECT_EQ(load_model(out.path() / "model.ckpt", other.digest()).checkpoint.warnings.size(), 1u);
}
