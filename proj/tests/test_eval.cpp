#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "tard/eval.hpp"
#include "tard/synthgen.hpp"
#include "test_util.hpp"

using namespace tard;
using tard::test_support::TempDir;

namespace {

Eigen::VectorXd random_unit(int dim, Rng& rng) {
  Eigen::VectorXd v(dim);
  for (auto& x : v) x = rng.normal();
  return v.normalized();
}

// Embedding whose r stripes all equal one unit vector, so its distance to an
// identical copy is exactly zero.
Embedding flat_embedding(int r, int dim, Rng& rng) {
  Embedding e;
  const Eigen::VectorXd u = random_unit(dim, rng);
  e.local.stripes = u.transpose().replicate(r, 1);
  e.local.pooled = e.local.stripes;
  e.local.reduced = e.local.stripes;
  e.local.zero_flag.assign(static_cast<std::size_t>(r), false);
  e.global = make_global_feature(random_unit(dim, rng));
  return e;
}

Embedding general_embedding(int r, int dim, Rng& rng) {
  Embedding e = flat_embedding(r, dim, rng);
  for (int i = 0; i < r; ++i) e.local.stripes.row(i) = random_unit(dim, rng).transpose();
  return e;
}

// Reference metrics: explicit (distance, index) sort and counting.
struct OracleMetrics {
  double map = 0;
  std::map<int, double> rank;
  int used = 0;
};

OracleMetrics oracle_metrics(const Eigen::MatrixXd& d, const std::vector<int>& qid, const std::vector<int>& gid) {
  OracleMetrics o;
  double ap_total = 0;
  std::map<int, int> hit;
  for (long q = 0; q < d.rows(); ++q) {
    std::vector<std::pair<double, int>> order;
    for (long g = 0; g < d.cols(); ++g) order.emplace_back(d(q, g), static_cast<int>(g));
    std::sort(order.begin(), order.end());
    int relevant = 0;
    for (int id : gid) relevant += id == qid[q];
    if (relevant == 0) continue;
    ++o.used;
    double found = 0, ap = 0;
    int first = -1;
    for (std::size_t i = 0; i < order.size(); ++i)
      if (gid[order[i].second] == qid[q]) {
        found += 1;
        ap += found / static_cast<double>(i + 1);
        if (first < 0) first = static_cast<int>(i);
      }
    ap_total += ap / relevant;
    for (int k : {1, 5, 10, 20}) hit[k] += first < k;
  }
  if (o.used) o.map = ap_total / o.used;
  for (int k : {1, 5, 10, 20}) o.rank[k] = o.used ? static_cast<double>(hit[k]) / o.used : 0.0;
  return o;
}

}  // namespace

TEST(AveragePrecision, HandExamples) {
  const bool a[] = {true, false, false};
  const bool b[] = {false, true};
  const bool c[] = {true, true};
  const bool d[] = {false, true, false, true};
  const bool none[] = {false, false};
  EXPECT_EQ(*average_precision(a), 1.0);
  EXPECT_EQ(*average_precision(b), 0.5);
  EXPECT_EQ(*average_precision(c), 1.0);
  EXPECT_DOUBLE_EQ(*average_precision(d), (0.5 + 0.5) / 2);
  EXPECT_FALSE(average_precision(none).has_value());
}

TEST(ExpectedRandomAp, MatchesExhaustiveEnumeration) {
  for (int g = 1; g <= 9; ++g)
    for (int r = 1; r <= g; ++r) {
      // average AP over every placement of r relevant items among g ranks
      std::vector<bool> mask(static_cast<std::size_t>(g), false);
      std::fill(mask.end() - r, mask.end(), true);
      double sum = 0;
      int count = 0;
      do {
        auto rel = std::make_unique<bool[]>(static_cast<std::size_t>(g));
        for (int i = 0; i < g; ++i) rel[i] = mask[i];
        sum += *average_precision(std::span<const bool>(rel.get(), g));
        ++count;
      } while (std::next_permutation(mask.begin(), mask.end()));
      EXPECT_NEAR(expected_random_ap(r, g), sum / count, 1e-12) << "R=" << r << " G=" << g;
    }
  EXPECT_TARD_ERROR(expected_random_ap(0, 3), ErrorKind::kInvalidInput);
}

TEST(RankGallery, TiesKeepGalleryOrder) {
  Eigen::RowVectorXd row(5);
  row << 0.3, 0.1, 0.3, 0.1, 0.0;
  EXPECT_EQ(rank_gallery(row), (std::vector<int>{4, 1, 3, 0, 2}));
}

TEST(ComputeMetrics, MatchesBruteForceOracle) {
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    const int nq = 1 + rng.below(20), ng = 1 + rng.below(50), ids = 1 + rng.below(8);
    Eigen::MatrixXd d(nq, ng);
    // coarse integer distances force plenty of ties
    for (long i = 0; i < d.size(); ++i) d.data()[i] = rng.below(6);
    std::vector<int> qid(nq), gid(ng);
    for (int& v : qid) v = rng.below(ids + 1);  // some queries may lack matches
    for (int& v : gid) v = rng.below(ids);
    const Metrics m = compute_metrics(d, qid, gid);
    const OracleMetrics o = oracle_metrics(d, qid, gid);
    EXPECT_EQ(m.num_queries, o.used);
    EXPECT_EQ(m.excluded, nq - o.used);
    EXPECT_EQ(m.map, o.map);
    for (int k : {1, 5, 10, 20}) EXPECT_EQ(m.rank(k), o.rank.at(k));
    EXPECT_LE(m.rank(1), m.rank(5));
    EXPECT_LE(m.rank(5), m.rank(10));
    EXPECT_LE(m.rank(10), m.rank(20));
    EXPECT_GE(m.map, 0.0);
    EXPECT_LE(m.map, 1.0);
  }
}

TEST(ComputeMetrics, GalleryPermutationInvariance) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    const int nq = 5, ng = 30;
    Eigen::MatrixXd d(nq, ng);
    for (long i = 0; i < d.size(); ++i) d.data()[i] = rng.uniform();
    std::vector<int> qid(nq), gid(ng);
    for (int& v : qid) v = rng.below(4);
    for (int& v : gid) v = rng.below(4);
    std::vector<int> perm(ng);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = ng - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    Eigen::MatrixXd dp(nq, ng);
    std::vector<int> gp(ng);
    for (int j = 0; j < ng; ++j) {
      dp.col(j) = d.col(perm[j]);
      gp[j] = gid[perm[j]];
    }
    const Metrics a = compute_metrics(d, qid, gid), b = compute_metrics(dp, qid, gp);
    EXPECT_EQ(a.map, b.map);
    EXPECT_EQ(a.rank_k, b.rank_k);
  }
}

TEST(ComputeMetrics, SkipRemovesSelfMatches) {
  Eigen::MatrixXd d(1, 3);
  d << 0.0, 0.5, 0.2;
  const std::vector<int> qid = {7}, gid = {7, 7, 3};
  std::vector<std::vector<bool>> skip = {{true, false, false}};
  const Metrics with_self = compute_metrics(d, qid, gid);
  const Metrics without = compute_metrics(d, qid, gid, &skip);
  EXPECT_EQ(with_self.rank(1), 1.0);
  EXPECT_EQ(without.rank(1), 0.0);
  EXPECT_DOUBLE_EQ(without.map, 0.5);
  std::vector<std::vector<bool>> all = {{true, true, false}};
  const Metrics empty = compute_metrics(d, qid, gid, &all);
  EXPECT_EQ(empty.num_queries, 0);
  EXPECT_EQ(empty.excluded, 1);
}

TEST(DistanceMatrix, RecomputationOracleAndLambda) {
  Rng rng(3);
  std::vector<Embedding> q, g;
  for (int i = 0; i < 3; ++i) q.push_back(general_embedding(4, 5, rng));
  for (int i = 0; i < 4; ++i) g.push_back(general_embedding(4, 5, rng));
  const Eigen::MatrixXd d = distance_matrix(q, g, 1.0);
  const Eigen::MatrixXd local = distance_matrix(q, g, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      EXPECT_NEAR(d(i, j), pair_distance(q[i], g[j], 1.0).d_total, 1e-12);
      EXPECT_EQ(local(i, j), pair_distance(q[i], g[j], 0.0).d_local);
    }
  EXPECT_EQ(distance_matrix(q, g, 1.0, 3), d);
  std::vector<Embedding> other = {general_embedding(2, 5, rng)};
  EXPECT_TARD_ERROR(distance_matrix(q, other, 1.0), ErrorKind::kShape);
}

TEST(DistanceMatrix, IdenticalFlatEmbeddingIsZeroAndRowMinimum) {
  Rng rng(4);
  std::vector<Embedding> g;
  for (int i = 0; i < 6; ++i) g.push_back(flat_embedding(8, 6, rng));
  const Eigen::MatrixXd d = distance_matrix(std::span<const Embedding>(g).subspan(2, 1), g, 1.0);
  EXPECT_EQ(d(0, 2), 0.0);
  EXPECT_EQ(rank_gallery(d.row(0))[0], 2);
}

TEST(DistanceMatrix, SelfDistanceIsTheSelfAlignmentCost) {
  Rng rng(5);
  const Embedding e = general_embedding(8, 6, rng);
  const PairDistance p = pair_distance(e, e);
  EXPECT_EQ(p.d_global, 0.0);
  // Only the cells next to the diagonal can carry cost on a self path.
  for (const auto& [i, j] : p.alignment.path) EXPECT_LE(std::abs(i - j), 1);
}

TEST(ComputeMetrics, CopiesGivePerfectScores) {
  Rng rng(6);
  std::vector<Embedding> q;
  std::vector<int> ids;
  for (int i = 0; i < 12; ++i) {
    q.push_back(flat_embedding(8, 8, rng));
    ids.push_back(i);
  }
  const Metrics m = compute_metrics(distance_matrix(q, q, 1.0), ids, ids);
  EXPECT_EQ(m.map, 1.0);
  EXPECT_EQ(m.rank(1), 1.0);
}

TEST(ComputeMetrics, RandomEmbeddingsSitNearPermutationBaseline) {
  Rng rng(7);
  std::vector<Embedding> q, g;
  std::vector<int> qid, gid;
  for (int id = 0; id < 10; ++id) {
    for (int k = 0; k < 10; ++k) {
      g.push_back(general_embedding(8, 16, rng));
      gid.push_back(id);
    }
    for (int k = 0; k < 2; ++k) {
      q.push_back(general_embedding(8, 16, rng));
      qid.push_back(id);
    }
  }
  const Eigen::MatrixXd d = distance_matrix(q, g, 1.0);
  const double observed = compute_metrics(d, qid, gid).map;
  const double expected = permutation_baseline_map(qid, gid);
  // spread of mAP under random gallery labelings
  std::vector<double> samples;
  std::vector<int> shuffled = gid;
  for (int s = 0; s < 2000; ++s) {
    for (int i = static_cast<int>(shuffled.size()) - 1; i > 0; --i) std::swap(shuffled[i], shuffled[rng.below(i + 1)]);
    samples.push_back(compute_metrics(d, qid, shuffled).map);
  }
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / samples.size();
  double var = 0;
  for (double v : samples) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (samples.size() - 1));
  EXPECT_NEAR(mean, expected, 4 * sd / std::sqrt(2000.0));
  EXPECT_LT(std::abs(observed - expected), 3 * sd);
}

TEST(RankQuery, OrderingClampAndFlags) {
  Rng rng(8);
  std::vector<Embedding> g;
  std::vector<ManifestRecord> rows;
  for (int i = 0; i < 7; ++i) {
    g.push_back(flat_embedding(8, 6, rng));
    rows.push_back({"img" + std::to_string(i) + ".png", i % 3, VesselType::kWarship, Split::kGallery});
  }
  const Embedding q = g[4];
  const QueryReport full = rank_query(q, g, rows, 7, 1.0, 1);
  const Eigen::MatrixXd d = distance_matrix(std::span<const Embedding>(&q, 1), g, 1.0);
  const auto order = rank_gallery(d.row(0));
  ASSERT_EQ(full.entries.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_EQ(full.entries[i].gallery_index, order[i]);
    EXPECT_EQ(full.entries[i].d_total, d(0, order[i]));
    EXPECT_EQ(*full.entries[i].correct, rows[order[i]].id == 1);
    if (i) EXPECT_LE(full.entries[i - 1].d_total, full.entries[i].d_total);
  }
  EXPECT_EQ(full.entries[0].gallery_index, 4);
  EXPECT_EQ(full.entries[0].d_total, 0.0);
  EXPECT_TRUE(full.notices.empty());

  const QueryReport one = rank_query(q, g, rows, 1, 1.0);
  ASSERT_EQ(one.entries.size(), 1u);
  EXPECT_EQ(one.entries[0].gallery_index, order[0]);
  EXPECT_FALSE(one.entries[0].correct.has_value());

  const QueryReport clamped = rank_query(q, g, rows, 50, 1.0);
  EXPECT_EQ(clamped.top_k, 7);
  EXPECT_EQ(clamped.entries.size(), 7u);
  ASSERT_EQ(clamped.notices.size(), 1u);
  EXPECT_TARD_ERROR(rank_query(q, g, rows, 0, 1.0), ErrorKind::kInvalidInput);

  const auto j = full.to_json();
  EXPECT_EQ(j["query_id"], 1);
  EXPECT_EQ(j["entries"].size(), 7u);
  EXPECT_EQ(j["entries"][0]["rank"], 1);
}

TEST(Evaluate, EndToEndOnGeneratedData) {
  TempDir dir("eval_data");
  DatasetConfig dc;
  dc.ids_per_type = {{VesselType::kWarship, 5}};
  dc.images_per_id = 10;
  dc.frame_height = 48;
  dc.frame_width = 96;
  dc.out_dir = dir.path();
  const Manifest m = read_manifest(generate_dataset(dc).manifest_path);
  BackboneConfig bc;
  bc.widths = {4, 8};
  bc.embed_dim = 8;
  bc.num_classes = 5;
  const Backbone model(bc, 3);
  EvalConfig ec;
  ec.resolution = {32, 64};
  ec.r = 4;
  const EvalResult a = evaluate(model, m, ec);
  EXPECT_EQ(a.metrics.num_queries, 5);
  EXPECT_GT(a.baseline_map, 0.0);
  EXPECT_NEAR(a.baseline_map, permutation_baseline_map(std::vector<int>{0, 1, 2, 3, 4}, [] {
                std::vector<int> g;
                for (int id = 0; id < 5; ++id)
                  for (int k = 0; k < 4; ++k) g.push_back(id);
                return g;
              }()),
              1e-12);
  EXPECT_EQ(evaluate(model, m, ec).metrics.map, a.metrics.map);
  ec.sss_test = true;
  const EvalResult rotated = evaluate(model, m, ec);
  EXPECT_EQ(evaluate(model, m, ec).metrics.map, rotated.metrics.map);
  ec.test_seed = 5;
  EXPECT_NO_THROW(evaluate(model, m, ec));

  Manifest no_queries = m;
  for (auto& r : no_queries.records)
    if (r.split == Split::kQuery) r.split = Split::kGallery;
  EXPECT_TARD_ERROR(evaluate(model, no_queries, ec), ErrorKind::kDataset);
  Manifest no_gallery = m;
  for (auto& r : no_gallery.records)
    if (r.split == Split::kGallery) r.split = Split::kTrain;
  EXPECT_TARD_ERROR(evaluate(model, no_gallery, ec), ErrorKind::kDataset);

  // query_topk with an image taken from the gallery finds it at distance 0
  const auto rows = gallery_rows(m);
  const Image img = read_png(m.resolve(rows[3]));
  const QueryReport rep = query_topk(model, ec, img, m, 5, rows[3].id);
  ASSERT_EQ(rep.entries.size(), 5u);
  bool found_self = false;
  for (const auto& e : rep.entries) found_self |= e.gallery_index == 3;
  const auto self = std::find_if(rep.entries.begin(), rep.entries.end(), [](const auto& e) { return e.gallery_index == 3; });
  if (self != rep.entries.end()) EXPECT_EQ(self->path, rows[3].path);
  EXPECT_TRUE(found_self || rep.entries.back().d_total <= pair_distance(embed(model, std::vector<ModelInput>{aspect_normalize(img, 32, 64)}, 4)[0],
                                                                        embed(model, std::vector<ModelInput>{aspect_normalize(img, 32, 64)}, 4)[0])
                                                               .d_total);
}
