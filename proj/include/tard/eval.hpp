#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tard/align.hpp"
#include "tard/backbone.hpp"
#include "tard/error.hpp"
#include "tard/imaging.hpp"
#include "tard/manifest.hpp"
#include "tard/parallel.hpp"
#include "tard/rng.hpp"
#include "tard/trainer.hpp"

namespace tard {

inline constexpr int kRankCutoffs[] = {1, 5, 10, 20};

// Q x G matrix of D_tri; rows parallelize.
inline Eigen::MatrixXd distance_matrix(std::span<const Embedding> queries, std::span<const Embedding> gallery,
                                       double lambda, int threads = 1) {
  Eigen::MatrixXd d(static_cast<Eigen::Index>(queries.size()), static_cast<Eigen::Index>(gallery.size()));
  parallel_for(
      queries.size(),
      [&](std::size_t q) {
        for (std::size_t g = 0; g < gallery.size(); ++g)
          d(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(g)) =
              pair_distance(queries[q], gallery[g], lambda).d_total;
      },
      threads);
  return d;
}

// Standard AP over a ranked relevance list; nullopt when nothing is relevant.
inline std::optional<double> average_precision(std::span<const bool> ranked_relevance) {
  double hits = 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < ranked_relevance.size(); ++i) {
    if (!ranked_relevance[i]) continue;
    hits += 1.0;
    sum += hits / static_cast<double>(i + 1);
  }
  if (hits == 0.0) return std::nullopt;
  return sum / hits;
}

// Ascending by distance, ties by gallery index.
inline std::vector<int> rank_gallery(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::vector<int> order(static_cast<std::size_t>(row.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return row[a] < row[b]; });
  return order;
}

struct Metrics {
  double map = 0.0;
  std::map<int, double> rank_k;
  int num_queries = 0;  // queries contributing to the metrics
  int excluded = 0;     // queries with no relevant gallery item

  double rank(int k) const {
    auto it = rank_k.find(k);
    return it == rank_k.end() ? 0.0 : it->second;
  }
};

// mAP and CMC from a distance matrix. Gallery entries flagged in `skip`
// (a query's own image) are removed from that query's ranking.
inline Metrics compute_metrics(const Eigen::MatrixXd& dist, std::span<const int> query_ids, std::span<const int> gallery_ids,
                               const std::vector<std::vector<bool>>* skip = nullptr) {
  require(dist.rows() == static_cast<Eigen::Index>(query_ids.size()) &&
              dist.cols() == static_cast<Eigen::Index>(gallery_ids.size()),
          ErrorKind::kShape, "distance matrix does not match query/gallery sizes");
  Metrics m;
  double ap_sum = 0.0;
  std::map<int, int> hits;
  for (int k : kRankCutoffs) hits[k] = 0;
  for (Eigen::Index q = 0; q < dist.rows(); ++q) {
    auto rel = std::make_unique<bool[]>(static_cast<std::size_t>(dist.cols()));
    std::size_t n = 0;
    for (int g : rank_gallery(dist.row(q))) {
      if (skip && (*skip)[static_cast<std::size_t>(q)][static_cast<std::size_t>(g)]) continue;
      rel[n++] = gallery_ids[static_cast<std::size_t>(g)] == query_ids[static_cast<std::size_t>(q)];
    }
    const auto ap = average_precision(std::span<const bool>(rel.get(), n));
    if (!ap) {
      ++m.excluded;
      continue;
    }
    ++m.num_queries;
    ap_sum += *ap;
    const auto first = static_cast<int>(std::find(rel.get(), rel.get() + n, true) - rel.get());
    for (int k : kRankCutoffs)
      if (first < k) ++hits[k];
  }
  if (m.num_queries > 0) {
    m.map = ap_sum / m.num_queries;
    for (int k : kRankCutoffs) m.rank_k[k] = static_cast<double>(hits[k]) / m.num_queries;
  } else {
    for (int k : kRankCutoffs) m.rank_k[k] = 0.0;
  }
  return m;
}

// Expected AP of a uniformly random ranking of G items with R relevant:
// (1/G) * (H_G + (R-1)/(G-1) * (G - H_G)), H_G the G-th harmonic number.
inline double expected_random_ap(int relevant, int gallery) {
  require(relevant >= 1 && gallery >= relevant, ErrorKind::kInvalidInput, "need 1 <= relevant <= gallery");
  if (gallery == 1) return 1.0;
  double h = 0.0;
  for (int k = 1; k <= gallery; ++k) h += 1.0 / k;
  const double g = gallery;
  return (h + (relevant - 1.0) / (g - 1.0) * (g - h)) / g;
}

// Mean expected AP over queries with at least one relevant gallery item.
inline double permutation_baseline_map(std::span<const int> query_ids, std::span<const int> gallery_ids) {
  std::map<int, int> count;
  for (int id : gallery_ids) ++count[id];
  double sum = 0.0;
  int n = 0;
  for (int id : query_ids) {
    auto it = count.find(id);
    if (it == count.end()) continue;
    sum += expected_random_ap(it->second, static_cast<int>(gallery_ids.size()));
    ++n;
  }
  return n ? sum / n : 0.0;
}

struct EvalConfig {
  int r = 8;
  double lambda = 1.0;
  bool sss_test = false;
  SssParams sss;
  Resolution resolution = Resolution::desk();
  VesselType target_type = VesselType::kWarship;
  int target_ids = 0;
  std::uint64_t test_seed = 0;
  int threads = 1;

  static EvalConfig from(const TrainConfig& t) {
    EvalConfig e;
    e.r = t.r;
    e.lambda = t.tri.lambda;
    e.sss_test = t.sss_test;
    e.sss = t.sss;
    e.resolution = t.resolution;
    e.target_type = t.target_type;
    e.target_ids = t.target_ids;
    e.test_seed = t.test_seed;
    e.threads = t.threads;
    return e;
  }
};

inline constexpr std::uint64_t kStreamSssTest = 21;

// Letterboxed test inputs; with sss_test each image gets a rotation drawn
// from a stream keyed by the test seed and the image path, so every model
// sees the same perturbed test set.
inline std::vector<ModelInput> prepare_test_inputs(const Manifest& m, const std::vector<const ManifestRecord*>& rows,
                                                   const EvalConfig& cfg) {
  std::vector<ModelInput> out(rows.size());
  parallel_for(
      rows.size(),
      [&](std::size_t i) {
        ModelInput in = aspect_normalize(m.load(*rows[i]), cfg.resolution.height, cfg.resolution.width);
        if (cfg.sss_test) {
          Rng rng(derive_seed(cfg.test_seed, {kStreamSssTest, fnv1a64(rows[i]->path)}));
          in = sss_augment(in, cfg.sss, sample_sss_angle(rng, cfg.sss));
        }
        out[i] = std::move(in);
      },
      cfg.threads);
  return out;
}

inline std::vector<Embedding> embed_inputs(const Backbone& model, std::span<const ModelInput> inputs, int r, int threads,
                                           std::size_t chunk = 64) {
  std::vector<Embedding> out;
  out.reserve(inputs.size());
  for (std::size_t s = 0; s < inputs.size(); s += chunk) {
    auto part = embed(model, inputs.subspan(s, std::min(chunk, inputs.size() - s)), r, threads);
    for (auto& e : part) out.push_back(std::move(e));
  }
  return out;
}

struct EvalResult {
  Metrics metrics;
  double baseline_map = 0.0;  // expected mAP of a random ranking
};

inline EvalResult evaluate(const Backbone& model, const Manifest& manifest, const EvalConfig& cfg) {
  const std::vector<int> keep = target_identities(manifest, cfg.target_type, cfg.target_ids);
  std::vector<const ManifestRecord*> queries, gallery;
  for (const auto& r : manifest.records) {
    if (r.type != cfg.target_type || !std::binary_search(keep.begin(), keep.end(), r.id)) continue;
    if (r.split == Split::kQuery) queries.push_back(&r);
    if (r.split == Split::kGallery) gallery.push_back(&r);
  }
  if (queries.empty()) fail(ErrorKind::kDataset, "no query images for the target type");
  if (gallery.empty()) fail(ErrorKind::kDataset, "no gallery images for the target type");

  const auto q_inputs = prepare_test_inputs(manifest, queries, cfg);
  const auto g_inputs = prepare_test_inputs(manifest, gallery, cfg);
  const auto q_emb = embed_inputs(model, q_inputs, cfg.r, cfg.threads);
  const auto g_emb = embed_inputs(model, g_inputs, cfg.r, cfg.threads);
  const Eigen::MatrixXd d = distance_matrix(q_emb, g_emb, cfg.lambda, cfg.threads);

  std::vector<int> qid, gid;
  for (const auto* r : queries) qid.push_back(r->id);
  for (const auto* r : gallery) gid.push_back(r->id);
  std::vector<std::vector<bool>> skip(queries.size(), std::vector<bool>(gallery.size(), false));
  for (std::size_t q = 0; q < queries.size(); ++q)
    for (std::size_t g = 0; g < gallery.size(); ++g)
      skip[q][g] = queries[q]->id == gallery[g]->id && queries[q]->path == gallery[g]->path;

  EvalResult res;
  res.metrics = compute_metrics(d, qid, gid, &skip);
  res.baseline_map = permutation_baseline_map(qid, gid);
  return res;
}

// ---------------------------------------------------------------- queries

struct QueryEntry {
  int gallery_index = 0;
  std::string path;
  int id = 0;
  double d_total = 0.0;
  std::optional<bool> correct;
};

struct QueryReport {
  std::optional<int> query_id;
  int top_k = 0;
  std::vector<QueryEntry> entries;
  std::vector<std::string> notices;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["query_id"] = query_id ? nlohmann::ordered_json(*query_id) : nlohmann::ordered_json(nullptr);
    j["top_k"] = top_k;
    j["entries"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
      nlohmann::ordered_json row;
      row["rank"] = j["entries"].size() + 1;
      row["gallery_index"] = e.gallery_index;
      row["path"] = e.path;
      row["id"] = e.id;
      row["d_total"] = e.d_total;
      row["correct"] = e.correct ? nlohmann::ordered_json(*e.correct) : nlohmann::ordered_json(nullptr);
      j["entries"].push_back(row);
    }
    j["notices"] = notices;
    return j;
  }
};

// Ranks gallery embeddings against one query; k larger than the gallery is
// clamped with a notice.
inline QueryReport rank_query(const Embedding& query, std::span<const Embedding> gallery,
                              std::span<const ManifestRecord> gallery_rows, int k, double lambda,
                              std::optional<int> query_id = std::nullopt, int threads = 1) {
  require(k >= 1, ErrorKind::kInvalidInput, "k must be at least 1");
  require(!gallery.empty(), ErrorKind::kDataset, "empty gallery");
  require(gallery.size() == gallery_rows.size(), ErrorKind::kShape, "gallery rows and embeddings differ");
  QueryReport rep;
  rep.query_id = query_id;
  if (static_cast<std::size_t>(k) > gallery.size()) {
    rep.notices.push_back("k=" + std::to_string(k) + " exceeds gallery size " + std::to_string(gallery.size()) +
                          "; clamped");
    k = static_cast<int>(gallery.size());
  }
  rep.top_k = k;
  const Eigen::MatrixXd d = distance_matrix(std::span<const Embedding>(&query, 1), gallery, lambda, threads);
  const auto order = rank_gallery(d.row(0));
  for (int i = 0; i < k; ++i) {
    const int g = order[static_cast<std::size_t>(i)];
    QueryEntry e;
    e.gallery_index = g;
    e.path = gallery_rows[static_cast<std::size_t>(g)].path;
    e.id = gallery_rows[static_cast<std::size_t>(g)].id;
    e.d_total = d(0, g);
    if (query_id) e.correct = e.id == *query_id;
    rep.entries.push_back(std::move(e));
  }
  return rep;
}

// Gallery rows of a manifest: those tagged gallery, or every row when the
// manifest carries no gallery split.
inline std::vector<ManifestRecord> gallery_rows(const Manifest& m) {
  std::vector<ManifestRecord> rows;
  for (const auto& r : m.records)
    if (r.split == Split::kGallery) rows.push_back(r);
  if (rows.empty()) rows = m.records;
  return rows;
}

inline QueryReport query_topk(const Backbone& model, const EvalConfig& cfg, const Image& query_image,
                              const Manifest& gallery_manifest, int k, std::optional<int> query_id = std::nullopt) {
  const auto rows = gallery_rows(gallery_manifest);
  require(!rows.empty(), ErrorKind::kDataset, "empty gallery manifest");
  std::vector<const ManifestRecord*> ptrs;
  for (const auto& r : rows) ptrs.push_back(&r);
  EvalConfig plain = cfg;
  plain.sss_test = false;
  const auto g_emb = embed_inputs(model, prepare_test_inputs(gallery_manifest, ptrs, plain), cfg.r, cfg.threads);
  const ModelInput q = aspect_normalize(query_image, cfg.resolution.height, cfg.resolution.width);
  const auto q_emb = embed(model, std::span<const ModelInput>(&q, 1), cfg.r, cfg.threads);
  return rank_query(q_emb[0], g_emb, rows, k, cfg.lambda, query_id, cfg.threads);
}

// ---------------------------------------------------------------- output

inline std::string metrics_csv_header() { return "map,rank1,rank5,rank10,rank20,num_queries,excluded"; }

inline std::string metrics_csv_fields(const Metrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%.6f,%.6f,%.6f,%d,%d", m.map, m.rank(1), m.rank(5), m.rank(10), m.rank(20),
                m.num_queries, m.excluded);
  return buf;
}

inline std::string metrics_table(const Metrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "  mAP     Rank1   Rank5   Rank10  Rank20  queries\n"
                "  %6.2f%%  %6.2f%%  %6.2f%%  %6.2f%%  %6.2f%%  %d\n",
                100 * m.map, 100 * m.rank(1), 100 * m.rank(5), 100 * m.rank(10), 100 * m.rank(20), m.num_queries);
  std::string s = buf;
  if (m.excluded) s += "  (" + std::to_string(m.excluded) + " queries without a gallery match excluded)\n";
  return s;
}

}  // namespace tard
