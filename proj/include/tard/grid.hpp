#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include "tard/eval.hpp"
#include "tard/manifest.hpp"
#include "tard/parallel.hpp"
#include "tard/trainer.hpp"

namespace tard {

// Training-method letters: A baseline, B transfer loss, C expanded training
// set, D transfer dataset, E SSS on training images, F SSS on transfer images.
struct Combination {
  std::string name;
  Regime regime;
  bool sss_train;
  bool sss_transfer;
};

inline const std::vector<Combination>& all_combinations() {
  static const std::vector<Combination> combos = {
      {"A", Regime::kBaseline, false, false},  {"AE", Regime::kBaseline, true, false},
      {"AC", Regime::kExpanded, false, false}, {"ACE", Regime::kExpanded, true, false},
      {"BD", Regime::kTransfer, false, false}, {"BDE", Regime::kTransfer, true, false},
      {"BDF", Regime::kTransfer, false, true}, {"BDEF", Regime::kTransfer, true, true},
  };
  return combos;
}

inline const Combination& find_combination(const std::string& name) {
  for (const auto& c : all_combinations())
    if (c.name == name) return c;
  fail(ErrorKind::kInvalidInput, "unknown training combination '" + name + "'");
}

struct GridConfig {
  TrainConfig base;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<VesselType> transfer_types{VesselType::kTanker};
  std::vector<std::string> combinations;  // empty = all eight
  bool parallel = false;

  static GridConfig from(const KeyValueConfig& kv) {
    GridConfig g;
    g.base = TrainConfig::from(kv);
    if (kv.has("grid_seeds")) {
      g.seeds.clear();
      for (const auto& s : split_list(kv.get("grid_seeds", ""))) g.seeds.push_back(std::stoull(s));
    }
    if (kv.has("grid_transfer_types")) {
      g.transfer_types.clear();
      for (const auto& s : split_list(kv.get("grid_transfer_types", ""))) g.transfer_types.push_back(parse_vessel_type(s));
    } else if (g.base.transfer_type) {
      g.transfer_types = {*g.base.transfer_type};
    }
    if (kv.has("grid_combinations")) {
      for (const auto& s : split_list(kv.get("grid_combinations", ""))) g.combinations.push_back(find_combination(s).name);
    }
    g.parallel = kv.get_bool("grid_parallel", false);
    return g;
  }
};

struct GridRun {
  std::string combination;
  TrainConfig config;
  EvalResult result;
};

struct GridSummary {
  std::string combination;
  int runs = 0;
  Metrics median;
};

inline double median_of(std::vector<double> v) {
  require(!v.empty(), ErrorKind::kInvalidInput, "median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Run list in deterministic order: combination, transfer type, seed.
// Baseline combinations do not depend on a transfer type and run once per seed.
inline std::vector<GridRun> plan_grid(const GridConfig& g) {
  std::vector<std::string> names = g.combinations;
  if (names.empty())
    for (const auto& c : all_combinations()) names.push_back(c.name);
  std::vector<GridRun> runs;
  for (const auto& name : names) {
    const Combination& c = find_combination(name);
    std::vector<std::optional<VesselType>> types;
    if (c.regime == Regime::kBaseline) {
      types.push_back(std::nullopt);
    } else {
      for (auto t : g.transfer_types) types.push_back(t);
    }
    for (const auto& t : types)
      for (auto seed : g.seeds) {
        GridRun run;
        run.combination = c.name;
        run.config = g.base;
        run.config.regime = c.regime;
        run.config.sss_train = c.sss_train;
        run.config.sss_transfer = c.sss_transfer;
        run.config.transfer_type = t;
        run.config.seed = seed;
        runs.push_back(std::move(run));
      }
  }
  return runs;
}

inline std::vector<GridSummary> summarize_grid(const std::vector<GridRun>& runs) {
  std::vector<GridSummary> out;
  for (const auto& run : runs) {
    if (std::none_of(out.begin(), out.end(), [&](const GridSummary& s) { return s.combination == run.combination; }))
      out.push_back({run.combination, 0, {}});
  }
  for (auto& s : out) {
    std::vector<double> map;
    std::map<int, std::vector<double>> rank;
    std::vector<double> nq, ex;
    for (const auto& run : runs) {
      if (run.combination != s.combination) continue;
      ++s.runs;
      map.push_back(run.result.metrics.map);
      for (int k : kRankCutoffs) rank[k].push_back(run.result.metrics.rank(k));
      nq.push_back(run.result.metrics.num_queries);
      ex.push_back(run.result.metrics.excluded);
    }
    s.median.map = median_of(map);
    for (int k : kRankCutoffs) s.median.rank_k[k] = median_of(rank[k]);
    s.median.num_queries = static_cast<int>(median_of(nq));
    s.median.excluded = static_cast<int>(median_of(ex));
  }
  return out;
}

using GridProgress = std::function<void(std::size_t done, std::size_t total, const GridRun&)>;

inline std::vector<GridRun> run_grid(const GridConfig& g, const Manifest& manifest, const GridProgress& progress = {}) {
  std::vector<GridRun> runs = plan_grid(g);
  std::mutex mu;
  std::size_t done = 0;
  auto one = [&](std::size_t i) {
    GridRun& run = runs[i];
    TrainConfig cfg = run.config;
    if (g.parallel) cfg.threads = 1;
    const TrainResult tr = train(cfg, manifest);
    run.result = evaluate(tr.model, manifest, EvalConfig::from(cfg));
    if (progress) {
      std::lock_guard<std::mutex> lock(mu);
      progress(++done, runs.size(), run);
    }
  };
  if (g.parallel) {
    parallel_for(runs.size(), one, std::max(1, g.base.threads));
  } else {
    for (std::size_t i = 0; i < runs.size(); ++i) one(i);
  }
  return runs;
}

inline std::string grid_csv(const std::vector<GridRun>& runs) {
  std::string out = "row,combination,regime,sss_train,sss_transfer,sss_test,transfer_type,seed," + metrics_csv_header() + "\n";
  for (const auto& run : runs) {
    const TrainConfig& c = run.config;
    out += "run," + run.combination + "," + std::string(to_string(c.regime)) + "," + (c.sss_train ? "1" : "0") + "," +
           (c.sss_transfer ? "1" : "0") + "," + (c.sss_test ? "1" : "0") + "," +
           (c.transfer_type ? std::string(to_string(*c.transfer_type)) : "") + "," + std::to_string(c.seed) + "," +
           metrics_csv_fields(run.result.metrics) + "\n";
  }
  for (const auto& s : summarize_grid(runs)) {
    const Combination& c = find_combination(s.combination);
    const TrainConfig* any = nullptr;
    for (const auto& run : runs)
      if (run.combination == s.combination) any = &run.config;
    out += "median," + s.combination + "," + std::string(to_string(c.regime)) + "," + (c.sss_train ? "1" : "0") + "," +
           (c.sss_transfer ? "1" : "0") + "," + (any && any->sss_test ? "1" : "0") + ",,," +
           metrics_csv_fields(s.median) + "\n";
  }
  return out;
}

}  // namespace tard
