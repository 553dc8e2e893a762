#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <set>

#include "tard/grid.hpp"
#include "tard/synthgen.hpp"

namespace fs = std::filesystem;
using namespace tard;

namespace {

enum class LogLevel { kQuiet, kInfo, kDebug };

LogLevel log_level() {
  const char* env = std::getenv("TARD_LOG");
  const std::string v = env ? env : "info";
  if (v == "quiet" || v == "0" || v == "error") return LogLevel::kQuiet;
  if (v == "debug" || v == "2") return LogLevel::kDebug;
  return LogLevel::kInfo;
}

void log(LogLevel level, const std::string& msg) {
  if (level <= log_level()) std::cerr << "[tard] " << msg << "\n";
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    const KeyValueConfig defaults = TrainConfig{}.to_kv();
    for (const auto& [key, _] : defaults.values()) k.insert(key);
    for (const char* extra :
         {"threads", "manifest", "transfer_manifest", "data_seed", "ids_per_type", "images_per_id", "frame",
          "train_fraction", "query_fraction", "grid_seeds", "grid_transfer_types", "grid_combinations", "grid_parallel"})
      k.insert(extra);
    return k;
  }();
  return keys;
}

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> regime, transfer_type, resolution, manifest, checkpoint, image;
  std::optional<bool> sss_train, sss_transfer, sss_test;
  std::optional<int> topk, query_id, threads;
  bool parallel = false;
  std::vector<std::string> sets;
};

// Config file first, then command-line flags; flags win.
KeyValueConfig effective_config(const Options& o, const std::string& command) {
  KeyValueConfig kv = o.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(o.config);
  KeyValueConfig flags;
  for (const auto& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) fail(ErrorKind::kUsage, "--set expects key=value, got '" + s + "'");
    flags.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  if (o.seed) flags.set(command == "gen-data" ? "data_seed" : "seed", std::to_string(*o.seed));
  if (o.regime) flags.set("regime", *o.regime);
  if (o.transfer_type) flags.set("transfer_type", *o.transfer_type);
  if (o.resolution) flags.set("resolution", *o.resolution);
  if (o.manifest) flags.set("manifest", *o.manifest);
  if (o.sss_train) flags.set("sss_train", *o.sss_train ? "true" : "false");
  if (o.sss_transfer) flags.set("sss_transfer", *o.sss_transfer ? "true" : "false");
  if (o.sss_test) flags.set("sss_test", *o.sss_test ? "true" : "false");
  if (o.threads) flags.set("threads", std::to_string(*o.threads));
  if (o.parallel) flags.set("grid_parallel", "true");
  kv.merge(flags);
  for (const auto& [key, _] : kv.values())
    if (!known_keys().count(key)) fail(ErrorKind::kUsage, "unknown config key '" + key + "'");
  return kv;
}

DatasetConfig dataset_config(const KeyValueConfig& kv, const fs::path& out) {
  DatasetConfig dc;
  dc.seed = static_cast<std::uint64_t>(kv.get_int("data_seed", static_cast<long long>(dc.seed)));
  if (kv.has("ids_per_type")) {
    dc.ids_per_type.clear();
    for (const auto& item : split_list(kv.get("ids_per_type", ""))) {
      const auto colon = item.find(':');
      if (colon == std::string::npos) fail(ErrorKind::kFormat, "ids_per_type entries look like type:count");
      dc.ids_per_type[parse_vessel_type(trim(item.substr(0, colon)))] = std::stoi(item.substr(colon + 1));
    }
  }
  dc.images_per_id = static_cast<int>(kv.get_int("images_per_id", dc.images_per_id));
  if (kv.has("frame")) {
    const Resolution f = parse_resolution(kv.get("frame", ""));
    dc.frame_height = f.height;
    dc.frame_width = f.width;
  }
  dc.target_type = parse_vessel_type(kv.get("target_type", "warship"));
  dc.train_fraction = kv.get_double("train_fraction", dc.train_fraction);
  dc.query_fraction = kv.get_double("query_fraction", dc.query_fraction);
  dc.threads = static_cast<int>(kv.get_int("threads", dc.threads));
  dc.out_dir = out;
  return dc;
}

Manifest data_manifest(const KeyValueConfig& kv) {
  const std::string path = kv.get("manifest", "");
  if (path.empty()) fail(ErrorKind::kUsage, "a dataset manifest is required (--manifest or manifest = ...)");
  return read_manifest(path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  out << text;
  if (!out) fail(ErrorKind::kIo, "failed writing '" + path.string() + "'");
}

// Deterministic record of what ran: no timestamps, so identical runs produce
// identical files.
void write_run_manifest(const fs::path& out, const std::string& command, const KeyValueConfig& kv,
                        const std::vector<std::string>& outputs) {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = kv.values();
  char digest[17];
  std::snprintf(digest, sizeof(digest), "%016llx", static_cast<unsigned long long>(fnv1a64(kv.canonical())));
  j["config_digest"] = digest;
  j["outputs"] = outputs;
  write_text(out / "run.json", j.dump(2) + "\n");
}

int cmd_gen_data(const Options& o) {
  const KeyValueConfig kv = effective_config(o, "gen-data");
  const fs::path out = o.out;
  fs::create_directories(out);
  const GeneratedDataset ds = generate_dataset(dataset_config(kv, out));
  log(LogLevel::kInfo, "wrote " + std::to_string(ds.records.size()) + " images, manifest " + ds.manifest_path.string());
  write_run_manifest(out, "gen-data", kv, {ds.manifest_path.filename().string()});
  return 0;
}

int cmd_train(const Options& o) {
  const KeyValueConfig kv = effective_config(o, "train");
  const TrainConfig cfg = TrainConfig::from(kv);
  const Manifest manifest = data_manifest(kv);
  std::optional<Manifest> transfer;
  if (kv.has("transfer_manifest")) transfer = read_manifest(kv.get("transfer_manifest", ""));
  const fs::path out = o.out;
  fs::create_directories(out);
  log(LogLevel::kInfo, "training regime " + std::string(to_string(cfg.regime)) + ", " + std::to_string(cfg.epochs) + " epochs");
  const TrainResult tr = train(cfg, manifest, transfer ? &*transfer : nullptr, [](long long step, const LossBreakdown& l) {
    if (log_level() >= LogLevel::kDebug)
      log(LogLevel::kDebug, "step " + std::to_string(step) + " total " + format_double(l.total));
  });
  save_checkpoint(out / "model.tardckpt", tr.checkpoint);
  write_loss_log(out / "loss.csv", tr.log);
  if (!tr.log.empty()) log(LogLevel::kInfo, "final loss " + format_double(tr.log.back().total));
  write_run_manifest(out, "train", cfg.to_kv(), {"model.tardckpt", "loss.csv"});
  return 0;
}

// Evaluation settings come from the checkpoint, with test-time flags on top.
EvalConfig eval_config(const LoadedModel& lm, const KeyValueConfig& kv) {
  KeyValueConfig merged = lm.config.to_kv();
  for (const char* key : {"sss_test", "test_seed", "threads", "sss_min_deg", "sss_max_deg", "target_type", "target_ids"})
    if (kv.has(key)) merged.set(key, kv.get(key, ""));
  return EvalConfig::from(TrainConfig::from(merged));
}

int cmd_eval(const Options& o) {
  if (!o.checkpoint) fail(ErrorKind::kUsage, "eval requires --checkpoint");
  const KeyValueConfig kv = effective_config(o, "eval");
  const LoadedModel lm = load_model(*o.checkpoint);
  for (const auto& w : lm.checkpoint.warnings) log(LogLevel::kInfo, "warning: " + w);
  const EvalConfig ec = eval_config(lm, kv);
  const EvalResult res = evaluate(lm.model, data_manifest(kv), ec);
  const fs::path out = o.out;
  fs::create_directories(out);
  write_text(out / "metrics.csv", "sss_test," + metrics_csv_header() + ",baseline_map\n" + (ec.sss_test ? "1," : "0,") +
                                      metrics_csv_fields(res.metrics) + "," + format_double(res.baseline_map) + "\n");
  std::cout << metrics_table(res.metrics) << "  permutation-baseline mAP " << 100 * res.baseline_map << "%\n";
  KeyValueConfig echo = lm.config.to_kv();
  echo.merge(kv);
  write_run_manifest(out, "eval", echo, {"metrics.csv"});
  return 0;
}

int cmd_grid(const Options& o) {
  const KeyValueConfig kv = effective_config(o, "grid");
  const GridConfig g = GridConfig::from(kv);
  const Manifest manifest = data_manifest(kv);
  const fs::path out = o.out;
  fs::create_directories(out);
  const auto runs = run_grid(g, manifest, [](std::size_t done, std::size_t total, const GridRun& run) {
    log(LogLevel::kInfo, "[" + std::to_string(done) + "/" + std::to_string(total) + "] " + run.combination + " seed " +
                             std::to_string(run.config.seed) + " mAP " + format_double(run.result.metrics.map));
  });
  write_text(out / "grid.csv", grid_csv(runs));
  for (const auto& s : summarize_grid(runs)) std::cout << s.combination << " (median of " << s.runs << ")\n" << metrics_table(s.median);
  write_run_manifest(out, "grid", kv, {"grid.csv"});
  return 0;
}

int cmd_query(const Options& o) {
  if (!o.checkpoint) fail(ErrorKind::kUsage, "query requires --checkpoint");
  if (!o.image) fail(ErrorKind::kUsage, "query requires --image");
  const KeyValueConfig kv = effective_config(o, "query");
  const LoadedModel lm = load_model(*o.checkpoint);
  const Image img = read_png(*o.image);
  const QueryReport rep = query_topk(lm.model, eval_config(lm, kv), img, data_manifest(kv), o.topk.value_or(10), o.query_id);
  for (const auto& n : rep.notices) log(LogLevel::kInfo, n);
  const fs::path out = o.out;
  fs::create_directories(out);
  const std::string text = rep.to_json().dump(2) + "\n";
  write_text(out / "query.json", text);
  std::cout << text;
  write_run_manifest(out, "query", kv, {"query.json"});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tard: vessel re-identification toolkit"};
  app.require_subcommand(1, 1);
  Options o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "seed (dataset seed for gen-data, training seed otherwise)");
    sub->add_option("--set", o.sets, "extra key=value override, repeatable");
    sub->add_option("--threads", o.threads, "worker threads");
  };
  auto add_train_flags = [&](CLI::App* sub) {
    sub->add_option("--manifest", o.manifest, "dataset manifest");
    sub->add_option("--regime", o.regime, "baseline | expanded | transfer");
    sub->add_option("--transfer-type", o.transfer_type, "auxiliary vessel type");
    sub->add_option("--resolution", o.resolution, "model input size HxW");
    sub->add_flag("--sss-train,!--no-sss-train", o.sss_train, "sea-sway rotation on training images");
    sub->add_flag("--sss-transfer,!--no-sss-transfer", o.sss_transfer, "sea-sway rotation on transfer images");
    sub->add_flag("--sss-test,!--no-sss-test", o.sss_test, "sea-sway rotation on test images");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset and manifest");
  add_common(gen);
  CLI::App* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(tr);
  add_train_flags(tr);
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on the query/gallery split");
  add_common(ev);
  ev->add_option("--checkpoint", o.checkpoint, "model checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--manifest", o.manifest, "dataset manifest");
  ev->add_flag("--sss-test,!--no-sss-test", o.sss_test, "sea-sway rotation on test images");
  CLI::App* grid = app.add_subcommand("grid", "run every training-method combination over seeds");
  add_common(grid);
  add_train_flags(grid);
  grid->add_flag("--parallel", o.parallel, "run combinations concurrently");
  CLI::App* query = app.add_subcommand("query", "rank gallery images for one query image");
  add_common(query);
  query->add_option("--checkpoint", o.checkpoint, "model checkpoint")->check(CLI::ExistingFile);
  query->add_option("--image", o.image, "query PNG")->check(CLI::ExistingFile);
  query->add_option("--manifest", o.manifest, "gallery manifest");
  query->add_option("--topk", o.topk, "number of results")->default_val(10);
  query->add_option("--query-id", o.query_id, "true identity of the query, enables correctness flags");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*tr) return cmd_train(o);
    if (*ev) return cmd_eval(o);
    if (*grid) return cmd_grid(o);
    if (*query) return cmd_query(o);
  } catch (const Error& e) {
    std::cerr << "tard: " << e.what() << "\n";
    return e.kind() == ErrorKind::kUsage ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "tard: error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
