#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tard/error.hpp"
#include "tard/imaging.hpp"
#include "tard/png_io.hpp"

namespace tard {

// One JSON Lines row: {"path": str, "id": int, "type": str, "split": str}.
// Relative paths are resolved against the manifest's directory.
struct ManifestRecord {
  std::string path;
  int id = 0;
  VesselType type = VesselType::kWarship;
  Split split = Split::kTrain;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const ManifestRecord& r) const {
    const std::filesystem::path p(r.path);
    return p.is_absolute() ? p : base_dir / p;
  }

  ImageSample load(const ManifestRecord& r) const {
    ImageSample s;
    s.pixels = read_png(resolve(r));
    s.identity_id = r.id;
    s.vessel_type = r.type;
    s.split = r.split;
    s.source_path = r.path;
    return s;
  }
};

inline std::string manifest_line(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["path"] = r.path;
  j["id"] = r.id;
  j["type"] = std::string(to_string(r.type));
  j["split"] = std::string(to_string(r.split));
  return j.dump();
}

inline ManifestRecord parse_manifest_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("malformed manifest row: ") + e.what());
  }
  try {
    ManifestRecord r;
    r.path = j.at("path").get<std::string>();
    r.id = j.at("id").get<int>();
    r.type = parse_vessel_type(j.at("type").get<std::string>());
    r.split = parse_split(j.at("split").get<std::string>());
    require(r.id >= 0, ErrorKind::kInvalidInput, "identity id must be non-negative");
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kFormat, std::string("manifest row missing field: ") + e.what());
  }
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open manifest '" + path.string() + "'");
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    m.records.push_back(parse_manifest_line(line));
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kIo, "cannot write manifest '" + path.string() + "'");
  for (const auto& r : records) out << manifest_line(r) << '\n';
  if (!out) fail(ErrorKind::kIo, "failed writing manifest '" + path.string() + "'");
}

}  // namespace tard
