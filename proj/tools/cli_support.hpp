#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnlab/road_network.hpp"
#include "attnlab/speed_panel.hpp"

namespace cli {

namespace fs = std::filesystem;

/// A dataset directory holds speeds.csv, graph.csv and optionally
/// coords.csv, imputed.csv and dataset.json ({"name", "unit"}).
struct Dataset {
  std::string name;
  attnlab::SpeedPanel panel;  // filled; imputed flags restored or set by the fill
  attnlab::RoadNetwork network;
};

Dataset load_dataset(const fs::path& dir);
void save_dataset(const Dataset& data, const fs::path& dir);

/// Records what a run read and wrote so it can be repeated.
class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> argv, std::uint64_t seed);
  void config(nlohmann::json c) { config_ = std::move(c); }
  void input(const fs::path& path);
  void output(const fs::path& path);
  /// Writes run_manifest.json into `dir`.
  void write(const fs::path& dir) const;

 private:
  std::string command_;
  std::vector<std::string> argv_;
  std::uint64_t seed_;
  nlohmann::json config_ = nlohmann::json::object();
  std::map<std::string, std::string> inputs_, outputs_;
};

std::string file_sha256(const fs::path& path);
void write_text(const fs::path& path, const std::string& text);

/// Grouped before/after bars over shared bin edges.
std::string histogram_svg(const std::vector<double>& edges, const std::vector<std::size_t>& before,
                          const std::vector<std::size_t>& after, const std::string& unit);

}  // namespace cli
