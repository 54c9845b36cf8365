#include "cli_support.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "attnlab/csv_io.hpp"
#include "attnlab/error.hpp"
#include "attnlab/hash.hpp"

#ifndef ATTNLAB_VERSION
#define ATTNLAB_VERSION "0.0.0"
#endif

namespace cli {

using namespace attnlab;

namespace {

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

std::string file_sha256(const fs::path& path) { return sha256_hex(read_all(path)); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw NotFound("no dataset directory " + dir.string());
  Dataset d;
  d.name = dir.filename().string();
  std::string unit = "km/h";
  if (fs::exists(dir / "dataset.json")) {
    const auto j = nlohmann::json::parse(read_all(dir / "dataset.json"));
    d.name = j.value("name", d.name);
    unit = j.value("unit", unit);
  }
  auto panel = load_speed_csv(dir / "speeds.csv");
  const fs::path coords = fs::exists(dir / "coords.csv") ? dir / "coords.csv" : fs::path();
  d.network = load_graph_csv(dir / "graph.csv", coords, panel.roads);
  panel = panel.reordered(d.network.roads());
  if (fs::exists(dir / "imputed.csv")) {
    std::ifstream in(dir / "imputed.csv");
    read_imputed_csv(in, panel);
  }
  bool missing = false;
  for (std::size_t r = 0; r < panel.road_count() && !missing; ++r)
    for (std::size_t t = 0; t < panel.length(); ++t)
      if (panel.missing(r, t)) {
        missing = true;
        break;
      }
  if (missing) {
    const auto flags = panel.imputed;
    panel = fill_missing(panel);
    for (std::size_t r = 0; r < panel.road_count(); ++r)
      for (std::size_t t = 0; t < panel.length(); ++t)
        if (flags[r][t]) panel.imputed[r][t] = true;
  }
  panel.unit = unit;
  d.panel = std::move(panel);
  return d;
}

void save_dataset(const Dataset& d, const fs::path& dir) {
  fs::create_directories(dir);
  write_speed_csv(d.panel, dir / "speeds.csv");
  std::ostringstream imp, graph, coords;
  write_imputed_csv(d.panel, imp);
  write_text(dir / "imputed.csv", imp.str());
  write_graph_csv(d.network, graph);
  write_text(dir / "graph.csv", graph.str());
  write_coords_csv(d.network, coords);
  write_text(dir / "coords.csv", coords.str());
  write_text(dir / "dataset.json", nlohmann::json{{"name", d.name}, {"unit", d.panel.unit}}.dump(2) + "\n");
}

Manifest::Manifest(std::string command, std::vector<std::string> argv, std::uint64_t seed)
    : command_(std::move(command)), argv_(std::move(argv)), seed_(seed) {}

void Manifest::input(const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file() && e.path().filename() != "run_manifest.json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) inputs_[f.string()] = file_sha256(f);
  } else {
    inputs_[path.string()] = file_sha256(path);
  }
}

void Manifest::output(const fs::path& path) { outputs_[path.filename().string()] = file_sha256(path); }

void Manifest::write(const fs::path& dir) const {
  nlohmann::json j = {{"tool", "attnlab"},
                      {"version", ATTNLAB_VERSION},
                      {"command", command_},
                      {"argv", argv_},
                      {"seed", seed_},
                      {"config", config_},
                      {"config_hash", sha256_hex(config_.dump())},
                      {"inputs", inputs_},
                      {"outputs", outputs_}};
  write_text(dir / "run_manifest.json", j.dump(2) + "\n");
}

std::string histogram_svg(const std::vector<double>& edges, const std::vector<std::size_t>& before,
                          const std::vector<std::size_t>& after, const std::string& unit) {
  const double W = 640, H = 360, left = 56, right = 16, top = 28, bottom = 48;
  const double pw = W - left - right, ph = H - top - bottom;
  std::size_t peak = 1;
  for (auto c : before) peak = std::max(peak, c);
  for (auto c : after) peak = std::max(peak, c);
  const std::size_t bins = before.size();
  const double bw = bins ? pw / static_cast<double>(bins) : pw;

  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\" "
      "font-family=\"sans-serif\" font-size=\"11\">\n"
      "<rect width=\"{0}\" height=\"{1}\" fill=\"white\"/>\n",
      W, H);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", left, top + ph, left + pw);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", left, top, top + ph);
  for (std::size_t b = 0; b < bins; ++b) {
    const double x = left + bw * static_cast<double>(b);
    const double hb = ph * static_cast<double>(before[b]) / static_cast<double>(peak);
    const double ha = ph * static_cast<double>(after[b]) / static_cast<double>(peak);
    s += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"#9e9e9e\"/>\n",
                     x + 1, top + ph - hb, bw / 2 - 1, hb);
    s += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"#1f77b4\"/>\n",
                     x + bw / 2, top + ph - ha, bw / 2 - 1, ha);
  }
  for (std::size_t b = 0; b < edges.size(); b += std::max<std::size_t>(1, edges.size() / 5)) {
    const double x = left + bw * static_cast<double>(b);
    s += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">{:.2f}</text>\n", x, top + ph + 14,
                     edges[b]);
  }
  s += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">absolute error ({})</text>\n",
                   left + pw / 2, H - 10, unit);
  s += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\">{}</text>\n", left - 4, top + 4, peak);
  s += fmt::format("<rect x=\"{0:.2f}\" y=\"8\" width=\"10\" height=\"10\" fill=\"#9e9e9e\"/>"
                   "<text x=\"{1:.2f}\" y=\"17\">before</text>\n",
                   W - 150, W - 136);
  s += fmt::format("<rect x=\"{0:.2f}\" y=\"8\" width=\"10\" height=\"10\" fill=\"#1f77b4\"/>"
                   "<text x=\"{1:.2f}\" y=\"17\">after</text>\n",
                   W - 80, W - 66);
  s += "</svg>\n";
  return s;
}

}  // namespace cli
