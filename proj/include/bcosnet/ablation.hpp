#pragma once

#include "bcosnet/config.hpp"
#include "bcosnet/errors.hpp"
#include "bcosnet/run.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace bcosnet {

struct AblationRow {
  std::string label;
  std::vector<std::string> overrides;  // key=value
};

struct AblationGrid {
  std::string title;
  std::vector<AblationRow> rows;
};

/// Cartesian product of `key=v1|v2|...` axes. Row labels list the varying
/// assignments.
inline AblationGrid expand_grid(const std::vector<std::string>& axes, std::string title = "grid") {
  AblationGrid grid{std::move(title), {}};
  if (axes.empty()) throw ConfigError("ablation grid is empty");
  std::vector<std::pair<std::string, std::vector<std::string>>> parsed;
  for (const auto& a : axes) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("grid axis '" + a + "': expected key=v1|v2|...");
    const auto key = detail::trim(a.substr(0, eq));
    if (find_key(key) == nullptr) throw ConfigError("grid axis uses unknown key '" + key + "'");
    auto values = detail::split_list(a.substr(eq + 1), '|');
    if (values.empty()) throw ConfigError("grid axis '" + key + "' has no values");
    parsed.emplace_back(key, std::move(values));
  }
  grid.rows.push_back({});
  for (const auto& [key, values] : parsed) {
    std::vector<AblationRow> next;
    for (const auto& row : grid.rows) {
      for (const auto& v : values) {
        AblationRow r = row;
        r.overrides.push_back(key + "=" + v);
        if (values.size() > 1) r.label += (r.label.empty() ? "" : ", ") + key + "=" + v;
        next.push_back(std::move(r));
      }
    }
    grid.rows = std::move(next);
  }
  for (auto& r : grid.rows)
    if (r.label.empty()) r.label = "base";
  return grid;
}

/// Row layouts of the four published ablation tables.
inline AblationGrid ablation_preset(int table) {
  switch (table) {
    case 2:
      return {"branch combinations",
              {{"local-global", {"branches=local,global"}},
               {"local-global-OvR", {"branches=local,global,ovr"}},
               {"local-global-gcp", {"branches=local,global,gcp"}},
               {"local-global-gcp-OvR", {"branches=local,global,gcp,ovr"}}}};
    case 3:
      return {"GeM pooling", {{"w/o-GeM", {"gem.enabled=false"}}, {"w-GeM", {"gem.enabled=true"}}}};
    case 4:
      return {"one-vs-rest splits", {{"f6+f4+f2", {"ovr_splits=6,4,2"}}, {"f6", {"ovr_splits=6"}}}};
    case 5:
      return {"GCDropout and BDB",
              {{"BC-OSNet", {"bdb.enabled=false", "gcd.enabled=false"}},
               {"+GCDropout+BDB", {"bdb.enabled=true", "gcd.enabled=true"}}}};
    default:
      throw ConfigError("no ablation preset for table " + std::to_string(table) + " (expected 2, 3, 4 or 5)");
  }
}

struct AblationCell {
  std::string label;
  std::vector<std::string> overrides;
  bool ok = false;
  std::string error;
  double mAP = 0.0;
  double rank1 = 0.0;
  std::string config_hash;
};

struct AblationReport {
  std::string title;
  std::vector<AblationCell> cells;

  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& c : cells) n += c.ok ? 0 : 1;
    return n;
  }

  std::string markdown() const {
    std::ostringstream os;
    os << "### " << title << "\n\n| Variant | mAP | rank-1 | status |\n|---|---|---|---|\n";
    char buf[64];
    for (const auto& c : cells) {
      os << "| " << c.label << " | ";
      if (c.ok) {
        std::snprintf(buf, sizeof(buf), "%.1f | %.1f | ok |", 100.0 * c.mAP, 100.0 * c.rank1);
        os << buf;
      } else {
        os << "- | - | failed: " << c.error << " |";
      }
      os << "\n";
    }
    return os.str();
  }

  std::string csv() const {
    std::ostringstream os;
    os << "variant,overrides,mAP,rank1,status,config_hash\n";
    for (const auto& c : cells) {
      std::string ov;
      for (const auto& o : c.overrides) ov += (ov.empty() ? "" : ";") + o;
      os << '"' << c.label << "\",\"" << ov << "\",";
      if (c.ok) {
        os << c.mAP << ',' << c.rank1 << ",ok," << c.config_hash;
      } else {
        std::string err = c.error;
        for (auto& ch : err)
          if (ch == '"' || ch == '\n') ch = '\'';
        os << ",,\"failed: " << err << "\",";
      }
      os << '\n';
    }
    return os.str();
  }
};

using CellRunner = std::function<RetrievalResult(const RunConfig&, const std::filesystem::path&)>;

/// Runs every row sequentially; a failing cell is recorded and the remaining
/// cells still run. Writes ablation.md and ablation.csv into `out_dir`.
inline AblationReport run_ablation(const RunConfig& base, const AblationGrid& grid,
                                   const std::filesystem::path& out_dir, CellRunner runner = {}) {
  if (grid.rows.empty()) throw ConfigError("ablation grid is empty");
  if (!runner) {
    runner = [](const RunConfig& cfg, const std::filesystem::path& dir) {
      return run_training(cfg, dir).metrics;
    };
  }
  std::filesystem::create_directories(out_dir);
  AblationReport report{grid.title, {}};
  for (std::size_t i = 0; i < grid.rows.size(); ++i) {
    const auto& row = grid.rows[i];
    AblationCell cell;
    cell.label = row.label;
    cell.overrides = row.overrides;
    try {
      RunConfig cfg = base;
      cfg.apply_overrides(row.overrides);
      cell.config_hash = cfg.hash();
      char name[32];
      std::snprintf(name, sizeof(name), "cell_%02zu", i);
      const auto r = runner(cfg, out_dir / name);
      cell.mAP = r.mAP;
      cell.rank1 = r.rank1;
      cell.ok = true;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
    report.cells.push_back(std::move(cell));
  }
  std::ofstream(out_dir / "ablation.md") << report.markdown();
  std::ofstream(out_dir / "ablation.csv") << report.csv();
  return report;
}

}  // namespace bcosnet
