#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "odics/error.hpp"

namespace odics {

struct ReportRow {
  std::string name;
  std::filesystem::path dir;
  std::vector<std::string> domains;
  std::vector<double> mean;  // per domain, percent
  std::vector<double> stdev;
  double mean_miou = 0.0;
  double mean_miou_std = 0.0;
  std::size_t seeds = 0;
  std::vector<std::vector<double>> transfer;  // seed-mean, fractions; empty in mixed mode
};

struct ReportInput {
  std::vector<ReportRow> rows;
  std::vector<std::string> missing;  // cell directories without a usable record
};

inline ReportRow row_from_record(const nlohmann::json& j, const std::filesystem::path& dir) {
  ReportRow r;
  r.dir = dir;
  r.name = j.at("config").at("name").get<std::string>();
  r.domains = j.at("domains").get<std::vector<std::string>>();
  const auto& s = j.at("summary");
  for (const auto& d : r.domains) {
    r.mean.push_back(100.0 * s.at("final_miou_mean").at(d).get<double>());
    r.stdev.push_back(100.0 * s.at("final_miou_std").at(d).get<double>());
  }
  r.mean_miou = 100.0 * s.at("mean_miou").get<double>();
  r.mean_miou_std = 100.0 * s.at("mean_miou_std").get<double>();
  r.seeds = j.at("runs").size();
  if (s.contains("transfer_matrix_mean")) r.transfer = s.at("transfer_matrix_mean").get<std::vector<std::vector<double>>>();
  return r;
}

/// Collects record.json files below run_dir. Directories holding an
/// error.txt or an unreadable record are listed as missing.
inline ReportInput collect_records(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(run_dir)) throw ConfigError("not a directory: " + run_dir.string());
  std::vector<fs::path> dirs{run_dir};
  for (const auto& e : fs::recursive_directory_iterator(run_dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());

  ReportInput in;
  for (const auto& d : dirs) {
    const auto rec = d / "record.json";
    if (fs::exists(rec)) {
      try {
        std::ifstream f(rec);
        in.rows.push_back(row_from_record(nlohmann::json::parse(f), d));
      } catch (const std::exception& e) {
        in.missing.push_back(fs::relative(d, run_dir).string() + " (unreadable record: " + e.what() + ")");
      }
    } else if (fs::exists(d / "error.txt")) {
      std::ifstream f(d / "error.txt");
      std::string msg;
      std::getline(f, msg);
      in.missing.push_back(fs::relative(d, run_dir).string() + " (" + msg + ")");
    }
  }
  return in;
}

inline std::string fmt_pm(double m, double s) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << m << " ± " << s;
  return os.str();
}

/// Markdown table: one row per record, a column per domain and a mean
/// column. With two or more records a delta column against the first is added.
inline std::string render_table(const ReportInput& in) {
  std::ostringstream os;
  if (in.rows.empty()) {
    os << "No records found.\n";
  } else {
    const auto& domains = in.rows.front().domains;
    const bool delta = in.rows.size() >= 2;
    os << "| method |";
    for (const auto& d : domains) os << ' ' << d << " |";
    os << " mean |" << (delta ? " Δ mean |" : "") << " seeds |\n|---|";
    for (std::size_t i = 0; i < domains.size(); ++i) os << "---|";
    os << "---|" << (delta ? "---|" : "") << "---|\n";
    for (const auto& r : in.rows) {
      os << "| " << r.name << " |";
      if (r.domains != domains) {
        for (std::size_t i = 0; i < domains.size(); ++i) os << " (order differs) |";
      } else {
        for (std::size_t i = 0; i < domains.size(); ++i) os << ' ' << fmt_pm(r.mean[i], r.stdev[i]) << " |";
      }
      os << ' ' << fmt_pm(r.mean_miou, r.mean_miou_std) << " |";
      if (delta) {
        std::ostringstream d;
        d << std::showpos << std::fixed << std::setprecision(1) << r.mean_miou - in.rows.front().mean_miou;
        os << ' ' << d.str() << " |";
      }
      os << ' ' << r.seeds << " |\n";
    }
  }
  if (!in.missing.empty()) {
    os << "\nMissing records:\n";
    for (const auto& m : in.missing) os << "- " << m << '\n';
  }
  return os.str();
}

inline std::string render_csv(const ReportInput& in) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  os << "name,domain_order";
  std::size_t n = in.rows.empty() ? 0 : in.rows.front().domains.size();
  for (std::size_t i = 0; i < n; ++i) os << ",d" << i << "_mean,d" << i << "_std";
  os << ",mean,mean_std,seeds\n";
  for (const auto& r : in.rows) {
    os << r.name << ',';
    for (std::size_t i = 0; i < r.domains.size(); ++i) os << (i ? "-" : "") << r.domains[i];
    for (std::size_t i = 0; i < r.mean.size(); ++i) os << ',' << r.mean[i] << ',' << r.stdev[i];
    os << ',' << r.mean_miou << ',' << r.mean_miou_std << ',' << r.seeds << '\n';
  }
  return os.str();
}

/// Gray level for a value in [0,1]; strictly increasing.
inline int heat_level(double v) { return static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

/// Binary PGM, one cell per matrix entry scaled up by `cell` pixels.
inline std::string heatmap_pgm(const std::vector<std::vector<double>>& m, std::size_t cell = 16) {
  const std::size_t n = m.size();
  std::string out = "P5\n" + std::to_string(n * cell) + " " + std::to_string(n * cell) + "\n255\n";
  for (std::size_t y = 0; y < n * cell; ++y)
    for (std::size_t x = 0; x < n * cell; ++x) out.push_back(static_cast<char>(heat_level(m[y / cell][x / cell])));
  return out;
}

inline std::string heatmap_svg(const std::vector<std::vector<double>>& m, const std::vector<std::string>& labels,
                               const std::string& title) {
  const std::size_t n = m.size();
  const int cell = 60, margin = 70;
  const int size = margin + static_cast<int>(n) * cell + 10;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size + 20 << "\">\n";
  os << "<text x=\"" << margin << "\" y=\"16\" font-size=\"13\" font-family=\"sans-serif\">" << title << "</text>\n";
  for (std::size_t i = 0; i < n; ++i) {
    const int y = 30 + margin - 20 + static_cast<int>(i) * cell;
    os << "<text x=\"4\" y=\"" << y + cell / 2 << "\" font-size=\"11\" font-family=\"sans-serif\">" << labels[i]
       << "</text>\n";
    os << "<text x=\"" << margin + static_cast<int>(i) * cell + 8 << "\" y=\"" << 30 + margin - 26
       << "\" font-size=\"11\" font-family=\"sans-serif\">" << labels[i] << "</text>\n";
    for (std::size_t j = 0; j < n; ++j) {
      const int g = heat_level(m[i][j]);
      const int x = margin + static_cast<int>(j) * cell;
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb("
         << g << ',' << g << ',' << g << ")\"/>\n";
      os << "<text x=\"" << x + 12 << "\" y=\"" << y + cell / 2 + 4 << "\" font-size=\"12\" font-family=\"sans-serif\" fill=\""
         << (g > 127 ? "black" : "white") << "\">" << std::fixed << std::setprecision(1) << 100.0 * m[i][j]
         << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

/// Writes report.md, report.csv and one heatmap pair per sequential record.
inline ReportInput write_report(const std::filesystem::path& run_dir, const std::filesystem::path& out_dir) {
  auto in = collect_records(run_dir);
  std::filesystem::create_directories(out_dir);
  auto write = [&](const std::filesystem::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + p.string());
    f << s;
  };
  write(out_dir / "report.md", render_table(in));
  write(out_dir / "report.csv", render_csv(in));
  for (const auto& r : in.rows) {
    if (r.transfer.empty()) continue;
    write(out_dir / ("heatmap_" + r.name + ".pgm"), heatmap_pgm(r.transfer));
    write(out_dir / ("heatmap_" + r.name + ".svg"), heatmap_svg(r.transfer, r.domains, r.name));
  }
  return in;
}

}  // namespace odics
