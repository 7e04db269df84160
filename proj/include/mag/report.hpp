#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mag/bench.hpp"
#include "mag/jsonl.hpp"
#include "mag/pipeline.hpp"

namespace mag {

/// Minimal SVG line chart; one polyline per series.
inline std::string svg_line_chart(const std::string& title, const std::map<std::string, std::vector<std::pair<double, double>>>& series,
                                  int width = 640, int height = 360) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& [name, pts] : series) {
    for (const auto& [x, y] : pts) {
      if (!std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double L = 60, R = 20, T = 30, B = 40;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (width - L - R); };
  auto py = [&](double y) { return height - B - (y - y0) / (y1 - y0) * (height - T - B); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream s;
  s << std::setprecision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << width / 2 << "\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" << title
    << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << height - B << "\" x2=\"" << width - R << "\" y2=\"" << height - B
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << height - B << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << L - 5 << "\" y=\"" << T + 5 << "\" text-anchor=\"end\" font-size=\"10\">" << y1 << "</text>\n";
  s << "<text x=\"" << L - 5 << "\" y=\"" << height - B << "\" text-anchor=\"end\" font-size=\"10\">" << y0 << "</text>\n";
  s << "<text x=\"" << L << "\" y=\"" << height - B + 15 << "\" font-size=\"10\">" << x0 << "</text>\n";
  s << "<text x=\"" << width - R << "\" y=\"" << height - B + 15 << "\" text-anchor=\"end\" font-size=\"10\">" << x1
    << "</text>\n";
  int k = 0;
  for (const auto& [name, pts] : series) {
    const char* color = colors[k % 6];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) {
      if (std::isfinite(y)) s << px(x) << ',' << py(y) << ' ';
    }
    s << "\"/>\n";
    s << "<text x=\"" << width - R - 5 << "\" y=\"" << T + 14 * (k + 1) << "\" text-anchor=\"end\" font-size=\"11\" fill=\""
      << color << "\">" << name << "</text>\n";
    ++k;
  }
  s << "</svg>\n";
  return s.str();
}

/// Trailing moving average so noisy per-step losses stay readable.
inline std::vector<std::pair<double, double>> smooth(const std::vector<std::pair<double, double>>& pts, std::size_t window) {
  std::vector<std::pair<double, double>> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    acc += pts[i].second;
    if (i >= window) acc -= pts[i - window].second;
    out.emplace_back(pts[i].first, acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

struct RunSummary {
  std::vector<nlohmann::json> reconstruction;  // sorted by b
  std::vector<EvalReport> bench;
  std::vector<fs::path> metric_files;
};

inline bool name_has(const fs::path& p, const std::string& needle) {
  return p.filename().string().find(needle) != std::string::npos;
}

inline RunSummary collect_run(const fs::path& dir) {
  RunSummary s;
  if (!fs::exists(dir / "manifest.json")) throw DependencyError("no manifest.json in " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const std::string ext = f.extension().string();
    if (ext == ".json" && name_has(f, "memory_eval")) {
      s.reconstruction.push_back(read_json(f));
    } else if (ext == ".json" && name_has(f, "report_")) {
      s.bench.push_back(EvalReport::from_json(read_json(f)));
    } else if (ext == ".jsonl") {
      s.metric_files.push_back(f);
    }
  }
  std::sort(s.reconstruction.begin(), s.reconstruction.end(),
            [](const nlohmann::json& a, const nlohmann::json& b) { return a.at("b").get<int>() < b.at("b").get<int>(); });
  return s;
}

inline std::string fixed(double v, int prec = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(prec) << v;
  return s.str();
}

/// Renders reconstruction (per block size) and bench tables from stored JSON,
/// writes loss-curve SVGs next to them, and returns the text. With a second
/// run directory, deltas (this - other) are appended.
inline std::string report(const fs::path& dir, const std::optional<fs::path>& other = std::nullopt) {
  const RunSummary run = collect_run(dir);
  std::ostringstream out;
  std::vector<std::string> warnings;
  out << "Run: " << dir.string() << "\n\n";

  if (!run.reconstruction.empty()) {
    out << "Reconstruction from retained cache (per block size)\n";
    out << "b   PSNR      SSIM     MSE(x100)  clips\n";
    for (const auto& r : run.reconstruction) {
      out << std::left << std::setw(4) << r.at("b").get<int>() << std::setw(10) << fixed(r.at("psnr").get<double>(), 3)
          << std::setw(9) << fixed(r.at("ssim").get<double>()) << std::setw(11) << fixed(r.at("mse_x100").get<double>())
          << r.at("n_clips").get<int>() << '\n';
    }
    out << '\n';
  } else {
    warnings.push_back("no reconstruction metrics found");
  }

  if (run.bench.size() >= 2) {
    out << "Historical consistency bench (best-match)\n" << compare(run.bench).text << '\n';
  } else {
    warnings.push_back("no bench reports found");
  }

  if (run.metric_files.empty()) warnings.push_back("no training metrics found");
  for (const auto& f : run.metric_files) {
    std::map<std::string, std::vector<std::pair<double, double>>> series;
    try {
      for (const auto& r : read_jsonl(f)) series[r.loss_name].emplace_back(static_cast<double>(r.step), r.value);
    } catch (const std::exception& e) {
      warnings.push_back("unreadable metrics " + f.filename().string() + ": " + e.what());
      continue;
    }
    for (auto& [name, pts] : series) pts = smooth(pts, std::max<std::size_t>(1, pts.size() / 50));
    fs::path svg = f;
    svg.replace_extension(".svg");
    write_text(svg, svg_line_chart(f.stem().string(), series));
    out << "Plot: " << svg.filename().string() << '\n';
  }

  if (other) {
    const RunSummary base = collect_run(*other);
    out << "\nDeltas against " << other->string() << " (this - other)\n";
    for (const auto& r : run.reconstruction) {
      for (const auto& o : base.reconstruction) {
        if (o.at("b") == r.at("b")) {
          out << "reconstruction b=" << r.at("b").get<int>()
              << ": dPSNR=" << fixed(r.at("psnr").get<double>() - o.at("psnr").get<double>(), 3)
              << " dMSE(x100)=" << fixed(r.at("mse_x100").get<double>() - o.at("mse_x100").get<double>()) << '\n';
        }
      }
    }
    for (const auto& r : run.bench) {
      for (const auto& o : base.bench) {
        if (o.name == r.name && o.mode == r.mode) {
          out << "bench " << r.name << " " << to_string(r.mode) << ": dPSNR=" << fixed(r.psnr - o.psnr, 3)
              << " dSSIM=" << fixed(r.ssim - o.ssim) << " dMSE=" << fixed(r.mse - o.mse, 6) << '\n';
        }
      }
    }
  }

  for (const auto& w : warnings) out << "warning: " << w << '\n';
  write_text(dir / "report.txt", out.str());
  return out.str();
}

}  // namespace mag
