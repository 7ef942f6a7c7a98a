#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "r3l/harness.hpp"

namespace r3l {

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::vector<CsvRow> csv_rows(const Run& run) {
  const RunConfig& c = run.config();
  std::vector<CsvRow> rows;
  rows.reserve(run.metrics().size());
  for (const MetricRow& m : run.metrics())
    rows.push_back({env::to_string(c.task), to_string(c.variant), c.seed, m.epoch, m.env_steps, m.metric, m.value});
  return rows;
}

void write_metrics_csv(std::ostream& os, const std::vector<CsvRow>& rows) {
  os << kMetricsHeader << '\n';
  for (const CsvRow& r : rows)
    os << r.task << ',' << r.variant << ',' << r.seed << ',' << r.epoch << ',' << r.env_steps << ',' << r.metric << ','
       << format_number(r.value) << '\n';
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<CsvRow>& rows) {
  std::ostringstream os;
  write_metrics_csv(os, rows);
  write_text_file(path, os.str());
}

std::vector<CsvRow> read_metrics_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) throw std::runtime_error("not a metrics CSV: bad header");
  std::vector<CsvRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 7) throw std::runtime_error("metrics CSV row with " + std::to_string(f.size()) + " fields");
    try {
      rows.push_back({f[0], f[1], std::stoull(f[2]), std::stoll(f[3]), std::stoll(f[4]), f[5], std::stod(f[6])});
    } catch (const std::logic_error&) {
      throw std::runtime_error("malformed metrics CSV row: " + line);
    }
  }
  return rows;
}

std::vector<CsvRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_metrics_csv(is);
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

constexpr const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

}  // namespace

std::string learning_curve_svg(const std::vector<CsvRow>& rows, const std::string& metric, const std::string& title) {
  // seed -> (env steps -> value)
  std::map<std::uint64_t, std::map<std::int64_t, double>> curves;
  for (const CsvRow& r : rows)
    if (r.metric == metric && std::isfinite(r.value)) curves[r.seed][r.env_steps] = r.value;

  constexpr double W = 640, H = 400, L = 70, R = 20, T = 40, B = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool any = false;
  for (const auto& [seed, c] : curves)
    for (const auto& [x, y] : c) {
      if (!any) {
        x0 = x1 = static_cast<double>(x);
        y0 = y1 = y;
        any = true;
      }
      x0 = std::min(x0, static_cast<double>(x));
      x1 = std::max(x1, static_cast<double>(x));
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
  };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
      << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
      << xml_escape(title) << "</text>\n"
      << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4, fy = y0 + (y1 - y0) * i / 4;
    svg << "<text x=\"" << px(fx) << "\" y=\"" << H - B + 18
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << num(fx) << "</text>\n"
        << "<text x=\"" << L - 6 << "\" y=\"" << py(fy) + 4
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << num(fy) << "</text>\n";
  }
  svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">env steps</text>\n"
      << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
      << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(metric)
      << "</text>\n";

  // mean band over the steps that every seed reports
  if (curves.size() > 1) {
    std::map<std::int64_t, std::vector<double>> at;
    for (const auto& [seed, c] : curves)
      for (const auto& [x, y] : c) at[x].push_back(y);
    std::vector<std::pair<double, std::pair<double, double>>> band;
    std::vector<std::pair<double, double>> mean;
    for (const auto& [x, ys] : at) {
      if (ys.size() != curves.size()) continue;
      double m = 0, v = 0;
      for (double y : ys) m += y;
      m /= static_cast<double>(ys.size());
      for (double y : ys) v += (y - m) * (y - m);
      const double sd = std::sqrt(v / static_cast<double>(ys.size()));
      band.push_back({px(static_cast<double>(x)), {py(m - sd), py(m + sd)}});
      mean.push_back({px(static_cast<double>(x)), py(m)});
    }
    if (!band.empty()) {
      svg << "<polygon fill=\"#888888\" fill-opacity=\"0.25\" stroke=\"none\" points=\"";
      for (const auto& b : band) svg << b.first << ',' << b.second.second << ' ';
      for (auto it = band.rbegin(); it != band.rend(); ++it) svg << it->first << ',' << it->second.first << ' ';
      svg << "\"/>\n<polyline fill=\"none\" stroke=\"black\" stroke-width=\"2\" points=\"";
      for (const auto& m : mean) svg << m.first << ',' << m.second << ' ';
      svg << "\"/>\n";
    }
  }
  std::size_t i = 0;
  for (const auto& [seed, c] : curves) {
    const char* colour = kPalette[i++ % std::size(kPalette)];
    svg << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1\" points=\"";
    for (const auto& [x, y] : c) svg << px(static_cast<double>(x)) << ',' << py(y) << ' ';
    svg << "\"/>\n<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * static_cast<double>(i)
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << colour << "\">seed "
        << seed << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace r3l
