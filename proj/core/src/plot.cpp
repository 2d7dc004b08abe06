#include "tcpdiff/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "tcpdiff/error.hpp"
#include "tcpdiff/io.hpp"

namespace tcpdiff::plot {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

}  // namespace

std::string line_chart(const std::vector<Series>& series, const ChartOptions& o) {
  const double left = 70, right = 150, top = 40, bottom = 50;
  const double pw = o.width - left - right, ph = o.height - top - bottom;
  auto tx = [&](double v) { return o.log_x ? std::log10(v) : v; };
  auto ty = [&](double v) { return o.log_y ? std::log10(v) : v; };
  auto usable = [&](double x, double y) {
    return std::isfinite(x) && std::isfinite(y) && (!o.log_x || x > 0) && (!o.log_y || y > 0);
  };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!usable(s.x[i], s.y[i])) continue;
      x0 = std::min(x0, tx(s.x[i]));
      x1 = std::max(x1, tx(s.x[i]));
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double v) { return left + (tx(v) - x0) / (x1 - x0) * pw; };
  auto py = [&](double v) { return top + ph - (ty(v) - y0) / (y1 - y0) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << o.width << "\" height=\"" << o.height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(o.title)
      << "</text>\n"
      << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fx = x0 + (x1 - x0) * k / 4.0, fy = y0 + (y1 - y0) * k / 4.0;
    const double sx = left + pw * k / 4.0, sy = top + ph - ph * k / 4.0;
    svg << "<text x=\"" << sx << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">"
        << num(o.log_x ? std::pow(10.0, fx) : fx) << "</text>\n"
        << "<text x=\"" << left - 6 << "\" y=\"" << sy + 4 << "\" text-anchor=\"end\">"
        << num(o.log_y ? std::pow(10.0, fy) : fy) << "</text>\n"
        << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << sy << "\" y2=\"" << sy
        << "\" stroke=\"#ddd\"/>\n";
  }
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << o.height - 12 << "\" text-anchor=\"middle\">"
      << escape(o.x_label) << "</text>\n"
      << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(o.y_label) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!usable(s.x[i], s.y[i])) continue;
      pts += num(px(s.x[i])) + "," + num(py(s.y[i])) + " ";
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"" << pts << "\"/>\n";
    const double ly = top + 14 + 16.0 * static_cast<double>(k);
    svg << "<line x1=\"" << left + pw + 10 << "\" x2=\"" << left + pw + 30 << "\" y1=\"" << ly << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << left + pw + 34 << "\" y=\"" << ly + 4 << "\">" << escape(s.name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::istringstream in(io::read_text(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    rows.push_back(std::move(fields));
  }
  if (rows.empty()) throw CorruptionError(path.string() + " is empty");
  return rows;
}

namespace {

std::size_t column(const std::vector<std::string>& header, const std::string& name, const fs::path& path) {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw CorruptionError(path.string() + " lacks column " + name);
  return static_cast<std::size_t>(it - header.begin());
}

double to_number(const std::string& s) {
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

std::vector<fs::path> render_directory(const fs::path& input, const fs::path& out) {
  io::ensure_writable_dir(out);
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::vector<Series>& series, const ChartOptions& o) {
    const fs::path p = out / name;
    io::write_text(p, line_chart(series, o));
    written.push_back(p);
  };

  if (fs::exists(input / "metrics.csv")) {
    const fs::path path = input / "metrics.csv";
    const auto rows = read_csv(path);
    const auto& h = rows.front();
    const auto cm = column(h, "metric", path), ct = column(h, "threshold", path), cl = column(h, "lead_time", path),
               cmem = column(h, "member", path), cv = column(h, "value", path);
    std::map<std::string, Series> ets, mae;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      if (row.size() <= cv || row[cmem] != "mean" || row[cl] == "all") continue;
      if (row[cm] == "ETS") {
        auto& s = ets["ETS-" + row[ct]];
        s.name = "ETS-" + row[ct];
        s.x.push_back(to_number(row[cl]));
        s.y.push_back(to_number(row[cv]));
      } else if (row[cm] == "TP_MAE") {
        auto& s = mae["TP_MAE"];
        s.name = "TP_MAE";
        s.x.push_back(to_number(row[cl]));
        s.y.push_back(to_number(row[cv]));
      }
    }
    std::vector<Series> es;
    for (auto& [k, s] : ets) es.push_back(s);
    std::vector<Series> ms;
    for (auto& [k, s] : mae) ms.push_back(s);
    emit("ets_by_lead.svg", es, {"ETS by lead time (member mean)", "lead time (h)", "ETS"});
    emit("tp_mae_by_lead.svg", ms, {"TP_MAE by lead time (member mean)", "lead time (h)", "mm/3hr"});
  }
  if (fs::exists(input / "histogram.csv")) {
    const fs::path path = input / "histogram.csv";
    const auto rows = read_csv(path);
    const auto& h = rows.front();
    const auto cs = column(h, "source", path), clo = column(h, "bin_lower", path), chi = column(h, "bin_upper", path),
               cc = column(h, "count", path);
    std::map<std::string, Series> by;
    std::vector<std::string> order;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      if (!by.count(row[cs])) order.push_back(row[cs]);
      auto& s = by[row[cs]];
      s.name = row[cs];
      s.x.push_back(0.5 * (to_number(row[clo]) + to_number(row[chi])));
      s.y.push_back(to_number(row[cc]));
    }
    std::vector<Series> series;
    for (const auto& k : order) series.push_back(by[k]);
    ChartOptions o{"Rainfall frequency", "rainfall (mm/3hr)", "cell count"};
    o.log_y = true;
    emit("histogram.svg", series, o);
  }
  if (fs::exists(input / "rapsd.csv")) {
    const fs::path path = input / "rapsd.csv";
    const auto rows = read_csv(path);
    const auto& h = rows.front();
    const auto cs = column(h, "source", path), cl = column(h, "lead_time", path), ck = column(h, "wavenumber", path),
               cp = column(h, "power", path);
    std::map<std::string, std::map<std::string, Series>> by_lead;
    std::vector<std::string> leads;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& row = rows[r];
      if (!by_lead.count(row[cl])) leads.push_back(row[cl]);
      auto& s = by_lead[row[cl]][row[cs]];
      s.name = row[cs];
      s.x.push_back(to_number(row[ck]));
      s.y.push_back(to_number(row[cp]));
    }
    for (const auto& lead : leads) {
      std::vector<Series> series;
      for (auto& [k, s] : by_lead[lead]) series.push_back(s);
      ChartOptions o{"RAPSD, lead " + lead + " h", "wavenumber (cycles per domain)", "power"};
      o.log_x = o.log_y = true;
      emit("rapsd_lead" + lead + ".svg", series, o);
    }
  }
  if (fs::exists(input / "loss.csv")) {
    const fs::path path = input / "loss.csv";
    const auto rows = read_csv(path);
    const auto cs = column(rows.front(), "step", path), cl = column(rows.front(), "loss", path);
    Series s{"loss", {}, {}};
    for (std::size_t r = 1; r < rows.size(); ++r) {
      s.x.push_back(to_number(rows[r][cs]));
      s.y.push_back(to_number(rows[r][cl]));
    }
    ChartOptions o{"Training loss", "step", "MSE"};
    o.log_y = true;
    emit("loss.svg", {s}, o);
  }
  if (written.empty()) throw IoError("no metrics.csv, histogram.csv, rapsd.csv or loss.csv found in " + input.string());
  return written;
}

}  // namespace tcpdiff::plot
