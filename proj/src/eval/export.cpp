#include "ctflab/eval/export.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "ctflab/binary_io.hpp"
#include "ctflab/error.hpp"

namespace ctflab::eval {

namespace {

std::string csv_cell(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

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

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

constexpr double kWidth = 800, kHeight = 480, kLeft = 70, kRight = 160, kTop = 40, kBottom = 60;

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const {
    return kLeft + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * (kWidth - kLeft - kRight);
  }
  double py(double y) const {
    return kHeight - kBottom - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) * (kHeight - kTop - kBottom);
  }
};

void header(std::ostringstream& os, const std::string& title) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"16\">" << xml_escape(title) << "</text>\n";
}

void axes(std::ostringstream& os, const Frame& f, bool x_ticks) {
  const double xa = kLeft, xb = kWidth - kRight, ya = kTop, yb = kHeight - kBottom;
  os << "<line x1=\"" << xa << "\" y1=\"" << yb << "\" x2=\"" << xb << "\" y2=\"" << yb
     << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << xa << "\" y1=\"" << ya << "\" x2=\"" << xa << "\" y2=\"" << yb
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = f.y0 + (f.y1 - f.y0) * i / 5.0;
    os << "<text x=\"" << xa - 6 << "\" y=\"" << f.py(v) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(v) << "</text>\n";
    if (x_ticks) {
      const double u = f.x0 + (f.x1 - f.x0) * i / 5.0;
      os << "<text x=\"" << f.px(u) << "\" y=\"" << yb + 16
         << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(u, 6)
         << "</text>\n";
    }
  }
}

void legend(std::ostringstream& os, const std::vector<Series>& series) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double y = kTop + 10 + 20.0 * static_cast<double>(i);
    os << "<rect x=\"" << kWidth - kRight + 15 << "\" y=\"" << y - 9 << "\" width=\"12\" height=\"12\" fill=\""
       << kPalette[i % 6] << "\"/>\n"
       << "<text x=\"" << kWidth - kRight + 32 << "\" y=\"" << y + 1
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(series[i].name) << "</text>\n";
  }
}

}  // namespace

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header.size()) throw Error("csv row has the wrong number of cells");
  rows.push_back(std::move(row));
}

std::string CsvTable::str() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += csv_cell(cells[i]);
    }
    out += '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out;
}

std::string csv_number(double v) { return binary_io::format_double(v); }

CsvTable to_csv(const PerImageGap& gap) {
  CsvTable t{{"image", "gap"}, {}};
  for (std::size_t i = 0; i < gap.gaps.size(); ++i) t.add_row({std::to_string(i), csv_number(gap.gaps[i])});
  return t;
}

CsvTable to_csv(const WeightDistanceTrace& trace) {
  CsvTable t;
  t.header = {"iter"};
  for (std::size_t p = 0; p < trace.intra.size(); ++p) {
    if (!trace.inter.empty()) t.header.push_back("inter_" + std::to_string(p));
    t.header.push_back("intra_" + std::to_string(p));
  }
  for (std::size_t k = 0; k < trace.iterations.size(); ++k) {
    std::vector<std::string> row{std::to_string(trace.iterations[k])};
    for (std::size_t p = 0; p < trace.intra.size(); ++p) {
      if (!trace.inter.empty()) row.push_back(csv_number(trace.inter[p].at(k)));
      row.push_back(csv_number(trace.intra[p].at(k)));
    }
    t.add_row(std::move(row));
  }
  return t;
}

CsvTable to_csv(const ConsistencyReport& report) {
  CsvTable t{{"estimator", "consistent", "inconsistent"}, {}};
  for (auto e : {Estimator::stable_sample, Estimator::single_sample, Estimator::accumulative}) {
    const auto& c = report.counts(e);
    t.add_row({std::string(estimator_name(e)), std::to_string(c.consistent), std::to_string(c.inconsistent)});
  }
  return t;
}

CsvTable windows_csv(const ConsistencyReport& report) {
  CsvTable t{{"end_iter", "oracle", "stable_sample", "single_sample", "accumulative"}, {}};
  for (const auto& w : report.windows) {
    t.add_row({std::to_string(w.end_iteration), std::to_string(w.oracle), std::to_string(w.stable_sample),
               std::to_string(w.single_sample), std::to_string(w.accumulative)});
  }
  return t;
}

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
  Frame f{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw Error("series '" + s.name + "' has mismatched x and y");
    for (double x : s.x) f.x0 = std::min(f.x0, x), f.x1 = std::max(f.x1, x);
    for (double y : s.y) f.y0 = std::min(f.y0, y), f.y1 = std::max(f.y1, y);
  }
  if (!std::isfinite(f.x0)) f = {0, 1, 0, 1};
  f.y0 = std::min(f.y0, 0.0);
  if (f.y1 <= f.y0) f.y1 = f.y0 + 1;
  std::ostringstream os;
  header(os, title);
  axes(os, f, true);
  os << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 18
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(x_label)
     << "</text>\n"
     << "<text x=\"18\" y=\"" << (kTop + kHeight - kBottom) / 2 << "\" transform=\"rotate(-90 18 "
     << (kTop + kHeight - kBottom) / 2 << ")\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"12\">" << xml_escape(y_label) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    os << "<polyline fill=\"none\" stroke=\"" << kPalette[i % 6] << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < series[i].x.size(); ++k)
      os << (k ? " " : "") << fmt(f.px(series[i].x[k]), 7) << ',' << fmt(f.py(series[i].y[k]), 7);
    os << "\"/>\n";
  }
  legend(os, series);
  os << "</svg>\n";
  return os.str();
}

std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& groups) {
  double top = 0.0;
  for (const auto& g : groups) {
    if (g.y.size() != categories.size()) throw Error("group '" + g.name + "' does not cover every category");
    for (double v : g.y) top = std::max(top, v);
  }
  const Frame f{0, static_cast<double>(categories.size()), 0, top > 0 ? top : 1};
  std::ostringstream os;
  header(os, title);
  axes(os, f, false);
  const double slot = (kWidth - kLeft - kRight) / std::max<double>(1, static_cast<double>(categories.size()));
  const double bar = slot * 0.8 / std::max<double>(1, static_cast<double>(groups.size()));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double x = kLeft + slot * static_cast<double>(c) + slot * 0.1;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const double y = f.py(groups[g].y[c]);
      os << "<rect x=\"" << fmt(x + bar * static_cast<double>(g), 7) << "\" y=\"" << fmt(y, 7) << "\" width=\""
         << fmt(bar, 7) << "\" height=\"" << fmt(kHeight - kBottom - y, 7) << "\" fill=\"" << kPalette[g % 6]
         << "\"/>\n";
    }
    os << "<text x=\"" << fmt(x + slot * 0.4, 7) << "\" y=\"" << kHeight - kBottom + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(categories[c])
       << "</text>\n";
  }
  legend(os, groups);
  os << "</svg>\n";
  return os.str();
}

std::string svg_trace_chart(const WeightDistanceTrace& trace) {
  std::vector<double> x(trace.iterations.begin(), trace.iterations.end());
  std::vector<Series> s;
  for (std::size_t p = 0; p < trace.intra.size(); ++p) {
    if (!trace.inter.empty()) s.push_back({"inter " + std::to_string(p), x, trace.inter[p]});
    s.push_back({"intra " + std::to_string(p), x, trace.intra[p]});
  }
  return svg_line_chart("Weight distances", "iteration", "l2 distance", s);
}

std::string svg_consistency_chart(const ConsistencyReport& report) {
  std::vector<std::string> cats;
  Series consistent{"consistent", {}, {}}, inconsistent{"inconsistent", {}, {}};
  for (auto e : {Estimator::stable_sample, Estimator::single_sample, Estimator::accumulative}) {
    cats.emplace_back(estimator_name(e));
    consistent.y.push_back(static_cast<double>(report.counts(e).consistent));
    inconsistent.y.push_back(static_cast<double>(report.counts(e).inconsistent));
  }
  return svg_bar_chart("Estimator consistency", cats, {consistent, inconsistent});
}

std::string svg_gap_chart(const PerImageGap& gap) {
  Series s{"AP(A) - AP(B)", {}, gap.gaps};
  for (std::size_t i = 0; i < gap.gaps.size(); ++i) s.x.push_back(static_cast<double>(i));
  return svg_line_chart("Per-image AP gap", "image", "gap", {s});
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace ctflab::eval
