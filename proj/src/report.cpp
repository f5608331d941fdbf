#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>

#include "lowrank/harness.hpp"

namespace lowrank {

namespace {

constexpr const char* kBaseColumns[] = {"run_id", "epoch", "train_loss", "train_acc",
                                        "test_acc", "avg_rank", "d_metric"};

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_double(const std::string& cell, std::size_t line) {
  char* end = nullptr;
  const double v = std::strtod(cell.c_str(), &end);
  if (cell.empty() || end != cell.c_str() + cell.size()) {
    throw Error(ErrorCode::BadConfig, "metrics line " + std::to_string(line) + ": bad number '" + cell + "'");
  }
  return v;
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

std::string tick_label(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << v;
  return os.str();
}

}  // namespace

MetricsRow metrics_row(const std::string& run_id, const EpochMetrics& m) {
  return {run_id, m.epoch, m.train_loss, m.train_acc, m.test_acc, m.avg_rank, m.d_metric, m.edge_ranks};
}

std::string metrics_header(std::size_t edge_count) {
  std::string h = "run_id,epoch,train_loss,train_acc,test_acc,avg_rank,d_metric";
  for (std::size_t i = 0; i < edge_count; ++i) h += ",rank_edge_" + std::to_string(i);
  return h;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows, std::size_t edge_count) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << metrics_header(edge_count) << '\n';
  for (const auto& r : rows) {
    if (r.edge_ranks.size() != edge_count) throw Error(ErrorCode::ShapeMismatch, "edge rank count");
    os << r.run_id << ',' << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.test_acc
       << ',' << r.avg_rank << ',' << r.d_metric;
    for (std::size_t k : r.edge_ranks) os << ',' << k;
    os << '\n';
  }
  return os.str();
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::BadConfig, "metrics CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_commas(line);
  if (header.size() < 7) throw Error(ErrorCode::BadConfig, "metrics header is too short");
  for (std::size_t i = 0; i < 7; ++i) {
    if (header[i] != kBaseColumns[i]) {
      throw Error(ErrorCode::BadConfig, "metrics header column " + std::to_string(i) + " is '" +
                                            header[i] + "', expected '" + kBaseColumns[i] + "'");
    }
  }
  const std::size_t edges = header.size() - 7;
  for (std::size_t i = 0; i < edges; ++i) {
    if (header[7 + i] != "rank_edge_" + std::to_string(i)) {
      throw Error(ErrorCode::BadConfig, "metrics header column '" + header[7 + i] + "' unexpected");
    }
  }
  std::vector<MetricsRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != header.size()) {
      throw Error(ErrorCode::BadConfig, "metrics line " + std::to_string(line_no) + ": wrong column count");
    }
    MetricsRow r;
    r.run_id = cells[0];
    r.epoch = static_cast<std::size_t>(parse_double(cells[1], line_no));
    r.train_loss = parse_double(cells[2], line_no);
    r.train_acc = parse_double(cells[3], line_no);
    r.test_acc = parse_double(cells[4], line_no);
    r.avg_rank = parse_double(cells[5], line_no);
    r.d_metric = parse_double(cells[6], line_no);
    for (std::size_t i = 0; i < edges; ++i)
      r.edge_ranks.push_back(static_cast<std::size_t>(parse_double(cells[7 + i], line_no)));
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<PlotSeries> series_from_metrics(const std::vector<MetricsRow>& rows,
                                            const std::string& metric) {
  std::function<double(const MetricsRow&)> get;
  if (metric == "train_loss") get = [](const MetricsRow& r) { return r.train_loss; };
  else if (metric == "train_acc") get = [](const MetricsRow& r) { return r.train_acc; };
  else if (metric == "test_acc") get = [](const MetricsRow& r) { return r.test_acc; };
  else if (metric == "avg_rank") get = [](const MetricsRow& r) { return r.avg_rank; };
  else if (metric == "d_metric") get = [](const MetricsRow& r) { return r.d_metric; };
  else if (metric.rfind("rank_edge_", 0) == 0) {
    const std::size_t e = std::stoul(metric.substr(10));
    get = [e](const MetricsRow& r) {
      if (e >= r.edge_ranks.size()) throw Error(ErrorCode::BadConfig, "no column rank_edge_" + std::to_string(e));
      return static_cast<double>(r.edge_ranks[e]);
    };
  } else {
    throw Error(ErrorCode::BadConfig, "unknown metric '" + metric + "'");
  }
  std::vector<PlotSeries> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const PlotSeries& s) { return s.name == r.run_id; });
    if (it == out.end()) {
      out.push_back({r.run_id, {}, {}});
      it = out.end() - 1;
    }
    it->x.push_back(static_cast<double>(r.epoch));
    it->y.push_back(get(r));
  }
  return out;
}

std::string render_svg(const std::vector<PlotSeries>& series, const PlotOptions& opt) {
  static constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                             "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  const double left = 70, right = 150, top = 40, bottom = 55;
  const double pw = opt.width - left - right;
  const double ph = opt.height - top - bottom;

  auto ty = [&](double y) { return opt.log_y ? std::log10(y) : y; };
  auto keep = [&](double x, double y) {
    return std::isfinite(x) && std::isfinite(y) && (!opt.log_y || y > 0.0);
  };
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!keep(s.x[i], s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, ty(s.y[i]));
      y1 = std::max(y1, ty(s.y[i]));
    }
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y0) / (y1 - y0)) * ph; };

  std::ostringstream os;
  os << std::setprecision(6);
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
     << "\" viewBox=\"0 0 " << opt.width << ' ' << opt.height << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!opt.title.empty()) {
    os << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
       << xml_escape(opt.title) << "</text>\n";
  }
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = x0 + (x1 - x0) * i / 4.0;
    const double fy = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << px(fx) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">"
       << tick_label(fx) << "</text>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\">"
       << tick_label(opt.log_y ? std::pow(10.0, fy) : fy) << "</text>\n";
  }
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << opt.height - 12 << "\" text-anchor=\"middle\">"
     << xml_escape(opt.x_label) << "</text>\n";
  os << "<text x=\"16\" y=\"" << top + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
     << top + ph / 2 << ")\">" << xml_escape(opt.y_label + (opt.log_y ? " (log)" : "")) << "</text>\n";

  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    bool first = true;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!keep(s.x[i], s.y[i])) continue;
      os << (first ? "" : " ") << px(s.x[i]) << ',' << py(ty(s.y[i]));
      first = false;
    }
    os << "\"><title>" << xml_escape(s.name) << "</title></polyline>\n";
    const double ly = top + 14.0 * static_cast<double>(k) + 8;
    os << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly << "\" x2=\"" << left + pw + 30 << "\" y2=\""
       << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << left + pw + 34 << "\" y=\"" << ly + 4 << "\">" << xml_escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace lowrank
