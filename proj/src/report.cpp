#include "cmil/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cmil/error.hpp"

namespace cmil::report {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  // Fields are quoted only when they contain commas or quotes (the config
  // column); quotes inside are doubled.
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
    } else {
      field += c;
    }
  }
  out.push_back(std::move(field));
  return out;
}

std::string quote_csv(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

}  // namespace

void write_training_log(const std::vector<training::TrainLogRow>& rows,
                        const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write training log '" + path + "'");
  out << "epoch,step,total,triplet,ce,align,val_rank1,wall_time\n";
  for (const auto& row : rows) {
    out << row.epoch << ',' << row.step << ',' << fmt_double(row.total)
        << ',' << fmt_double(row.triplet) << ',' << fmt_double(row.ce) << ','
        << fmt_double(row.align) << ',';
    if (row.val_rank1) out << fmt_double(*row.val_rank1);
    out << ',' << fmt_double(row.wall_time) << '\n';
  }
}

std::vector<training::TrainLogRow> read_training_log(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open training log '" + path + "'");
  std::string line;
  if (!std::getline(in, line))
    throw ParseError("training log '" + path + "' is empty");
  if (line != "epoch,step,total,triplet,ce,align,val_rank1,wall_time")
    throw ParseError("training log '" + path + "' has an unexpected header");
  std::vector<training::TrainLogRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 8)
      throw ParseError("training log line " + std::to_string(line_no) +
                           ": expected 8 fields",
                       line_no);
    training::TrainLogRow row;
    try {
      row.epoch = std::stoi(fields[0]);
      row.step = std::stoi(fields[1]);
      row.total = std::stod(fields[2]);
      row.triplet = std::stod(fields[3]);
      row.ce = std::stod(fields[4]);
      row.align = std::stod(fields[5]);
      if (!fields[6].empty()) row.val_rank1 = std::stod(fields[6]);
      row.wall_time = std::stod(fields[7]);
    } catch (const std::exception&) {
      throw ParseError("training log line " + std::to_string(line_no) +
                           ": malformed number",
                       line_no);
    }
    rows.push_back(row);
  }
  return rows;
}

void write_series_csv(const std::vector<training::TrainLogRow>& rows,
                      const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write series CSV '" + path + "'");
  out << "epoch,step,val_rank1,align\n";
  for (const auto& row : rows) {
    if (!row.val_rank1) continue;
    out << row.epoch << ',' << row.step << ',' << fmt_double(*row.val_rank1)
        << ',' << fmt_double(row.align) << '\n';
  }
}

namespace {

struct Series {
  std::vector<double> x, y;
};

void polyline(std::ostream& out, const Series& s, double x0, double x1,
              double y0, double y1, double w, double h, double margin,
              const char* color) {
  if (s.x.empty()) return;
  out << "  <polyline fill=\"none\" stroke=\"" << color
      << "\" stroke-width=\"1.5\" points=\"";
  const double xr = std::max(x1 - x0, 1e-12);
  const double yr = std::max(y1 - y0, 1e-12);
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    const double px = margin + (s.x[i] - x0) / xr * (w - 2 * margin);
    const double py = h - margin - (s.y[i] - y0) / yr * (h - 2 * margin);
    out << px << ',' << py << ' ';
  }
  out << "\"/>\n";
}

}  // namespace

void write_series_svg(const std::vector<training::TrainLogRow>& rows,
                      const std::string& path) {
  Series align, rank1;
  for (const auto& row : rows) {
    align.x.push_back(row.step);
    align.y.push_back(row.align);
    if (row.val_rank1) {
      rank1.x.push_back(row.step);
      rank1.y.push_back(*row.val_rank1);
    }
  }
  if (align.x.empty()) throw ValidationError("log has no rows to plot");

  double x0 = align.x.front(), x1 = align.x.back();
  double ya0 = *std::min_element(align.y.begin(), align.y.end());
  double ya1 = *std::max_element(align.y.begin(), align.y.end());
  if (ya1 - ya0 < 1e-12) ya1 = ya0 + 1.0;

  const double w = 640, h = 360, margin = 40;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write plot '" + path + "'");
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w
      << "\" height=\"" << h << "\" viewBox=\"0 0 " << w << ' ' << h
      << "\">\n";
  out << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "  <line x1=\"" << margin << "\" y1=\"" << h - margin << "\" x2=\""
      << w - margin << "\" y2=\"" << h - margin
      << "\" stroke=\"black\"/>\n";
  out << "  <line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\""
      << margin << "\" y2=\"" << h - margin << "\" stroke=\"black\"/>\n";
  polyline(out, align, x0, x1, ya0, ya1, w, h, margin, "#d62728");
  // rank-1 lives on a fixed [0, 1] axis.
  polyline(out, rank1, x0, x1, 0.0, 1.0, w, h, margin, "#1f77b4");
  out << "  <text x=\"" << margin << "\" y=\"" << margin - 16
      << "\" font-size=\"12\" fill=\"#d62728\">alignment loss</text>\n";
  out << "  <text x=\"" << margin + 130 << "\" y=\"" << margin - 16
      << "\" font-size=\"12\" fill=\"#1f77b4\">val rank-1</text>\n";
  out << "  <text x=\"" << w / 2 << "\" y=\"" << h - 8
      << "\" font-size=\"12\">training step</text>\n";
  out << "</svg>\n";
}

void write_comparison_csv(
    const std::vector<std::pair<std::string,
                                std::vector<training::TrainLogRow>>>& logs,
    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write comparison CSV '" + path + "'");
  out << "log,epochs,best_val_rank1,final_val_rank1,final_align\n";
  for (const auto& [name, rows] : logs) {
    double best = 0.0, last = 0.0;
    int epochs = 0;
    bool any = false;
    for (const auto& row : rows) {
      epochs = std::max(epochs, row.epoch + 1);
      if (row.val_rank1) {
        best = any ? std::max(best, *row.val_rank1) : *row.val_rank1;
        last = *row.val_rank1;
        any = true;
      }
    }
    const double final_align = rows.empty() ? 0.0 : rows.back().align;
    out << quote_csv(name) << ',' << epochs << ',' << fmt_double(best) << ','
        << fmt_double(last) << ',' << fmt_double(final_align) << '\n';
  }
}

void write_trial_table(const std::vector<training::TrialRow>& rows,
                       const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write trial table '" + path + "'");
  out << "trial_id,rung,epochs,objective,config\n";
  for (const auto& row : rows) {
    out << row.trial_id << ',' << row.rung << ',' << row.epochs << ','
        << fmt_double(row.objective) << ',' << quote_csv(row.config_json)
        << '\n';
  }
}

std::vector<training::TrialRow> read_trial_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trial table '" + path + "'");
  std::string line;
  if (!std::getline(in, line) ||
      line != "trial_id,rung,epochs,objective,config")
    throw ParseError("trial table '" + path + "' has an unexpected header");
  std::vector<training::TrialRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != 5)
      throw ParseError("trial table line " + std::to_string(line_no) +
                           ": expected 5 fields",
                       line_no);
    training::TrialRow row;
    row.trial_id = std::stoi(fields[0]);
    row.rung = std::stoi(fields[1]);
    row.epochs = std::stoi(fields[2]);
    row.objective = std::stod(fields[3]);
    row.config_json = fields[4];
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace cmil::report
