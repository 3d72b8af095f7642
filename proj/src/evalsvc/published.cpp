#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "instructdiff/error.hpp"
#include "instructdiff/evalsvc.hpp"

namespace instructdiff {

namespace fs = std::filesystem;

namespace {

std::optional<double> parse_cell(const std::string& cell, const std::string& where) {
  if (cell.empty()) return std::nullopt;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) throw ValidationError(where + ": bad number '" + cell + "'");
  return v;
}

}  // namespace

std::vector<PublishedRow> load_published_rows(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw IoError("cannot open " + csv.string());
  std::vector<PublishedRow> rows;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    const std::string where = csv.string() + ":" + std::to_string(number);
    if (cells.size() != 9) throw ValidationError(where + ": expected 9 columns, got " + std::to_string(cells.size()));
    PublishedRow r;
    r.group = cells[0];
    r.split = cells[1];
    r.task = cells[2];
    r.method = cells[3];
    r.sc_avg = parse_cell(cells[4], where);
    r.pq_avg = parse_cell(cells[5], where);
    const auto overall = parse_cell(cells[6], where);
    if (!overall) throw ValidationError(where + ": Overall is required");
    r.overall = *overall;
    r.accuracy = parse_cell(cells[7], where);
    r.ratings = cells[8];
    if (r.sc_avg.has_value() != r.pq_avg.has_value()) throw ValidationError(where + ": SC and PQ come together");
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<RowCheck> check_published_rows(const std::vector<PublishedRow>& rows, const fs::path& fixture_dir,
                                           double tolerance) {
  std::vector<RowCheck> out;
  const auto add = [&](const PublishedRow& r, std::string rule, double expected, double computed) {
    out.push_back({&r, std::move(rule), expected, computed, std::abs(expected - computed) <= tolerance});
  };
  for (const auto& r : rows) {
    if (r.group == "average") {
      double sum = 0.0;
      int n = 0;
      for (const auto& o : rows)
        if (o.group == "per-task" && o.split == r.split && o.method == r.method) {
          sum += o.overall;
          ++n;
        }
      if (n == 0) throw ValidationError("no rows to average for " + r.split + "/" + r.method);
      add(r, "mean of task Overall", r.overall, sum / n);
    } else if (r.sc_avg) {
      add(r, "sqrt(SC_avg*PQ_avg)", r.overall, std::sqrt(*r.sc_avg * *r.pq_avg));
    }
    if (!r.ratings.empty()) {
      const auto records = read_ratings_log(fixture_dir / r.ratings).records;
      const EvalReport report = aggregate(records);
      if (report.groups.size() != 1 || report.groups.front().method != r.method) {
        throw ValidationError(r.ratings + " must hold exactly one group, for method " + r.method);
      }
      const GroupReport& g = report.groups.front();
      add(r, "Overall of rating fixture", r.overall, g.overall);
      if (r.accuracy) add(r, "accuracy of rating fixture", *r.accuracy, g.accuracy);
    }
  }
  return out;
}

}  // namespace instructdiff
