#include <algorithm>
#include <cmath>
#include <tuple>

#include "instructdiff/error.hpp"
#include "instructdiff/evalsvc.hpp"

namespace instructdiff {

using nlohmann::json;
using nlohmann::ordered_json;

bool on_rating_scale(double v) { return v == 0.0 || v == 0.5 || v == 1.0; }

SampleScore sample_score(const std::vector<double>& sc_per_condition, double pq) {
  if (sc_per_condition.empty()) throw ValidationError("at least one condition score is required");
  for (double v : sc_per_condition)
    if (!on_rating_scale(v)) throw ValidationError("SC value " + std::to_string(v) + " is off the {0, 0.5, 1} scale");
  if (!on_rating_scale(pq)) throw ValidationError("PQ value " + std::to_string(pq) + " is off the {0, 0.5, 1} scale");
  SampleScore s;
  s.sc = *std::min_element(sc_per_condition.begin(), sc_per_condition.end());
  s.o = std::sqrt(s.sc * pq);
  return s;
}

void RatingRecord::validate() const {
  if (rater.empty()) throw ValidationError("rating has no rater");
  if (sample.empty()) throw ValidationError("rating has no sample");
  if (method.empty()) throw ValidationError("rating has no method");
  sample_score(sc, pq);
}

ordered_json RatingRecord::to_json() const {
  ordered_json j;
  j["rater"] = rater;
  j["sample"] = sample;
  j["method"] = method;
  j["sc"] = sc;
  j["pq"] = pq;
  j["ts"] = ts;
  if (!task.empty()) j["task"] = task;
  if (!session.empty()) j["session"] = session;
  return j;
}

RatingRecord RatingRecord::from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("rating must be a JSON object");
  RatingRecord r;
  try {
    r.rater = j.at("rater").get<std::string>();
    r.sample = j.at("sample").get<std::string>();
    r.method = j.at("method").get<std::string>();
    const auto& sc = j.at("sc");
    if (!sc.is_array()) throw ValidationError("sc must be an array");
    for (const auto& v : sc) {
      if (!v.is_number()) throw ValidationError("sc entries must be numbers");
      r.sc.push_back(v.get<double>());
    }
    if (!j.at("pq").is_number()) throw ValidationError("pq must be a number");
    r.pq = j.at("pq").get<double>();
    if (!j.at("ts").is_number_integer()) throw ValidationError("ts must be an integer");
    r.ts = j.at("ts").get<std::int64_t>();
    if (j.contains("task")) r.task = j.at("task").get<std::string>();
    if (j.contains("session")) r.session = j.at("session").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("rating: ") + e.what());
  }
  r.validate();
  return r;
}

const GroupReport* EvalReport::find(std::string_view task, std::string_view method) const {
  for (const auto& g : groups)
    if (g.task == task && g.method == method) return &g;
  return nullptr;
}

ordered_json EvalReport::to_json() const {
  ordered_json j;
  j["r_min"] = r_min;
  j["groups"] = ordered_json::array();
  for (const auto& g : groups) {
    ordered_json row;
    row["task"] = g.task;
    row["method"] = g.method;
    row["sc_avg"] = g.sc_avg;
    row["pq_avg"] = g.pq_avg;
    row["overall"] = g.overall;
    row["geo_overall"] = g.geo_overall;
    row["accuracy"] = g.accuracy;
    row["samples"] = g.samples;
    row["ratings"] = g.ratings;
    row["raters"] = {{"min", g.raters_min}, {"max", g.raters_max}, {"mean", g.raters_mean}};
    row["under_rated"] = g.under_rated;
    j["groups"].push_back(std::move(row));
  }
  return j;
}

EvalReport aggregate(const std::vector<RatingRecord>& records, int r_min, const std::optional<std::string>& task) {
  if (r_min < 1) throw ValidationError("r_min must be >= 1");
  struct SampleAcc {
    double sc = 0.0, pq = 0.0, o = 0.0;
    std::set<std::string> raters;
  };
  // (task, method) -> sample -> sums. std::map keeps the output order fixed.
  std::map<std::pair<std::string, std::string>, std::map<std::string, SampleAcc>> groups;
  std::set<std::tuple<std::string, std::string, std::string>> seen;
  for (const auto& r : records) {
    if (task && r.task != *task) continue;
    if (!seen.emplace(r.rater, r.sample, r.method).second) {
      throw ValidationError("duplicate rating by " + r.rater + " for " + r.sample + "/" + r.method);
    }
    const SampleScore s = sample_score(r.sc, r.pq);
    auto& acc = groups[{r.task, r.method}][r.sample];
    acc.sc += s.sc;
    acc.pq += r.pq;
    acc.o += s.o;
    acc.raters.insert(r.rater);
  }
  if (groups.empty()) throw ValidationError(task ? "no ratings for task '" + *task + "'" : "no ratings");

  EvalReport report;
  report.r_min = r_min;
  for (const auto& [key, samples] : groups) {
    GroupReport g;
    g.task = key.first;
    g.method = key.second;
    g.samples = samples.size();
    g.raters_min = samples.begin()->second.raters.size();
    double correct = 0.0, raters_total = 0.0;
    for (const auto& [id, acc] : samples) {
      const auto n = static_cast<double>(acc.raters.size());
      const double sc = acc.sc / n;
      g.sc_avg += sc;
      g.pq_avg += acc.pq / n;
      g.overall += acc.o / n;
      if (sc == 1.0) correct += 1.0;
      g.ratings += acc.raters.size();
      raters_total += n;
      g.raters_min = std::min(g.raters_min, acc.raters.size());
      g.raters_max = std::max(g.raters_max, acc.raters.size());
      if (acc.raters.size() < static_cast<std::size_t>(r_min)) g.under_rated.push_back(id);
    }
    const auto m = static_cast<double>(g.samples);
    g.sc_avg /= m;
    g.pq_avg /= m;
    g.overall /= m;
    g.accuracy = correct / m;
    g.raters_mean = raters_total / m;
    g.geo_overall = std::sqrt(g.sc_avg * g.pq_avg);
    report.groups.push_back(std::move(g));
  }
  return report;
}

}  // namespace instructdiff
