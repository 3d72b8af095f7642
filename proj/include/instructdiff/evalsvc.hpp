#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "instructdiff/corpus.hpp"
#include "instructdiff/tensor.hpp"

namespace instructdiff {

// ---------------------------------------------------------------------------
// Human scores. Every rating value lives on {0, 0.5, 1}.

bool on_rating_scale(double v);

struct SampleScore {
  double sc = 0.0;
  double o = 0.0;
};

// SC is the least consistent condition; O = sqrt(SC * PQ).
SampleScore sample_score(const std::vector<double>& sc_per_condition, double pq);

struct RatingRecord {
  std::string session;
  std::string rater;
  std::string sample;  // the input id; methods share it
  std::string method;
  std::string task;
  std::vector<double> sc;
  double pq = 0.0;
  std::int64_t ts = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static RatingRecord from_json(const nlohmann::json& j);
};

struct GroupReport {
  std::string task;
  std::string method;
  double sc_avg = 0.0;
  double pq_avg = 0.0;
  double overall = 0.0;      // mean of per-sample O
  double geo_overall = 0.0;  // sqrt(sc_avg * pq_avg)
  double accuracy = 0.0;     // fraction of samples whose rater-averaged SC is 1
  std::size_t samples = 0;
  std::size_t ratings = 0;
  std::size_t raters_min = 0;
  std::size_t raters_max = 0;
  double raters_mean = 0.0;
  std::vector<std::string> under_rated;  // samples below r_min distinct raters
};

struct EvalReport {
  int r_min = 3;
  std::vector<GroupReport> groups;  // sorted by (task, method)

  const GroupReport* find(std::string_view task, std::string_view method) const;
  nlohmann::ordered_json to_json() const;
};

// Per sample: SC, PQ and per-rating O are averaged over raters; each group
// then averages its samples. Throws ValidationError when nothing matches
// the task filter or a (rater, sample, method) triple repeats.
EvalReport aggregate(const std::vector<RatingRecord>& records, int r_min = 3,
                     const std::optional<std::string>& task = std::nullopt);

// ---------------------------------------------------------------------------
// Published score rows and their consistency checks.

struct PublishedRow {
  std::string group;  // "per-task", "average", "finetune", "retrieval-ablation"
  std::string split;
  std::string task;
  std::string method;
  std::optional<double> sc_avg;
  std::optional<double> pq_avg;
  double overall = 0.0;
  std::optional<double> accuracy;
  std::string ratings;  // per-sample rating fixture, relative to the CSV
};

// CSV with header-less rows; '#' lines are comments.
std::vector<PublishedRow> load_published_rows(const std::filesystem::path& csv);

struct RowCheck {
  const PublishedRow* row = nullptr;
  std::string rule;
  double expected = 0.0;
  double computed = 0.0;
  bool pass = false;
};

// Rows with SC/PQ: Overall against sqrt(SC_avg * PQ_avg). "average" rows:
// Overall against the mean of the split's per-task Overall for that method.
// Rows with a rating fixture: Overall and accuracy against aggregate().
std::vector<RowCheck> check_published_rows(const std::vector<PublishedRow>& rows,
                                           const std::filesystem::path& fixture_dir, double tolerance = 0.015);

// ---------------------------------------------------------------------------
// Assignment scheduling

struct InventoryContext {
  std::string marker;
  std::string text;
  std::string image;  // URL
};

struct InventoryItem {
  std::string input;
  std::string method;
  std::string task;
  std::string instruction;
  std::vector<std::string> conditions;  // one SC control each
  std::vector<InventoryContext> context;
  std::string candidate;  // URL
};

struct Inventory {
  std::vector<InventoryItem> items;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static Inventory from_json(const nlohmann::json& j);
  static Inventory load(const std::filesystem::path& path);
};

struct Assignment {
  std::string id;
  std::string session;
  std::string rater;
  std::size_t item = 0;
  std::vector<std::string> block;  // every method of this input, inventory order
  std::size_t block_done = 0;      // methods of the block this rater already rated

  nlohmann::ordered_json to_json(const Inventory& inventory) const;
};

// Why a submission was turned away; status is the HTTP code to answer with.
class RatingRejected : public std::runtime_error {
 public:
  RatingRejected(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

// One rater finishes every method of an input before moving on; no triple is
// handed out twice; a fresh input goes to the least-covered one still below
// the redundancy target. Not thread-safe; the service locks around it.
class RatingSession {
 public:
  RatingSession(std::string id, const Inventory& inventory, int redundancy = 3);

  // nullopt once nothing is left for this rater.
  std::optional<Assignment> next(const std::string& rater);

  // Checks a submission against an issued assignment and builds the record.
  // Throws RatingRejected (400 malformed, 409 duplicate, 422 off-scale).
  RatingRecord prepare(const nlohmann::json& body, std::int64_t ts) const;
  // Marks the record's triple as rated; call after it is durably logged.
  void commit(const RatingRecord& record);
  // Replays a logged record without an issued assignment.
  void restore(const RatingRecord& record);

  bool rated(const std::string& rater, std::size_t item) const;
  const std::string& id() const { return id_; }

 private:
  Assignment make_assignment(const std::string& rater, std::size_t item) const;
  std::size_t lookup(const std::string& input, const std::string& method) const;
  void mark(const std::string& rater, std::size_t item);

  std::string id_;
  const Inventory* inventory_;
  int redundancy_;
  std::vector<std::string> inputs_;                      // first-seen order
  std::map<std::string, std::vector<std::size_t>> by_input_;
  std::map<std::string, std::set<std::string>> started_;  // input -> raters
  std::set<std::pair<std::string, std::size_t>> rated_;
  std::map<std::string, std::size_t> outstanding_;        // rater -> item
  std::map<std::string, std::pair<std::string, std::size_t>> issued_;  // id -> (rater, item)
};

// ---------------------------------------------------------------------------
// Persistence: append-only JSON-lines log plus a compacted snapshot.

class RatingsLog {
 public:
  explicit RatingsLog(std::filesystem::path path);
  ~RatingsLog();
  RatingsLog(const RatingsLog&) = delete;
  RatingsLog& operator=(const RatingsLog&) = delete;

  // Flushed and fsync'd before returning; returns the 1-based line number.
  std::size_t append(const RatingRecord& record);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::FILE* file_ = nullptr;
  std::size_t lines_ = 0;
  std::mutex mutex_;
};

struct LogLineError {
  std::size_t line = 0;
  std::string message;
};

struct LogContents {
  std::vector<RatingRecord> records;
  std::vector<LogLineError> errors;
};

// Strict mode throws ValidationError naming the first bad line; lenient
// mode skips bad lines and lists them.
LogContents read_ratings_log(const std::filesystem::path& path, bool lenient = false);

void write_snapshot(const std::filesystem::path& path, const std::vector<RatingRecord>& records, int r_min);
std::vector<RatingRecord> read_snapshot(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Automatic condition-fidelity metrics on 32x32 world images in [-1, 1].

// A pixel is foreground when its brightest channel exceeds 0.3.
Tensor<float> foreground_mask(const ImageTensor& image);
double mask_iou(const Tensor<float>& a, const Tensor<float>& b);
// Boundary of the foreground.
Tensor<float> image_edges(const ImageTensor& image);
// A predicted edge pixel counts when a reference edge lies within Chebyshev
// distance `tolerance`, and symmetrically for recall.
double edge_f1(const Tensor<float>& predicted, const Tensor<float>& reference, int tolerance = 1);

constexpr int kPaletteBins = 64;
// Background colours quantized to 4 levels per channel, normalized.
std::vector<double> palette_histogram(const ImageTensor& image);
// 0.5 * sum (p - q)^2 / (p + q), in [0, 1]; 1 if either histogram is empty.
double chi2_distance(const std::vector<double>& p, const std::vector<double>& q);
double style_distance(const ImageTensor& a, const ImageTensor& b);

// Nearest centroid over (mean foreground colour, bounding-box fill ratio).
class SubjectClassifier {
 public:
  static SubjectClassifier fit(const std::vector<WorldSample>& samples);
  // Fitted once on a fixed clean render set.
  static const SubjectClassifier& standard();

  static std::vector<double> features(const ImageTensor& image);
  // -1 when the image has no foreground.
  int classify(const ImageTensor& image) const;

 private:
  std::map<int, std::vector<double>> centroids_;
};

enum class AutoMetric { kMaskIou, kEdgeF1, kStyle, kSubject };
std::string_view to_string(AutoMetric m);

struct AutoMetricResult {
  std::string task;
  std::optional<double> mask_iou;
  std::optional<double> edge_f1;
  std::optional<double> style_distance;
  std::optional<int> subject_match;

  nlohmann::ordered_json to_json() const;
};

// The metrics a task's conditions support: masks give IoU, edges give F1,
// a "style" context gives the palette distance, a shape target gives the
// subject match.
std::vector<AutoMetric> applicable_metrics(const TaskRecord& record);
// Throws ValidationError when a requested metric lacks its annotation.
AutoMetricResult auto_metrics(const ImageTensor& generated, const TaskRecord& record,
                              const std::vector<AutoMetric>& requested);
AutoMetricResult auto_metrics(const ImageTensor& generated, const TaskRecord& record);

struct AutoMetricSummary {
  std::string task;
  std::size_t samples = 0;
  std::optional<double> mask_iou;
  std::optional<double> edge_f1;
  std::optional<double> style_distance;
  std::optional<double> subject_accuracy;

  nlohmann::ordered_json to_json() const;
};

// Means per task, sorted by task.
std::vector<AutoMetricSummary> summarize(const std::vector<AutoMetricResult>& results);

}  // namespace instructdiff
