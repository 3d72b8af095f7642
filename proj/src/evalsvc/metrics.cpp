#include <algorithm>
#include <cmath>
#include <limits>

#include "instructdiff/error.hpp"
#include "instructdiff/evalsvc.hpp"

namespace instructdiff {

using nlohmann::ordered_json;

namespace {

constexpr float kForeground = 0.3f;

void require_same_shape(const Tensor<float>& a, const Tensor<float>& b, const char* what) {
  if (!a.same_shape(b)) throw ValidationError(std::string(what) + ": maps differ in shape");
}

std::size_t count_on(const Tensor<float>& m) {
  std::size_t n = 0;
  for (float v : m.values()) n += v > 0.5f;
  return n;
}

std::size_t count_both(const Tensor<float>& a, const Tensor<float>& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += a[i] > 0.5f && b[i] > 0.5f;
  return n;
}

const ContextPair* find_context(const TaskRecord& r, std::initializer_list<std::string_view> texts) {
  for (const auto& p : r.instruction.context)
    for (auto t : texts)
      if (p.text == t) return &p;
  return nullptr;
}

}  // namespace

Tensor<float> foreground_mask(const ImageTensor& image) {
  if (image.channels() != 3) throw ValidationError("foreground_mask expects a 3-channel image");
  Tensor<float> m(image.height(), image.width(), 1);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const float mx = std::max({image.at(y, x, 0), image.at(y, x, 1), image.at(y, x, 2)});
      m.at(y, x, 0) = mx > kForeground ? 1.0f : 0.0f;
    }
  return m;
}

double mask_iou(const Tensor<float>& a, const Tensor<float>& b) {
  require_same_shape(a, b, "mask_iou");
  const std::size_t inter = count_both(a, b);
  const std::size_t uni = count_on(a) + count_on(b) - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Tensor<float> image_edges(const ImageTensor& image) { return mask_boundary(foreground_mask(image)); }

double edge_f1(const Tensor<float>& predicted, const Tensor<float>& reference, int tolerance) {
  require_same_shape(predicted, reference, "edge_f1");
  const std::size_t np = count_on(predicted);
  const std::size_t nr = count_on(reference);
  if (np == 0 && nr == 0) return 1.0;
  if (np == 0 || nr == 0) return 0.0;
  const double precision = static_cast<double>(count_both(predicted, dilate(reference, tolerance))) / np;
  const double recall = static_cast<double>(count_both(reference, dilate(predicted, tolerance))) / nr;
  return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

std::vector<double> palette_histogram(const ImageTensor& image) {
  const Tensor<float> fg = foreground_mask(image);
  std::vector<double> h(kPaletteBins, 0.0);
  double total = 0.0;
  // Bin edges sit halfway between the background levels 0.08 / 0.24 / 0.41.
  const auto level = [](float v) {
    const double u = (static_cast<double>(v) + 1.0) / 2.0;
    return std::clamp(static_cast<int>(std::floor(u / 0.65 * 4.0)), 0, 3);
  };
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      if (fg.at(y, x, 0) > 0.5f) continue;
      h[static_cast<std::size_t>(level(image.at(y, x, 0)) * 16 + level(image.at(y, x, 1)) * 4 +
                                 level(image.at(y, x, 2)))] += 1.0;
      total += 1.0;
    }
  if (total > 0.0)
    for (double& v : h) v /= total;
  return h;
}

double chi2_distance(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw ValidationError("chi2_distance: histogram sizes differ");
  double sp = 0.0, sq = 0.0, d = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sp += p[i];
    sq += q[i];
    const double s = p[i] + q[i];
    if (s > 0.0) d += (p[i] - q[i]) * (p[i] - q[i]) / s;
  }
  if (sp == 0.0 || sq == 0.0) return 1.0;
  return 0.5 * d;
}

double style_distance(const ImageTensor& a, const ImageTensor& b) {
  return chi2_distance(palette_histogram(a), palette_histogram(b));
}

std::vector<double> SubjectClassifier::features(const ImageTensor& image) {
  const Tensor<float> fg = foreground_mask(image);
  double r = 0.0, g = 0.0, b = 0.0, n = 0.0;
  int x0 = image.width(), x1 = -1, y0 = image.height(), y1 = -1;
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      if (fg.at(y, x, 0) <= 0.5f) continue;
      r += image.at(y, x, 0);
      g += image.at(y, x, 1);
      b += image.at(y, x, 2);
      n += 1.0;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (n == 0.0) return {};
  const double box = static_cast<double>(x1 - x0 + 1) * (y1 - y0 + 1);
  // Colours back in [0, 1].
  return {(r / n + 1.0) / 2.0, (g / n + 1.0) / 2.0, (b / n + 1.0) / 2.0, n / box};
}

SubjectClassifier SubjectClassifier::fit(const std::vector<WorldSample>& samples) {
  std::map<int, std::pair<std::vector<double>, double>> sums;
  for (const auto& s : samples) {
    if (!s.annotation.has_shape) continue;
    const auto f = features(s.image);
    if (f.empty()) continue;
    auto& [sum, n] = sums[s.annotation.subject_id()];
    if (sum.empty()) sum.assign(f.size(), 0.0);
    for (std::size_t i = 0; i < f.size(); ++i) sum[i] += f[i];
    n += 1.0;
  }
  const auto classes = static_cast<int>(subject_colors().size()) * kShapeKinds;
  if (static_cast<int>(sums.size()) != classes) {
    throw ValidationError("classifier fit saw " + std::to_string(sums.size()) + " of " + std::to_string(classes) +
                          " subjects");
  }
  SubjectClassifier c;
  for (auto& [id, acc] : sums) {
    for (double& v : acc.first) v /= acc.second;
    c.centroids_[id] = acc.first;
  }
  return c;
}

const SubjectClassifier& SubjectClassifier::standard() {
  static const SubjectClassifier c = fit(synth_world(2400, 0xc1a55));
  return c;
}

int SubjectClassifier::classify(const ImageTensor& image) const {
  const auto f = features(image);
  if (f.empty()) return -1;
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& [id, c] : centroids_) {
    double d = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) d += (f[i] - c[i]) * (f[i] - c[i]);
    if (d < best_d) {
      best_d = d;
      best = id;
    }
  }
  return best;
}

std::string_view to_string(AutoMetric m) {
  switch (m) {
    case AutoMetric::kMaskIou: return "mask_iou";
    case AutoMetric::kEdgeF1: return "edge_f1";
    case AutoMetric::kStyle: return "style_distance";
    case AutoMetric::kSubject: return "subject_match";
  }
  return "?";
}

namespace {

void put(ordered_json& j, const char* key, const std::optional<double>& v) {
  j[key] = v ? ordered_json(*v) : ordered_json(nullptr);
}

}  // namespace

ordered_json AutoMetricResult::to_json() const {
  ordered_json j;
  j["task"] = task;
  put(j, "mask_iou", mask_iou);
  put(j, "edge_f1", edge_f1);
  put(j, "style_distance", style_distance);
  j["subject_match"] = subject_match ? ordered_json(*subject_match) : ordered_json(nullptr);
  return j;
}

std::vector<AutoMetric> applicable_metrics(const TaskRecord& record) {
  std::vector<AutoMetric> out;
  if (find_context(record, {"mask"})) out.push_back(AutoMetric::kMaskIou);
  if (find_context(record, {"edge map", "sketch"})) out.push_back(AutoMetric::kEdgeF1);
  if (find_context(record, {"style"})) out.push_back(AutoMetric::kStyle);
  if (record.target_annotation.has_shape) out.push_back(AutoMetric::kSubject);
  return out;
}

AutoMetricResult auto_metrics(const ImageTensor& generated, const TaskRecord& record,
                              const std::vector<AutoMetric>& requested) {
  AutoMetricResult r;
  r.task = std::string(to_string(record.instruction.task));
  const auto missing = [&](AutoMetric m) {
    return ValidationError("record has no annotation for " + std::string(to_string(m)));
  };
  for (AutoMetric m : requested) {
    switch (m) {
      case AutoMetric::kMaskIou: {
        const ContextPair* p = find_context(record, {"mask"});
        if (!p) throw missing(m);
        Tensor<float> ref(p->image.height(), p->image.width(), 1);
        for (int i = 0; i < ref.pixels(); ++i) ref[static_cast<std::size_t>(i)] = p->image[static_cast<std::size_t>(i) * 3] > 0.0f;
        r.mask_iou = mask_iou(foreground_mask(generated), ref);
        break;
      }
      case AutoMetric::kEdgeF1:
        if (!find_context(record, {"edge map", "sketch"})) throw missing(m);
        r.edge_f1 = edge_f1(image_edges(generated), mask_boundary(shape_mask(record.target_annotation)));
        break;
      case AutoMetric::kStyle: {
        const ContextPair* p = find_context(record, {"style"});
        if (!p) throw missing(m);
        r.style_distance = style_distance(generated, p->image);
        break;
      }
      case AutoMetric::kSubject:
        if (!record.target_annotation.has_shape) throw missing(m);
        r.subject_match = SubjectClassifier::standard().classify(generated) == record.target_annotation.subject_id();
        break;
    }
  }
  return r;
}

AutoMetricResult auto_metrics(const ImageTensor& generated, const TaskRecord& record) {
  return auto_metrics(generated, record, applicable_metrics(record));
}

ordered_json AutoMetricSummary::to_json() const {
  ordered_json j;
  j["task"] = task;
  j["samples"] = samples;
  put(j, "mask_iou", mask_iou);
  put(j, "edge_f1", edge_f1);
  put(j, "style_distance", style_distance);
  put(j, "subject_accuracy", subject_accuracy);
  return j;
}

std::vector<AutoMetricSummary> summarize(const std::vector<AutoMetricResult>& results) {
  struct Acc {
    std::size_t n = 0;
    double sum[4] = {0, 0, 0, 0};
    std::size_t count[4] = {0, 0, 0, 0};
  };
  std::map<std::string, Acc> by_task;
  for (const auto& r : results) {
    auto& a = by_task[r.task];
    ++a.n;
    const std::optional<double> v[4] = {r.mask_iou, r.edge_f1, r.style_distance,
                                        r.subject_match ? std::optional<double>(*r.subject_match) : std::nullopt};
    for (int k = 0; k < 4; ++k)
      if (v[k]) {
        a.sum[k] += *v[k];
        ++a.count[k];
      }
  }
  std::vector<AutoMetricSummary> out;
  for (const auto& [task, a] : by_task) {
    AutoMetricSummary s;
    s.task = task;
    s.samples = a.n;
    std::optional<double>* slots[4] = {&s.mask_iou, &s.edge_f1, &s.style_distance, &s.subject_accuracy};
    for (int k = 0; k < 4; ++k)
      if (a.count[k]) *slots[k] = a.sum[k] / static_cast<double>(a.count[k]);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace instructdiff
