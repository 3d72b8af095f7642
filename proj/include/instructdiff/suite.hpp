#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include <nlohmann/json.hpp>

#include "instructdiff/runs.hpp"

namespace instructdiff {

// End-to-end desk run: corpus -> stage 1 -> stage 2 (+ a stage-2-only
// ablation arm) -> sampling -> automatic metrics on held-out records.
struct DeskSuiteOptions {
  std::filesystem::path workdir;
  std::filesystem::path templates;
  std::uint64_t seed = 7;
  int corpus_n = 3000;
  int dataset_n = 400;  // per training dataset
  int eval_n = 48;      // per evaluation set
  TrainConfig stage1;
  TrainConfig stage2;
  SampleSettings sampling;
  bool ablation = true;
  std::function<void(const std::string&)> log;
};

struct DeskSuiteThresholds {
  double mask_margin = 0.15;
  double styled_fraction = 0.70;
  double zero_shot_margin = 0.10;
  double zero_shot_fraction = 0.5;  // strictly more than half
};

// Writes <workdir>/suite_report.json and <workdir>/timings.json; returns the
// report with the timings added under "wall_seconds".
nlohmann::ordered_json run_desk_suite(const DeskSuiteOptions& options, const DeskSuiteThresholds& thresholds = {});

// Metric pieces, exposed for tests.
struct ConditionScores {
  std::size_t samples = 0;
  double iou = 0.0;           // vs the record's own mask
  double iou_shuffled = 0.0;  // vs the next record's mask
  double closer = 0.0;        // fraction nearer the own style exemplar than another style's
  double composite = 0.0;     // mean of 0.5 * IoU + 0.5 * [closer]
};

// generated[i] pairs with records[i]. Masks and style exemplars come from
// the records' context pairs; either may be absent.
ConditionScores score_conditions(const std::vector<ImageTensor>& generated, const std::vector<TaskRecord>& records);

}  // namespace instructdiff
