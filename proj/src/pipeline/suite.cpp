#include <fstream>

#include "instructdiff/error.hpp"
#include "instructdiff/evalsvc.hpp"
#include "instructdiff/image_io.hpp"
#include "instructdiff/suite.hpp"

namespace instructdiff {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

const ImageTensor* context_image(const TaskRecord& r, std::string_view text) {
  for (const auto& p : r.instruction.context)
    if (p.text == text) return &p.image;
  return nullptr;
}

Tensor<float> mask_of(const ImageTensor& control) {
  Tensor<float> m(control.height(), control.width(), 1);
  for (int i = 0; i < m.pixels(); ++i) m[static_cast<std::size_t>(i)] = control[static_cast<std::size_t>(i) * 3] > 0.0f;
  return m;
}

ordered_json scores_json(const ConditionScores& s) {
  return {{"samples", s.samples},
          {"iou", s.iou},
          {"iou_shuffled", s.iou_shuffled},
          {"iou_margin", s.iou - s.iou_shuffled},
          {"closer_fraction", s.closer},
          {"composite", s.composite}};
}

}  // namespace

ConditionScores score_conditions(const std::vector<ImageTensor>& generated, const std::vector<TaskRecord>& records) {
  if (generated.size() != records.size() || records.size() < 2) {
    throw ValidationError("score_conditions needs matching lists of at least two samples");
  }
  const std::size_t n = records.size();
  ConditionScores s;
  s.samples = n;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<float> fg = foreground_mask(generated[i]);
    double iou = 0.0, closer = 0.0;
    if (const auto* m = context_image(records[i], "mask")) {
      iou = mask_iou(fg, mask_of(*m));
      const auto* other = context_image(records[(i + 1) % n], "mask");
      if (!other) throw ValidationError("shuffled baseline record lacks a mask");
      s.iou_shuffled += mask_iou(fg, mask_of(*other));
    }
    if (const auto* own = context_image(records[i], "style")) {
      // Nearest later record with a different style, wrapping around.
      const ImageTensor* other = nullptr;
      for (std::size_t k = 1; k < n && !other; ++k) {
        const auto& r = records[(i + k) % n];
        if (r.context_annotations.front().style != records[i].context_annotations.front().style) other = context_image(r, "style");
      }
      if (!other) throw ValidationError("every evaluation record shares one style");
      closer = style_distance(generated[i], *own) < style_distance(generated[i], *other) ? 1.0 : 0.0;
    }
    s.iou += iou;
    s.closer += closer;
    s.composite += 0.5 * iou + 0.5 * closer;
  }
  const auto dn = static_cast<double>(n);
  s.iou /= dn;
  s.iou_shuffled /= dn;
  s.closer /= dn;
  s.composite /= dn;
  return s;
}

ordered_json run_desk_suite(const DeskSuiteOptions& o, const DeskSuiteThresholds& th) {
  const auto log = [&](const std::string& m) {
    if (o.log) o.log(m);
  };
  const fs::path work = o.workdir;
  fs::create_directories(work);
  const TemplateBank templates = TemplateBank::load(o.templates);

  log("building corpus");
  CorpusOptions co;
  co.n = o.corpus_n;
  co.seed = o.seed;
  const auto records = build_corpus(co);
  write_corpus(work / "corpus", records, build_clusters(records));

  log("building datasets");
  for (std::size_t k = 0; k < o.stage2.mixture.ratios.size(); ++k) {
    const auto& id = o.stage2.mixture.ratios[k].first;
    write_task_dataset(work / "datasets" / id, id, build_task_dataset(id, o.dataset_n, splitmix64(o.seed + 100 + k), templates));
  }
  std::map<std::string, std::vector<TaskRecord>> eval;
  for (const char* id : {"control2img-mask", "styled", "style-mask"}) {
    eval[id] = build_task_dataset(id, o.eval_n, splitmix64(o.seed + 900 + eval.size()), templates);
    write_task_dataset(work / "eval" / id, id, eval[id]);
  }

  const auto progress = [&](const std::string& arm, std::int64_t total) {
    return [&, arm, total](std::int64_t step, double loss, double) {
      if (step % 250 == 0 || step == total) log(arm + " step " + std::to_string(step) + " loss " + std::to_string(loss));
    };
  };
  TrainRun s1;
  s1.config = o.stage1;
  s1.config.stage = Stage::kRetrieval;
  s1.config.corpus = (work / "corpus").string();
  s1.out = work / "stage1";
  s1.on_step = progress("stage1", s1.config.total_steps);
  ordered_json wall;
  Stopwatch clock;
  log("training stage 1");
  run_train(s1);
  wall["stage1"] = clock.seconds();

  TrainRun s2;
  s2.config = o.stage2;
  s2.config.stage = Stage::kInstruct;
  s2.config.datasets = (work / "datasets").string();
  s2.init = s1.out / "final.ckpt";
  s2.out = work / "stage2";
  s2.on_step = progress("stage2", s2.config.total_steps);
  log("training stage 2");
  clock = Stopwatch();
  run_train(s2);
  wall["stage2"] = clock.seconds();

  const auto sample_set = [&](const Sampler& sampler, const std::string& arm, const std::string& id) {
    std::vector<ImageTensor> out;
    const auto& recs = eval.at(id);
    for (std::size_t i = 0; i < recs.size(); ++i) {
      // Score what lands on disk, after 8-bit quantization.
      const fs::path file = work / "samples" / arm / id / fs::path(*recs[i].instruction.target_path).filename();
      fs::create_directories(file.parent_path());
      save_png(sampler.sample(recs[i].instruction, o.sampling, i), file);
      out.push_back(load_png(file));
    }
    return out;
  };

  ordered_json report;
  report["seed"] = o.seed;
  report["sampling"] = {{"steps", o.sampling.steps}, {"guidance", o.sampling.guidance}, {"seed", o.sampling.seed}};
  report["thresholds"] = {{"mask_margin", th.mask_margin},
                          {"styled_fraction", th.styled_fraction},
                          {"zero_shot_margin", th.zero_shot_margin},
                          {"zero_shot_fraction", th.zero_shot_fraction}};
  log("sampling stage 2");
  clock = Stopwatch();
  {
    const Sampler sampler(load_checkpoint(s2.out / "final.ckpt"));
    const auto mask = score_conditions(sample_set(sampler, "stage2", "control2img-mask"), eval["control2img-mask"]);
    const auto styled = score_conditions(sample_set(sampler, "stage2", "styled"), eval["styled"]);
    const auto zero = score_conditions(sample_set(sampler, "stage2", "style-mask"), eval["style-mask"]);
    report["mask2img"] = scores_json(mask);
    report["styled"] = scores_json(styled);
    report["style_mask"] = scores_json(zero);
    report["pass"]["a_mask2img"] = mask.iou - mask.iou_shuffled >= th.mask_margin;
    report["pass"]["b_styled"] = styled.closer >= th.styled_fraction;
    report["pass"]["c_zero_shot"] = zero.iou - zero.iou_shuffled >= th.zero_shot_margin && zero.closer > th.zero_shot_fraction;
  }
  wall["sampling"] = clock.seconds();

  if (o.ablation) {
    TrainRun ab = s2;
    ab.init.reset();
    ab.ablate_no_retrieval = true;
    ab.out = work / "ablation";
    ab.on_step = progress("ablation", ab.config.total_steps);
    log("training ablation arm");
    clock = Stopwatch();
    run_train(ab);
    wall["ablation"] = clock.seconds();
    log("sampling ablation arm");
    const Sampler sampler(load_checkpoint(ab.out / "final.ckpt"));
    const auto zero = score_conditions(sample_set(sampler, "ablation", "style-mask"), eval["style-mask"]);
    report["ablation_style_mask"] = scores_json(zero);
    report["pass"]["d_ablation"] = zero.composite < report["style_mask"]["composite"].get<double>();
  }

  // Timings live apart so the report itself is reproducible byte for byte.
  std::ofstream(work / "suite_report.json") << report.dump(2) << '\n';
  std::ofstream(work / "timings.json") << wall.dump(2) << '\n';
  report["wall_seconds"] = wall;
  return report;
}

}  // namespace instructdiff
