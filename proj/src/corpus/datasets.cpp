#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "instructdiff/corpus.hpp"
#include "instructdiff/error.hpp"
#include "instructdiff/image_io.hpp"

namespace instructdiff {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

const std::vector<DatasetSpec>& dataset_specs() {
  static const std::vector<DatasetSpec> specs = {
      {"subject", TaskKind::kSubject},
      {"txt2img", TaskKind::kTxt2Img},
      {"art", TaskKind::kTxt2Img},
      {"control2img-depth", TaskKind::kControlDepth},
      {"control2img-mask", TaskKind::kControlMask},
      {"control2img-edge", TaskKind::kControlEdge},
      {"sketch", TaskKind::kControlEdge},
      {"styled", TaskKind::kStyled},
      {"style-transfer", TaskKind::kStyleTransfer},
      {"style-mask", TaskKind::kStyleMask},
  };
  return specs;
}

const DatasetSpec& dataset_spec(std::string_view id) {
  for (const auto& s : dataset_specs())
    if (s.id == id) return s;
  throw ValidationError("unknown dataset '" + std::string(id) + "'");
}

TemplateBank TemplateBank::load(const fs::path& dir) {
  TemplateBank bank;
  for (TaskKind kind : {TaskKind::kTxt2Img, TaskKind::kControlEdge, TaskKind::kControlMask, TaskKind::kControlDepth,
                        TaskKind::kSubject, TaskKind::kStyled, TaskKind::kStyleTransfer, TaskKind::kStyleMask}) {
    bank.by_kind[kind] = load_templates(dir / (std::string(to_string(kind)) + ".txt"), kind);
  }
  bank.art = load_templates(dir / "art.txt", TaskKind::kTxt2Img);
  return bank;
}

namespace {

std::string record_image(int index, const char* role) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "images/%05d_%s.png", index, role);
  return buf;
}

const InstructionTemplate& pick(const std::vector<InstructionTemplate>& list, Rng& rng) {
  if (list.empty()) throw ValidationError("empty template list");
  return list[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(list.size()) - 1))];
}

ContextPair make_pair(int k, std::string text, ImageTensor image, std::string path) {
  ContextPair p;
  p.marker = Marker(k);
  p.text = std::move(text);
  p.image = std::move(image);
  p.image_path = std::move(path);
  return p;
}

WorldAnnotation with_style(WorldAnnotation a, int style) {
  a.style = style;
  return a;
}

int other_style(int style, Rng& rng) {
  const auto n = static_cast<std::int64_t>(style_palettes().size());
  const int shift = static_cast<int>(rng.uniform_int(1, n - 1));
  return (style + shift) % static_cast<int>(n);
}

}  // namespace

std::vector<TaskRecord> build_task_dataset(std::string_view dataset_id, int n, std::uint64_t seed,
                                           const TemplateBank& templates) {
  const DatasetSpec& spec = dataset_spec(dataset_id);
  if (n < 1) throw ValidationError("dataset size must be >= 1");
  std::vector<TaskRecord> out;
  out.reserve(static_cast<std::size_t>(n));
  const auto& kind_templates = templates.by_kind.at(spec.kind);
  for (int i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(i));
    TaskRecord rec;
    auto& ins = rec.instruction;
    ins.task = spec.kind;
    ins.target_path = record_image(i, "target");
    WorldAnnotation a = random_annotation(rng);
    std::map<std::string, Binding> bind;
    const InstructionTemplate* tmpl = nullptr;
    if (spec.id == "txt2img" || spec.id == "art") {
      tmpl = &pick(spec.id == "art" ? templates.art : kind_templates, rng);
      bind["caption"] = {std::nullopt, caption(a)};
    } else if (spec.kind == TaskKind::kControlMask || spec.kind == TaskKind::kControlEdge ||
               spec.kind == TaskKind::kControlDepth) {
      tmpl = &pick(kind_templates, rng);
      const bool sketch = spec.id == "sketch";
      rec.dilation = spec.kind == TaskKind::kControlEdge ? static_cast<int>(rng.uniform_int(0, 2)) : 0;
      const Controls c = derive_controls(render(a), a, rec.dilation, sketch);
      std::string label;
      ImageTensor control;
      if (spec.kind == TaskKind::kControlMask) {
        label = "mask";
        control = control_image(c.mask);
      } else if (spec.kind == TaskKind::kControlDepth) {
        label = "depth map";
        control = control_image(c.depth);
      } else {
        label = sketch ? "sketch" : "edge map";
        control = control_image(c.edge);
      }
      ins.context.push_back(make_pair(1, label, quantize_image(control), record_image(i, "c1")));
      rec.context_annotations.push_back(a);
      bind["caption"] = {std::nullopt, caption(a, {true, true, false})};
      bind["c1"] = {Marker(1), label};
    } else if (spec.kind == TaskKind::kSubject) {
      tmpl = &pick(kind_templates, rng);
      for (int k = 1; k <= 2; ++k) {
        WorldAnnotation b = a;
        b.style = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(style_palettes().size()) - 1));
        randomize_placement(b, rng);
        ins.context.push_back(make_pair(k, "object", quantize_image(render(b)), record_image(i, k == 1 ? "c1" : "c2")));
        rec.context_annotations.push_back(b);
      }
      bind["caption"] = {std::nullopt, caption(a, {false, true, true})};
      bind["c1"] = {Marker(1), "object"};
      bind["c2"] = {Marker(2), "object"};
    } else if (spec.kind == TaskKind::kStyled) {
      tmpl = &pick(kind_templates, rng);
      const WorldAnnotation b = with_style(random_annotation(rng), a.style);
      ins.context.push_back(make_pair(1, "style", quantize_image(render(b)), record_image(i, "c1")));
      rec.context_annotations.push_back(b);
      bind["caption"] = {std::nullopt, caption(a, {true, false, true})};
      bind["c1"] = {Marker(1), "style"};
    } else if (spec.kind == TaskKind::kStyleTransfer) {
      tmpl = &pick(kind_templates, rng);
      const WorldAnnotation b = with_style(random_annotation(rng), a.style);
      const WorldAnnotation content = with_style(a, other_style(a.style, rng));
      ins.context.push_back(make_pair(1, "style", quantize_image(render(b)), record_image(i, "c1")));
      ins.context.push_back(make_pair(2, "content", quantize_image(render(content)), record_image(i, "c2")));
      rec.context_annotations.push_back(b);
      rec.context_annotations.push_back(content);
      bind["c1"] = {Marker(1), "style"};
      bind["c2"] = {Marker(2), "content"};
    } else if (spec.kind == TaskKind::kStyleMask) {
      tmpl = &pick(kind_templates, rng);
      const WorldAnnotation b = with_style(random_annotation(rng), a.style);
      ins.context.push_back(make_pair(1, "style", quantize_image(render(b)), record_image(i, "c1")));
      ins.context.push_back(make_pair(2, "mask", quantize_image(control_image(shape_mask(a))), record_image(i, "c2")));
      rec.context_annotations.push_back(b);
      rec.context_annotations.push_back(a);
      bind["caption"] = {std::nullopt, caption(a, {true, false, false})};
      bind["c1"] = {Marker(1), "style"};
      bind["c2"] = {Marker(2), "mask"};
    }
    ins.payload = render_template(*tmpl, bind);
    rec.target = quantize_image(render(a));
    rec.target_annotation = a;
    validate_instruction(ins, Strictness::kStrict, kWorldSize);
    out.push_back(std::move(rec));
  }
  return out;
}

void write_task_dataset(const fs::path& dir, std::string_view dataset_id, const std::vector<TaskRecord>& records) {
  fs::create_directories(dir / "images");
  std::ofstream rec(dir / "records.jsonl", std::ios::binary | std::ios::trunc);
  std::ofstream ann(dir / "annotations.jsonl", std::ios::binary | std::ios::trunc);
  if (!rec || !ann) throw IoError("cannot write dataset files in " + dir.string());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!r.instruction.target_path) throw ValidationError("task record without target path");
    save_png(r.target, dir / *r.instruction.target_path);
    for (const auto& p : r.instruction.context) save_png(p.image, dir / p.image_path);
    rec << serialize_instruction(r.instruction) << '\n';
    ordered_json j;
    j["index"] = i;
    j["dataset"] = std::string(dataset_id);
    j["target"] = to_json(r.target_annotation);
    j["context"] = ordered_json::array();
    for (const auto& a : r.context_annotations) j["context"].push_back(to_json(a));
    j["dilation"] = r.dilation;
    ann << j.dump() << '\n';
  }
}

std::vector<TaskRecord> read_task_dataset(const fs::path& dir) {
  ParseOptions opts;
  opts.strictness = Strictness::kStrict;
  opts.base_dir = dir;
  auto instructions = read_instruction_file(dir / "records.jsonl", opts);
  std::vector<TaskRecord> out;
  out.reserve(instructions.size());
  std::ifstream ann(dir / "annotations.jsonl");
  if (!ann) throw IoError("cannot open " + (dir / "annotations.jsonl").string());
  std::string line;
  for (auto& ins : instructions) {
    if (!std::getline(ann, line)) throw ValidationError("annotations.jsonl has fewer lines than records.jsonl");
    TaskRecord r;
    try {
      const auto j = nlohmann::json::parse(line);
      r.target_annotation = annotation_from_json(j.at("target"));
      for (const auto& c : j.at("context")) r.context_annotations.push_back(annotation_from_json(c));
      r.dilation = j.at("dilation").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("annotations.jsonl: ") + e.what());
    }
    if (!ins.target_path) throw ValidationError("dataset record without target");
    r.target = load_png(dir / *ins.target_path);
    r.instruction = std::move(ins);
    out.push_back(std::move(r));
  }
  return out;
}

TrainExample to_train_example(const TaskRecord& record) {
  TrainExample ex;
  ex.task = record.instruction.task;
  ex.payload = record.instruction.payload;
  ex.context = record.instruction.context;
  ex.target = record.target;
  return ex;
}

void MixtureConfig::validate() const {
  if (ratios.empty()) throw ValidationError("mixture has no datasets");
  double sum = 0.0;
  std::set<std::string> seen;
  for (const auto& [id, r] : ratios) {
    if (!(r > 0.0)) throw ValidationError("mixture ratio for '" + id + "' must be positive");
    if (!seen.insert(id).second) throw ValidationError("mixture lists '" + id + "' twice");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("mixture ratios must sum to 1");
}

MixtureConfig MixtureConfig::desk() {
  return {{{"subject", 0.40},
           {"txt2img", 0.15},
           {"art", 0.05},
           {"control2img-depth", 0.06},
           {"control2img-mask", 0.06},
           {"control2img-edge", 0.06},
           {"sketch", 0.02},
           {"styled", 0.10},
           {"style-transfer", 0.10}}};
}

MixtureSampler::MixtureSampler(MixtureConfig config, const std::map<std::string, std::size_t>& sizes,
                               std::uint64_t seed)
    : config_(std::move(config)), rng_(seed) {
  config_.validate();
  double acc = 0.0;
  for (std::size_t i = 0; i < config_.ratios.size(); ++i) {
    const auto& [id, ratio] = config_.ratios[i];
    auto it = sizes.find(id);
    if (it == sizes.end()) throw ValidationError("mixture ratio given for missing dataset '" + id + "'");
    if (it->second == 0) throw ValidationError("dataset '" + id + "' is empty");
    acc += ratio;
    cumulative_.push_back(acc);
    sizes_.push_back(it->second);
    shuffle_rng_.push_back(Rng::derive(seed, 1 + i));
    order_.emplace_back();
    cursor_.push_back(0);
    reshuffle(i);
  }
  cumulative_.back() = 1.0;
}

void MixtureSampler::reshuffle(std::size_t d) {
  auto& order = order_[d];
  order.resize(sizes_[d]);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng& r = shuffle_rng_[d];
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  cursor_[d] = 0;
}

MixtureDraw MixtureSampler::next() {
  const double u = rng_.uniform();
  std::size_t d = 0;
  while (d + 1 < cumulative_.size() && u >= cumulative_[d]) ++d;
  if (cursor_[d] == order_[d].size()) reshuffle(d);
  return {d, order_[d][cursor_[d]++]};
}

}  // namespace instructdiff
