#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "instructdiff/instruction.hpp"
#include "instructdiff/rng.hpp"
#include "instructdiff/tensor.hpp"

namespace instructdiff {

// ---------------------------------------------------------------------------
// Procedural world: one bright shape on a dark textured background.

constexpr int kWorldSize = 32;

enum class ShapeKind { kCircle, kSquare, kTriangle };
constexpr int kShapeKinds = 3;

enum class Texture { kStripesH, kChecker, kStripesV, kDots, kDiagonal, kBlocks };

struct SubjectColor {
  std::string_view name;
  std::array<float, 3> rgb;  // [0, 1]
};

struct StylePalette {
  std::string_view name;
  std::array<float, 3> primary;    // dark, [0, 0.45]
  std::array<float, 3> secondary;  // dark, [0, 0.45]
  Texture texture;
};

const std::vector<SubjectColor>& subject_colors();
const std::vector<StylePalette>& style_palettes();
std::string_view to_string(ShapeKind kind);
ShapeKind parse_shape_kind(std::string_view name);

struct WorldAnnotation {
  bool has_shape = true;
  ShapeKind shape = ShapeKind::kCircle;
  int color = 0;  // index into subject_colors()
  int style = 0;  // index into style_palettes()
  double cx = 16.0;
  double cy = 16.0;
  double radius = 7.0;

  int subject_id() const { return color * kShapeKinds + static_cast<int>(shape); }
  friend bool operator==(const WorldAnnotation&, const WorldAnnotation&) = default;
};

nlohmann::ordered_json to_json(const WorldAnnotation& a);
WorldAnnotation annotation_from_json(const nlohmann::json& j);

WorldAnnotation random_annotation(Rng& rng);
// Redraws position and radius only.
void randomize_placement(WorldAnnotation& a, Rng& rng);

// 1 if the pixel center (x + 0.5, y + 0.5) lies inside the shape.
bool inside_shape(const WorldAnnotation& a, int x, int y);
double analytic_area(const WorldAnnotation& a);
int texture_bit(Texture texture, int x, int y);

ImageTensor render(const WorldAnnotation& a);

std::string position_phrase(const WorldAnnotation& a);

struct CaptionParts {
  bool subject = true;
  bool style = true;
  bool position = true;
};

// e.g. "a red circle in ember style at the top left"
std::string caption(const WorldAnnotation& a, CaptionParts parts = {});

struct WorldSample {
  ImageTensor image;
  WorldAnnotation annotation;
  std::string caption;
};

std::vector<WorldSample> synth_world(int n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Controls. Single-channel maps are H x W x 1 in [0, 1].

Tensor<float> shape_mask(const WorldAnnotation& a);
// Mask pixels with a 4-neighbour outside the mask.
Tensor<float> mask_boundary(const Tensor<float>& mask);
// Square (Chebyshev) dilation.
Tensor<float> dilate(const Tensor<float>& map, int radius);
// Background pixels where the texture bit changes to the right or below.
Tensor<float> texture_edges(const WorldAnnotation& a);
Tensor<float> depth_map(const WorldAnnotation& a);

struct Controls {
  Tensor<float> edge;
  Tensor<float> mask;
  Tensor<float> depth;
};

Controls derive_controls(const ImageTensor& image, const WorldAnnotation& a, int dilation = 0,
                         bool with_texture_edges = false);

// [0, 1] single channel -> 3-channel image in [-1, 1].
ImageTensor control_image(const Tensor<float>& map);

// ---------------------------------------------------------------------------
// Retrieval corpus

constexpr int kFeatureDim = 32;

// 16 hashed colour bins followed by a 4x4 foreground-occupancy grid,
// unit-normalized.
std::vector<double> image_feature(const ImageTensor& image);
double cosine(const std::vector<double>& a, const std::vector<double>& b);

struct CorpusRecord {
  int id = 0;
  ImageTensor image;
  std::string caption;
  std::string url;
  double quality = 0.0;
  std::vector<double> feature;
  std::string domain;
  WorldAnnotation annotation;
};

struct CorpusOptions {
  int n = 5000;
  std::uint64_t seed = 7;
  double duplicate_fraction = 0.05;
  double quality_min = 0.1;
};

// Renders n records, injects near-duplicates (half of them re-using the
// source url) and drops records below the quality floor.
std::vector<CorpusRecord> build_corpus(const CorpusOptions& options);

struct Cluster {
  int seed_id = 0;
  std::string domain;
  std::vector<int> members;  // record ids, most similar to the seed first
};

struct ClusterOptions {
  double tau_dup = 0.98;
  int k_nn = 10;
  int size = 5;

  void validate() const;
};

std::vector<Cluster> build_clusters(const std::vector<CorpusRecord>& records, const ClusterOptions& options = {});

void write_corpus(const std::filesystem::path& dir, const std::vector<CorpusRecord>& records,
                  const std::vector<Cluster>& clusters);
std::vector<CorpusRecord> read_corpus_records(const std::filesystem::path& dir);
std::vector<Cluster> read_clusters(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Training examples

struct DropoutFlags {
  bool drop_all = false;
  bool drop_context = false;
};

// Two independent p-draws; drop_all wins when both fire. R needs uniform().
template <class R>
DropoutFlags draw_condition_dropout(R& rng, double p_all = 0.1, double p_context = 0.1) {
  DropoutFlags f;
  const double a = rng.uniform();
  const double c = rng.uniform();
  f.drop_all = a < p_all;
  f.drop_context = !f.drop_all && c < p_context;
  return f;
}

struct RetrievalExample {
  int target_id = 0;
  std::string text;
  std::vector<int> context_ids;
  std::vector<std::string> context_texts;
  DropoutFlags dropout;
};

// Uniform target, 3 of the remaining 4 members as context with ref#1..ref#3.
RetrievalExample sample_retrieval_example(const Cluster& cluster, const std::map<int, const CorpusRecord*>& index,
                                          Rng& rng);

template <class R>
RetrievalExample apply_condition_dropout(RetrievalExample example, R& rng) {
  example.dropout = draw_condition_dropout(rng);
  return example;
}

// A fully materialized conditioning + target pair, the unit the trainer eats.
struct TrainExample {
  TaskKind task = TaskKind::kTxt2Img;
  std::string payload;
  std::vector<ContextPair> context;  // images loaded
  ImageTensor target;
};

TrainExample apply_dropout(TrainExample example, const DropoutFlags& flags);

// ---------------------------------------------------------------------------
// Instruction-tuning datasets

struct DatasetSpec {
  std::string id;
  TaskKind kind;
};

// Every dataset id the builder knows; style-mask is evaluation-only.
const std::vector<DatasetSpec>& dataset_specs();
const DatasetSpec& dataset_spec(std::string_view id);

struct TaskRecord {
  MultiModalInstruction instruction;  // images attached
  ImageTensor target;
  WorldAnnotation target_annotation;
  std::vector<WorldAnnotation> context_annotations;
  int dilation = 0;
};

struct TemplateBank {
  std::map<TaskKind, std::vector<InstructionTemplate>> by_kind;
  std::vector<InstructionTemplate> art;

  static TemplateBank load(const std::filesystem::path& dir);
};

std::vector<TaskRecord> build_task_dataset(std::string_view dataset_id, int n, std::uint64_t seed,
                                           const TemplateBank& templates);

// records.jsonl + annotations.jsonl + images/.
void write_task_dataset(const std::filesystem::path& dir, std::string_view dataset_id,
                        const std::vector<TaskRecord>& records);
std::vector<TaskRecord> read_task_dataset(const std::filesystem::path& dir);

TrainExample to_train_example(const TaskRecord& record);

// ---------------------------------------------------------------------------
// Mixture sampling

struct MixtureConfig {
  std::vector<std::pair<std::string, double>> ratios;

  void validate() const;
  // Mixture ratios at desk scale; the face datasets' mass goes to subject.
  static MixtureConfig desk();
};

struct MixtureDraw {
  std::size_t dataset = 0;  // index into MixtureConfig::ratios
  std::size_t item = 0;
};

// Each draw takes one uniform() from Rng(seed) and picks the first dataset
// whose cumulative ratio exceeds it; each dataset then yields the next item of
// its own shuffled cycle (shuffle stream Rng::derive(seed, 1 + dataset index)).
class MixtureSampler {
 public:
  MixtureSampler(MixtureConfig config, const std::map<std::string, std::size_t>& sizes, std::uint64_t seed);

  MixtureDraw next();
  const MixtureConfig& config() const { return config_; }

 private:
  void reshuffle(std::size_t dataset);

  MixtureConfig config_;
  std::vector<double> cumulative_;
  std::vector<std::size_t> sizes_;
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::size_t> cursor_;
  std::vector<Rng> shuffle_rng_;
  Rng rng_;
};

}  // namespace instructdiff
