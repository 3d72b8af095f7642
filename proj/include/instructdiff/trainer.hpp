#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "instructdiff/backbone.hpp"
#include "instructdiff/corpus.hpp"

namespace instructdiff {

enum class Stage { kRetrieval, kInstruct };
enum class OptimizerKind { kAdam, kAdafactor };

std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view s);
std::string_view to_string(OptimizerKind kind);

struct TrainConfig {
  Stage stage = Stage::kRetrieval;
  std::string backbone = "desk";  // desk | micro
  double lr = 1e-4;
  std::int64_t warmup_steps = 10000;
  std::int64_t total_steps = 500000;
  int batch_size = 16;
  double ema_decay = 0.9999;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // max global norm, 0 disables
  int diffusion_steps = 256;
  double p_drop_all = 0.1;
  double p_drop_context = 0.1;
  std::int64_t checkpoint_every = 500;
  int keep_checkpoints = 2;
  std::string corpus;    // stage-1 corpus directory
  std::string datasets;  // stage-2 root holding one directory per dataset id
  MixtureConfig mixture = MixtureConfig::desk();

  void validate() const;
  BackboneConfig backbone_config() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Flat "key = value" text, '#' comments. Mixture entries are "mixture.<id> = ratio";
// any mixture key replaces the whole default table.
TrainConfig parse_train_config(std::string_view text);
TrainConfig load_train_config(const std::filesystem::path& path);

// Linear warmup from 0 to lr over warmup_steps, then constant.
double lr_at(std::int64_t step, const TrainConfig& config);

template <class T>
struct EmaState {
  double decay = 0.9999;
  ParameterSet<T> shadow;
};

// shadow <- decay * shadow + (1 - decay) * live
template <class T>
void ema_update(EmaState<T>& ema, const ParameterSet<T>& live);

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::kAdam;
  std::int64_t updates = 0;
  // Adam: "m/<path>", "v/<path>". Adafactor: "m/<path>" plus "row/<path>" and
  // "col/<path>" for matrices or "v/<path>" for vectors.
  ParameterSet<float> slots;
};

OptimizerState init_optimizer(OptimizerKind kind, const ParameterSet<float>& params);

void optimizer_step(OptimizerState& state, ParameterSet<float>& params, const ParameterSet<float>& grads, double lr,
                    const TrainConfig& config);

// Scales grads in place so their global L2 norm is at most max_norm; returns the pre-clip norm.
double clip_grad_norm(ParameterSet<float>& grads, double max_norm);

inline constexpr int kCheckpointSchema = 1;

struct Checkpoint {
  int schema_version = kCheckpointSchema;
  BackboneConfig backbone;
  nlohmann::ordered_json config;  // TrainConfig echo
  std::int64_t step = 0;
  ParameterSet<float> params;
  ParameterSet<float> ema;
  OptimizerState optimizer;
};

// Layout: 8-byte magic, u64 LE manifest length, JSON manifest (per-tensor
// offsets, shapes, crc32), float32 LE payload.
std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws ValidationError listing missing and unexpected paths (or shape
// mismatches) when params do not match the layout implied by config.
void require_layout(const ParameterSet<float>& params, const BackboneConfig& config);

// Yields training examples in a seed-fixed order; nullopt when a finite stream ends.
class ExampleStream {
 public:
  virtual ~ExampleStream() = default;
  virtual std::optional<TrainExample> next() = 0;
};

// Stage 1: a uniformly drawn cluster, then sample_retrieval_example.
class RetrievalStream : public ExampleStream {
 public:
  RetrievalStream(std::vector<CorpusRecord> records, std::vector<Cluster> clusters, std::uint64_t seed);
  std::optional<TrainExample> next() override;

 private:
  std::vector<CorpusRecord> records_;
  std::vector<Cluster> clusters_;
  std::map<int, const CorpusRecord*> index_;
  Rng rng_;
};

struct DatasetSource {
  std::string id;
  std::size_t size = 0;
  std::function<TrainExample(std::size_t)> load;
};

// Reads records lazily from a dataset directory written by write_task_dataset.
DatasetSource dataset_source(const std::filesystem::path& dir, std::string id);

// Stage 2: MixtureSampler over the named sources.
class MixtureStream : public ExampleStream {
 public:
  MixtureStream(std::vector<DatasetSource> sources, const MixtureConfig& mixture, std::uint64_t seed);
  std::optional<TrainExample> next() override;

 private:
  std::vector<DatasetSource> sources_;
  std::vector<std::size_t> source_of_;  // mixture index -> source index
  MixtureSampler sampler_;
};

// Fixed list, optionally cycled; for tests and overfit checks.
class ListStream : public ExampleStream {
 public:
  ListStream(std::vector<TrainExample> examples, bool cycle);
  std::optional<TrainExample> next() override;

 private:
  std::vector<TrainExample> examples_;
  bool cycle_;
  std::size_t cursor_ = 0;
};

struct TrainOptions {
  std::filesystem::path checkpoint_dir;  // empty: no periodic checkpoints
  std::filesystem::path loss_csv;        // empty: no trace file
  std::function<void(std::int64_t step, double loss, double lr)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;  // one per step
};

// Runs config.total_steps updates. `init` supplies starting parameters (step
// counter, optimizer and EMA restart from it); without it the parameters are
// freshly initialized from config.seed.
TrainResult train_stage(const TrainConfig& config, ExampleStream& stream, const std::optional<Checkpoint>& init,
                        const TrainOptions& options = {});

}  // namespace instructdiff
