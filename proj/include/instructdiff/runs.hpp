#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "instructdiff/diffusion.hpp"
#include "instructdiff/instruction.hpp"
#include "instructdiff/trainer.hpp"

namespace instructdiff {

// What a command read and wrote, for reproducibility audits.
struct RunManifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  nlohmann::ordered_json seeds = nlohmann::ordered_json::object();
  std::map<std::string, std::string> inputs;   // label -> sha256
  std::map<std::string, std::string> outputs;  // label -> sha256
  double wall_seconds = 0.0;

  void add_input(const std::string& label, const std::filesystem::path& path);
  void add_output(const std::string& label, const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;
  void write(const std::filesystem::path& path) const;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Relative paths resolve against `base`; absolute ones pass through.
std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& path);

// Stage 1 reads config.corpus; stage 2 reads config.datasets/<id> for every
// mixture id. Stream seeds derive from config.seed.
std::unique_ptr<ExampleStream> make_train_stream(const TrainConfig& config);

struct TrainRun {
  TrainConfig config;
  std::optional<std::filesystem::path> init;
  bool ablate_no_retrieval = false;
  std::filesystem::path out;  // final.ckpt, loss.csv, checkpoints/
  std::function<void(std::int64_t, double, double)> on_step;
};

// Throws ValidationError when an instruct stage has neither an init
// checkpoint nor the ablation flag.
TrainResult run_train(const TrainRun& run);

struct SampleSettings {
  int steps = 256;
  double guidance = 25.0;
  std::uint64_t seed = 0;
};

// One image per instruction from the checkpoint's EMA weights. Instruction i
// uses noise stream Rng::derive(seed, i).
class Sampler {
 public:
  explicit Sampler(Checkpoint checkpoint);
  Sampler(const Sampler&) = delete;
  Sampler& operator=(const Sampler&) = delete;

  ImageTensor sample(const MultiModalInstruction& instruction, const SampleSettings& settings,
                     std::uint64_t index) const;
  const BackboneConfig& backbone() const { return checkpoint_.backbone; }
  int diffusion_steps() const { return schedule_.steps(); }

 private:
  Checkpoint checkpoint_;
  Backbone<float> model_;
  Vocabulary vocab_;
  NoiseSchedule schedule_;
};

}  // namespace instructdiff
