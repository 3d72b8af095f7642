#include <fstream>

#include "instructdiff/digest.hpp"
#include "instructdiff/error.hpp"
#include "instructdiff/pipeline.hpp"
#include "instructdiff/runs.hpp"

namespace instructdiff {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

void RunManifest::add_input(const std::string& label, const fs::path& path) { inputs[label] = sha256_path(path); }

void RunManifest::add_output(const std::string& label, const fs::path& path) { outputs[label] = sha256_path(path); }

ordered_json RunManifest::to_json() const {
  ordered_json j;
  j["command"] = command;
  j["config"] = config;
  j["seeds"] = seeds;
  j["inputs"] = ordered_json::object();
  for (const auto& [k, v] : inputs) j["inputs"][k] = v;
  j["outputs"] = ordered_json::object();
  for (const auto& [k, v] : outputs) j["outputs"][k] = v;
  j["wall_seconds"] = wall_seconds;
  return j;
}

void RunManifest::write(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

fs::path resolve_path(const fs::path& base, const std::string& path) {
  const fs::path p(path);
  return p.is_absolute() || base.empty() ? p : base / p;
}

std::unique_ptr<ExampleStream> make_train_stream(const TrainConfig& config) {
  if (config.stage == Stage::kRetrieval) {
    if (config.corpus.empty()) throw ValidationError("retrieval stage needs 'corpus' in the config");
    return std::make_unique<RetrievalStream>(read_corpus_records(config.corpus), read_clusters(config.corpus),
                                             splitmix64(config.seed ^ 0x7265747269657661ULL));
  }
  if (config.datasets.empty()) throw ValidationError("instruct stage needs 'datasets' in the config");
  std::vector<DatasetSource> sources;
  for (const auto& [id, ratio] : config.mixture.ratios) sources.push_back(dataset_source(fs::path(config.datasets) / id, id));
  return std::make_unique<MixtureStream>(std::move(sources), config.mixture, splitmix64(config.seed ^ 0x696e737472756374ULL));
}

TrainResult run_train(const TrainRun& run) {
  const TrainConfig& config = run.config;
  config.validate();
  std::optional<Checkpoint> init;
  if (run.init) {
    if (run.ablate_no_retrieval) throw ValidationError("--init and --ablate-no-retrieval exclude each other");
    init = load_checkpoint(*run.init);
  } else if (config.stage == Stage::kInstruct && !run.ablate_no_retrieval) {
    throw ValidationError(
        "the instruct stage starts from a retrieval-stage checkpoint: pass --init <ckpt>, or "
        "--ablate-no-retrieval to train the no-retrieval ablation arm from scratch");
  }
  auto stream = make_train_stream(config);
  fs::create_directories(run.out);
  TrainOptions options;
  options.checkpoint_dir = run.out / "checkpoints";
  options.loss_csv = run.out / "loss.csv";
  options.on_step = run.on_step;
  fs::create_directories(options.checkpoint_dir);
  TrainResult result = train_stage(config, *stream, init, options);
  save_checkpoint(result.checkpoint, run.out / "final.ckpt");
  return result;
}

Sampler::Sampler(Checkpoint checkpoint)
    : checkpoint_(std::move(checkpoint)),
      model_(checkpoint_.backbone, checkpoint_.ema),
      vocab_(vocabulary_for(checkpoint_.backbone)),
      schedule_(cosine_schedule(TrainConfig::from_json(checkpoint_.config).diffusion_steps)) {}

ImageTensor Sampler::sample(const MultiModalInstruction& instruction, const SampleSettings& settings,
                            std::uint64_t index) const {
  if (settings.steps < 1 || settings.steps > schedule_.steps()) {
    throw ValidationError("--steps must lie in [1, " + std::to_string(schedule_.steps()) + "]");
  }
  if (!(settings.guidance >= 1.0)) throw ValidationError("--guidance must be >= 1");
  SamplerOptions options;
  options.steps = settings.steps;
  options.guidance.high = settings.guidance;
  Rng rng = Rng::derive(settings.seed, index);
  return generate(model_, vocab_, instruction.payload, instruction.context, schedule_, options, rng);
}

}  // namespace instructdiff
