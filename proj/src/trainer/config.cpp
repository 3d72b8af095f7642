#include <charconv>
#include <fstream>
#include <sstream>

#include "instructdiff/error.hpp"
#include "instructdiff/trainer.hpp"

namespace instructdiff {

std::string_view to_string(Stage stage) { return stage == Stage::kRetrieval ? "retrieval" : "instruct"; }
std::string_view to_string(OptimizerKind kind) { return kind == OptimizerKind::kAdam ? "adam" : "adafactor"; }

Stage parse_stage(std::string_view s) {
  if (s == "retrieval") return Stage::kRetrieval;
  if (s == "instruct") return Stage::kInstruct;
  throw ValidationError("stage must be retrieval or instruct, got '" + std::string(s) + "'");
}

namespace {

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "adafactor") return OptimizerKind::kAdafactor;
  throw ValidationError("optimizer must be adam or adafactor, got '" + std::string(s) + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class N>
N number(const std::string& key, const std::string& v) {
  N out{};
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ValidationError("config key '" + key + "': bad number '" + v + "'");
  return out;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ValidationError("lr must be > 0");
  if (warmup_steps < 0 || total_steps < 1) throw ValidationError("need warmup_steps >= 0 and total_steps >= 1");
  if (warmup_steps > total_steps) throw ValidationError("warmup_steps must not exceed total_steps");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ValidationError("ema_decay must lie in (0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) throw ValidationError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ValidationError("adam_eps must be > 0");
  if (grad_clip < 0.0) throw ValidationError("grad_clip must be >= 0");
  if (diffusion_steps < 2) throw ValidationError("diffusion_steps must be >= 2");
  for (double p : {p_drop_all, p_drop_context})
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("dropout probabilities must lie in [0, 1]");
  if (checkpoint_every < 1 || keep_checkpoints < 1) throw ValidationError("checkpoint cadence must be >= 1");
  backbone_config();
  mixture.validate();
}

BackboneConfig TrainConfig::backbone_config() const {
  if (backbone == "desk") return BackboneConfig::desk();
  if (backbone == "micro") return BackboneConfig::micro();
  throw ValidationError("backbone must be desk or micro, got '" + backbone + "'");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = std::string(to_string(stage));
  j["backbone"] = backbone;
  j["lr"] = lr;
  j["warmup_steps"] = warmup_steps;
  j["total_steps"] = total_steps;
  j["batch_size"] = batch_size;
  j["ema_decay"] = ema_decay;
  j["seed"] = seed;
  j["optimizer"] = std::string(to_string(optimizer));
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["adam_eps"] = adam_eps;
  j["grad_clip"] = grad_clip;
  j["diffusion_steps"] = diffusion_steps;
  j["p_drop_all"] = p_drop_all;
  j["p_drop_context"] = p_drop_context;
  j["checkpoint_every"] = checkpoint_every;
  j["keep_checkpoints"] = keep_checkpoints;
  j["corpus"] = corpus;
  j["datasets"] = datasets;
  nlohmann::ordered_json mix = nlohmann::ordered_json::array();
  for (const auto& [id, r] : mixture.ratios) mix.push_back({id, r});
  j["mixture"] = mix;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.stage = parse_stage(j.at("stage").get<std::string>());
    c.backbone = j.at("backbone").get<std::string>();
    c.lr = j.at("lr").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<std::int64_t>();
    c.total_steps = j.at("total_steps").get<std::int64_t>();
    c.batch_size = j.at("batch_size").get<int>();
    c.ema_decay = j.at("ema_decay").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.adam_eps = j.at("adam_eps").get<double>();
    c.grad_clip = j.at("grad_clip").get<double>();
    c.diffusion_steps = j.at("diffusion_steps").get<int>();
    c.p_drop_all = j.at("p_drop_all").get<double>();
    c.p_drop_context = j.at("p_drop_context").get<double>();
    c.checkpoint_every = j.at("checkpoint_every").get<std::int64_t>();
    c.keep_checkpoints = j.at("keep_checkpoints").get<int>();
    c.corpus = j.at("corpus").get<std::string>();
    c.datasets = j.at("datasets").get<std::string>();
    c.mixture.ratios.clear();
    for (const auto& e : j.at("mixture")) c.mixture.ratios.emplace_back(e.at(0).get<std::string>(), e.at(1).get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  return c;
}

TrainConfig parse_train_config(std::string_view text) {
  TrainConfig c;
  bool mixture_reset = false;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string v = trim(std::string_view(line).substr(eq + 1));
    if (key == "stage") c.stage = parse_stage(v);
    else if (key == "backbone") c.backbone = v;
    else if (key == "lr") c.lr = number<double>(key, v);
    else if (key == "warmup_steps") c.warmup_steps = number<std::int64_t>(key, v);
    else if (key == "total_steps") c.total_steps = number<std::int64_t>(key, v);
    else if (key == "batch_size") c.batch_size = number<int>(key, v);
    else if (key == "ema_decay") c.ema_decay = number<double>(key, v);
    else if (key == "seed") c.seed = number<std::uint64_t>(key, v);
    else if (key == "optimizer") c.optimizer = parse_optimizer(v);
    else if (key == "beta1") c.beta1 = number<double>(key, v);
    else if (key == "beta2") c.beta2 = number<double>(key, v);
    else if (key == "adam_eps") c.adam_eps = number<double>(key, v);
    else if (key == "grad_clip") c.grad_clip = number<double>(key, v);
    else if (key == "diffusion_steps") c.diffusion_steps = number<int>(key, v);
    else if (key == "p_drop_all") c.p_drop_all = number<double>(key, v);
    else if (key == "p_drop_context") c.p_drop_context = number<double>(key, v);
    else if (key == "checkpoint_every") c.checkpoint_every = number<std::int64_t>(key, v);
    else if (key == "keep_checkpoints") c.keep_checkpoints = number<int>(key, v);
    else if (key == "corpus") c.corpus = v;
    else if (key == "datasets") c.datasets = v;
    else if (key.starts_with("mixture.")) {
      if (!mixture_reset) c.mixture.ratios.clear();
      mixture_reset = true;
      c.mixture.ratios.emplace_back(key.substr(8), number<double>(key, v));
    } else {
      throw ValidationError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

double lr_at(std::int64_t step, const TrainConfig& config) {
  if (config.warmup_steps == 0 || step >= config.warmup_steps) return config.lr;
  if (step <= 0) return 0.0;
  return config.lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
}

}  // namespace instructdiff
