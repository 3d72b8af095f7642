#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "instructdiff/corpus.hpp"
#include "instructdiff/error.hpp"
#include "instructdiff/eval_service.hpp"
#include "instructdiff/evalsvc.hpp"
#include "instructdiff/image_io.hpp"
#include "instructdiff/runs.hpp"
#include "instructdiff/suite.hpp"

using namespace instructdiff;
namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

const fs::path kDataDir = INSTRUCTDIFF_DATA_DIR;

EvalService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

void say(const std::string& line) { std::cerr << line << std::endl; }

// Config file plus "key=value" overrides; relative corpus/datasets paths in
// the file resolve against the file's directory.
TrainConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  TrainConfig c = parse_train_config(text.str());
  const fs::path base = path.parent_path();
  if (!c.corpus.empty()) c.corpus = resolve_path(base, c.corpus).string();
  if (!c.datasets.empty()) c.datasets = resolve_path(base, c.datasets).string();
  if (!overrides.empty()) {
    std::string extra = text.str() + "\n";
    for (const auto& kv : overrides) {
      if (kv.find('=') == std::string::npos) throw ValidationError("--set expects key=value, got '" + kv + "'");
      extra += kv + "\n";
    }
    TrainConfig o = parse_train_config(extra);
    o.corpus = c.corpus;
    o.datasets = c.datasets;
    for (const auto& kv : overrides) {
      const std::string key = kv.substr(0, kv.find('='));
      const std::string value = kv.substr(kv.find('=') + 1);
      if (key == "corpus") o.corpus = value;
      if (key == "datasets") o.datasets = value;
    }
    c = o;
  }
  return c;
}

std::string output_name(const MultiModalInstruction& ins, std::size_t index) {
  if (ins.target_path) return fs::path(*ins.target_path).filename().string();
  char buf[32];
  std::snprintf(buf, sizeof buf, "%05zu.png", index);
  return buf;
}

// ---------------------------------------------------------------------------

struct BuildCorpusFlags {
  int n = 5000;
  std::uint64_t seed = 7;
  std::string out;
  double tau_dup = 0.98;
  double dup_fraction = 0.05;
};

int cmd_build_corpus(const BuildCorpusFlags& f) {
  Stopwatch clock;
  ClusterOptions cluster;
  cluster.tau_dup = f.tau_dup;
  cluster.validate();
  CorpusOptions co;
  co.n = f.n;
  co.seed = f.seed;
  co.duplicate_fraction = f.dup_fraction;
  const auto records = build_corpus(co);
  const auto clusters = build_clusters(records, cluster);
  const fs::path out(f.out);
  write_corpus(out, records, clusters);

  RunManifest m;
  m.command = "build-corpus";
  m.config = {{"n", f.n}, {"tau_dup", f.tau_dup}, {"dup_fraction", f.dup_fraction}, {"records", records.size()},
              {"clusters", clusters.size()}};
  m.seeds["seed"] = f.seed;
  for (const char* name : {"records.jsonl", "clusters.jsonl", "images"}) m.add_output(name, out / name);
  m.wall_seconds = clock.seconds();
  m.write(out / "manifest.json");
  std::cout << records.size() << " records, " << clusters.size() << " clusters -> " << out.string() << "\n";
  return 0;
}

struct BuildDatasetFlags {
  std::string id;
  int n = 400;
  std::uint64_t seed = 11;
  std::string out;
  std::string templates = (kDataDir / "templates").string();
};

int cmd_build_dataset(const BuildDatasetFlags& f) {
  Stopwatch clock;
  const TemplateBank bank = TemplateBank::load(f.templates);
  std::vector<std::string> ids;
  if (f.id == "all") {
    for (const auto& [id, ratio] : MixtureConfig::desk().ratios) ids.push_back(id);
  } else {
    ids.push_back(dataset_spec(f.id).id);
  }
  RunManifest m;
  m.command = "build-dataset";
  m.config = {{"id", f.id}, {"n", f.n}};
  m.seeds["seed"] = f.seed;
  m.add_input("templates", f.templates);
  const fs::path out(f.out);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    // Per-dataset seed, stable under the "all" ordering.
    const std::uint64_t seed = ids.size() == 1 ? f.seed : splitmix64(f.seed + 100 + k);
    const fs::path dir = ids.size() == 1 ? out : out / ids[k];
    write_task_dataset(dir, ids[k], build_task_dataset(ids[k], f.n, seed, bank));
    for (const char* name : {"records.jsonl", "annotations.jsonl", "images"})
      m.add_output(ids[k] + "/" + name, dir / name);
    std::cout << ids[k] << ": " << f.n << " records -> " << dir.string() << "\n";
  }
  m.wall_seconds = clock.seconds();
  m.write(out / "manifest.json");
  return 0;
}

struct TrainFlags {
  std::string stage;
  std::string config;
  std::string init;
  bool ablate = false;
  std::string out;
  std::vector<std::string> set;
};

int cmd_train(const TrainFlags& f) {
  Stopwatch clock;
  TrainRun run;
  run.config = load_config(f.config, f.set);
  run.config.stage = parse_stage(f.stage);
  if (!f.init.empty()) run.init = f.init;
  run.ablate_no_retrieval = f.ablate;
  run.out = f.out;
  const std::int64_t every = std::max<std::int64_t>(1, run.config.total_steps / 20);
  run.on_step = [&](std::int64_t step, double loss, double lr) {
    if (step % every == 0 || step == run.config.total_steps) {
      say("step " + std::to_string(step) + "/" + std::to_string(run.config.total_steps) + " loss " +
          std::to_string(loss) + " lr " + std::to_string(lr));
    }
  };
  const auto result = run_train(run);

  RunManifest m;
  m.command = "train";
  m.config = run.config.to_json();
  m.config["ablate_no_retrieval"] = f.ablate;
  m.seeds["seed"] = run.config.seed;
  m.add_input("config", f.config);
  if (run.init) m.add_input("init", *run.init);
  if (run.config.stage == Stage::kRetrieval) {
    m.add_input("corpus", run.config.corpus);
  } else {
    for (const auto& [id, ratio] : run.config.mixture.ratios) m.add_input("datasets/" + id, fs::path(run.config.datasets) / id);
  }
  m.add_output("final.ckpt", run.out / "final.ckpt");
  m.add_output("loss.csv", run.out / "loss.csv");
  m.wall_seconds = clock.seconds();
  m.write(run.out / "manifest.json");
  std::cout << "trained " << result.checkpoint.step << " steps, final loss " << result.losses.back() << " -> "
            << (run.out / "final.ckpt").string() << "\n";
  return 0;
}

struct SampleFlags {
  std::string ckpt;
  std::string instruction;
  int steps = 256;
  double guidance = 25.0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_sample(const SampleFlags& f) {
  Stopwatch clock;
  const Sampler sampler(load_checkpoint(f.ckpt));
  ParseOptions po;
  po.base_dir = fs::path(f.instruction).parent_path();
  po.image_size = sampler.backbone().resolution;
  const auto instructions = read_instruction_file(f.instruction, po);
  if (instructions.empty()) throw ValidationError(f.instruction + " holds no instructions");
  SampleSettings settings{f.steps, f.guidance, f.seed};

  RunManifest m;
  m.command = "sample";
  m.config = {{"steps", f.steps}, {"guidance", f.guidance}, {"weights", "ema"}, {"instructions", instructions.size()}};
  m.seeds["seed"] = f.seed;
  m.add_input("ckpt", f.ckpt);
  m.add_input("instruction", f.instruction);
  const fs::path out(f.out);
  fs::create_directories(out);
  std::set<std::string> names;
  for (std::size_t i = 0; i < instructions.size(); ++i) {
    const std::string name = output_name(instructions[i], i);
    if (!names.insert(name).second) throw ValidationError("two instructions map to output " + name);
    save_png(sampler.sample(instructions[i], settings, i), out / name);
    m.add_output(name, out / name);
  }
  m.wall_seconds = clock.seconds();
  m.write(out / "manifest.json");
  std::cout << instructions.size() << " image(s) -> " << out.string() << "\n";
  return 0;
}

struct ServeFlags {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string inventory;
  std::string log;
  std::string snapshot;
  std::string static_dir;
  int redundancy = 3;
};

int cmd_eval_serve(const ServeFlags& f) {
  ServiceConfig c;
  c.inventory = Inventory::load(f.inventory);
  c.log_path = f.log;
  c.snapshot_path = f.snapshot;
  c.static_dir = f.static_dir;
  c.redundancy = f.redundancy;
  EvalService service(std::move(c));
  const int port = service.bind(f.host, f.port);
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "listening on http://" << f.host << ":" << port << std::endl;
  service.run();
  g_service = nullptr;
  return 0;
}

struct ReportFlags {
  std::string log;
  std::string task;
  int r_min = 3;
  bool lenient = false;
  bool fixture_check = false;
  std::string fixtures = (kDataDir / "fixtures").string();
  std::string out;
};

int cmd_eval_report(const ReportFlags& f) {
  if (f.log.empty() && !f.fixture_check) throw ValidationError("give --log, --fixture-check, or both");
  int status = 0;
  if (f.fixture_check) {
    const auto rows = load_published_rows(fs::path(f.fixtures) / "published.csv");
    const auto checks = check_published_rows(rows, f.fixtures);
    std::size_t failed = 0;
    for (const auto& c : checks) {
      failed += !c.pass;
      std::printf("%s %-18s %-10s %-11s %-18s %-28s published %.3f computed %.4f\n", c.pass ? "PASS" : "FAIL",
                  c.row->group.c_str(), c.row->split.c_str(), c.row->task.c_str(), c.row->method.c_str(), c.rule.c_str(),
                  c.expected, c.computed);
    }
    std::printf("%zu of %zu checks within tolerance\n", checks.size() - failed, checks.size());
    if (failed) status = 1;
  }
  if (!f.log.empty()) {
    const auto contents = read_ratings_log(f.log, f.lenient);
    for (const auto& e : contents.errors) say(f.log + ":" + std::to_string(e.line) + ": skipped: " + e.message);
    std::optional<std::string> task;
    if (!f.task.empty()) task = f.task;
    const auto report = aggregate(contents.records, f.r_min, task).to_json();
    if (!f.out.empty()) {
      std::ofstream(f.out) << report.dump(2) << '\n';
    } else {
      std::cout << report.dump(2) << '\n';
    }
  }
  return status;
}

struct AutoFlags {
  std::string samples;
  std::string records;
  std::string out;
};

int cmd_eval_auto(const AutoFlags& f) {
  const auto records = read_task_dataset(f.records);
  std::vector<AutoMetricResult> results;
  ordered_json rows = ordered_json::array();
  for (const auto& r : records) {
    const std::string name = fs::path(*r.instruction.target_path).filename().string();
    const fs::path file = fs::path(f.samples) / name;
    if (!fs::exists(file)) throw ValidationError("no sample " + file.string() + " for record " + name);
    results.push_back(auto_metrics(load_png(file), r));
    auto row = results.back().to_json();
    row["sample"] = name;
    rows.push_back(std::move(row));
  }
  ordered_json j;
  j["samples"] = rows;
  j["summary"] = ordered_json::array();
  for (const auto& s : summarize(results)) j["summary"].push_back(s.to_json());
  if (!f.out.empty()) std::ofstream(f.out) << j.dump(2) << '\n';
  std::cout << j["summary"].dump(2) << '\n';
  return 0;
}

struct SuiteFlags {
  std::string workdir;
  std::string stage1 = (kDataDir / "configs" / "desk_stage1.cfg").string();
  std::string stage2 = (kDataDir / "configs" / "desk_stage2.cfg").string();
  std::uint64_t seed = 7;
  int corpus_n = 3000;
  int dataset_n = 400;
  int eval_n = 48;
  std::int64_t stage1_steps = 0;
  std::int64_t stage2_steps = 0;
  int sample_steps = 256;
  double guidance = 25.0;
  bool no_ablation = false;
};

int cmd_desk_suite(const SuiteFlags& f) {
  DeskSuiteOptions o;
  o.workdir = f.workdir;
  o.templates = kDataDir / "templates";
  o.seed = f.seed;
  o.corpus_n = f.corpus_n;
  o.dataset_n = f.dataset_n;
  o.eval_n = f.eval_n;
  o.stage1 = load_config(f.stage1, {});
  o.stage2 = load_config(f.stage2, {});
  if (f.stage1_steps > 0) o.stage1.total_steps = f.stage1_steps;
  if (f.stage2_steps > 0) o.stage2.total_steps = f.stage2_steps;
  for (TrainConfig* c : {&o.stage1, &o.stage2}) c->warmup_steps = std::min(c->warmup_steps, c->total_steps);
  o.sampling = {f.sample_steps, f.guidance, f.seed};
  o.ablation = !f.no_ablation;
  o.log = say;
  Stopwatch clock;
  const auto report = run_desk_suite(o);

  RunManifest m;
  m.command = "desk-suite";
  m.config = {{"corpus_n", f.corpus_n}, {"dataset_n", f.dataset_n}, {"eval_n", f.eval_n},
              {"stage1", o.stage1.to_json()}, {"stage2", o.stage2.to_json()},
              {"sample_steps", f.sample_steps}, {"guidance", f.guidance}, {"ablation", o.ablation}};
  m.seeds["seed"] = f.seed;
  m.add_input("templates", o.templates);
  const fs::path work(f.workdir);
  m.add_output("suite_report.json", work / "suite_report.json");
  for (const char* arm : {"stage1", "stage2", "ablation"})
    if (fs::exists(work / arm / "final.ckpt")) m.add_output(std::string(arm) + "/final.ckpt", work / arm / "final.ckpt");
  m.add_output("samples", work / "samples");
  m.wall_seconds = clock.seconds();
  m.write(work / "manifest.json");
  std::cout << report.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"instructdiff: multi-modal instruction diffusion at desk scale"};
  app.require_subcommand(1);

  BuildCorpusFlags bc;
  auto* build_corpus_cmd = app.add_subcommand("build-corpus", "Render the retrieval corpus and mine clusters");
  build_corpus_cmd->add_option("--n", bc.n, "records to render")->capture_default_str();
  build_corpus_cmd->add_option("--seed", bc.seed)->capture_default_str();
  build_corpus_cmd->add_option("--out", bc.out)->required();
  build_corpus_cmd->add_option("--tau-dup", bc.tau_dup, "near-duplicate cosine threshold")->capture_default_str();
  build_corpus_cmd->add_option("--dup-fraction", bc.dup_fraction)->capture_default_str();

  BuildDatasetFlags bd;
  auto* build_dataset_cmd = app.add_subcommand("build-dataset", "Render an instruction-tuning dataset");
  build_dataset_cmd->add_option("--id", bd.id, "dataset id, or 'all' for the training mixture")->required();
  build_dataset_cmd->add_option("--n", bd.n)->capture_default_str();
  build_dataset_cmd->add_option("--seed", bd.seed)->capture_default_str();
  build_dataset_cmd->add_option("--out", bd.out)->required();
  build_dataset_cmd->add_option("--templates", bd.templates)->capture_default_str();

  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Run one training stage");
  train_cmd->add_option("--stage", tf.stage)->required()->check(CLI::IsMember({"retrieval", "instruct"}));
  train_cmd->add_option("--config", tf.config)->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--init", tf.init, "stage-1 checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_flag("--ablate-no-retrieval", tf.ablate, "train the instruct stage from scratch");
  train_cmd->add_option("--out", tf.out)->required();
  train_cmd->add_option("--set", tf.set, "config override key=value");

  SampleFlags sf;
  auto* sample_cmd = app.add_subcommand("sample", "Generate images from instructions with EMA weights");
  sample_cmd->add_option("--ckpt", sf.ckpt)->required()->check(CLI::ExistingFile);
  sample_cmd->add_option("--instruction", sf.instruction, "JSON-lines instruction file")->required()->check(CLI::ExistingFile);
  sample_cmd->add_option("--steps", sf.steps)->capture_default_str();
  sample_cmd->add_option("--guidance", sf.guidance)->capture_default_str();
  sample_cmd->add_option("--seed", sf.seed)->capture_default_str();
  sample_cmd->add_option("--out", sf.out, "output directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "Human and automatic evaluation");
  eval_cmd->require_subcommand(1);
  ServeFlags sv;
  auto* serve_cmd = eval_cmd->add_subcommand("serve", "Serve the rating API");
  serve_cmd->add_option("--host", sv.host)->capture_default_str();
  serve_cmd->add_option("--port", sv.port)->capture_default_str();
  serve_cmd->add_option("--inventory", sv.inventory)->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--log", sv.log, "append-only ratings log")->required();
  serve_cmd->add_option("--snapshot", sv.snapshot);
  serve_cmd->add_option("--static", sv.static_dir, "directory served under /static")->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--redundancy", sv.redundancy)->capture_default_str();

  ReportFlags rf;
  auto* report_cmd = eval_cmd->add_subcommand("report", "Aggregate a ratings log or check the published fixtures");
  report_cmd->add_option("--log", rf.log)->check(CLI::ExistingFile);
  report_cmd->add_option("--task", rf.task);
  report_cmd->add_option("--r-min", rf.r_min)->capture_default_str();
  report_cmd->add_flag("--lenient", rf.lenient, "skip malformed log lines");
  report_cmd->add_flag("--fixture-check", rf.fixture_check);
  report_cmd->add_option("--fixtures", rf.fixtures)->capture_default_str();
  report_cmd->add_option("--out", rf.out);

  AutoFlags af;
  auto* auto_cmd = eval_cmd->add_subcommand("auto", "Automatic condition-fidelity metrics");
  auto_cmd->add_option("--samples", af.samples)->required()->check(CLI::ExistingDirectory);
  auto_cmd->add_option("--records", af.records, "dataset directory")->required()->check(CLI::ExistingDirectory);
  auto_cmd->add_option("--out", af.out);

  SuiteFlags su;
  auto* suite_cmd = app.add_subcommand("desk-suite", "End-to-end desk training and zero-shot evaluation");
  suite_cmd->add_option("--workdir", su.workdir)->required();
  suite_cmd->add_option("--stage1-config", su.stage1)->capture_default_str();
  suite_cmd->add_option("--stage2-config", su.stage2)->capture_default_str();
  suite_cmd->add_option("--seed", su.seed)->capture_default_str();
  suite_cmd->add_option("--corpus-n", su.corpus_n)->capture_default_str();
  suite_cmd->add_option("--dataset-n", su.dataset_n)->capture_default_str();
  suite_cmd->add_option("--eval-n", su.eval_n)->capture_default_str();
  suite_cmd->add_option("--stage1-steps", su.stage1_steps, "override total_steps");
  suite_cmd->add_option("--stage2-steps", su.stage2_steps, "override total_steps");
  suite_cmd->add_option("--sample-steps", su.sample_steps)->capture_default_str();
  suite_cmd->add_option("--guidance", su.guidance)->capture_default_str();
  suite_cmd->add_flag("--no-ablation", su.no_ablation);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*build_corpus_cmd) return cmd_build_corpus(bc);
    if (*build_dataset_cmd) return cmd_build_dataset(bd);
    if (*train_cmd) return cmd_train(tf);
    if (*sample_cmd) return cmd_sample(sf);
    if (*serve_cmd) return cmd_eval_serve(sv);
    if (*report_cmd) return cmd_eval_report(rf);
    if (*auto_cmd) return cmd_eval_auto(af);
    if (*suite_cmd) return cmd_desk_suite(su);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
