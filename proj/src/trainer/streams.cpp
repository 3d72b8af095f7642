#include <fstream>

#include "instructdiff/error.hpp"
#include "instructdiff/image_io.hpp"
#include "instructdiff/trainer.hpp"

namespace instructdiff {

namespace fs = std::filesystem;

RetrievalStream::RetrievalStream(std::vector<CorpusRecord> records, std::vector<Cluster> clusters, std::uint64_t seed)
    : records_(std::move(records)), clusters_(std::move(clusters)), rng_(seed) {
  if (clusters_.empty()) throw ValidationError("retrieval stream needs at least one cluster");
  for (const auto& r : records_) index_[r.id] = &r;
}

std::optional<TrainExample> RetrievalStream::next() {
  const auto& cluster =
      clusters_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(clusters_.size()) - 1))];
  const RetrievalExample ex = sample_retrieval_example(cluster, index_, rng_);
  TrainExample out;
  out.task = TaskKind::kTxt2Img;
  out.payload = ex.text;
  out.target = index_.at(ex.target_id)->image;
  for (std::size_t k = 0; k < ex.context_ids.size(); ++k) {
    ContextPair p;
    p.marker = Marker(static_cast<int>(k) + 1);
    p.text = ex.context_texts[k];
    p.image = index_.at(ex.context_ids[k])->image;
    out.context.push_back(std::move(p));
  }
  return out;
}

DatasetSource dataset_source(const fs::path& dir, std::string id) {
  std::ifstream in(dir / "records.jsonl", std::ios::binary);
  if (!in) throw IoError("cannot open " + (dir / "records.jsonl").string());
  auto lines = std::make_shared<std::vector<std::string>>();
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines->push_back(line);
  if (lines->empty()) throw ValidationError("dataset " + dir.string() + " has no records");
  DatasetSource src;
  src.id = std::move(id);
  src.size = lines->size();
  src.load = [lines, dir](std::size_t i) {
    ParseOptions opts;
    opts.base_dir = dir;
    const auto ins = parse_instruction(lines->at(i), opts);
    if (!ins.target_path) throw ValidationError("dataset record " + std::to_string(i) + " has no target");
    TrainExample ex;
    ex.task = ins.task;
    ex.payload = ins.payload;
    ex.context = ins.context;
    ex.target = load_png(dir / *ins.target_path);
    return ex;
  };
  return src;
}

namespace {

std::map<std::string, std::size_t> source_sizes(const std::vector<DatasetSource>& sources) {
  std::map<std::string, std::size_t> out;
  for (const auto& s : sources) out[s.id] = s.size;
  return out;
}

}  // namespace

MixtureStream::MixtureStream(std::vector<DatasetSource> sources, const MixtureConfig& mixture, std::uint64_t seed)
    : sources_(std::move(sources)), sampler_(mixture, source_sizes(sources_), seed) {
  for (const auto& [id, ratio] : mixture.ratios) {
    std::size_t found = sources_.size();
    for (std::size_t i = 0; i < sources_.size(); ++i)
      if (sources_[i].id == id) found = i;
    if (found == sources_.size()) throw ValidationError("mixture names dataset '" + id + "' with no source");
    source_of_.push_back(found);
  }
}

std::optional<TrainExample> MixtureStream::next() {
  const MixtureDraw d = sampler_.next();
  return sources_[source_of_[d.dataset]].load(d.item);
}

ListStream::ListStream(std::vector<TrainExample> examples, bool cycle) : examples_(std::move(examples)), cycle_(cycle) {
  if (examples_.empty()) throw ValidationError("list stream is empty");
}

std::optional<TrainExample> ListStream::next() {
  if (cursor_ == examples_.size()) {
    if (!cycle_) return std::nullopt;
    cursor_ = 0;
  }
  return examples_[cursor_++];
}

}  // namespace instructdiff
