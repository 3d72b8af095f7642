#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "instructdiff/corpus.hpp"
#include "instructdiff/error.hpp"
#include "instructdiff/image_io.hpp"

namespace instructdiff {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr float kForegroundLevel = 0.3f;

void normalize(std::vector<double>& v, std::size_t begin, std::size_t end) {
  double n = 0.0;
  for (std::size_t i = begin; i < end; ++i) n += v[i] * v[i];
  n = std::sqrt(n);
  if (n == 0.0) return;
  for (std::size_t i = begin; i < end; ++i) v[i] /= n;
}

std::string image_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "images/%05d.png", id);
  return buf;
}

}  // namespace

std::vector<double> image_feature(const ImageTensor& image) {
  std::vector<double> f(kFeatureDim, 0.0);
  const int h = image.height();
  const int w = image.width();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int code = 0;
      float mx = -1.0f;
      for (int c = 0; c < 3; ++c) {
        const float v = image.at(y, x, c);
        mx = std::max(mx, v);
        const int q = std::clamp(static_cast<int>((v + 1.0f) * 0.5f * 4.0f), 0, 3);
        code = code * 4 + q;
      }
      f[splitmix64(static_cast<std::uint64_t>(code)) % 16] += 1.0;
      if (mx > kForegroundLevel) f[16 + (y * 4 / h) * 4 + (x * 4 / w)] += 1.0;
    }
  }
  normalize(f, 0, 16);
  normalize(f, 16, 32);
  normalize(f, 0, 32);
  return f;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / std::sqrt(na * nb);
}

std::vector<CorpusRecord> build_corpus(const CorpusOptions& options) {
  if (options.n < 1) throw ValidationError("corpus size must be >= 1");
  if (options.duplicate_fraction < 0.0 || options.duplicate_fraction >= 1.0) {
    throw ValidationError("duplicate fraction must lie in [0, 1)");
  }
  Rng rng(options.seed);
  std::vector<CorpusRecord> all;
  all.reserve(static_cast<std::size_t>(options.n));
  for (int i = 0; i < options.n; ++i) {
    CorpusRecord r;
    r.id = i;
    const bool dup = i > 0 && rng.uniform() < options.duplicate_fraction;
    if (dup) {
      const auto& src = all[static_cast<std::size_t>(rng.uniform_int(0, i - 1))];
      r.annotation = src.annotation;
      ImageTensor img = render(r.annotation);
      for (auto& v : img.storage()) v = std::clamp(v + static_cast<float>(0.06 * (rng.uniform() - 0.5)), -1.0f, 1.0f);
      r.image = quantize_image(img);
      r.url = rng.uniform() < 0.5 ? src.url : "https://desk.example/img/" + std::to_string(i);
    } else {
      r.annotation = random_annotation(rng);
      r.image = quantize_image(render(r.annotation));
      r.url = "https://desk.example/img/" + std::to_string(i);
    }
    r.quality = rng.uniform();
    r.caption = caption(r.annotation);
    r.domain = std::string(to_string(r.annotation.shape));
    r.feature = image_feature(r.image);
    all.push_back(std::move(r));
  }
  std::vector<CorpusRecord> kept;
  for (auto& r : all)
    if (r.quality >= options.quality_min) kept.push_back(std::move(r));
  return kept;
}

void ClusterOptions::validate() const {
  if (!(tau_dup > 0.0 && tau_dup <= 1.0)) throw ValidationError("tau_dup must lie in (0, 1]");
  if (k_nn < 1) throw ValidationError("k_nn must be >= 1");
  if (size < 1) throw ValidationError("cluster size must be >= 1");
}

std::vector<Cluster> build_clusters(const std::vector<CorpusRecord>& records, const ClusterOptions& options) {
  options.validate();
  if (records.empty()) throw ValidationError("build_clusters: empty input");
  std::map<std::string, std::vector<const CorpusRecord*>> domains;
  for (const auto& r : records) domains[r.domain].push_back(&r);
  std::vector<Cluster> out;
  for (auto& [domain, members] : domains) {
    std::sort(members.begin(), members.end(), [](auto* a, auto* b) { return a->id < b->id; });
    std::vector<std::pair<double, const CorpusRecord*>> sims;
    for (const CorpusRecord* seed : members) {
      sims.clear();
      for (const CorpusRecord* other : members) {
        if (other != seed) sims.emplace_back(cosine(seed->feature, other->feature), other);
      }
      const auto by_sim = [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second->id < b.second->id;
      };
      const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(options.k_nn), sims.size());
      std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(), by_sim);
      std::vector<std::pair<double, const CorpusRecord*>> cand;
      cand.emplace_back(1.0, seed);
      cand.insert(cand.end(), sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k));
      std::vector<std::pair<double, const CorpusRecord*>> by_quality = cand;
      std::sort(by_quality.begin(), by_quality.end(), [](const auto& a, const auto& b) {
        return a.second->quality != b.second->quality ? a.second->quality > b.second->quality
                                                      : a.second->id < b.second->id;
      });
      std::vector<std::pair<double, const CorpusRecord*>> kept;
      std::set<std::string> urls;
      for (const auto& c : by_quality) {
        if (urls.count(c.second->url)) continue;
        bool near_dup = false;
        for (const auto& k2 : kept) {
          if (cosine(c.second->feature, k2.second->feature) >= options.tau_dup) {
            near_dup = true;
            break;
          }
        }
        if (near_dup) continue;
        kept.push_back(c);
        urls.insert(c.second->url);
      }
      if (static_cast<int>(kept.size()) < options.size) continue;
      std::sort(kept.begin(), kept.end(), by_sim);
      Cluster cl;
      cl.seed_id = seed->id;
      cl.domain = domain;
      for (int i = 0; i < options.size; ++i) cl.members.push_back(kept[static_cast<std::size_t>(i)].second->id);
      out.push_back(std::move(cl));
    }
  }
  std::sort(out.begin(), out.end(), [](const Cluster& a, const Cluster& b) { return a.seed_id < b.seed_id; });
  return out;
}

void write_corpus(const fs::path& dir, const std::vector<CorpusRecord>& records, const std::vector<Cluster>& clusters) {
  fs::create_directories(dir / "images");
  std::ofstream rec(dir / "records.jsonl", std::ios::binary | std::ios::trunc);
  if (!rec) throw IoError("cannot write " + (dir / "records.jsonl").string());
  for (const auto& r : records) {
    const std::string name = image_name(r.id);
    save_png(r.image, dir / name);
    ordered_json j;
    j["id"] = r.id;
    j["url"] = r.url;
    j["caption"] = r.caption;
    j["quality"] = r.quality;
    j["domain"] = r.domain;
    j["image"] = name;
    j["feature"] = r.feature;
    j["annotation"] = to_json(r.annotation);
    rec << j.dump() << '\n';
  }
  std::ofstream cl(dir / "clusters.jsonl", std::ios::binary | std::ios::trunc);
  if (!cl) throw IoError("cannot write " + (dir / "clusters.jsonl").string());
  for (const auto& c : clusters) {
    ordered_json j;
    j["seed"] = c.seed_id;
    j["domain"] = c.domain;
    j["members"] = c.members;
    cl << j.dump() << '\n';
  }
}

namespace {

template <class F>
void for_each_json_line(const fs::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  int no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.empty()) continue;
    try {
      f(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(no) + ": " + e.what());
    }
  }
}

}  // namespace

std::vector<CorpusRecord> read_corpus_records(const fs::path& dir) {
  std::vector<CorpusRecord> out;
  for_each_json_line(dir / "records.jsonl", [&](const nlohmann::json& j) {
    CorpusRecord r;
    r.id = j.at("id").get<int>();
    r.url = j.at("url").get<std::string>();
    r.caption = j.at("caption").get<std::string>();
    r.quality = j.at("quality").get<double>();
    r.domain = j.at("domain").get<std::string>();
    r.feature = j.at("feature").get<std::vector<double>>();
    r.annotation = annotation_from_json(j.at("annotation"));
    r.image = load_png(dir / j.at("image").get<std::string>());
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<Cluster> read_clusters(const fs::path& dir) {
  std::vector<Cluster> out;
  for_each_json_line(dir / "clusters.jsonl", [&](const nlohmann::json& j) {
    Cluster c;
    c.seed_id = j.at("seed").get<int>();
    c.domain = j.at("domain").get<std::string>();
    c.members = j.at("members").get<std::vector<int>>();
    out.push_back(std::move(c));
  });
  return out;
}

RetrievalExample sample_retrieval_example(const Cluster& cluster, const std::map<int, const CorpusRecord*>& index,
                                          Rng& rng) {
  if (cluster.members.size() < 4) throw ValidationError("retrieval cluster needs at least 4 members");
  const auto lookup = [&](int id) -> const CorpusRecord& {
    auto it = index.find(id);
    if (it == index.end()) throw ValidationError("cluster references unknown record " + std::to_string(id));
    return *it->second;
  };
  RetrievalExample ex;
  const auto t = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(cluster.members.size()) - 1));
  ex.target_id = cluster.members[t];
  ex.text = lookup(ex.target_id).caption;
  std::vector<int> rest;
  for (std::size_t i = 0; i < cluster.members.size(); ++i)
    if (i != t) rest.push_back(cluster.members[i]);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(rest.size()) - 1));
    std::swap(rest[i], rest[j]);
    ex.context_ids.push_back(rest[i]);
    ex.context_texts.push_back(lookup(rest[i]).caption);
  }
  return ex;
}

TrainExample apply_dropout(TrainExample example, const DropoutFlags& flags) {
  if (flags.drop_all) example.payload.clear();
  if (flags.drop_all || flags.drop_context) example.context.clear();
  return example;
}

}  // namespace instructdiff
