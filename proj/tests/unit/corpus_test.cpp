#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "instructdiff/corpus.hpp"
#include "instructdiff/digest.hpp"
#include "instructdiff/error.hpp"
#include "instructdiff/image_io.hpp"

using namespace instructdiff;
namespace fs = std::filesystem;

namespace {

TemplateBank bank() { return TemplateBank::load(fs::path(INSTRUCTDIFF_DATA_DIR) / "templates"); }

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("instructdiff_corpus_" + name);
  fs::remove_all(p);
  return p;
}

double count(const Tensor<float>& m) {
  double n = 0;
  for (std::size_t i = 0; i < m.size(); ++i) n += m[i];
  return n;
}

// Minimum Chebyshev distance from (x, y) to any set pixel of m.
int cheb_to(const Tensor<float>& m, int x, int y) {
  int best = 1 << 20;
  for (int j = 0; j < m.height(); ++j)
    for (int i = 0; i < m.width(); ++i)
      if (m.at(j, i, 0) > 0.5f) best = std::min(best, std::max(std::abs(i - x), std::abs(j - y)));
  return best;
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  for (double& x : v) x /= std::sqrt(n);
  return v;
}

CorpusRecord fixture_record(int id, std::vector<double> feature, double quality, std::string url) {
  CorpusRecord r;
  r.id = id;
  r.feature = unit(std::move(feature));
  r.quality = quality;
  r.url = std::move(url);
  r.domain = "circle";
  return r;
}

struct NeverFire {
  double uniform() { return 0.999; }
};

}  // namespace

TEST(World, Deterministic) {
  const auto a = synth_world(50, 7);
  const auto b = synth_world(50, 7);
  ASSERT_EQ(a.size(), 50u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(encode_png(a[i].image), encode_png(b[i].image));
    EXPECT_EQ(a[i].caption, b[i].caption);
    EXPECT_EQ(a[i].annotation, b[i].annotation);
  }
  EXPECT_NE(encode_png(synth_world(1, 8)[0].image), encode_png(a[0].image));
}

TEST(World, MaskAreaMatchesAnalyticArea) {
  for (const auto& s : synth_world(3000, 11)) {
    const double area = analytic_area(s.annotation);
    const double pixels = count(shape_mask(s.annotation));
    EXPECT_LE(std::abs(pixels - area) / area, 0.05) << caption(s.annotation);
  }
}

TEST(World, CaptionNamesParts) {
  WorldAnnotation a;
  a.color = 0;
  a.style = 0;
  a.shape = ShapeKind::kCircle;
  a.cx = 8;
  a.cy = 8;
  EXPECT_EQ(caption(a), "a red circle in ember style at the top left");
  EXPECT_EQ(caption(a, {true, false, false}), "a red circle");
}

TEST(Controls, MaskBinaryDepthBoundedEmptyShape) {
  for (const auto& s : synth_world(200, 3)) {
    const auto c = derive_controls(s.image, s.annotation, 1, true);
    for (std::size_t i = 0; i < c.mask.size(); ++i) {
      EXPECT_TRUE(c.mask[i] == 0.0f || c.mask[i] == 1.0f);
      EXPECT_GE(c.depth[i], 0.0f);
      EXPECT_LE(c.depth[i], 1.0f);
    }
    // edge within dilation(boundary + texture edges)
    auto base = mask_boundary(c.mask);
    const auto tex = texture_edges(s.annotation);
    for (std::size_t i = 0; i < base.size(); ++i) base[i] = std::max(base[i], tex[i]);
    const auto allowed = dilate(base, 1);
    for (std::size_t i = 0; i < c.edge.size(); ++i)
      if (c.edge[i] > 0.5f) EXPECT_GT(allowed[i], 0.5f);
  }
  WorldAnnotation empty;
  empty.has_shape = false;
  EXPECT_EQ(count(shape_mask(empty)), 0.0);
}

TEST(Controls, RadiusZeroEdgeIsOnePixelWide) {
  const auto s = synth_world(1, 5)[0];
  const auto mask = shape_mask(s.annotation);
  const auto edge = derive_controls(s.image, s.annotation, 0).edge;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) {
      bool touches_outside = false;
      const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
      for (int k = 0; k < 4; ++k) {
        const int nx = x + dx[k], ny = y + dy[k];
        if (nx < 0 || ny < 0 || nx >= mask.width() || ny >= mask.height() || mask.at(ny, nx, 0) < 0.5f)
          touches_outside = true;
      }
      const bool want = mask.at(y, x, 0) > 0.5f && touches_outside;
      EXPECT_EQ(edge.at(y, x, 0) > 0.5f, want) << x << "," << y;
    }
}

TEST(Controls, DilationTwoIsChebyshevNeighbourhood) {
  const auto s = synth_world(1, 9)[0];
  const auto e0 = derive_controls(s.image, s.annotation, 0).edge;
  const auto e2 = derive_controls(s.image, s.annotation, 2).edge;
  for (int y = 0; y < e0.height(); ++y)
    for (int x = 0; x < e0.width(); ++x) {
      if (e0.at(y, x, 0) > 0.5f) EXPECT_LE(cheb_to(e2, x, y), 2);
      if (e2.at(y, x, 0) > 0.5f) EXPECT_LE(cheb_to(e0, x, y), 2);
    }
}

TEST(Corpus, FeaturesAreUnitAndClustersHoldInvariants) {
  CorpusOptions opts;
  const auto records = build_corpus(opts);
  std::map<int, const CorpusRecord*> index;
  for (const auto& r : records) {
    double n = 0;
    for (double v : r.feature) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    EXPECT_GE(r.quality, opts.quality_min);
    index[r.id] = &r;
  }
  const auto clusters = build_clusters(records);
  EXPECT_GE(clusters.size(), 200u);
  for (const auto& c : clusters) {
    ASSERT_EQ(c.members.size(), 5u);
    std::set<std::string> urls;
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& a = *index.at(c.members[i]);
      EXPECT_EQ(a.domain, c.domain);
      urls.insert(a.url);
      for (std::size_t j = i + 1; j < 5; ++j) EXPECT_LT(cosine(a.feature, index.at(c.members[j])->feature), 0.98);
    }
    EXPECT_EQ(urls.size(), 5u);
  }
  EXPECT_TRUE(std::is_sorted(clusters.begin(), clusters.end(),
                             [](const Cluster& a, const Cluster& b) { return a.seed_id < b.seed_id; }));
}

TEST(Clusters, SixRecordFixtureKeepsHigherQualityDuplicate) {
  // Orthogonal-ish directions; records 2 and 3 are near-duplicates (cos > 0.98).
  std::vector<CorpusRecord> recs;
  auto e = [](int k, double extra = 0.0, int k2 = 0) {
    std::vector<double> v(kFeatureDim, 0.0);
    v[0] = 1.0;  // shared component keeps all of them neighbours
    v[static_cast<std::size_t>(k)] = 1.0;
    if (extra != 0.0) v[static_cast<std::size_t>(k2)] += extra;
    return v;
  };
  recs.push_back(fixture_record(0, e(1), 0.9, "u0"));
  recs.push_back(fixture_record(1, e(2), 0.8, "u1"));
  recs.push_back(fixture_record(2, e(3, 0.05, 4), 0.5, "u2"));
  recs.push_back(fixture_record(3, e(3), 0.7, "u3"));
  recs.push_back(fixture_record(4, e(5), 0.6, "u4"));
  recs.push_back(fixture_record(5, e(6), 0.4, "u5"));
  const ClusterOptions opts;

  // Brute-force oracle: enumerate every 5-subset that satisfies the invariants
  // and, for every near-duplicate pair, retains the higher-quality member.
  std::vector<std::set<int>> admissible;
  for (int drop = 0; drop < 6; ++drop) {
    std::vector<int> s;
    for (int i = 0; i < 6; ++i)
      if (i != drop) s.push_back(i);
    bool ok = true;
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = i + 1; j < s.size(); ++j)
        if (cosine(recs[static_cast<std::size_t>(s[i])].feature, recs[static_cast<std::size_t>(s[j])].feature) >= opts.tau_dup)
          ok = false;
    for (int a = 0; a < 6; ++a)
      for (int b = 0; b < 6; ++b)
        if (a != b && cosine(recs[static_cast<std::size_t>(a)].feature, recs[static_cast<std::size_t>(b)].feature) >= opts.tau_dup &&
            recs[static_cast<std::size_t>(a)].quality > recs[static_cast<std::size_t>(b)].quality && drop == a)
          ok = false;
    if (ok) admissible.emplace_back(s.begin(), s.end());
  }
  ASSERT_EQ(admissible.size(), 1u);
  EXPECT_EQ(admissible[0], (std::set<int>{0, 1, 3, 4, 5}));

  const auto clusters = build_clusters(recs, opts);
  ASSERT_FALSE(clusters.empty());
  for (const auto& c : clusters) EXPECT_EQ(std::set<int>(c.members.begin(), c.members.end()), admissible[0]);
}

TEST(Clusters, SharedUrlAppearsOnce) {
  std::vector<CorpusRecord> recs;
  for (int i = 0; i < 7; ++i) {
    std::vector<double> v(kFeatureDim, 0.0);
    v[0] = 1.0;
    v[static_cast<std::size_t>(i + 1)] = 1.0;
    recs.push_back(fixture_record(i, v, 0.5 + 0.01 * i, i == 2 || i == 5 ? "same" : "u" + std::to_string(i)));
  }
  const auto clusters = build_clusters(recs);
  ASSERT_FALSE(clusters.empty());
  for (const auto& c : clusters) {
    const int hits = static_cast<int>(std::count_if(c.members.begin(), c.members.end(), [](int id) { return id == 2 || id == 5; }));
    EXPECT_LE(hits, 1);
  }
  EXPECT_THROW(build_clusters({}), ValidationError);
  EXPECT_THROW((ClusterOptions{1.01, 10, 5}.validate()), ValidationError);
}

TEST(Retrieval, TargetExcludedAndUniform) {
  std::vector<CorpusRecord> recs(5);
  std::map<int, const CorpusRecord*> index;
  Cluster c;
  for (int i = 0; i < 5; ++i) {
    recs[static_cast<std::size_t>(i)].id = 10 + i;
    recs[static_cast<std::size_t>(i)].caption = "c" + std::to_string(i);
    index[10 + i] = &recs[static_cast<std::size_t>(i)];
    c.members.push_back(10 + i);
  }
  Rng rng(3);
  std::map<int, int> hits;
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const auto ex = sample_retrieval_example(c, index, rng);
    ASSERT_EQ(ex.context_ids.size(), 3u);
    if (k < 10000) {
      EXPECT_EQ(std::count(ex.context_ids.begin(), ex.context_ids.end(), ex.target_id), 0);
      EXPECT_EQ(std::set<int>(ex.context_ids.begin(), ex.context_ids.end()).size(), 3u);
    }
    ++hits[ex.target_id];
  }
  for (const auto& [id, h] : hits) EXPECT_NEAR(static_cast<double>(h) / n, 0.2, 0.02) << id;
}

TEST(Dropout, FrequenciesAndPrecedence) {
  Rng rng(17);
  const int n = 100000;
  int all = 0, ctx = 0;
  for (int i = 0; i < n; ++i) {
    const auto f = draw_condition_dropout(rng);
    EXPECT_FALSE(f.drop_all && f.drop_context);
    all += f.drop_all;
    ctx += f.drop_context;
  }
  EXPECT_GE(all / double(n), 0.095);
  EXPECT_LE(all / double(n), 0.105);
  EXPECT_GE(ctx / double(n), 0.085);
  EXPECT_LE(ctx / double(n), 0.096);

  NeverFire never;
  for (int i = 0; i < 100; ++i) {
    const auto f = draw_condition_dropout(never);
    EXPECT_FALSE(f.drop_all || f.drop_context);
  }

  TrainExample ex;
  ex.payload = "make [ref#1] mask";
  ex.context.resize(1);
  auto dropped = apply_dropout(ex, {true, false});
  EXPECT_TRUE(dropped.payload.empty());
  EXPECT_TRUE(dropped.context.empty());
  dropped = apply_dropout(ex, {false, true});
  EXPECT_EQ(dropped.payload, ex.payload);
  EXPECT_TRUE(dropped.context.empty());
}

TEST(Mixture, DeskFrequencies) {
  const auto mix = MixtureConfig::desk();
  mix.validate();
  std::map<std::string, std::size_t> sizes;
  for (const auto& [id, r] : mix.ratios) sizes[id] = 50;
  MixtureSampler sampler(mix, sizes, 99);
  std::vector<int> hits(mix.ratios.size());
  const int n = 100000;
  for (int i = 0; i < n; ++i) ++hits[sampler.next().dataset];
  for (std::size_t i = 0; i < hits.size(); ++i)
    EXPECT_NEAR(hits[i] / double(n), mix.ratios[i].second, 0.01) << mix.ratios[i].first;
  double subject = 0;
  for (const auto& [id, r] : mix.ratios)
    if (id == "subject") subject = r;
  EXPECT_DOUBLE_EQ(subject, 0.40);
}

TEST(Mixture, SingleDatasetIsShuffledCycle) {
  MixtureConfig mix{{{"a", 1.0}}};
  MixtureSampler sampler(mix, {{"a", 7}}, 5);
  for (int cycle = 0; cycle < 3; ++cycle) {
    std::set<std::size_t> seen;
    for (int i = 0; i < 7; ++i) {
      const auto d = sampler.next();
      EXPECT_EQ(d.dataset, 0u);
      seen.insert(d.item);
    }
    EXPECT_EQ(seen.size(), 7u);
  }
}

TEST(Mixture, ReplaysRngExactly) {
  MixtureConfig mix{{{"a", 0.5}, {"b", 0.5}}};
  MixtureSampler sampler(mix, {{"a", 3}, {"b", 4}}, 42);
  Rng replay(42);
  int a_hits = 0, want_a = 0;
  for (int i = 0; i < 10000; ++i) {
    a_hits += sampler.next().dataset == 0;
    want_a += replay.uniform() < 0.5;
  }
  EXPECT_EQ(a_hits, want_a);
  EXPECT_THROW((MixtureSampler(mix, {{"a", 3}}, 1)), ValidationError);
  EXPECT_THROW((MixtureConfig{{{"a", 0.7}}}.validate()), ValidationError);
}

TEST(Datasets, InvariantsPerKind) {
  const auto templates = bank();
  for (const auto& spec : dataset_specs()) {
    const auto recs = build_task_dataset(spec.id, 40, 3, templates);
    ASSERT_EQ(recs.size(), 40u);
    for (const auto& r : recs) {
      EXPECT_NO_THROW(validate_instruction(r.instruction, Strictness::kStrict, kWorldSize));
      const auto& ctx = r.instruction.context;
      if (spec.kind == TaskKind::kStyleTransfer) {
        ASSERT_EQ(ctx.size(), 2u);
        EXPECT_NE(r.instruction.payload.find("[ref#1]"), std::string::npos);
        EXPECT_NE(r.instruction.payload.find("[ref#2]"), std::string::npos);
      }
      if (spec.kind == TaskKind::kSubject)
        for (const auto& a : r.context_annotations) EXPECT_EQ(a.subject_id(), r.target_annotation.subject_id());
      if (spec.kind == TaskKind::kStyled) EXPECT_EQ(r.context_annotations[0].style, r.target_annotation.style);
      if (spec.kind == TaskKind::kControlMask) {
        // IoU between the conditioning mask and the target's analytic mask.
        const auto truth = shape_mask(r.target_annotation);
        double inter = 0, uni = 0;
        for (std::size_t i = 0; i < truth.size(); ++i) {
          const bool c = ctx[0].image[i * 3] > 0.0f;
          const bool t = truth[i] > 0.5f;
          inter += c && t;
          uni += c || t;
        }
        EXPECT_EQ(inter / uni, 1.0);
      }
      if (spec.kind == TaskKind::kControlEdge || spec.kind == TaskKind::kControlDepth) {
        const auto c = derive_controls(r.target, r.target_annotation, r.dilation, spec.id == "sketch");
        const auto want = quantize_image(control_image(spec.kind == TaskKind::kControlEdge ? c.edge : c.depth));
        EXPECT_EQ(ctx[0].image, want);
      }
    }
  }
  EXPECT_THROW(build_task_dataset("faces", 1, 0, templates), ValidationError);
}

TEST(Datasets, ByteReproducibleAndRoundTrip) {
  const auto templates = bank();
  const auto a = scratch("a"), b = scratch("b");
  write_task_dataset(a, "style-transfer", build_task_dataset("style-transfer", 12, 5, templates));
  write_task_dataset(b, "style-transfer", build_task_dataset("style-transfer", 12, 5, templates));
  EXPECT_EQ(sha256_tree(a), sha256_tree(b));
  const auto back = read_task_dataset(a);
  const auto orig = build_task_dataset("style-transfer", 12, 5, templates);
  ASSERT_EQ(back.size(), orig.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].target, orig[i].target);
    EXPECT_EQ(back[i].target_annotation, orig[i].target_annotation);
    EXPECT_EQ(serialize_instruction(back[i].instruction), serialize_instruction(orig[i].instruction));
    EXPECT_EQ(back[i].instruction.context[1].image, orig[i].instruction.context[1].image);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Corpus, WriteReadRoundTrip) {
  CorpusOptions opts;
  opts.n = 300;
  const auto recs = build_corpus(opts);
  const auto clusters = build_clusters(recs);
  const auto dir = scratch("corpus");
  write_corpus(dir, recs, clusters);
  const auto back = read_corpus_records(dir);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(back[i].id, recs[i].id);
    EXPECT_EQ(back[i].url, recs[i].url);
    EXPECT_EQ(back[i].image, recs[i].image);
    for (std::size_t k = 0; k < recs[i].feature.size(); ++k) EXPECT_EQ(back[i].feature[k], recs[i].feature[k]);
  }
  const auto cl = read_clusters(dir);
  ASSERT_EQ(cl.size(), clusters.size());
  for (std::size_t i = 0; i < cl.size(); ++i) EXPECT_EQ(cl[i].members, clusters[i].members);
  fs::remove_all(dir);
}
