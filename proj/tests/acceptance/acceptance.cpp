// Acceptance run: one PASS/FAIL line per top-level criterion.
//
//   acceptance [--workdir DIR] [--only a,b] [--e2e-report FILE]
//
// Every check recomputes its expectation here, from first principles where
// possible, instead of reusing the library's own test helpers.

#include <fcntl.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>

#include "instructdiff/backbone.hpp"
#include "instructdiff/corpus.hpp"
#include "instructdiff/digest.hpp"
#include "instructdiff/diffusion.hpp"
#include "instructdiff/eval_service.hpp"
#include "instructdiff/evalsvc.hpp"
#include "instructdiff/image_io.hpp"
#include "instructdiff/runs.hpp"
#include "instructdiff/suite.hpp"

extern char** environ;

using namespace instructdiff;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kData = INSTRUCTDIFF_DATA_DIR;

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Notes {
 public:
  template <class... A>
  void add(const char* fmt, A... a) {
    char buf[512];
    std::snprintf(buf, sizeof buf, fmt, a...);
    if (!text_.empty()) text_ += "; ";
    text_ += buf;
  }
  const std::string& str() const { return text_; }

 private:
  std::string text_;
};

std::size_t pick(Rng& rng, std::size_t n) { return static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1)); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path fresh_dir(const fs::path& p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------------------
// Gradient correctness on the micro backbone.

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto c = BackboneConfig::micro();
  auto params = init_params<double>(c, 21);
  Rng rng(22);
  // Zero-initialized output layers would hide the gradient flowing through
  // everything upstream of them.
  for (auto& [path, e] : params.entries())
    for (auto& v : e.values) v += 0.2 * rng.normal();

  auto randn = [&](int h, int w, int ch, double scale) {
    Tensor<double> t(h, w, ch);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
  };
  const int r = c.resolution;
  std::vector<Tensor<double>> x0{randn(r, r, 3, 0.5), randn(r, r, 3, 0.5), randn(r, r, 3, 0.5)};
  std::vector<TextCondition<double>> text{{randn(4, 1, c.text_dim, 1.0)}, {randn(2, 1, c.text_dim, 1.0)}, {}};
  std::vector<std::vector<ContextInput<double>>> pairs(3);
  for (int k = 0; k < 2; ++k) pairs[0].push_back({randn(r, r, 3, 0.5), {randn(3, 1, c.text_dim, 1.0)}});
  pairs[2].push_back({randn(r, r, 3, 0.5), {randn(2, 1, c.text_dim, 1.0)}});

  const auto schedule = cosine_schedule(64);
  const auto loss_config = LossConfig::uniform(64);
  constexpr std::uint64_t kLossSeed = 77;

  const auto loss_of = [&](const ParameterSet<double>& p) {
    const Backbone<double> net(c, p);
    std::vector<ContextTokens<double>> ctx(3);
    for (std::size_t i = 0; i < 3; ++i)
      if (!pairs[i].empty()) ctx[i] = net.encode_context(pairs[i]);
    VPredictor<double> model = [&](std::size_t i, const Tensor<double>& x, int t) {
      return net.denoise(x, t, text[i], ctx[i]);
    };
    Rng draws(kLossSeed);
    return training_loss<double>(x0, model, schedule, loss_config, draws).loss;
  };

  // Analytic gradient, wired the way the trainer wires it.
  auto grads = params.zeros_like();
  {
    const Backbone<double> net(c, params);
    std::vector<ContextTokens<double>> ctx(3);
    std::vector<ContextTape<double>> ctapes(3);
    std::vector<DenoiseTape<double>> tapes(3);
    for (std::size_t i = 0; i < 3; ++i)
      if (!pairs[i].empty()) ctx[i] = net.encode_context(pairs[i], &ctapes[i]);
    VPredictor<double> model = [&](std::size_t i, const Tensor<double>& x, int t) {
      return net.denoise(x, t, text[i], ctx[i], &tapes[i]);
    };
    Rng draws(kLossSeed);
    const auto loss = training_loss<double>(x0, model, schedule, loss_config, draws);
    for (std::size_t i = 0; i < 3; ++i) {
      if (ctx[i].empty()) {
        net.backward(tapes[i], loss.samples[i].grad_v_hat, grads);
      } else {
        Tensor<double> dctx;
        net.backward(tapes[i], loss.samples[i].grad_v_hat, grads, &dctx);
        net.backward_context(ctapes[i], dctx, grads);
      }
    }
  }

  // One coordinate from every tensor, then uniform picks up to 240.
  std::vector<std::pair<std::string, std::size_t>> picks;
  std::vector<std::string> paths = params.paths();
  for (const auto& p : paths) picks.emplace_back(p, pick(rng, params.values(p).size()));
  while (picks.size() < 240) {
    const auto& p = paths[pick(rng, paths.size())];
    picks.emplace_back(p, pick(rng, params.values(p).size()));
  }

  const double h = 1e-5;
  double worst = 0.0;
  std::string worst_at;
  std::size_t nonzero = 0;
  for (const auto& [path, i] : picks) {
    auto& v = params.values(path)[i];
    const double keep = v;
    v = keep + h;
    const double up = loss_of(params);
    v = keep - h;
    const double dn = loss_of(params);
    v = keep;
    const double num = (up - dn) / (2 * h);
    const double ana = grads.values(path)[i];
    nonzero += std::abs(ana) > 1e-8;
    const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6});
    if (rel > worst) {
      worst = rel;
      worst_at = path + "[" + std::to_string(i) + "]";
    }
  }
  const double secs = seconds_since(t0);
  Notes n;
  n.add("%zu params of %zu (%zu tensors), worst rel err %.2e at %s, %.1fs", picks.size(), params.total_count(),
        paths.size(), worst, worst_at.c_str(), secs);
  return {worst <= 1e-4 && picks.size() >= 200 && params.total_count() <= 5000 && nonzero > picks.size() / 2 &&
              secs <= 120.0,
          n.str()};
}

// ---------------------------------------------------------------------------
// Forward process against the stepwise chain, and the schedule formula.

Outcome forward_fidelity() {
  Notes n;
  bool pass = true;
  const int T = 10;
  const int chains = 100000;
  const auto s = cosine_schedule(T);
  const double x0 = 0.7;
  Rng chain_rng(101), direct_rng(202);
  std::vector<double> x(chains, x0);
  double worst_z = 0.0;
  for (int t = 1; t <= T; ++t) {
    double cm = 0, cq = 0;
    for (auto& v : x) {
      v = std::sqrt(1 - s.beta(t)) * v + std::sqrt(s.beta(t)) * chain_rng.normal();
      cm += v;
      cq += v * v;
    }
    Tensor<double> clean(1, chains, 1, x0);
    Tensor<double> eps(1, chains, 1);
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = direct_rng.normal();
    const auto xt = forward_sample(clean, t, eps, s);
    double dm = 0, dq = 0;
    for (std::size_t i = 0; i < xt.size(); ++i) {
      dm += xt[i];
      dq += xt[i] * xt[i];
    }
    cm /= chains;
    dm /= chains;
    const double cv = cq / chains - cm * cm, dv = dq / chains - dm * dm;
    // Two-sample standard errors for Gaussian draws.
    const double se_mean = std::sqrt(cv / chains + dv / chains);
    const double se_var = std::sqrt(2.0 * (cv * cv + dv * dv) / (chains - 1));
    worst_z = std::max({worst_z, std::abs(cm - dm) / se_mean, std::abs(cv - dv) / se_var});
  }
  pass &= worst_z <= 3.0;
  n.add("T=%d, %d chains: worst |chain - closed form| = %.2f SE", T, chains, worst_z);

  // alpha_bar(t) = f(t)/f(0), f(t) = cos^2(pi/2 (t/T + s)/(1 + s)), in long double.
  double worst_abs = 0.0;
  int compared = 0, clipped = 0;
  for (int steps : {10, 256, 1000}) {
    const auto sc = cosine_schedule(steps);
    const long double off = 0.008L;
    const auto f = [&](int t) {
      const long double c = std::cos((static_cast<long double>(t) / steps + off) / (1 + off) * std::numbers::pi_v<long double> / 2);
      return c * c;
    };
    for (int t = 0; t <= steps; ++t) {
      const long double want = f(t) / f(0);
      const long double prev = t == 0 ? 1.0L : f(t - 1) / f(0);
      if (t > 0 && 1 - want / prev > 0.999L) {
        ++clipped;  // beta clipped; the table continues as a running product
        continue;
      }
      worst_abs = std::max(worst_abs, static_cast<double>(std::fabs(sc.alpha_bar(t) - want)));
      ++compared;
    }
  }
  pass &= worst_abs <= 1e-12;
  n.add("cosine alpha_bar: %d values, worst abs err %.1e (%d clipped terminal steps skipped)", compared, worst_abs,
        clipped);
  return {pass, n.str()};
}

// ---------------------------------------------------------------------------
// 256-step sampling with the Bayes-optimal v for a Gaussian point cloud.

Outcome sampler_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto s = cosine_schedule(256);
  const double s0 = 0.05;
  const std::vector<std::array<double, 2>> centres{{0.25, -0.3}, {0.7, -0.15}, {0.55, -0.65},
                                                   {0.4, -0.55}, {0.75, -0.45}, {0.35, -0.2}};
  double mu[2] = {0, 0}, var[2] = {0, 0};
  for (const auto& c : centres)
    for (int d = 0; d < 2; ++d) mu[d] += c[d] / centres.size();
  for (const auto& c : centres)
    for (int d = 0; d < 2; ++d) var[d] += (c[d] - mu[d]) * (c[d] - mu[d]) / centres.size();
  for (double& v : var) v += s0 * s0;

  // Posterior over components is a softmax of Gaussian log-likelihoods;
  // within a component x0 | x_t is Gaussian with the usual shrinkage.
  const GuidedPredictor<double> bayes = [&](const Tensor<double>& xt, int t, bool) {
    const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1 - s.alpha_bar(t));
    const double tot = a * a * s0 * s0 + b * b;
    std::vector<double> logw(centres.size());
    for (std::size_t k = 0; k < centres.size(); ++k) {
      double d2 = 0;
      for (int d = 0; d < 2; ++d) d2 += std::pow(xt[static_cast<std::size_t>(d)] - a * centres[k][static_cast<std::size_t>(d)], 2);
      logw[k] = -d2 / (2 * tot);
    }
    const double top = *std::max_element(logw.begin(), logw.end());
    double z = 0;
    for (double& w : logw) z += (w = std::exp(w - top));
    Tensor<double> v(1, 1, 2);
    for (int d = 0; d < 2; ++d) {
      const auto du = static_cast<std::size_t>(d);
      double x0 = 0;
      for (std::size_t k = 0; k < centres.size(); ++k)
        x0 += logw[k] / z * (centres[k][du] + a * s0 * s0 / tot * (xt[du] - a * centres[k][du]));
      const double eps = (xt[du] - a * x0) / b;
      v[du] = a * eps - b * x0;
    }
    return v;
  };
  SamplerOptions opts;
  opts.steps = 256;
  opts.guidance = {1.0, 1.0, true};
  Rng rng(4242);
  const int n = 10000;
  double m[2] = {0, 0}, q[2] = {0, 0};
  for (int i = 0; i < n; ++i) {
    const auto x = sample(bayes, 1, 1, 2, s, opts, rng);
    for (int d = 0; d < 2; ++d) {
      m[d] += x[static_cast<std::size_t>(d)];
      q[d] += x[static_cast<std::size_t>(d)] * x[static_cast<std::size_t>(d)];
    }
  }
  double worst_mean = 0, worst_var = 0;
  for (int d = 0; d < 2; ++d) {
    const double mean = m[d] / n, v = q[d] / n - mean * mean;
    worst_mean = std::max(worst_mean, std::abs(mean / mu[d] - 1));
    worst_var = std::max(worst_var, std::abs(v / var[d] - 1));
  }
  const double secs = seconds_since(t0);
  Notes notes;
  notes.add("%d samples x 256 steps: worst mean rel err %.4f (<= 0.02), worst var rel err %.4f (<= 0.05), %.1fs", n,
            worst_mean, worst_var, secs);
  return {worst_mean <= 0.02 && worst_var <= 0.05 && secs <= 300.0, notes.str()};
}

// ---------------------------------------------------------------------------
// Architecture contracts.

Outcome architecture_contracts() {
  Notes n;
  bool pass = true;
  const auto c = BackboneConfig::desk();
  const auto p = init_params<float>(c, 31);
  const Backbone<float> net(c, p);
  Rng rng(32);
  auto randn = [&](int h, int w, int ch) {
    Tensor<float> t(h, w, ch);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal());
    return t;
  };

  // Freshly initialized context attention adds exactly nothing.
  bool noop = true;
  for (int trial = 0; trial < 4; ++trial) {
    const auto x = randn(32, 32, 3);
    const TextCondition<float> text{randn(5, 1, c.text_dim)};
    std::vector<ContextInput<float>> pairs;
    for (int k = 0; k <= trial; ++k) pairs.push_back({randn(32, 32, 3), {randn(3, 1, c.text_dim)}});
    const int t = 1 + 60 * trial;
    noop &= net.denoise(x, t, text, net.encode_context(pairs)) == net.denoise(x, t, text, ContextTokens<float>{});
  }
  pass &= noop;
  n.add("zero-init no-op %s", noop ? "bit-exact over 4 draws" : "VIOLATED");

  // Path sets: what the context encoder declares, what it touches in the
  // backward pass, and the main encoder half (stem, time embedding, down
  // path) minus the context-attention layers.
  const auto declared_v = net.context_encoder_paths();
  const std::set<std::string> declared(declared_v.begin(), declared_v.end());
  std::set<std::string> encoder;
  for (const auto& path : p.paths()) {
    const bool enc = path.rfind("conv_in.", 0) == 0 || path.rfind("time.", 0) == 0 || path.rfind("down.", 0) == 0;
    if (enc && !is_context_attention_path(path)) encoder.insert(path);
  }
  // Perturb so every layer passes a gradient, then read the footprint.
  auto q = p;
  for (auto& [path, e] : q.entries())
    for (auto& v : e.values) v += static_cast<float>(0.05 * rng.normal());
  const Backbone<float> qnet(c, q);
  ContextTape<float> tape;
  const auto tokens = qnet.encode_context({{randn(32, 32, 3), {randn(3, 1, c.text_dim)}}}, &tape);
  auto g = q.zeros_like();
  qnet.backward_context(tape, randn(tokens.tokens.height(), tokens.tokens.width(), tokens.tokens.channels()), g);
  std::set<std::string> touched;
  for (const auto& path : g.paths())
    for (float v : g.values(path))
      if (v != 0.0f) {
        touched.insert(path);
        break;
      }
  const bool shared = declared == encoder && touched == encoder;
  pass &= shared;
  n.add("shared paths: declared %zu, touched %zu, encoder %zu, %s", declared.size(), touched.size(), encoder.size(),
        shared ? "equal" : "MISMATCH");

  // Context attention delta from shape algebra: per layer two norms (feature
  // and context channels), q from features, k and v from context, output
  // projection with bias.
  const int ch = 32, ctx_ch = 32, d = c.d_model;
  const std::size_t per_layer = 2 * ch + 2 * ctx_ch + ch * d + 2 * ctx_ch * d + d * ch + ch;
  std::size_t layers = 0;
  for (const auto& level : c.levels) layers += level.attention == AttentionKind::kTextContext ? 2 : 0;
  const auto without = c.without_context_attention();
  const auto po = init_params<float>(without, 31);
  const std::size_t delta = p.total_count() - po.total_count();
  bool nested = true;
  for (const auto& path : po.paths()) nested &= p.contains(path) && !is_context_attention_path(path);
  for (const auto& path : p.paths()) nested &= po.contains(path) || is_context_attention_path(path);
  const bool algebra = delta == layers * per_layer && nested;
  pass &= algebra;
  n.add("context delta %zu = %zu layers x %zu (%.1f%% of %zu)%s", delta, layers, per_layer,
        100.0 * static_cast<double>(delta) / static_cast<double>(po.total_count()), p.total_count(),
        algebra ? "" : " MISMATCH");
  return {pass, n.str()};
}

// ---------------------------------------------------------------------------
// Corpus, dropout and mixture invariants.

Outcome data_pipeline() {
  Notes n;
  bool pass = true;
  const auto records = build_corpus(CorpusOptions{});
  const auto clusters = build_clusters(records);
  std::map<int, const CorpusRecord*> index;
  for (const auto& r : records) index[r.id] = &r;
  const auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return ab / std::sqrt(aa * bb);
  };
  std::size_t good = 0;
  for (const auto& c : clusters) {
    bool ok = c.members.size() == 5;
    std::set<int> ids(c.members.begin(), c.members.end());
    std::set<std::string> urls;
    ok &= ids.size() == c.members.size();
    for (std::size_t i = 0; ok && i < c.members.size(); ++i) {
      const auto it = index.find(c.members[i]);
      if (it == index.end()) {
        ok = false;
        break;
      }
      urls.insert(it->second->url);
      ok &= it->second->domain == c.domain;
      for (std::size_t j = i + 1; j < c.members.size(); ++j)
        ok &= cosine(it->second->feature, index.at(c.members[j])->feature) < 0.98;
    }
    ok &= urls.size() == c.members.size();
    good += ok;
  }
  pass &= !clusters.empty() && good == clusters.size();
  n.add("clusters %zu/%zu size-5, deduplicated, url-distinct", good, clusters.size());

  Rng rng(5150);
  const int draws = 100000;
  int all = 0, ctx = 0;
  for (int i = 0; i < draws; ++i) {
    const auto f = draw_condition_dropout(rng);
    all += f.drop_all;
    ctx += f.drop_context;
  }
  const double fa = all / double(draws), fc = ctx / double(draws);
  pass &= fa >= 0.095 && fa <= 0.105 && fc >= 0.085 && fc <= 0.096;
  n.add("dropout all %.4f, context-only %.4f", fa, fc);

  // Ratio column, with the two face sources folded into subject generation.
  const std::map<std::string, double> table{{"subject", 0.30 + 0.05 + 0.05},
                                            {"txt2img", 0.15},
                                            {"art", 0.05},
                                            {"control2img-depth", 0.06},
                                            {"control2img-mask", 0.06},
                                            {"control2img-edge", 0.06},
                                            {"sketch", 0.02},
                                            {"styled", 0.10},
                                            {"style-transfer", 0.10}};
  const auto mix = MixtureConfig::desk();
  std::map<std::string, std::size_t> sizes;
  for (const auto& [id, r] : mix.ratios) sizes[id] = 97;
  MixtureSampler sampler(mix, sizes, 6262);
  std::vector<int> hits(mix.ratios.size());
  for (int i = 0; i < draws; ++i) ++hits[sampler.next().dataset];
  double worst = 0;
  bool covered = mix.ratios.size() == table.size();
  for (std::size_t i = 0; i < hits.size(); ++i) {
    const auto it = table.find(mix.ratios[i].first);
    if (it == table.end()) {
      covered = false;
      continue;
    }
    worst = std::max(worst, std::abs(hits[i] / double(draws) - it->second));
  }
  pass &= covered && worst <= 0.01;
  n.add("mixture worst |freq - ratio| %.4f over %zu datasets", worst, hits.size());
  return {pass, n.str()};
}

// ---------------------------------------------------------------------------
// Published score arithmetic.

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Outcome eval_golden() {
  const auto t0 = std::chrono::steady_clock::now();
  Notes n;
  bool pass = true;
  const fs::path dir = kData / "fixtures";
  std::ifstream csv(dir / "published.csv");
  int t3 = 0, t3_ok = 0, fixtures = 0, fixtures_ok = 0;
  double worst_gap = 0;
  std::map<std::string, std::pair<double, double>> computed;  // fixture -> (overall, accuracy)
  for (std::string line; std::getline(csv, line);) {
    if (line.empty() || line[0] == '#') continue;
    const auto f = split_csv(line);
    const std::string& group = f.at(0);
    const double overall = std::stod(f.at(6));
    if (group == "per-task") {
      ++t3;
      const double gap = std::abs(overall - std::sqrt(std::stod(f.at(4)) * std::stod(f.at(5))));
      worst_gap = std::max(worst_gap, gap);
      t3_ok += gap <= 0.015;
    }
    if (f.size() > 8 && !f[8].empty()) {
      // O per rating is sqrt(min SC * PQ); a sample averages its raters; a
      // sample is accurate when every rater gave SC 1 on every condition.
      ++fixtures;
      std::ifstream in(dir / f[8]);
      std::map<std::string, std::vector<std::pair<double, double>>> by_sample;  // (O, min SC)
      for (std::string l; std::getline(in, l);) {
        if (l.empty()) continue;
        const auto j = json::parse(l);
        double sc = 1.0;
        for (const auto& v : j.at("sc")) sc = std::min(sc, v.get<double>());
        by_sample[j.at("sample").get<std::string>()].emplace_back(std::sqrt(sc * j.at("pq").get<double>()), sc);
      }
      double o = 0, acc = 0;
      for (const auto& [id, rs] : by_sample) {
        double so = 0;
        bool all_one = true;
        for (const auto& [ro, rsc] : rs) {
          so += ro;
          all_one &= rsc == 1.0;
        }
        o += so / static_cast<double>(rs.size());
        acc += all_one;
      }
      o /= static_cast<double>(by_sample.size());
      acc /= static_cast<double>(by_sample.size());
      computed[f[8]] = {o, acc};
      const bool ok = std::abs(o - overall) <= 0.015 && (f.at(7).empty() || std::abs(acc - std::stod(f.at(7))) <= 1e-9);
      fixtures_ok += ok;
      n.add("%s %s: O %.4f vs %.2f%s", group.c_str(), f.at(1).c_str(), o, overall,
            f.at(7).empty() ? "" : (", acc " + std::to_string(acc).substr(0, 5) + " vs " + f.at(7)).c_str());
    }
  }
  pass &= t3 == 44 && t3_ok == 44 && fixtures >= 3 && fixtures_ok == fixtures;

  // The library's checker must agree with the recount above.
  const auto rows = load_published_rows(dir / "published.csv");
  const auto checks = check_published_rows(rows, dir);
  bool agree = true;
  std::size_t lib_fail = 0;
  for (const auto& c : checks) {
    lib_fail += !c.pass;
    if (!c.row->ratings.empty() && c.rule.find("overall") != std::string::npos)
      agree &= std::abs(c.computed - computed.at(c.row->ratings).first) <= 1e-12;
  }
  pass &= agree && lib_fail == 0;
  const double secs = seconds_since(t0);
  std::string head = std::to_string(t3_ok) + "/" + std::to_string(t3) + " rows within 0.015 (worst " +
                     std::to_string(worst_gap).substr(0, 6) + "), " + std::to_string(fixtures_ok) + "/" +
                     std::to_string(fixtures) + " rating fixtures, library checker " +
                     (agree && lib_fail == 0 ? "agrees" : "DISAGREES") + ", " + std::to_string(secs).substr(0, 4) + "s";
  return {pass, head + "; " + n.str()};
}

// ---------------------------------------------------------------------------
// End-to-end desk training.

Outcome end_to_end(const fs::path& workdir, const std::string& reuse_report) {
  json report;
  if (!reuse_report.empty()) {
    std::ifstream in(reuse_report);
    report = json::parse(in);
    std::ifstream timings(fs::path(reuse_report).parent_path() / "timings.json");
    report["wall_seconds"] = json::parse(timings);
  } else {
    DeskSuiteOptions o;
    o.workdir = workdir;
    o.templates = kData / "templates";
    o.stage1 = load_train_config(kData / "configs" / "desk_stage1.cfg");
    o.stage2 = load_train_config(kData / "configs" / "desk_stage2.cfg");
    o.log = [](const std::string& m) { std::cerr << "  [e2e] " << m << std::endl; };
    report = json::parse(run_desk_suite(o).dump());
  }
  const fs::path work = reuse_report.empty() ? workdir : fs::path(reuse_report).parent_path();

  // Rescore from the PNGs on disk with the held-out records.
  const auto rescore = [&](const std::string& arm, const std::string& id) {
    const auto records = read_task_dataset(work / "eval" / id);
    std::vector<ImageTensor> images;
    for (const auto& r : records)
      images.push_back(load_png(work / "samples" / arm / id / fs::path(*r.instruction.target_path).filename()));
    return score_conditions(images, records);
  };
  const auto mask = rescore("stage2", "control2img-mask");
  const auto styled = rescore("stage2", "styled");
  const auto zero = rescore("stage2", "style-mask");
  const auto ablation = rescore("ablation", "style-mask");
  const bool consistent = std::abs(mask.iou - report["mask2img"]["iou"].get<double>()) < 1e-12 &&
                          std::abs(ablation.composite - report["ablation_style_mask"]["composite"].get<double>()) < 1e-12;

  const bool a = mask.iou - mask.iou_shuffled >= 0.15;
  const bool b = styled.closer >= 0.70;
  const bool c = zero.iou - zero.iou_shuffled >= 0.10 && zero.closer > 0.5;
  const bool d = ablation.composite < zero.composite;
  const auto& wall = report["wall_seconds"];
  const double train_minutes = (wall["stage1"].get<double>() + wall["stage2"].get<double>()) / 60.0;
  Notes n;
  n.add("(a) IoU %.3f vs shuffled %.3f, margin %.3f %s", mask.iou, mask.iou_shuffled, mask.iou - mask.iou_shuffled,
        a ? "ok" : "FAIL");
  n.add("(b) closer to own style %.0f%% %s", 100 * styled.closer, b ? "ok" : "FAIL");
  n.add("(c) style+mask margin %.3f, closer %.0f%% %s", zero.iou - zero.iou_shuffled, 100 * zero.closer,
        c ? "ok" : "FAIL");
  n.add("(d) composite %.3f with retrieval vs %.3f without %s", zero.composite, ablation.composite, d ? "ok" : "FAIL");
  n.add("stage 1+2 training %.1f min", train_minutes);
  if (!consistent) n.add("%s", "rescored values differ from the suite report");
  return {a && b && c && d && consistent && train_minutes <= 30.0, n.str()};
}

// ---------------------------------------------------------------------------
// CLI determinism: every command twice, outputs compared by digest.

struct Child {
  pid_t pid = -1;
};

Child spawn(const std::vector<std::string>& args, const fs::path& out) {
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, 1, out.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_addopen(&fa, 2, (out.string() + ".err").c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  std::vector<char*> argv;
  for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  Child c;
  if (posix_spawn(&c.pid, argv[0], &fa, nullptr, argv.data(), environ) != 0) c.pid = -1;
  posix_spawn_file_actions_destroy(&fa);
  return c;
}

int wait_child(const Child& c) {
  int status = 0;
  if (c.pid < 0 || waitpid(c.pid, &status, 0) < 0) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

int run_cli(const std::vector<std::string>& args, const fs::path& out) {
  std::vector<std::string> full{INSTRUCTDIFF_CLI_PATH};
  full.insert(full.end(), args.begin(), args.end());
  return wait_child(spawn(full, out));
}

std::string file_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Serves an inventory, rates it with three scripted raters, stops the server.
// Returns the served assignment ids in order plus the log with ts removed.
std::string scripted_serve(const fs::path& dir, const fs::path& inventory) {
  const fs::path log = dir / "ratings.jsonl";
  Child server = spawn({INSTRUCTDIFF_CLI_PATH, "eval", "serve", "--port", "0", "--inventory", inventory.string(),
                        "--log", log.string(), "--snapshot", (dir / "snapshot.json").string()},
                       dir / "serve.out");
  int port = 0;
  for (int i = 0; i < 200 && port == 0; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
    const auto text = file_text(dir / "serve.out");
    if (const auto at = text.rfind(':'); at != std::string::npos && text.find("listening") != std::string::npos)
      port = std::atoi(text.c_str() + at + 1);
  }
  std::string trace;
  if (port != 0) {
    httplib::Client client("127.0.0.1", port);
    const std::vector<std::string> raters{"r1", "r2", "r3"};
    for (bool any = true; any;) {
      any = false;
      for (std::size_t k = 0; k < raters.size(); ++k) {
        auto res = client.Get("/api/session/s/next?rater=" + raters[k]);
        if (!res || res->status != 200) continue;
        const auto a = json::parse(res->body);
        const std::string id = a.at("assignment_id").get<std::string>();
        trace += id + "\n";
        const double sc = (id.size() + k) % 3 * 0.5;
        json body{{"assignment_id", id}, {"rater", raters[k]}, {"sc", {sc}}, {"pq", (k % 2) ? 1.0 : 0.5}};
        client.Post("/api/session/s/ratings", body.dump(), "application/json");
        any = true;
      }
    }
    if (auto res = client.Get("/api/report")) trace += res->body + "\n";
    kill(server.pid, SIGINT);
  } else {
    kill(server.pid, SIGKILL);
  }
  wait_child(server);
  std::ifstream in(log);
  for (std::string line; std::getline(in, line);) {
    auto j = json::parse(line);
    j.erase("ts");
    trace += j.dump() + "\n";
  }
  return trace;
}

Outcome cli_determinism(const fs::path& workdir) {
  Notes n;
  const fs::path root = fresh_dir(workdir / "determinism");
  const std::string smoke = (kData / "configs" / "smoke.cfg").string();

  // Inventory for the serve check: two methods over three inputs.
  Inventory inv;
  for (int i = 0; i < 3; ++i)
    for (const char* m : {"ours", "base"}) {
      InventoryItem it;
      it.input = "in" + std::to_string(i);
      it.method = m;
      it.task = "mask2img";
      it.instruction = "draw [ref#1]";
      it.conditions = {"mask"};
      it.context = {{"[ref#1]", "mask", "/static/m.png"}};
      it.candidate = "/static/" + it.input + m + ".png";
      inv.items.push_back(it);
    }
  std::ofstream(root / "inventory.json") << inv.to_json().dump(2);

  // Each run rebuilds the whole chain in the same directory, since paths are
  // part of the flags (and of the configs echoed into checkpoints).
  std::vector<std::map<std::string, std::string>> digests(2);
  std::vector<std::string> serve_traces(2);
  std::vector<std::string> failures;
  for (int run = 0; run < 2; ++run) {
    const fs::path d = fresh_dir(root / "run");
    const auto step = [&](const std::string& name, const std::vector<std::string>& args) {
      const int code = run_cli(args, d / (name + ".out"));
      if (code != 0) failures.push_back(name + " exit " + std::to_string(code));
    };
    const auto s = [&](const fs::path& p) { return p.string(); };
    step("build-corpus", {"build-corpus", "--n", "160", "--seed", "5", "--out", s(d / "corpus")});
    step("build-dataset", {"build-dataset", "--id", "all", "--n", "6", "--seed", "6", "--out", s(d / "datasets")});
    step("build-dataset-eval", {"build-dataset", "--id", "style-mask", "--n", "4", "--seed", "7", "--out", s(d / "eval")});
    step("train-retrieval", {"train", "--stage", "retrieval", "--config", smoke, "--set", "corpus=" + s(d / "corpus"), "--out", s(d / "s1")});
    step("train-instruct", {"train", "--stage", "instruct", "--config", smoke, "--set", "datasets=" + s(d / "datasets"),
                            "--init", s(d / "s1" / "final.ckpt"), "--out", s(d / "s2")});
    step("train-ablation", {"train", "--stage", "instruct", "--config", smoke, "--set", "datasets=" + s(d / "datasets"),
                            "--ablate-no-retrieval", "--out", s(d / "ab")});
    step("sample", {"sample", "--ckpt", s(d / "s2" / "final.ckpt"), "--instruction", s(d / "eval" / "records.jsonl"),
                    "--steps", "8", "--guidance", "3", "--seed", "9", "--out", s(d / "samples")});
    step("eval-auto", {"eval", "auto", "--samples", s(d / "samples"), "--records", s(d / "eval"), "--out", s(d / "auto.json")});
    step("eval-report", {"eval", "report", "--log", s(kData / "fixtures" / "finetune_instruct_imagen.jsonl"), "--out",
                         s(d / "report.json")});
    step("desk-suite", {"desk-suite", "--workdir", s(d / "suite"), "--stage1-config", smoke, "--stage2-config", smoke,
                        "--corpus-n", "150", "--dataset-n", "6", "--eval-n", "4", "--sample-steps", "4"});
    for (const char* m : {"corpus", "datasets", "eval", "s1", "s2", "ab", "samples", "suite"}) {
      const auto j = json::parse(file_text(d / m / "manifest.json"));
      for (const auto& [label, digest] : j.at("outputs").items()) digests[run][std::string(m) + "/" + label] = digest;
    }
    digests[run]["auto.json"] = sha256_path(d / "auto.json");
    digests[run]["report.json"] = sha256_path(d / "report.json");
    const fs::path sd = fresh_dir(d / "serve");
    serve_traces[run] = scripted_serve(sd, root / "inventory.json");
  }
  std::size_t same = 0;
  std::vector<std::string> differ;
  for (const auto& [k, v] : digests[0]) {
    const auto it = digests[1].find(k);
    if (it != digests[1].end() && it->second == v) {
      ++same;
    } else {
      differ.push_back(k);
    }
  }
  const bool serve_same = !serve_traces[0].empty() && serve_traces[0] == serve_traces[1] &&
                          serve_traces[0].find("\"groups\"") != std::string::npos;
  n.add("%zu/%zu output digests identical across two runs", same, digests[0].size());
  n.add("eval serve: assignment order, report and log (minus wall-clock ts) %s", serve_same ? "identical" : "DIFFER");
  for (const auto& f : failures) n.add("%s", f.c_str());
  for (const auto& k : differ) n.add("differs: %s", k.c_str());
  return {failures.empty() && differ.empty() && same > 20 && digests[0].size() == digests[1].size() && serve_same, n.str()};
}

// ---------------------------------------------------------------------------
// Rating service protocol.

struct Simulation {
  bool blocking = true, duplicates = false, redundancy = true;
  std::vector<RatingRecord> records;
};

// Raters ask in a random order; each rating is committed before the next ask.
Simulation simulate(const Inventory& inv, int raters, std::uint64_t seed) {
  RatingSession session("sim", inv, 3);
  Rng rng(seed);
  Simulation sim;
  std::map<std::string, std::string> current_input;   // rater -> open input
  std::map<std::string, std::set<std::string>> todo;  // rater -> methods left on it
  std::set<std::pair<std::string, std::size_t>> seen;
  std::vector<std::string> active;
  for (int r = 0; r < raters; ++r) active.push_back("rater" + std::to_string(r));
  std::int64_t ts = 0;
  while (!active.empty()) {
    const std::size_t k = pick(rng, active.size());
    const std::string rater = active[k];
    const auto a = session.next(rater);
    if (!a) {
      // Exhausted while a block is open breaks blocking.
      sim.blocking &= todo[rater].empty();
      active.erase(active.begin() + static_cast<std::ptrdiff_t>(k));
      continue;
    }
    const auto& item = inv.items[a->item];
    if (!todo[rater].empty()) {
      sim.blocking &= current_input[rater] == item.input && todo[rater].count(item.method);
    } else {
      current_input[rater] = item.input;
      for (const auto& it : inv.items)
        if (it.input == item.input) todo[rater].insert(it.method);
    }
    todo[rater].erase(item.method);
    sim.duplicates |= !seen.emplace(rater, a->item).second;
    json body{{"assignment_id", a->id}, {"rater", rater}, {"sc", {0.5 * static_cast<double>(pick(rng, 3))}},
              {"pq", 0.5 * static_cast<double>(pick(rng, 3))}};
    const auto record = session.prepare(body, ++ts);
    session.commit(record);
    sim.records.push_back(record);
  }
  std::map<std::size_t, int> coverage;
  for (const auto& [rater, item] : seen) ++coverage[item];
  for (std::size_t i = 0; i < inv.items.size(); ++i) sim.redundancy &= coverage[i] == 3;
  return sim;
}

Outcome service_protocol(const fs::path& workdir) {
  Notes n;
  bool pass = true;
  const fs::path dir = fresh_dir(workdir / "service");
  const auto inventory = [](int inputs) {
    Inventory inv;
    for (int i = 0; i < inputs; ++i)
      for (const char* m : {"ours", "base"}) {
        InventoryItem it;
        it.input = "in" + std::to_string(i);
        it.method = m;
        it.task = i % 2 ? "mask2img" : "sty-gen";
        it.instruction = "draw [ref#1]";
        it.conditions = {"cond"};
        it.context = {{"[ref#1]", "cond", "/static/c.png"}};
        it.candidate = "/static/" + it.input + m + ".png";
        inv.items.push_back(it);
      }
    return inv;
  };

  int runs = 0, ok_runs = 0;
  bool replay_exact = true;
  for (int inputs : {1, 2, 3, 5, 8}) {
    const auto inv = inventory(inputs);
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto sim = simulate(inv, 3, splitmix64(seed * 131 + static_cast<std::uint64_t>(inputs)));
      ++runs;
      ok_runs += sim.blocking && !sim.duplicates && sim.redundancy;
      if (seed % 50 == 0) {
        // Through the durable log and back.
        const fs::path log = dir / ("log_" + std::to_string(inputs) + "_" + std::to_string(seed) + ".jsonl");
        {
          RatingsLog writer(log);
          for (const auto& r : sim.records) writer.append(r);
        }
        replay_exact &= aggregate(read_ratings_log(log).records).to_json().dump() == aggregate(sim.records).to_json().dump();
      }
    }
  }
  pass &= ok_runs == runs && replay_exact;
  n.add("%d/%d scheduler runs (3 raters x 2 methods x {1,2,3,5,8} inputs) blocked, duplicate-free, at redundancy 3", ok_runs,
        runs);
  n.add("log replay %s", replay_exact ? "exact" : "DIFFERS");

  // Scripted HTTP session plus a restart against the same log.
  const auto inv = inventory(4);
  ServiceConfig config;
  config.inventory = inv;
  config.log_path = dir / "http.jsonl";
  std::string first_report;
  int submitted = 0;
  bool codes_ok = true;
  {
    EvalService service(config);
    const int port = service.bind("127.0.0.1", 0);
    std::thread server([&] { service.run(); });
    httplib::Client client("127.0.0.1", port);
    const std::vector<std::string> raters{"ana", "ben", "cy"};
    {
      // An off-scale value is refused and leaves the assignment open.
      auto res = client.Get("/api/session/main/next?rater=ana");
      codes_ok &= res && res->status == 200;
      if (res) {
        const json off{{"assignment_id", json::parse(res->body).at("assignment_id")}, {"sc", {0.7}}, {"pq", 1.0}};
        auto bad = client.Post("/api/session/main/ratings", off.dump(), "application/json");
        codes_ok &= bad && bad->status == 422;
      }
      auto unknown = client.Post("/api/session/main/ratings", R"({"assignment_id":"nope","sc":[1],"pq":1})",
                                 "application/json");
      codes_ok &= unknown && unknown->status == 400;
    }
    std::string last_id;
    for (bool any = true; any;) {
      any = false;
      for (std::size_t k = 0; k < raters.size(); ++k) {
        auto res = client.Get("/api/session/main/next?rater=" + raters[k]);
        if (!res) {
          codes_ok = false;
          continue;
        }
        if (res->status == 404) continue;
        const auto a = json::parse(res->body);
        last_id = a.at("assignment_id").get<std::string>();
        const json body{{"assignment_id", last_id}, {"rater", raters[k]}, {"sc", {k == 0 ? 1.0 : 0.5}}, {"pq", 1.0}};
        auto post = client.Post("/api/session/main/ratings", body.dump(), "application/json");
        codes_ok &= post && post->status == 200;
        auto dup = client.Post("/api/session/main/ratings", body.dump(), "application/json");
        codes_ok &= dup && dup->status == 409;
        ++submitted;
        any = true;
      }
    }
    auto report = client.Get("/api/report");
    codes_ok &= report && report->status == 200;
    if (report) first_report = report->body;
    service.stop();
    server.join();
  }
  const auto replayed = aggregate(read_ratings_log(config.log_path).records).to_json();
  bool restart_same = false;
  {
    EvalService service(config);
    const int port = service.bind("127.0.0.1", 0);
    std::thread server([&] { service.run(); });
    httplib::Client client("127.0.0.1", port);
    auto report = client.Get("/api/report");
    auto next = client.Get("/api/session/main/next?rater=ana");
    restart_same = report && report->body == first_report && next && next->status == 404;
    service.stop();
    server.join();
  }
  const bool http_ok = codes_ok && submitted == static_cast<int>(inv.items.size()) * 3 && restart_same &&
                       json::parse(first_report) == json::parse(replayed.dump());
  pass &= http_ok;
  n.add("HTTP: %d ratings from 3 scripted raters, status codes %s, report after restart %s", submitted,
        codes_ok ? "as specified" : "WRONG", restart_same ? "identical" : "DIFFERS");
  return {pass, n.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string workdir = (fs::temp_directory_path() / "instructdiff_acceptance").string();
  std::string only;
  std::string e2e_report;
  app.add_option("--workdir", workdir)->capture_default_str();
  app.add_option("--only", only, "comma-separated criterion keys");
  app.add_option("--e2e-report", e2e_report, "score an existing desk-suite run instead of training");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient", gradient_check},
      {"forward-process", forward_fidelity},
      {"sampler-oracle", sampler_oracle},
      {"architecture", architecture_contracts},
      {"data-pipeline", data_pipeline},
      {"eval-arithmetic", eval_golden},
      {"end-to-end", [&] { return end_to_end(fs::path(workdir) / "e2e", e2e_report); }},
      {"determinism", [&] { return cli_determinism(workdir); }},
      {"eval-service", [&] { return service_protocol(workdir); }},
  };
  std::set<std::string> wanted;
  std::stringstream ss(only);
  for (std::string k; std::getline(ss, k, ',');) wanted.insert(k);

  int failed = 0;
  for (const auto& [key, check] : criteria) {
    if (!wanted.empty() && !wanted.count(key)) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << key << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
