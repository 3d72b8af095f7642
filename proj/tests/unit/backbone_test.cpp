#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "instructdiff/backbone.hpp"
#include "instructdiff/error.hpp"
#include "instructdiff/rng.hpp"

using namespace instructdiff;

namespace {

template <class T>
Tensor<T> random_tensor(int h, int w, int c, Rng& rng, double scale = 1.0) {
  Tensor<T> t(h, w, c);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(scale * rng.normal());
  return t;
}

template <class T>
void perturb(ParameterSet<T>& p, Rng& rng, double scale) {
  for (auto& [path, e] : p.entries())
    for (auto& v : e.values) v += static_cast<T>(scale * rng.normal());
}

// Independent shape algebra for the desk layout.
std::size_t conv(int cin, int cout, int k) { return static_cast<std::size_t>(k * k * cin * cout + cout); }
std::size_t norm(int c) { return static_cast<std::size_t>(2 * c); }
std::size_t res(int cin, int cout, int e) {
  return norm(cin) + conv(cin, cout, 3) + static_cast<std::size_t>(e * cout + cout) + norm(cout) + conv(cout, cout, 3) +
         (cin != cout ? conv(cin, cout, 1) : 0);
}
std::size_t text_attn(int c, int dt, int d) { return norm(c) + static_cast<std::size_t>(c * d + 2 * dt * d + d * c + c); }
std::size_t ctx_attn(int c, int cb, int d) { return norm(c) + norm(cb) + static_cast<std::size_t>(c * d + 2 * cb * d + d * c + c); }

}  // namespace

TEST(BackboneConfig, DeskValidates) {
  EXPECT_NO_THROW(BackboneConfig::desk().validate());
  EXPECT_NO_THROW(BackboneConfig::micro().validate());
  auto bad = BackboneConfig::desk();
  bad.levels[1].in_resolution = 12;
  EXPECT_THROW(bad.validate(), ValidationError);
  auto ctx_high = BackboneConfig::desk();
  ctx_high.levels[0].attention = AttentionKind::kTextContext;
  EXPECT_THROW(ctx_high.validate(), ValidationError);
}

TEST(BackboneConfig, JsonRoundTrip) {
  const auto c = BackboneConfig::desk();
  EXPECT_EQ(backbone_config_from_json(nlohmann::json::parse(to_json(c).dump())), c);
}

TEST(InitParams, DeterministicAndZeroContextOutput) {
  const auto c = BackboneConfig::desk();
  const auto a = init_params<float>(c, 11);
  const auto b = init_params<float>(c, 11);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == init_params<float>(c, 12));
  for (const auto& path : a.paths()) {
    if (path.find(".ctx.out.") != std::string::npos) {
      for (float v : a.values(path)) EXPECT_EQ(v, 0.0f) << path;
    }
  }
}

TEST(InitParams, DeskCountMatchesShapeAlgebra) {
  const int e = 64, dt = 64, d = 32;
  std::size_t expected = (32 * e + e) + (e * e + e) + conv(3, 8, 3);
  expected += res(8, 8, e) + res(8, 16, e) + res(16, 32, e);
  expected += text_attn(32, dt, d) + ctx_attn(32, 32, d);
  expected += res(32 + 32, 32, e) + text_attn(32, dt, d) + ctx_attn(32, 32, d);
  expected += res(32 + 16, 16, e) + res(16 + 8, 8, e);
  expected += norm(8) + conv(8, 3, 3);
  const auto c = BackboneConfig::desk();
  const auto p = init_params<float>(c, 1);
  EXPECT_EQ(p.total_count(), expected);
  const auto stats = param_stats(p, c);
  EXPECT_EQ(stats.context_attention, 2 * ctx_attn(32, 32, d));
}

TEST(InitParams, ContextDeltaIsExactlyTheNewLayers) {
  const auto with = BackboneConfig::desk();
  const auto without = with.without_context_attention();
  const auto pw = init_params<float>(with, 5);
  const auto po = init_params<float>(without, 5);
  EXPECT_EQ(pw.total_count() - po.total_count(), param_stats(pw, with).context_attention);
  EXPECT_EQ(param_stats(po, without).context_attention, 0u);
  for (const auto& path : po.paths()) {
    ASSERT_TRUE(pw.contains(path)) << path;
    EXPECT_EQ(pw.values(path), po.values(path)) << path;
  }
}

TEST(InitParams, MicroIsSmall) {
  const auto p = init_params<double>(BackboneConfig::micro(), 1);
  EXPECT_LE(p.total_count(), 5000u);
}

TEST(Backbone, OutputShapeMatchesInput) {
  for (const auto& c : {BackboneConfig::desk(), BackboneConfig::micro()}) {
    const auto p = init_params<float>(c, 3);
    Backbone<float> net(c, p);
    Rng rng(1);
    auto x = random_tensor<float>(c.resolution, c.resolution, 3, rng);
    TextCondition<float> text{random_tensor<float>(5, 1, c.text_dim, rng)};
    const auto y = net.denoise(x, 10, text, ContextTokens<float>{});
    EXPECT_TRUE(y.same_shape(x));
  }
}

TEST(Backbone, ZeroInitContextIsNoOp) {
  const auto c = BackboneConfig::desk();
  const auto p = init_params<float>(c, 3);
  Backbone<float> net(c, p);
  Rng rng(2);
  auto x = random_tensor<float>(32, 32, 3, rng);
  TextCondition<float> text{random_tensor<float>(6, 1, c.text_dim, rng)};
  std::vector<ContextInput<float>> pairs;
  for (int k = 0; k < 3; ++k) {
    pairs.push_back({random_tensor<float>(32, 32, 3, rng), {random_tensor<float>(4, 1, c.text_dim, rng)}});
  }
  const auto ctx = net.encode_context(pairs);
  EXPECT_EQ(ctx.tokens.pixels(), 3 * 64);
  EXPECT_TRUE(net.denoise(x, 100, text, ctx) == net.denoise(x, 100, text, ContextTokens<float>{}));
}

TEST(Backbone, ContextTokensPermuteByBlock) {
  const auto c = BackboneConfig::desk();
  const auto p = init_params<float>(c, 3);
  Backbone<float> net(c, p);
  Rng rng(4);
  ContextInput<float> a{random_tensor<float>(32, 32, 3, rng), {random_tensor<float>(3, 1, c.text_dim, rng)}};
  ContextInput<float> b{random_tensor<float>(32, 32, 3, rng), {random_tensor<float>(2, 1, c.text_dim, rng)}};
  const auto ab = net.encode_context({a, b});
  const auto ba = net.encode_context({b, a});
  const std::size_t block = 64 * 32;
  EXPECT_TRUE(std::equal(ab.tokens.data(), ab.tokens.data() + block, ba.tokens.data() + block));
  EXPECT_TRUE(std::equal(ab.tokens.data() + block, ab.tokens.data() + 2 * block, ba.tokens.data()));
  EXPECT_EQ(ab.boundaries, (std::vector<int>{0, 64}));
  EXPECT_TRUE(net.encode_context({}).empty());
}

TEST(Backbone, ContextEncoderSharesMainEncoderPaths) {
  const auto c = BackboneConfig::desk();
  const auto p = init_params<float>(c, 3);
  Backbone<float> net(c, p);
  const auto used = net.context_encoder_paths();
  ASSERT_FALSE(used.empty());
  for (const auto& path : used) {
    EXPECT_TRUE(p.contains(path)) << path;
    EXPECT_TRUE(path.rfind("down.", 0) == 0 || path.rfind("time.", 0) == 0 || path.rfind("conv_in.", 0) == 0) << path;
    EXPECT_FALSE(is_context_attention_path(path)) << path;
  }
}

TEST(Backbone, RejectsWrongImageSize) {
  const auto c = BackboneConfig::desk();
  const auto p = init_params<float>(c, 3);
  Backbone<float> net(c, p);
  EXPECT_THROW(net.encode_context({{Tensor<float>(16, 16, 3), {}}}), ValidationError);
  EXPECT_THROW(net.denoise(Tensor<float>(16, 16, 3), 1, {}, {}), ValidationError);
}

// Finite differences on 0.5 * ||denoise||^2 through the context encoder.
TEST(Backbone, GradientMatchesFiniteDifferences) {
  const auto c = BackboneConfig::micro();
  auto p = init_params<double>(c, 9);
  Rng rng(10);
  perturb(p, rng, 0.2);
  const auto x = random_tensor<double>(8, 8, 3, rng);
  const TextCondition<double> text{random_tensor<double>(3, 1, c.text_dim, rng)};
  std::vector<ContextInput<double>> pairs;
  for (int k = 0; k < 2; ++k) {
    pairs.push_back({random_tensor<double>(8, 8, 3, rng), {random_tensor<double>(2, 1, c.text_dim, rng)}});
  }
  auto objective = [&](const ParameterSet<double>& params) {
    Backbone<double> net(c, params);
    const auto ctx = net.encode_context(pairs);
    const auto y = net.denoise(x, 7, text, ctx);
    double s = 0.0;
    for (double v : y.values()) s += 0.5 * v * v;
    return s;
  };
  Backbone<double> net(c, p);
  ContextTape<double> ctape;
  const auto ctx = net.encode_context(pairs, &ctape);
  DenoiseTape<double> tape;
  const auto y = net.denoise(x, 7, text, ctx, &tape);
  auto grads = p.zeros_like();
  Tensor<double> dctx;
  net.backward(tape, y, grads, &dctx);
  net.backward_context(ctape, dctx, grads);

  const double h = 1e-5;
  double worst = 0.0;
  std::string worst_path;
  for (const auto& path : p.paths()) {
    auto& vals = p.values(path);
    for (std::size_t i = 0; i < vals.size(); i += std::max<std::size_t>(1, vals.size() / 4)) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double up = objective(p);
      vals[i] = orig - h;
      const double dn = objective(p);
      vals[i] = orig;
      const double num = (up - dn) / (2 * h);
      const double ana = grads.values(path)[i];
      const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-6});
      if (rel > worst) {
        worst = rel;
        worst_path = path + "[" + std::to_string(i) + "]";
      }
    }
  }
  EXPECT_LE(worst, 1e-4) << worst_path;
}
