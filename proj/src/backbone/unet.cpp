#include <cmath>
#include <numbers>
#include <set>

#include "instructdiff/backbone.hpp"
#include "instructdiff/error.hpp"
#include "layers.hpp"

namespace instructdiff {

using namespace layers;

namespace {

template <class T>
struct ResCache {
  NormCache<T> n1;
  Tensor<T> a1;
  ConvCache<T> c1;
  NormCache<T> n2;
  Tensor<T> a2;
  ConvCache<T> c2;
  ConvCache<T> skip;
  int cin = 0;
  int cout = 0;
};

template <class T>
struct AttnBlockCache {
  bool text = false;
  bool ctx = false;
  AttentionCache<T> t;
  AttentionCache<T> c;
};

template <class T>
struct TimeCache {
  Tensor<T> sinus;
  Tensor<T> h1;
  Tensor<T> a1;
  Tensor<T> temb;
  Tensor<T> act;  // silu(temb), what the blocks consume
};

template <class T>
struct LevelCache {
  std::vector<ResCache<T>> res;
  std::vector<AttnBlockCache<T>> attn;
  bool resampled = false;
  int prev_channels = 0;
};

template <class T>
struct EncoderCache {
  ConvCache<T> conv_in;
  std::vector<LevelCache<T>> levels;
};

}  // namespace

template <class T>
struct DenoiseTape<T>::Impl {
  TimeCache<T> time;
  EncoderCache<T> enc;
  std::vector<LevelCache<T>> up;
  NormCache<T> out_norm;
  Tensor<T> out_act;
  ConvCache<T> out_conv;
  int ctx_rows = 0;
  int ctx_channels = 0;
};

template <class T>
struct ContextTape<T>::Impl {
  TimeCache<T> time;
  std::vector<EncoderCache<T>> pairs;
};

template <class T>
DenoiseTape<T>::DenoiseTape() : impl(std::make_unique<Impl>()) {}
template <class T>
DenoiseTape<T>::~DenoiseTape() = default;
template <class T>
DenoiseTape<T>::DenoiseTape(DenoiseTape&&) noexcept = default;
template <class T>
DenoiseTape<T>& DenoiseTape<T>::operator=(DenoiseTape&&) noexcept = default;
template <class T>
ContextTape<T>::ContextTape() : impl(std::make_unique<Impl>()) {}
template <class T>
ContextTape<T>::~ContextTape() = default;
template <class T>
ContextTape<T>::ContextTape(ContextTape&&) noexcept = default;
template <class T>
ContextTape<T>& ContextTape<T>::operator=(ContextTape&&) noexcept = default;

template <class T>
Tensor<T> position_code(int resolution, int dim) {
  Tensor<T> out(resolution * resolution, 1, dim);
  const int freqs = dim / 4;
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      T* row = out.data() + static_cast<std::size_t>(y * resolution + x) * dim;
      for (int i = 1; i <= freqs; ++i) {
        const double w = std::numbers::pi * std::pow(2.0, -0.5 * i);
        row[4 * (i - 1) + 0] = static_cast<T>(std::sin(w * y));
        row[4 * (i - 1) + 1] = static_cast<T>(std::cos(w * y));
        row[4 * (i - 1) + 2] = static_cast<T>(std::sin(w * x));
        row[4 * (i - 1) + 3] = static_cast<T>(std::cos(w * x));
      }
    }
  }
  return out;
}

namespace {

template <class T>
class Net {
 public:
  Net(const BackboneConfig& c, const ParameterSet<T>& p, std::set<std::string>* touched = nullptr)
      : c_(c), p_(p), touched_(touched) {}

  const T* P(const std::string& path) const {
    if (touched_) touched_->insert(path);
    return p_.data(path);
  }

  static T* G(ParameterSet<T>& g, const std::string& path) { return g.data(path); }

  static void check(const Tensor<T>& h, const std::string& where) {
    if (!h.all_finite()) throw NonFiniteError(where, "activation");
  }

  Tensor<T> time_forward(int t, TimeCache<T>& tc) const {
    const int s = c_.time_sinusoid_dim;
    const int half = s / 2;
    tc.sinus = Tensor<T>(1, 1, s);
    for (int j = 0; j < half; ++j) {
      const double f = std::exp(-std::log(10000.0) * j / half);
      tc.sinus[static_cast<std::size_t>(j)] = static_cast<T>(std::sin(t * f));
      tc.sinus[static_cast<std::size_t>(j + half)] = static_cast<T>(std::cos(t * f));
    }
    const int e = c_.time_embed_dim;
    tc.h1 = linear_forward(tc.sinus, P("time.fc1.w"), P("time.fc1.b"), e);
    tc.a1 = silu_forward(tc.h1);
    tc.temb = linear_forward(tc.a1, P("time.fc2.w"), P("time.fc2.b"), e);
    tc.act = silu_forward(tc.temb);
    return tc.act;
  }

  void time_backward(const TimeCache<T>& tc, const Tensor<T>& d_act, ParameterSet<T>& g) const {
    Tensor<T> d = silu_backward(tc.temb, d_act);
    d = linear_backward(tc.a1, d, P("time.fc2.w"), G(g, "time.fc2.w"), G(g, "time.fc2.b"));
    d = silu_backward(tc.h1, d);
    linear_backward(tc.sinus, d, P("time.fc1.w"), G(g, "time.fc1.w"), G(g, "time.fc1.b"));
  }

  Tensor<T> res_forward(const std::string& pre, const Tensor<T>& x, const Tensor<T>& temb, int cout,
                        ResCache<T>& rc) const {
    const int cin = x.channels();
    rc.cin = cin;
    rc.cout = cout;
    rc.a1 = group_norm_forward(x, P(pre + ".norm1.g"), P(pre + ".norm1.b"), c_.groups, &rc.n1);
    Tensor<T> h = conv_forward(silu_forward(rc.a1), P(pre + ".conv1.w"), P(pre + ".conv1.b"), cout, 3, &rc.c1);
    const Tensor<T> proj = linear_forward(temb, P(pre + ".temb.w"), P(pre + ".temb.b"), cout);
    for (int px = 0; px < h.pixels(); ++px)
      for (int j = 0; j < cout; ++j) h[static_cast<std::size_t>(px) * cout + j] += proj[static_cast<std::size_t>(j)];
    rc.a2 = group_norm_forward(h, P(pre + ".norm2.g"), P(pre + ".norm2.b"), c_.groups, &rc.n2);
    Tensor<T> y = conv_forward(silu_forward(rc.a2), P(pre + ".conv2.w"), P(pre + ".conv2.b"), cout, 3, &rc.c2);
    if (cin != cout) {
      const Tensor<T> s = conv_forward(x, P(pre + ".skip.w"), P(pre + ".skip.b"), cout, 1, &rc.skip);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += s[i];
    } else {
      for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
    }
    return y;
  }

  Tensor<T> res_backward(const std::string& pre, const ResCache<T>& rc, const Tensor<T>& dy, const Tensor<T>& temb,
                         ParameterSet<T>& g, Tensor<T>& d_temb) const {
    const int cout = rc.cout;
    Tensor<T> d = conv_backward(rc.c2, dy, P(pre + ".conv2.w"), G(g, pre + ".conv2.w"), G(g, pre + ".conv2.b"), cout);
    d = silu_backward(rc.a2, d);
    d = group_norm_backward(rc.n2, d, P(pre + ".norm2.g"), G(g, pre + ".norm2.g"), G(g, pre + ".norm2.b"), c_.groups);
    Tensor<T> dproj(1, 1, cout);
    for (int px = 0; px < d.pixels(); ++px)
      for (int j = 0; j < cout; ++j) dproj[static_cast<std::size_t>(j)] += d[static_cast<std::size_t>(px) * cout + j];
    const Tensor<T> dt = linear_backward(temb, dproj, P(pre + ".temb.w"), G(g, pre + ".temb.w"), G(g, pre + ".temb.b"));
    for (std::size_t i = 0; i < dt.size(); ++i) d_temb[i] += dt[i];
    d = conv_backward(rc.c1, d, P(pre + ".conv1.w"), G(g, pre + ".conv1.w"), G(g, pre + ".conv1.b"), cout);
    d = silu_backward(rc.a1, d);
    Tensor<T> dx =
        group_norm_backward(rc.n1, d, P(pre + ".norm1.g"), G(g, pre + ".norm1.g"), G(g, pre + ".norm1.b"), c_.groups);
    if (rc.cin != rc.cout) {
      const Tensor<T> ds = conv_backward(rc.skip, dy, P(pre + ".skip.w"), G(g, pre + ".skip.w"), G(g, pre + ".skip.b"), cout);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
    } else {
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    }
    return dx;
  }

  AttentionParams<T> attn_params(const std::string& pre, bool kv_norm) const {
    AttentionParams<T> a{};
    a.norm_g = P(pre + ".norm.g");
    a.norm_b = P(pre + ".norm.b");
    if (kv_norm) {
      a.kv_norm_g = P(pre + ".kv_norm.g");
      a.kv_norm_b = P(pre + ".kv_norm.b");
    }
    a.wq = P(pre + ".q.w");
    a.wk = P(pre + ".k.w");
    a.wv = P(pre + ".v.w");
    a.wo = P(pre + ".out.w");
    a.bo = P(pre + ".out.b");
    return a;
  }

  static AttentionGrads<T> attn_grads(ParameterSet<T>& g, const std::string& pre, bool kv_norm) {
    AttentionGrads<T> a{};
    a.norm_g = G(g, pre + ".norm.g");
    a.norm_b = G(g, pre + ".norm.b");
    if (kv_norm) {
      a.kv_norm_g = G(g, pre + ".kv_norm.g");
      a.kv_norm_b = G(g, pre + ".kv_norm.b");
    }
    a.wq = G(g, pre + ".q.w");
    a.wk = G(g, pre + ".k.w");
    a.wv = G(g, pre + ".v.w");
    a.wo = G(g, pre + ".out.w");
    a.bo = G(g, pre + ".out.b");
    return a;
  }

  Tensor<T> attn_forward(const std::string& pre, AttentionKind kind, const Tensor<T>& x, const TextCondition<T>& text,
                         const ContextTokens<T>* ctx, AttnBlockCache<T>& ac) const {
    Tensor<T> h = x;
    ac.text = kind != AttentionKind::kNone && text.tokens.pixels() > 0;
    if (ac.text) {
      h = attention_forward(h, text.tokens, attn_params(pre + ".text", false), c_.d_model, c_.heads,
                            static_cast<const Tensor<T>*>(nullptr), static_cast<const Tensor<T>*>(nullptr), &ac.t);
    }
    ac.ctx = kind == AttentionKind::kTextContext && ctx && !ctx->empty();
    if (ac.ctx) {
      const Tensor<T> pq = position_code<T>(h.height(), h.channels());
      const Tensor<T> one = position_code<T>(c_.bottleneck_resolution(), ctx->tokens.channels());
      Tensor<T> pk(ctx->tokens.pixels(), 1, ctx->tokens.channels());
      for (std::size_t i = 0; i < pk.size(); ++i) pk[i] = one[i % one.size()];
      h = attention_forward(h, ctx->tokens, attn_params(pre + ".ctx", true), c_.d_model, c_.heads, &pq, &pk, &ac.c);
    }
    return h;
  }

  Tensor<T> attn_backward(const std::string& pre, const AttnBlockCache<T>& ac, const Tensor<T>& dy, ParameterSet<T>& g,
                          Tensor<T>* dctx) const {
    Tensor<T> d = dy;
    if (ac.ctx) {
      d = attention_backward(ac.c, d, attn_params(pre + ".ctx", true), attn_grads(g, pre + ".ctx", true), c_.d_model,
                             c_.heads, dctx);
    }
    if (ac.text) {
      d = attention_backward(ac.t, d, attn_params(pre + ".text", false), attn_grads(g, pre + ".text", false),
                             c_.d_model, c_.heads, static_cast<Tensor<T>*>(nullptr));
    }
    return d;
  }

  static std::string name(const char* side, std::size_t level, const char* kind, int block) {
    return std::string(side) + "." + std::to_string(level) + "." + kind + "." + std::to_string(block);
  }

  Tensor<T> encoder_forward(const Tensor<T>& x, const Tensor<T>& temb, const TextCondition<T>& text,
                            const ContextTokens<T>* ctx, EncoderCache<T>& ec, std::vector<Tensor<T>>& skips) const {
    Tensor<T> h = conv_forward(x, P("conv_in.w"), P("conv_in.b"), c_.base_channels, 3, &ec.conv_in);
    check(h, "conv_in");
    const std::size_t nl = c_.levels.size();
    ec.levels.assign(nl, LevelCache<T>());
    skips.assign(nl, Tensor<T>());
    for (std::size_t i = 0; i < nl; ++i) {
      const auto& l = c_.levels[i];
      auto& lc = ec.levels[i];
      lc.res.resize(static_cast<std::size_t>(l.blocks));
      lc.attn.resize(static_cast<std::size_t>(l.blocks));
      for (int b = 0; b < l.blocks; ++b) {
        const std::string rp = name("down", i, "res", b);
        h = res_forward(rp, h, temb, l.channels, lc.res[static_cast<std::size_t>(b)]);
        check(h, rp);
        const std::string ap = name("down", i, "attn", b);
        h = attn_forward(ap, l.attention, h, text, ctx, lc.attn[static_cast<std::size_t>(b)]);
        check(h, ap);
      }
      skips[i] = h;
      if (l.out_resolution < l.in_resolution) {
        h = avgpool2(h);
        lc.resampled = true;
      }
    }
    return h;
  }

  void encoder_backward(const EncoderCache<T>& ec, const Tensor<T>& d_bottleneck, const std::vector<Tensor<T>>* dskips,
                        const Tensor<T>& temb, ParameterSet<T>& g, Tensor<T>& d_temb, Tensor<T>* dctx) const {
    Tensor<T> dh = d_bottleneck;
    for (std::size_t i = c_.levels.size(); i-- > 0;) {
      const auto& l = c_.levels[i];
      const auto& lc = ec.levels[i];
      if (lc.resampled) dh = avgpool2_backward(dh);
      if (dskips) {
        const Tensor<T>& ds = (*dskips)[i];
        for (std::size_t j = 0; j < dh.size(); ++j) dh[j] += ds[j];
      }
      for (int b = l.blocks; b-- > 0;) {
        dh = attn_backward(name("down", i, "attn", b), lc.attn[static_cast<std::size_t>(b)], dh, g, dctx);
        dh = res_backward(name("down", i, "res", b), lc.res[static_cast<std::size_t>(b)], dh, temb, g, d_temb);
      }
    }
    conv_backward(ec.conv_in, dh, P("conv_in.w"), G(g, "conv_in.w"), G(g, "conv_in.b"), c_.base_channels);
  }

  Tensor<T> decoder_forward(Tensor<T> h, const std::vector<Tensor<T>>& skips, const Tensor<T>& temb,
                            const TextCondition<T>& text, const ContextTokens<T>* ctx,
                            typename DenoiseTape<T>::Impl& tape) const {
    const std::size_t nl = c_.levels.size();
    tape.up.assign(nl, LevelCache<T>());
    for (std::size_t r = nl; r-- > 0;) {
      const auto& l = c_.levels[r];
      auto& lc = tape.up[r];
      if (h.height() < l.in_resolution) {
        h = upsample2(h);
        lc.resampled = true;
      }
      lc.prev_channels = h.channels();
      h = concat_channels(h, skips[r]);
      lc.res.resize(static_cast<std::size_t>(l.blocks));
      lc.attn.resize(static_cast<std::size_t>(l.blocks));
      for (int b = 0; b < l.blocks; ++b) {
        const std::string rp = name("up", r, "res", b);
        h = res_forward(rp, h, temb, l.channels, lc.res[static_cast<std::size_t>(b)]);
        check(h, rp);
        const std::string ap = name("up", r, "attn", b);
        h = attn_forward(ap, l.attention, h, text, ctx, lc.attn[static_cast<std::size_t>(b)]);
        check(h, ap);
      }
    }
    tape.out_act = group_norm_forward(h, P("out.norm.g"), P("out.norm.b"), c_.groups, &tape.out_norm);
    Tensor<T> y = conv_forward(silu_forward(tape.out_act), P("out.conv.w"), P("out.conv.b"), c_.image_channels, 3,
                               &tape.out_conv);
    check(y, "out.conv");
    return y;
  }

  Tensor<T> decoder_backward(const typename DenoiseTape<T>::Impl& tape, const Tensor<T>& dy, const Tensor<T>& temb,
                             ParameterSet<T>& g, Tensor<T>& d_temb, std::vector<Tensor<T>>& dskips,
                             Tensor<T>* dctx) const {
    Tensor<T> d = conv_backward(tape.out_conv, dy, P("out.conv.w"), G(g, "out.conv.w"), G(g, "out.conv.b"),
                                c_.image_channels);
    d = silu_backward(tape.out_act, d);
    d = group_norm_backward(tape.out_norm, d, P("out.norm.g"), G(g, "out.norm.g"), G(g, "out.norm.b"), c_.groups);
    const std::size_t nl = c_.levels.size();
    dskips.assign(nl, Tensor<T>());
    for (std::size_t r = 0; r < nl; ++r) {
      const auto& l = c_.levels[r];
      const auto& lc = tape.up[r];
      for (int b = l.blocks; b-- > 0;) {
        d = attn_backward(name("up", r, "attn", b), lc.attn[static_cast<std::size_t>(b)], d, g, dctx);
        d = res_backward(name("up", r, "res", b), lc.res[static_cast<std::size_t>(b)], d, temb, g, d_temb);
      }
      Tensor<T> dprev;
      split_channels(d, lc.prev_channels, dprev, dskips[r]);
      d = lc.resampled ? upsample2_backward(dprev) : std::move(dprev);
    }
    return d;
  }

 private:
  const BackboneConfig& c_;
  const ParameterSet<T>& p_;
  std::set<std::string>* touched_;
};

}  // namespace

template <class T>
Backbone<T>::Backbone(BackboneConfig config, const ParameterSet<T>& params) : config_(std::move(config)), params_(params) {
  config_.validate();
}

template <class T>
Backbone<T>::~Backbone() = default;

template <class T>
Tensor<T> Backbone<T>::denoise(const Tensor<T>& x_t, int t, const TextCondition<T>& text,
                               const ContextTokens<T>& context, DenoiseTape<T>* tape) const {
  if (x_t.height() != config_.resolution || x_t.width() != config_.resolution ||
      x_t.channels() != config_.image_channels) {
    throw ValidationError("denoise: input shape does not match the backbone resolution");
  }
  if (text.tokens.pixels() > 0 && text.tokens.channels() != config_.text_dim) {
    throw ValidationError("denoise: text width does not match the backbone text_dim");
  }
  if (!context.empty() && context.tokens.channels() != config_.bottleneck_channels()) {
    throw ValidationError("denoise: context token width does not match the bottleneck");
  }
  typename DenoiseTape<T>::Impl local;
  auto& s = tape ? *tape->impl : local;
  Net<T> net(config_, params_);
  const Tensor<T> temb = net.time_forward(t, s.time);
  std::vector<Tensor<T>> skips;
  Tensor<T> h = net.encoder_forward(x_t, temb, text, &context, s.enc, skips);
  s.ctx_rows = context.tokens.pixels();
  s.ctx_channels = context.tokens.channels();
  return net.decoder_forward(std::move(h), skips, temb, text, &context, s);
}

template <class T>
void Backbone<T>::backward(DenoiseTape<T>& tape, const Tensor<T>& grad_out, ParameterSet<T>& grads,
                           Tensor<T>* context_grad) const {
  auto& s = *tape.impl;
  Net<T> net(config_, params_);
  Tensor<T> d_temb(1, 1, config_.time_embed_dim);
  std::vector<Tensor<T>> dskips;
  if (context_grad) *context_grad = Tensor<T>(s.ctx_rows, 1, s.ctx_channels);
  const Tensor<T> d_bottleneck = net.decoder_backward(s, grad_out, s.time.act, grads, d_temb, dskips, context_grad);
  net.encoder_backward(s.enc, d_bottleneck, &dskips, s.time.act, grads, d_temb, context_grad);
  net.time_backward(s.time, d_temb, grads);
}

template <class T>
ContextTokens<T> Backbone<T>::encode_context(const std::vector<ContextInput<T>>& pairs, ContextTape<T>* tape) const {
  ContextTokens<T> out;
  const int per = config_.tokens_per_pair();
  const int cb = config_.bottleneck_channels();
  out.tokens_per_pair = per;
  out.tokens = Tensor<T>(per * static_cast<int>(pairs.size()), 1, cb);
  if (pairs.empty()) return out;
  typename ContextTape<T>::Impl local;
  auto& s = tape ? *tape->impl : local;
  Net<T> net(config_, params_);
  const Tensor<T> temb = net.time_forward(0, s.time);
  s.pairs.assign(pairs.size(), EncoderCache<T>());
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& pair = pairs[k];
    if (pair.image.height() != config_.resolution || pair.image.width() != config_.resolution ||
        pair.image.channels() != config_.image_channels) {
      throw ValidationError("encode_context: context image " + std::to_string(k + 1) +
                            " does not match the backbone resolution");
    }
    std::vector<Tensor<T>> skips;
    const Tensor<T> h = net.encoder_forward(pair.image, temb, pair.text, nullptr, s.pairs[k], skips);
    std::copy(h.data(), h.data() + h.size(), out.tokens.data() + k * static_cast<std::size_t>(per) * cb);
    out.boundaries.push_back(static_cast<int>(k) * per);
  }
  return out;
}

template <class T>
void Backbone<T>::backward_context(ContextTape<T>& tape, const Tensor<T>& grad_tokens, ParameterSet<T>& grads) const {
  auto& s = *tape.impl;
  if (s.pairs.empty()) return;
  Net<T> net(config_, params_);
  const int r = config_.bottleneck_resolution();
  const int cb = config_.bottleneck_channels();
  const std::size_t block = static_cast<std::size_t>(r) * r * cb;
  Tensor<T> d_temb(1, 1, config_.time_embed_dim);
  for (std::size_t k = 0; k < s.pairs.size(); ++k) {
    Tensor<T> d(r, r, cb);
    std::copy(grad_tokens.data() + k * block, grad_tokens.data() + (k + 1) * block, d.data());
    net.encoder_backward(s.pairs[k], d, nullptr, s.time.act, grads, d_temb, nullptr);
  }
  net.time_backward(s.time, d_temb, grads);
}

template <class T>
std::vector<std::string> Backbone<T>::context_encoder_paths() const {
  std::set<std::string> touched;
  Net<T> net(config_, params_, &touched);
  TimeCache<T> tc;
  const Tensor<T> temb = net.time_forward(0, tc);
  TextCondition<T> text{Tensor<T>(1, 1, config_.text_dim)};
  EncoderCache<T> ec;
  std::vector<Tensor<T>> skips;
  net.encoder_forward(Tensor<T>(config_.resolution, config_.resolution, config_.image_channels), temb, text, nullptr,
                      ec, skips);
  return {touched.begin(), touched.end()};
}

template class DenoiseTape<float>;
template class DenoiseTape<double>;
template class ContextTape<float>;
template class ContextTape<double>;
template class Backbone<float>;
template class Backbone<double>;
template Tensor<float> position_code<float>(int, int);
template Tensor<double> position_code<double>(int, int);

}  // namespace instructdiff
