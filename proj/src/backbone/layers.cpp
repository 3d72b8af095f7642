#include "layers.hpp"

#include <algorithm>

namespace instructdiff::layers {

namespace k = instructdiff::kernels;

template <class T>
Tensor<T> conv_forward(const Tensor<T>& x, const T* w, const T* b, int cout, int kernel, ConvCache<T>* cache) {
  const int h = x.height();
  const int wd = x.width();
  const int cin = x.channels();
  const int kk = kernel * kernel * cin;
  Tensor<T> col;
  if (kernel == 1) {
    col = x;
  } else {
    col = Tensor<T>(h * wd, 1, kk);
    const int r = kernel / 2;
    T* out = col.data();
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < wd; ++xx) {
        for (int ky = 0; ky < kernel; ++ky) {
          const int sy = y + ky - r;
          for (int kx = 0; kx < kernel; ++kx) {
            const int sx = xx + kx - r;
            if (sy >= 0 && sy < h && sx >= 0 && sx < wd) {
              const T* src = &x.at(sy, sx, 0);
              std::copy(src, src + cin, out);
            }
            out += cin;
          }
        }
      }
    }
  }
  Tensor<T> y(h, wd, cout);
  k::gemm(h * wd, cout, kk, col.data(), kk, 1, w, cout, y.data(), cout, false);
  if (b) {
    for (int p = 0; p < h * wd; ++p) {
      T* row = y.data() + static_cast<std::size_t>(p) * cout;
      for (int c = 0; c < cout; ++c) row[c] += b[c];
    }
  }
  if (cache) {
    cache->col = std::move(col);
    cache->height = h;
    cache->width = wd;
    cache->cin = cin;
    cache->kernel = kernel;
  }
  return y;
}

template <class T>
Tensor<T> conv_backward(const ConvCache<T>& cache, const Tensor<T>& dy, const T* w, T* dw, T* db, int cout) {
  const int h = cache.height;
  const int wd = cache.width;
  const int cin = cache.cin;
  const int kernel = cache.kernel;
  const int kk = kernel * kernel * cin;
  const int n = h * wd;
  k::gemm(kk, cout, n, cache.col.data(), 1, kk, dy.data(), cout, dw, cout, true);
  if (db) {
    for (int p = 0; p < n; ++p) {
      const T* row = dy.data() + static_cast<std::size_t>(p) * cout;
      for (int c = 0; c < cout; ++c) db[c] += row[c];
    }
  }
  std::vector<T> wt(static_cast<std::size_t>(kk) * cout);
  for (int i = 0; i < kk; ++i)
    for (int c = 0; c < cout; ++c) wt[static_cast<std::size_t>(c) * kk + i] = w[static_cast<std::size_t>(i) * cout + c];
  if (kernel == 1) {
    Tensor<T> dx(h, wd, cin);
    k::gemm(n, kk, cout, dy.data(), cout, 1, wt.data(), kk, dx.data(), kk, false);
    return dx;
  }
  Tensor<T> dcol(n, 1, kk);
  k::gemm(n, kk, cout, dy.data(), cout, 1, wt.data(), kk, dcol.data(), kk, false);
  Tensor<T> dx(h, wd, cin);
  const int r = kernel / 2;
  const T* src = dcol.data();
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < wd; ++xx) {
      for (int ky = 0; ky < kernel; ++ky) {
        const int sy = y + ky - r;
        for (int kx = 0; kx < kernel; ++kx) {
          const int sx = xx + kx - r;
          if (sy >= 0 && sy < h && sx >= 0 && sx < wd) {
            T* dst = &dx.at(sy, sx, 0);
            for (int c = 0; c < cin; ++c) dst[c] += src[c];
          }
          src += cin;
        }
      }
    }
  }
  return dx;
}

namespace {
constexpr double kNormEps = 1e-5;
}

template <class T>
Tensor<T> group_norm_forward(const Tensor<T>& x, const T* g, const T* b, int groups, NormCache<T>* cache) {
  const int c = x.channels();
  const int n = x.pixels();
  const int cg = c / groups;
  Tensor<T> xhat(x.height(), x.width(), c);
  std::vector<double> inv(static_cast<std::size_t>(groups));
  for (int gi = 0; gi < groups; ++gi) {
    double sum = 0.0;
    for (int p = 0; p < n; ++p)
      for (int j = 0; j < cg; ++j) sum += x[static_cast<std::size_t>(p) * c + gi * cg + j];
    const double mean = sum / (static_cast<double>(n) * cg);
    double var = 0.0;
    for (int p = 0; p < n; ++p)
      for (int j = 0; j < cg; ++j) {
        const double d = x[static_cast<std::size_t>(p) * c + gi * cg + j] - mean;
        var += d * d;
      }
    var /= static_cast<double>(n) * cg;
    const double is = 1.0 / std::sqrt(var + kNormEps);
    inv[static_cast<std::size_t>(gi)] = is;
    for (int p = 0; p < n; ++p)
      for (int j = 0; j < cg; ++j) {
        const std::size_t i = static_cast<std::size_t>(p) * c + gi * cg + j;
        xhat[i] = static_cast<T>((x[i] - mean) * is);
      }
  }
  Tensor<T> y(x.height(), x.width(), c);
  for (int p = 0; p < n; ++p)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t i = static_cast<std::size_t>(p) * c + ch;
      y[i] = g[ch] * xhat[i] + b[ch];
    }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

template <class T>
Tensor<T> group_norm_backward(const NormCache<T>& cache, const Tensor<T>& dy, const T* g, T* dg, T* db, int groups) {
  const Tensor<T>& xhat = cache.xhat;
  const int c = xhat.channels();
  const int n = xhat.pixels();
  const int cg = c / groups;
  for (int p = 0; p < n; ++p)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t i = static_cast<std::size_t>(p) * c + ch;
      dg[ch] += dy[i] * xhat[i];
      db[ch] += dy[i];
    }
  Tensor<T> dx(xhat.height(), xhat.width(), c);
  const double m = static_cast<double>(n) * cg;
  for (int gi = 0; gi < groups; ++gi) {
    double sum_d = 0.0;
    double sum_dx = 0.0;
    for (int p = 0; p < n; ++p)
      for (int j = 0; j < cg; ++j) {
        const int ch = gi * cg + j;
        const std::size_t i = static_cast<std::size_t>(p) * c + ch;
        const double d = static_cast<double>(dy[i]) * g[ch];
        sum_d += d;
        sum_dx += d * xhat[i];
      }
    const double is = cache.inv_std[static_cast<std::size_t>(gi)];
    for (int p = 0; p < n; ++p)
      for (int j = 0; j < cg; ++j) {
        const int ch = gi * cg + j;
        const std::size_t i = static_cast<std::size_t>(p) * c + ch;
        const double d = static_cast<double>(dy[i]) * g[ch];
        dx[i] = static_cast<T>(is * (d - sum_d / m - xhat[i] * sum_dx / m));
      }
  }
  return dx;
}

template <class T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const T* g, const T* b, NormCache<T>* cache) {
  const int c = x.channels();
  const int rows = x.pixels();
  Tensor<T> xhat(x.height(), x.width(), c);
  Tensor<T> y(x.height(), x.width(), c);
  std::vector<double> inv(static_cast<std::size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const T* xr = x.data() + static_cast<std::size_t>(r) * c;
    double sum = 0.0;
    for (int j = 0; j < c; ++j) sum += xr[j];
    const double mean = sum / c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    const double is = 1.0 / std::sqrt(var / c + kNormEps);
    inv[static_cast<std::size_t>(r)] = is;
    for (int j = 0; j < c; ++j) {
      const std::size_t i = static_cast<std::size_t>(r) * c + j;
      xhat[i] = static_cast<T>((xr[j] - mean) * is);
      y[i] = g[j] * xhat[i] + b[j];
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

template <class T>
Tensor<T> layer_norm_backward(const NormCache<T>& cache, const Tensor<T>& dy, const T* g, T* dg, T* db) {
  const Tensor<T>& xhat = cache.xhat;
  const int c = xhat.channels();
  const int rows = xhat.pixels();
  Tensor<T> dx(xhat.height(), xhat.width(), c);
  for (int r = 0; r < rows; ++r) {
    double sum_d = 0.0;
    double sum_dx = 0.0;
    for (int j = 0; j < c; ++j) {
      const std::size_t i = static_cast<std::size_t>(r) * c + j;
      dg[j] += dy[i] * xhat[i];
      db[j] += dy[i];
      const double d = static_cast<double>(dy[i]) * g[j];
      sum_d += d;
      sum_dx += d * xhat[i];
    }
    const double is = cache.inv_std[static_cast<std::size_t>(r)];
    for (int j = 0; j < c; ++j) {
      const std::size_t i = static_cast<std::size_t>(r) * c + j;
      const double d = static_cast<double>(dy[i]) * g[j];
      dx[i] = static_cast<T>(is * (d - sum_d / c - xhat[i] * sum_dx / c));
    }
  }
  return dx;
}

template <class T>
Tensor<T> silu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.height(), x.width(), x.channels());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = silu(x[i]);
  return y;
}

template <class T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.height(), x.width(), x.channels());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * silu_grad(x[i]);
  return dx;
}

template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const T* w, const T* b, int out) {
  const int rows = x.pixels();
  const int in = x.channels();
  Tensor<T> y(x.height(), x.width(), out);
  k::gemm(rows, out, in, x.data(), in, 1, w, out, y.data(), out, false);
  if (b) {
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < out; ++j) y[static_cast<std::size_t>(r) * out + j] += b[j];
  }
  return y;
}

template <class T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& dy, const T* w, T* dw, T* db) {
  const int rows = x.pixels();
  const int in = x.channels();
  const int out = dy.channels();
  k::gemm(in, out, rows, x.data(), 1, in, dy.data(), out, dw, out, true);
  if (db) {
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < out; ++j) db[j] += dy[static_cast<std::size_t>(r) * out + j];
  }
  std::vector<T> wt(static_cast<std::size_t>(in) * out);
  for (int i = 0; i < in; ++i)
    for (int j = 0; j < out; ++j) wt[static_cast<std::size_t>(j) * in + i] = w[static_cast<std::size_t>(i) * out + j];
  Tensor<T> dx(x.height(), x.width(), in);
  k::gemm(rows, in, out, dy.data(), out, 1, wt.data(), in, dx.data(), in, false);
  return dx;
}

template <class T>
Tensor<T> avgpool2(const Tensor<T>& x) {
  const int c = x.channels();
  Tensor<T> y(x.height() / 2, x.width() / 2, c);
  for (int yy = 0; yy < y.height(); ++yy)
    for (int xx = 0; xx < y.width(); ++xx)
      for (int ch = 0; ch < c; ++ch) {
        y.at(yy, xx, ch) = T{0.25} * (x.at(2 * yy, 2 * xx, ch) + x.at(2 * yy, 2 * xx + 1, ch) +
                                      x.at(2 * yy + 1, 2 * xx, ch) + x.at(2 * yy + 1, 2 * xx + 1, ch));
      }
  return y;
}

template <class T>
Tensor<T> avgpool2_backward(const Tensor<T>& dy) {
  const int c = dy.channels();
  Tensor<T> dx(dy.height() * 2, dy.width() * 2, c);
  for (int yy = 0; yy < dx.height(); ++yy)
    for (int xx = 0; xx < dx.width(); ++xx)
      for (int ch = 0; ch < c; ++ch) dx.at(yy, xx, ch) = T{0.25} * dy.at(yy / 2, xx / 2, ch);
  return dx;
}

template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  const int c = x.channels();
  Tensor<T> y(x.height() * 2, x.width() * 2, c);
  for (int yy = 0; yy < y.height(); ++yy)
    for (int xx = 0; xx < y.width(); ++xx)
      for (int ch = 0; ch < c; ++ch) y.at(yy, xx, ch) = x.at(yy / 2, xx / 2, ch);
  return y;
}

template <class T>
Tensor<T> upsample2_backward(const Tensor<T>& dy) {
  const int c = dy.channels();
  Tensor<T> dx(dy.height() / 2, dy.width() / 2, c);
  for (int yy = 0; yy < dy.height(); ++yy)
    for (int xx = 0; xx < dy.width(); ++xx)
      for (int ch = 0; ch < c; ++ch) dx.at(yy / 2, xx / 2, ch) += dy.at(yy, xx, ch);
  return dx;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const int ca = a.channels();
  const int cb = b.channels();
  Tensor<T> y(a.height(), a.width(), ca + cb);
  for (int p = 0; p < a.pixels(); ++p) {
    std::copy(a.data() + static_cast<std::size_t>(p) * ca, a.data() + static_cast<std::size_t>(p + 1) * ca,
              y.data() + static_cast<std::size_t>(p) * (ca + cb));
    std::copy(b.data() + static_cast<std::size_t>(p) * cb, b.data() + static_cast<std::size_t>(p + 1) * cb,
              y.data() + static_cast<std::size_t>(p) * (ca + cb) + ca);
  }
  return y;
}

template <class T>
void split_channels(const Tensor<T>& d, int ca, Tensor<T>& da, Tensor<T>& db) {
  const int c = d.channels();
  const int cb = c - ca;
  da = Tensor<T>(d.height(), d.width(), ca);
  db = Tensor<T>(d.height(), d.width(), cb);
  for (int p = 0; p < d.pixels(); ++p) {
    const T* src = d.data() + static_cast<std::size_t>(p) * c;
    std::copy(src, src + ca, da.data() + static_cast<std::size_t>(p) * ca);
    std::copy(src + ca, src + c, db.data() + static_cast<std::size_t>(p) * cb);
  }
}

template <class T>
Tensor<T> attention_forward(const Tensor<T>& x, const Tensor<T>& kv, const AttentionParams<T>& p, int d_model,
                            int heads, const Tensor<T>* pq, const Tensor<T>* pk, AttentionCache<T>* cache) {
  const int n = x.pixels();
  const int c = x.channels();
  const int l = kv.pixels();
  const int dh = d_model / heads;
  AttentionCache<T> local;
  AttentionCache<T>& s = cache ? *cache : local;
  s.channels = c;
  s.kv_channels = kv.channels();

  s.q_in = Tensor<T>(n, 1, c);
  {
    Tensor<T> normed = layer_norm_forward(x, p.norm_g, p.norm_b, &s.q_norm);
    for (std::size_t i = 0; i < normed.size(); ++i) s.q_in[i] = normed[i] + (pq ? (*pq)[i] : T{0});
  }
  if (p.kv_norm_g) {
    Tensor<T> normed = layer_norm_forward(kv, p.kv_norm_g, p.kv_norm_b, &s.kv_norm);
    s.kv_in = Tensor<T>(l, 1, kv.channels());
    std::copy(normed.data(), normed.data() + normed.size(), s.kv_in.data());
  } else {
    s.kv_in = Tensor<T>(l, 1, kv.channels());
    std::copy(kv.data(), kv.data() + kv.size(), s.kv_in.data());
  }
  s.k_in = s.kv_in;
  if (pk)
    for (std::size_t i = 0; i < s.k_in.size(); ++i) s.k_in[i] += (*pk)[i];

  s.q = linear_forward(s.q_in, p.wq, static_cast<const T*>(nullptr), d_model);
  s.k = linear_forward(s.k_in, p.wk, static_cast<const T*>(nullptr), d_model);
  s.v = linear_forward(s.kv_in, p.wv, static_cast<const T*>(nullptr), d_model);
  s.probs.assign(static_cast<std::size_t>(heads), Tensor<T>());
  s.o = Tensor<T>(n, 1, d_model);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (int h = 0; h < heads; ++h) {
    Tensor<T>& a = s.probs[static_cast<std::size_t>(h)];
    a = Tensor<T>(n, 1, l);
    for (int i = 0; i < n; ++i) {
      const T* qi = s.q.data() + static_cast<std::size_t>(i) * d_model + h * dh;
      T* row = a.data() + static_cast<std::size_t>(i) * l;
      double mx = -1e300;
      for (int j = 0; j < l; ++j) {
        const T* kj = s.k.data() + static_cast<std::size_t>(j) * d_model + h * dh;
        double acc = 0.0;
        for (int e = 0; e < dh; ++e) acc += static_cast<double>(qi[e]) * kj[e];
        row[j] = static_cast<T>(acc * scale);
        mx = std::max(mx, static_cast<double>(row[j]));
      }
      double z = 0.0;
      for (int j = 0; j < l; ++j) {
        const double e = std::exp(static_cast<double>(row[j]) - mx);
        row[j] = static_cast<T>(e);
        z += e;
      }
      const double iz = 1.0 / z;
      for (int j = 0; j < l; ++j) row[j] = static_cast<T>(row[j] * iz);
    }
    // o_h = a v_h
    k::gemm(n, dh, l, a.data(), l, 1, s.v.data() + h * dh, d_model, s.o.data() + h * dh, d_model, false);
  }
  Tensor<T> out = linear_forward(s.o, p.wo, p.bo, c);
  Tensor<T> y(x.height(), x.width(), c);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + out[i];
  return y;
}

template <class T>
Tensor<T> attention_backward(const AttentionCache<T>& s, const Tensor<T>& dy, const AttentionParams<T>& p,
                             const AttentionGrads<T>& g, int d_model, int heads, Tensor<T>* dkv) {
  const int n = s.q.pixels();
  const int l = s.k.pixels();
  const int c = s.channels;
  const int dh = d_model / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> dy_rows(n, 1, c);
  std::copy(dy.data(), dy.data() + dy.size(), dy_rows.data());
  Tensor<T> d_o = linear_backward(s.o, dy_rows, p.wo, g.wo, g.bo);
  Tensor<T> dq(n, 1, d_model);
  Tensor<T> dk(l, 1, d_model);
  Tensor<T> dv(l, 1, d_model);
  std::vector<T> da(static_cast<std::size_t>(l));
  for (int h = 0; h < heads; ++h) {
    const Tensor<T>& a = s.probs[static_cast<std::size_t>(h)];
    // dv_h += a^T do_h
    k::gemm(l, dh, n, a.data(), 1, l, d_o.data() + h * dh, d_model, dv.data() + h * dh, d_model, true);
    for (int i = 0; i < n; ++i) {
      const T* doi = d_o.data() + static_cast<std::size_t>(i) * d_model + h * dh;
      const T* ai = a.data() + static_cast<std::size_t>(i) * l;
      double dot_sum = 0.0;
      for (int j = 0; j < l; ++j) {
        const T* vj = s.v.data() + static_cast<std::size_t>(j) * d_model + h * dh;
        double acc = 0.0;
        for (int e = 0; e < dh; ++e) acc += static_cast<double>(doi[e]) * vj[e];
        da[static_cast<std::size_t>(j)] = static_cast<T>(acc);
        dot_sum += acc * ai[j];
      }
      T* dqi = dq.data() + static_cast<std::size_t>(i) * d_model + h * dh;
      const T* qi = s.q.data() + static_cast<std::size_t>(i) * d_model + h * dh;
      for (int j = 0; j < l; ++j) {
        const T ds = static_cast<T>(ai[j] * (da[static_cast<std::size_t>(j)] - dot_sum)) * scale;
        if (ds == T{0}) continue;
        const T* kj = s.k.data() + static_cast<std::size_t>(j) * d_model + h * dh;
        T* dkj = dk.data() + static_cast<std::size_t>(j) * d_model + h * dh;
        for (int e = 0; e < dh; ++e) {
          dqi[e] += ds * kj[e];
          dkj[e] += ds * qi[e];
        }
      }
    }
  }
  Tensor<T> dq_in = linear_backward(s.q_in, dq, p.wq, g.wq, static_cast<T*>(nullptr));
  Tensor<T> dk_in = linear_backward(s.k_in, dk, p.wk, g.wk, static_cast<T*>(nullptr));
  Tensor<T> dv_in = linear_backward(s.kv_in, dv, p.wv, g.wv, static_cast<T*>(nullptr));
  if (dkv || p.kv_norm_g) {
    Tensor<T> dkv_in(l, 1, s.kv_channels);
    for (std::size_t i = 0; i < dkv_in.size(); ++i) dkv_in[i] = dk_in[i] + dv_in[i];
    if (p.kv_norm_g) {
      Tensor<T> d = layer_norm_backward(s.kv_norm, dkv_in, p.kv_norm_g, g.kv_norm_g, g.kv_norm_b);
      dkv_in = std::move(d);
    }
    if (dkv)
      for (std::size_t i = 0; i < dkv_in.size(); ++i) (*dkv)[i] += dkv_in[i];
  }
  Tensor<T> dx_norm = layer_norm_backward(s.q_norm, dq_in, p.norm_g, g.norm_g, g.norm_b);
  Tensor<T> dx(dy.height(), dy.width(), c);
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] + dx_norm[i];
  return dx;
}

#define INSTRUCTDIFF_LAYERS(T)                                                                                    \
  template Tensor<T> conv_forward<T>(const Tensor<T>&, const T*, const T*, int, int, ConvCache<T>*);              \
  template Tensor<T> conv_backward<T>(const ConvCache<T>&, const Tensor<T>&, const T*, T*, T*, int);              \
  template Tensor<T> group_norm_forward<T>(const Tensor<T>&, const T*, const T*, int, NormCache<T>*);             \
  template Tensor<T> group_norm_backward<T>(const NormCache<T>&, const Tensor<T>&, const T*, T*, T*, int);        \
  template Tensor<T> layer_norm_forward<T>(const Tensor<T>&, const T*, const T*, NormCache<T>*);                  \
  template Tensor<T> layer_norm_backward<T>(const NormCache<T>&, const Tensor<T>&, const T*, T*, T*);             \
  template Tensor<T> silu_forward<T>(const Tensor<T>&);                                                           \
  template Tensor<T> silu_backward<T>(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> linear_forward<T>(const Tensor<T>&, const T*, const T*, int);                                \
  template Tensor<T> linear_backward<T>(const Tensor<T>&, const Tensor<T>&, const T*, T*, T*);                    \
  template Tensor<T> avgpool2<T>(const Tensor<T>&);                                                               \
  template Tensor<T> avgpool2_backward<T>(const Tensor<T>&);                                                      \
  template Tensor<T> upsample2<T>(const Tensor<T>&);                                                              \
  template Tensor<T> upsample2_backward<T>(const Tensor<T>&);                                                     \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template void split_channels<T>(const Tensor<T>&, int, Tensor<T>&, Tensor<T>&);                                 \
  template Tensor<T> attention_forward<T>(const Tensor<T>&, const Tensor<T>&, const AttentionParams<T>&, int,     \
                                          int, const Tensor<T>*, const Tensor<T>*, AttentionCache<T>*);           \
  template Tensor<T> attention_backward<T>(const AttentionCache<T>&, const Tensor<T>&, const AttentionParams<T>&, \
                                           const AttentionGrads<T>&, int, int, Tensor<T>*);

INSTRUCTDIFF_LAYERS(float)
INSTRUCTDIFF_LAYERS(double)

}  // namespace instructdiff::layers
