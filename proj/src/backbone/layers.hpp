#pragma once

// Forward/backward pairs for the U-Net building blocks. Activations are HWC
// tensors, which double as row-major [pixels x channels] matrices.

#include <cmath>
#include <vector>

#include "instructdiff/kernels/kernels.hpp"
#include "instructdiff/tensor.hpp"

namespace instructdiff::layers {

template <class T>
struct ConvCache {
  Tensor<T> col;  // [pixels x k*k*cin]
  int height = 0;
  int width = 0;
  int cin = 0;
  int kernel = 3;
};

// kernel 3 (zero padding 1) or 1. Weight layout [k*k*cin x cout].
template <class T>
Tensor<T> conv_forward(const Tensor<T>& x, const T* w, const T* b, int cout, int kernel, ConvCache<T>* cache);

// Accumulates dw/db and returns dx.
template <class T>
Tensor<T> conv_backward(const ConvCache<T>& cache, const Tensor<T>& dy, const T* w, T* dw, T* db, int cout);

template <class T>
struct NormCache {
  Tensor<T> xhat;
  std::vector<double> inv_std;  // per (group) or per (row) for layer norm
};

template <class T>
Tensor<T> group_norm_forward(const Tensor<T>& x, const T* g, const T* b, int groups, NormCache<T>* cache);
template <class T>
Tensor<T> group_norm_backward(const NormCache<T>& cache, const Tensor<T>& dy, const T* g, T* dg, T* db, int groups);

// Normalizes each row (pixel or token) over its channels.
template <class T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const T* g, const T* b, NormCache<T>* cache);
template <class T>
Tensor<T> layer_norm_backward(const NormCache<T>& cache, const Tensor<T>& dy, const T* g, T* dg, T* db);

template <class T>
T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

template <class T>
T silu_grad(T x) {
  const T s = T{1} / (T{1} + std::exp(-x));
  return s * (T{1} + x * (T{1} - s));
}

template <class T>
Tensor<T> silu_forward(const Tensor<T>& x);
template <class T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy);

// y[rows x out] = x[rows x in] * w (+ b)
template <class T>
Tensor<T> linear_forward(const Tensor<T>& x, const T* w, const T* b, int out);
// Accumulates dw (and db when non-null); returns dx.
template <class T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& dy, const T* w, T* dw, T* db);

template <class T>
Tensor<T> avgpool2(const Tensor<T>& x);
template <class T>
Tensor<T> avgpool2_backward(const Tensor<T>& dy);
template <class T>
Tensor<T> upsample2(const Tensor<T>& x);
template <class T>
Tensor<T> upsample2_backward(const Tensor<T>& dy);

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
void split_channels(const Tensor<T>& d, int ca, Tensor<T>& da, Tensor<T>& db);

// Multi-head cross-attention with pre-normalized queries:
//   out = x + softmax(q k^T / sqrt(dh)) v Wo + bo
// q = (LN(x) + pq) Wq, k = (kv' + pk) Wk, v = kv' Wv, kv' = LN(kv) when
// kv normalization is on, else kv itself.

template <class T>
struct AttentionParams {
  const T* norm_g;
  const T* norm_b;
  const T* kv_norm_g;  // null: keys/values are used as given
  const T* kv_norm_b;
  const T* wq;
  const T* wk;
  const T* wv;
  const T* wo;
  const T* bo;
};

template <class T>
struct AttentionGrads {
  T* norm_g;
  T* norm_b;
  T* kv_norm_g;
  T* kv_norm_b;
  T* wq;
  T* wk;
  T* wv;
  T* wo;
  T* bo;
};

template <class T>
struct AttentionCache {
  NormCache<T> q_norm;
  NormCache<T> kv_norm;
  Tensor<T> q_in;   // [N x C]
  Tensor<T> kv_in;  // [L x Ckv] after optional norm
  Tensor<T> k_in;   // kv_in + pk
  Tensor<T> q;      // [N x D]
  Tensor<T> k;      // [L x D]
  Tensor<T> v;      // [L x D]
  std::vector<Tensor<T>> probs;  // per head [N x L]
  Tensor<T> o;      // [N x D]
  int channels = 0;
  int kv_channels = 0;
};

template <class T>
Tensor<T> attention_forward(const Tensor<T>& x, const Tensor<T>& kv, const AttentionParams<T>& p, int d_model,
                            int heads, const Tensor<T>* pq, const Tensor<T>* pk, AttentionCache<T>* cache);

// Returns dx; accumulates parameter grads and, if dkv is non-null, adds the
// gradient with respect to kv into it.
template <class T>
Tensor<T> attention_backward(const AttentionCache<T>& cache, const Tensor<T>& dy, const AttentionParams<T>& p,
                             const AttentionGrads<T>& g, int d_model, int heads, Tensor<T>* dkv);

}  // namespace instructdiff::layers
