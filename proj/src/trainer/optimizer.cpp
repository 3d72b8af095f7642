#include <algorithm>
#include <cmath>

#include "instructdiff/error.hpp"
#include "instructdiff/kernels/kernels.hpp"
#include "instructdiff/trainer.hpp"

namespace instructdiff {

namespace {

constexpr double kAdafactorEps = 1e-30;

// Matrices are factored as (product of leading dims) x (last dim).
bool factored(const std::vector<int>& shape, std::size_t& rows, std::size_t& cols) {
  if (shape.size() < 2) return false;
  cols = static_cast<std::size_t>(shape.back());
  rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= static_cast<std::size_t>(shape[i]);
  return rows > 1 && cols > 1;
}

void require_same_paths(const ParameterSet<float>& a, const ParameterSet<float>& b, const char* what) {
  if (!a.same_layout(b)) throw ValidationError(std::string(what) + ": parameter layouts differ");
}

}  // namespace

template <class T>
void ema_update(EmaState<T>& ema, const ParameterSet<T>& live) {
  if (!ema.shadow.same_layout(live)) throw ValidationError("ema_update: path sets differ");
  const T d = static_cast<T>(ema.decay);
  const T one_minus = static_cast<T>(1.0 - ema.decay);
  for (auto& [path, e] : ema.shadow.entries()) {
    const auto& src = live.values(path);
    for (std::size_t i = 0; i < e.values.size(); ++i) e.values[i] = d * e.values[i] + one_minus * src[i];
  }
}

template void ema_update<float>(EmaState<float>&, const ParameterSet<float>&);
template void ema_update<double>(EmaState<double>&, const ParameterSet<double>&);

OptimizerState init_optimizer(OptimizerKind kind, const ParameterSet<float>& params) {
  OptimizerState s;
  s.kind = kind;
  for (const auto& [path, e] : params.entries()) {
    s.slots.add("m/" + path, e.shape, std::vector<float>(e.values.size(), 0.0f));
    std::size_t rows = 0, cols = 0;
    if (kind == OptimizerKind::kAdafactor && factored(e.shape, rows, cols)) {
      s.slots.add("row/" + path, {static_cast<int>(rows)}, std::vector<float>(rows, 0.0f));
      s.slots.add("col/" + path, {static_cast<int>(cols)}, std::vector<float>(cols, 0.0f));
    } else {
      s.slots.add("v/" + path, e.shape, std::vector<float>(e.values.size(), 0.0f));
    }
  }
  return s;
}

double clip_grad_norm(ParameterSet<float>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [path, e] : grads.entries()) sq += kernels::dot(e.values.size(), e.values.data(), e.values.data());
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (auto& [path, e] : grads.entries())
      for (auto& g : e.values) g *= scale;
  }
  return norm;
}

void optimizer_step(OptimizerState& state, ParameterSet<float>& params, const ParameterSet<float>& grads, double lr,
                    const TrainConfig& config) {
  require_same_paths(params, grads, "optimizer_step");
  ++state.updates;
  const double t = static_cast<double>(state.updates);
  const double bias1 = 1.0 - std::pow(config.beta1, t);
  const double bias2 = 1.0 - std::pow(config.beta2, t);

  for (auto& [path, e] : params.entries()) {
    const auto& g = grads.values(path);
    float* m = state.slots.data("m/" + path);
    const std::size_t n = e.values.size();
    if (state.kind == OptimizerKind::kAdam) {
      const kernels::AdamStep step{lr, config.beta1, config.beta2, config.adam_eps, bias1, bias2};
      kernels::adam_update(n, step, g.data(), m, state.slots.data("v/" + path), e.values.data());
      continue;
    }
    // Adafactor: factored second moment for matrices, update clipping at RMS 1,
    // first moment on the clipped update.
    std::vector<double> u(n);
    std::size_t rows = 0, cols = 0;
    if (factored(e.shape, rows, cols)) {
      float* r = state.slots.data("row/" + path);
      float* c = state.slots.data("col/" + path);
      std::vector<double> row_mean(rows, 0.0), col_mean(cols, 0.0);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
          const double g2 = static_cast<double>(g[i * cols + j]) * g[i * cols + j] + kAdafactorEps;
          row_mean[i] += g2 / static_cast<double>(cols);
          col_mean[j] += g2 / static_cast<double>(rows);
        }
      double r_sum = 0.0;
      for (std::size_t i = 0; i < rows; ++i) {
        r[i] = static_cast<float>(config.beta2 * r[i] + (1.0 - config.beta2) * row_mean[i]);
        r_sum += r[i];
      }
      for (std::size_t j = 0; j < cols; ++j) c[j] = static_cast<float>(config.beta2 * c[j] + (1.0 - config.beta2) * col_mean[j]);
      const double r_mean = r_sum / static_cast<double>(rows);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
          const double v_hat = static_cast<double>(r[i]) * c[j] / r_mean / bias2;
          u[i * cols + j] = g[i * cols + j] / std::sqrt(v_hat);
        }
    } else {
      float* v = state.slots.data("v/" + path);
      for (std::size_t i = 0; i < n; ++i) {
        const double g2 = static_cast<double>(g[i]) * g[i] + kAdafactorEps;
        v[i] = static_cast<float>(config.beta2 * v[i] + (1.0 - config.beta2) * g2);
        u[i] = g[i] / std::sqrt(v[i] / bias2);
      }
    }
    double ms = 0.0;
    for (double x : u) ms += x * x;
    const double clip = std::max(1.0, std::sqrt(ms / static_cast<double>(n)));
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = static_cast<float>(config.beta1 * m[i] + (1.0 - config.beta1) * u[i] / clip);
      e.values[i] -= static_cast<float>(lr * m[i] / bias1);
    }
  }
}

}  // namespace instructdiff
