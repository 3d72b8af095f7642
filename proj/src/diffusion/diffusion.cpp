#include "instructdiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "instructdiff/error.hpp"

namespace instructdiff {

NoiseSchedule::NoiseSchedule(std::vector<double> beta, std::vector<double> alpha_bar)
    : beta_(std::move(beta)), alpha_bar_(std::move(alpha_bar)) {
  if (beta_.size() != alpha_bar_.size() || beta_.size() < 3) {
    throw ValidationError("noise schedule needs matching tables with T >= 2");
  }
  sigma_.assign(beta_.size(), 0.0);
  for (std::size_t t = 1; t < beta_.size(); ++t) {
    const double var = (1.0 - alpha_bar_[t - 1]) / (1.0 - alpha_bar_[t]) * beta_[t];
    sigma_[t] = std::sqrt(std::max(var, 0.0));
  }
}

void NoiseSchedule::require_step(int t) const {
  if (t < 1 || t > steps()) {
    throw ValidationError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
}

NoiseSchedule cosine_schedule(int steps, double offset) {
  if (steps < 2) throw ValidationError("cosine schedule needs T >= 2");
  if (!(offset > 0.0)) throw ValidationError("cosine schedule offset must be positive");
  const auto f = [&](int t) {
    const double c = std::cos(((static_cast<double>(t) / steps + offset) / (1.0 + offset)) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0);
  std::vector<double> beta(static_cast<std::size_t>(steps) + 1, 0.0);
  std::vector<double> alpha_bar(static_cast<std::size_t>(steps) + 1, 1.0);
  bool clipped = false;
  for (int t = 1; t <= steps; ++t) {
    const double prev = alpha_bar[static_cast<std::size_t>(t) - 1];
    double a = f(t) / f0;
    double b = 1.0 - a / prev;
    if (clipped || b > 0.999) {
      clipped = true;
      b = std::min(b, 0.999);
      a = prev * (1.0 - b);
    }
    beta[static_cast<std::size_t>(t)] = b;
    alpha_bar[static_cast<std::size_t>(t)] = a;
  }
  return NoiseSchedule(std::move(beta), std::move(alpha_bar));
}

LossConfig LossConfig::uniform(int steps) { return LossConfig{std::vector<double>(static_cast<std::size_t>(steps) + 1, 1.0)}; }

void GuidanceSchedule::validate() const {
  if (!(high >= low && low >= 1.0)) throw ValidationError("guidance scales must satisfy high >= low >= 1");
}

double guidance_scale_at(int step_index, const GuidanceSchedule& schedule) {
  const bool even = step_index % 2 == 0;
  return even == schedule.high_on_even ? schedule.high : schedule.low;
}

namespace {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b)) throw ValidationError(std::string(what) + ": shape mismatch");
}

}  // namespace

template <class T>
Tensor<T> gaussian_like(const Tensor<T>& shape, Rng& rng) {
  Tensor<T> out(shape.height(), shape.width(), shape.channels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(rng.normal());
  return out;
}

template <class T>
Tensor<T> forward_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& schedule) {
  schedule.require_step(t);
  require_same_shape(x0, eps, "forward_sample");
  const double ab = schedule.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(x0.height(), x0.width(), x0.channels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

template <class T>
Tensor<T> v_target(const Tensor<T>& x0, const Tensor<T>& eps, int t, const NoiseSchedule& schedule) {
  schedule.require_step(t);
  require_same_shape(x0, eps, "v_target");
  const double ab = schedule.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(x0.height(), x0.width(), x0.channels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * eps[i] - b * x0[i];
  return out;
}

template <class T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& v, int t, const NoiseSchedule& schedule) {
  schedule.require_step(t);
  require_same_shape(x_t, v, "predict_x0");
  const double ab = schedule.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(x_t.height(), x_t.width(), x_t.channels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x_t[i] - b * v[i];
  return out;
}

template <class T>
Tensor<T> predict_eps(const Tensor<T>& x_t, const Tensor<T>& v, int t, const NoiseSchedule& schedule) {
  schedule.require_step(t);
  require_same_shape(x_t, v, "predict_eps");
  const double ab = schedule.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(x_t.height(), x_t.width(), x_t.channels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = b * x_t[i] + a * v[i];
  return out;
}

template <class T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, int t, const Tensor<T>& v_hat, const NoiseSchedule& schedule, Rng& rng,
                    ReverseVariance variance) {
  schedule.require_step(t);
  require_same_shape(x_t, v_hat, "ddpm_step");
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t - 1);
  const double beta = schedule.beta(t);
  const double coef_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
  const double coef_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
  const double std_dev = t == 1 ? 0.0 : std::sqrt(variance == ReverseVariance::kBeta ? beta : schedule.posterior_variance(t));
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Tensor<T> out(x_t.height(), x_t.width(), x_t.channels());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x0 = std::clamp(a * x_t[i] - b * v_hat[i], -1.0, 1.0);
    out[i] = static_cast<T>(coef_x0 * x0 + coef_xt * x_t[i]);
  }
  if (std_dev > 0.0) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += static_cast<T>(std_dev * rng.normal());
  }
  return out;
}

template <class T>
Tensor<T> cfg_combine(const Tensor<T>& cond, const Tensor<T>& uncond, double w) {
  require_same_shape(cond, uncond, "cfg_combine");
  if (w == 1.0) return cond;
  const T wt = static_cast<T>(w);
  Tensor<T> out(cond.height(), cond.width(), cond.channels());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + wt * (cond[i] - uncond[i]);
  return out;
}

double pairwise_sum(std::span<const double> values) {
  if (values.empty()) return 0.0;
  if (values.size() <= 8) {
    double acc = 0.0;
    for (double v : values) acc += v;
    return acc;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

template <class T>
LossResult<T> training_loss(std::span<const Tensor<T>> x0, const VPredictor<T>& model, const NoiseSchedule& schedule,
                            const LossConfig& config, Rng& rng) {
  if (x0.empty()) throw ValidationError("training_loss: empty batch");
  if (config.weight.size() != static_cast<std::size_t>(schedule.steps()) + 1) {
    throw ValidationError("training_loss: loss weights do not match the schedule length");
  }
  LossResult<T> result;
  result.samples.resize(x0.size());
  // Draw every (t, eps) first so the random stream does not depend on the model.
  std::vector<Tensor<T>> eps(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    result.samples[i].t = static_cast<int>(rng.uniform_int(1, schedule.steps()));
    eps[i] = gaussian_like(x0[i], rng);
  }
  std::vector<double> per_element(x0.size());
  const double batch = static_cast<double>(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    auto& s = result.samples[i];
    s.x_t = forward_sample(x0[i], s.t, eps[i], schedule);
    s.v = v_target(x0[i], eps[i], s.t, schedule);
    s.v_hat = model(i, s.x_t, s.t);
    if (!s.v_hat.same_shape(s.v)) throw ValidationError("training_loss: model output shape mismatch");
    if (!s.v_hat.all_finite()) throw NonFiniteError("training_loss", "model output for batch element " + std::to_string(i));
    s.weight = config.weight[static_cast<std::size_t>(s.t)];
    const double d = static_cast<double>(s.v.size());
    std::vector<double> sq(s.v.size());
    s.grad_v_hat = Tensor<T>(s.v.height(), s.v.width(), s.v.channels());
    for (std::size_t j = 0; j < s.v.size(); ++j) {
      const double diff = static_cast<double>(s.v_hat[j]) - static_cast<double>(s.v[j]);
      sq[j] = diff * diff;
      s.grad_v_hat[j] = static_cast<T>(2.0 * s.weight * diff / (d * batch));
    }
    s.loss = s.weight * pairwise_sum(sq) / d;
    per_element[i] = s.loss;
  }
  result.loss = pairwise_sum(per_element) / batch;
  if (!std::isfinite(result.loss)) throw NonFiniteError("training_loss", "batch loss");
  return result;
}

template <class T>
Tensor<T> sample(const GuidedPredictor<T>& model, int height, int width, int channels, const NoiseSchedule& schedule,
                 const SamplerOptions& options, Rng& rng) {
  options.guidance.validate();
  if (options.steps < 1 || options.steps > schedule.steps()) {
    throw ValidationError("sampler steps must lie in [1, T]");
  }
  Tensor<T> x(height, width, channels);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<T>(rng.normal());
  int index = 0;
  for (int t = options.steps; t >= 1; --t, ++index) {
    const double w = guidance_scale_at(index, options.guidance);
    Tensor<T> v = model(x, t, true);
    if (w != 1.0) v = cfg_combine(v, model(x, t, false), w);
    x = ddpm_step(x, t, v, schedule, rng, options.variance);
    if (!x.all_finite()) throw NonFiniteError("sample", "state at t=" + std::to_string(t));
  }
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i], T{-1}, T{1});
  return x;
}

#define INSTRUCTDIFF_INSTANTIATE(T)                                                                            \
  template Tensor<T> gaussian_like<T>(const Tensor<T>&, Rng&);                                                 \
  template Tensor<T> forward_sample<T>(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);         \
  template Tensor<T> v_target<T>(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&);               \
  template Tensor<T> predict_x0<T>(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&);             \
  template Tensor<T> predict_eps<T>(const Tensor<T>&, const Tensor<T>&, int, const NoiseSchedule&);            \
  template Tensor<T> ddpm_step<T>(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&, Rng&,         \
                                  ReverseVariance);                                                            \
  template Tensor<T> cfg_combine<T>(const Tensor<T>&, const Tensor<T>&, double);                               \
  template LossResult<T> training_loss<T>(std::span<const Tensor<T>>, const VPredictor<T>&,                    \
                                          const NoiseSchedule&, const LossConfig&, Rng&);                      \
  template Tensor<T> sample<T>(const GuidedPredictor<T>&, int, int, int, const NoiseSchedule&,                 \
                               const SamplerOptions&, Rng&);

INSTRUCTDIFF_INSTANTIATE(float)
INSTRUCTDIFF_INSTANTIATE(double)

#undef INSTRUCTDIFF_INSTANTIATE

}  // namespace instructdiff
