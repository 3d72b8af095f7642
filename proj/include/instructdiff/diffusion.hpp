#pragma once

#include <functional>
#include <span>
#include <vector>

#include "instructdiff/rng.hpp"
#include "instructdiff/tensor.hpp"

namespace instructdiff {

// Step-indexed tables for t = 0..T; entry 0 is the clean-data endpoint
// (alpha_bar = 1, beta = 0).
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> beta, std::vector<double> alpha_bar);

  int steps() const { return static_cast<int>(beta_.size()) - 1; }
  double beta(int t) const { return beta_.at(static_cast<std::size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }
  // Posterior std sqrt(beta_tilde_t); zero at t = 1.
  double sigma(int t) const { return sigma_.at(static_cast<std::size_t>(t)); }
  double posterior_variance(int t) const { return sigma(t) * sigma(t); }

  void require_step(int t) const;

 private:
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> sigma_;
};

// alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), with
// beta_t = 1 - alpha_bar_t/alpha_bar_{t-1} clipped to 0.999. Once a beta is
// clipped, alpha_bar continues as the running product so the tables stay
// consistent with the stepwise chain.
NoiseSchedule cosine_schedule(int steps, double offset = 0.008);

struct LossConfig {
  std::vector<double> weight;  // w_t for t = 0..T (entry 0 unused)

  static LossConfig uniform(int steps);
};

struct GuidanceSchedule {
  double high = 25.0;
  double low = 1.0;
  bool high_on_even = true;  // step index 0 is the first sampler step (t = T)

  void validate() const;
};

double guidance_scale_at(int step_index, const GuidanceSchedule& schedule);

// Which variance the reverse step injects.
enum class ReverseVariance {
  kBeta,       // beta_t
  kPosterior,  // beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t
};

template <class T>
Tensor<T> forward_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& schedule);

template <class T>
Tensor<T> v_target(const Tensor<T>& x0, const Tensor<T>& eps, int t, const NoiseSchedule& schedule);

// x0 = sqrt(abar) x_t - sqrt(1 - abar) v
template <class T>
Tensor<T> predict_x0(const Tensor<T>& x_t, const Tensor<T>& v, int t, const NoiseSchedule& schedule);

// eps = sqrt(1 - abar) x_t + sqrt(abar) v
template <class T>
Tensor<T> predict_eps(const Tensor<T>& x_t, const Tensor<T>& v, int t, const NoiseSchedule& schedule);

// One DDPM reverse step from t to t-1 given the model's v prediction. The
// implied x0 is clipped to [-1, 1]; no noise is added at t = 1.
template <class T>
Tensor<T> ddpm_step(const Tensor<T>& x_t, int t, const Tensor<T>& v_hat, const NoiseSchedule& schedule, Rng& rng,
                    ReverseVariance variance = ReverseVariance::kBeta);

// uncond + w (cond - uncond); returns cond exactly when w == 1.
template <class T>
Tensor<T> cfg_combine(const Tensor<T>& cond, const Tensor<T>& uncond, double w);

// Pairwise (tree) sum with a fixed split order, for reproducible reductions.
double pairwise_sum(std::span<const double> values);

template <class T>
struct LossSample {
  int t = 0;
  Tensor<T> x_t;
  Tensor<T> v;
  Tensor<T> v_hat;
  double weight = 1.0;
  double loss = 0.0;        // w_t * ||v_hat - v||^2 / d
  Tensor<T> grad_v_hat;     // d(batch loss) / d v_hat
};

template <class T>
struct LossResult {
  double loss = 0.0;  // mean over the batch
  std::vector<LossSample<T>> samples;
};

// Model callback: (batch index, x_t, t) -> v_hat.
template <class T>
using VPredictor = std::function<Tensor<T>(std::size_t index, const Tensor<T>& x_t, int t)>;

// Mean over the batch of w_t * ||v_hat - v||^2 / d with t ~ U{1..T} and
// eps ~ N(0, I) drawn per element in batch order. Also returns the gradient
// of the batch loss with respect to each v_hat.
template <class T>
LossResult<T> training_loss(std::span<const Tensor<T>> x0, const VPredictor<T>& model, const NoiseSchedule& schedule,
                            const LossConfig& config, Rng& rng);

// Model callback for sampling: (x_t, t, conditioned) -> v_hat. conditioned ==
// false must evaluate the null condition (no text, no context).
template <class T>
using GuidedPredictor = std::function<Tensor<T>(const Tensor<T>& x_t, int t, bool conditioned)>;

struct SamplerOptions {
  int steps = 256;
  GuidanceSchedule guidance;
  ReverseVariance variance = ReverseVariance::kBeta;
};

// Reverse loop from x_steps ~ N(0, I) down to t = 1. With steps < T the loop
// starts at timestep `steps` (no respacing). Output clipped to [-1, 1].
template <class T>
Tensor<T> sample(const GuidedPredictor<T>& model, int height, int width, int channels, const NoiseSchedule& schedule,
                 const SamplerOptions& options, Rng& rng);

template <class T>
Tensor<T> gaussian_like(const Tensor<T>& shape, Rng& rng);

}  // namespace instructdiff
