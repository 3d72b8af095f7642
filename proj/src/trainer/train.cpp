#include <cstdio>
#include <deque>
#include <fstream>
#include <iomanip>

#include "instructdiff/diffusion.hpp"
#include "instructdiff/error.hpp"
#include "instructdiff/pipeline.hpp"
#include "instructdiff/trainer.hpp"

namespace instructdiff {

namespace fs = std::filesystem;

namespace {

std::uint64_t batch_seed(std::uint64_t seed, std::int64_t step) {
  return splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(step) + 0x9e3779b97f4a7c15ULL));
}

std::string checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%08lld.ckpt", static_cast<long long>(step));
  return buf;
}

struct Conditioned {
  TextCondition<float> text;
  ContextTokens<float> context;
  ContextTape<float> tape;
};

}  // namespace

TrainResult train_stage(const TrainConfig& config, ExampleStream& stream, const std::optional<Checkpoint>& init,
                        const TrainOptions& options) {
  config.validate();
  const BackboneConfig bc = config.backbone_config();
  ParameterSet<float> params;
  if (init) {
    require_layout(init->params, bc);
    params = init->params;
  } else {
    params = init_params<float>(bc, config.seed);
  }
  const Backbone<float> model(bc, params);
  const Vocabulary vocab = vocabulary_for(bc);
  const NoiseSchedule schedule = cosine_schedule(config.diffusion_steps);
  const LossConfig loss_config = LossConfig::uniform(config.diffusion_steps);
  OptimizerState optimizer = init_optimizer(config.optimizer, params);
  EmaState<float> ema{config.ema_decay, params};
  ParameterSet<float> grads = params.zeros_like();

  std::ofstream csv;
  if (!options.loss_csv.empty()) {
    if (options.loss_csv.has_parent_path()) fs::create_directories(options.loss_csv.parent_path());
    csv.open(options.loss_csv, std::ios::trunc);
    if (!csv) throw IoError("cannot write " + options.loss_csv.string());
    csv << std::setprecision(9) << "step,loss,lr\n";
  }
  std::deque<fs::path> written;

  const auto snapshot = [&](std::int64_t step) {
    Checkpoint ck;
    ck.backbone = bc;
    ck.config = config.to_json();
    ck.step = step;
    ck.params = params;
    ck.ema = ema.shadow;
    ck.optimizer = optimizer;
    return ck;
  };

  TrainResult result;
  result.losses.reserve(static_cast<std::size_t>(config.total_steps));
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (std::int64_t step = 1; step <= config.total_steps; ++step) {
    const std::uint64_t bseed = batch_seed(config.seed, step);
    Rng rng(bseed);
    std::vector<TrainExample> examples;
    examples.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      auto ex = stream.next();
      if (!ex) throw ValidationError("example stream exhausted at step " + std::to_string(step));
      const DropoutFlags flags = draw_condition_dropout(rng, config.p_drop_all, config.p_drop_context);
      examples.push_back(apply_dropout(std::move(*ex), flags));
    }

    std::vector<Conditioned> cond(batch);
    std::vector<Tensor<float>> x0(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      cond[i].text = text_condition<float>(examples[i].payload, vocab);
      if (!examples[i].context.empty()) {
        cond[i].context = model.encode_context(context_inputs<float>(examples[i].context, vocab), &cond[i].tape);
      }
      x0[i] = examples[i].target;
    }

    std::vector<DenoiseTape<float>> tapes(batch);
    VPredictor<float> predictor = [&](std::size_t i, const Tensor<float>& x_t, int t) {
      return model.denoise(x_t, t, cond[i].text, cond[i].context, &tapes[i]);
    };
    LossResult<float> loss;
    try {
      loss = training_loss<float>(x0, predictor, schedule, loss_config, rng);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("step " + std::to_string(step) + " (batch seed " + std::to_string(bseed) + ")", e.what());
    }

    grads.fill(0.0f);
    for (std::size_t i = 0; i < batch; ++i) {
      if (cond[i].context.empty()) {
        model.backward(tapes[i], loss.samples[i].grad_v_hat, grads);
      } else {
        Tensor<float> context_grad;
        model.backward(tapes[i], loss.samples[i].grad_v_hat, grads, &context_grad);
        model.backward_context(cond[i].tape, context_grad, grads);
      }
    }
    if (config.grad_clip > 0.0) clip_grad_norm(grads, config.grad_clip);
    const double lr = lr_at(step, config);
    optimizer_step(optimizer, params, grads, lr, config);
    ema_update(ema, params);

    result.losses.push_back(loss.loss);
    if (csv) csv << step << ',' << loss.loss << ',' << lr << '\n';
    if (options.on_step) options.on_step(step, loss.loss, lr);

    if (!options.checkpoint_dir.empty() && step % config.checkpoint_every == 0) {
      const fs::path path = options.checkpoint_dir / checkpoint_name(step);
      save_checkpoint(snapshot(step), path);
      written.push_back(path);
      while (written.size() > static_cast<std::size_t>(config.keep_checkpoints)) {
        fs::remove(written.front());
        written.pop_front();
      }
    }
  }
  result.checkpoint = snapshot(config.total_steps);
  return result;
}

}  // namespace instructdiff
