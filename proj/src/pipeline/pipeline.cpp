#include "instructdiff/pipeline.hpp"

namespace instructdiff {

Vocabulary vocabulary_for(const BackboneConfig& config) { return Vocabulary(0x5eed, config.text_dim); }

template <class T>
TextCondition<T> text_condition(std::string_view text, const Vocabulary& vocab) {
  const EmbeddedText e = embed_text(text, vocab);
  TextCondition<T> out{Tensor<T>(e.length, 1, vocab.dim())};
  for (std::size_t i = 0; i < out.tokens.size(); ++i) out.tokens[i] = static_cast<T>(e.embeddings[i]);
  return out;
}

template <class T>
std::vector<ContextInput<T>> context_inputs(const std::vector<ContextPair>& pairs, const Vocabulary& vocab) {
  std::vector<ContextInput<T>> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    out.push_back({p.image.template cast<T>(), text_condition<T>(p.marker.surface() + " " + p.text, vocab)});
  }
  return out;
}

ImageTensor generate(const Backbone<float>& model, const Vocabulary& vocab, std::string_view payload,
                     const std::vector<ContextPair>& context, const NoiseSchedule& schedule,
                     const SamplerOptions& options, Rng& rng) {
  const auto text = text_condition<float>(payload, vocab);
  const auto tokens = model.encode_context(context_inputs<float>(context, vocab));
  const TextCondition<float> no_text{Tensor<float>(0, 1, vocab.dim())};
  const ContextTokens<float> no_context;
  GuidedPredictor<float> predictor = [&](const Tensor<float>& x, int t, bool conditioned) {
    return conditioned ? model.denoise(x, t, text, tokens) : model.denoise(x, t, no_text, no_context);
  };
  const int size = model.config().resolution;
  return sample(predictor, size, size, model.config().image_channels, schedule, options, rng);
}

template TextCondition<float> text_condition<float>(std::string_view, const Vocabulary&);
template TextCondition<double> text_condition<double>(std::string_view, const Vocabulary&);
template std::vector<ContextInput<float>> context_inputs<float>(const std::vector<ContextPair>&, const Vocabulary&);
template std::vector<ContextInput<double>> context_inputs<double>(const std::vector<ContextPair>&, const Vocabulary&);

}  // namespace instructdiff
