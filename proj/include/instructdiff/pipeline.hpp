#pragma once

#include <string_view>
#include <vector>

#include "instructdiff/backbone.hpp"
#include "instructdiff/diffusion.hpp"
#include "instructdiff/instruction.hpp"

namespace instructdiff {

// The shared embedding table sized to the backbone's text width.
Vocabulary vocabulary_for(const BackboneConfig& config);

// Payload text as attention rows; empty text gives zero rows (the null condition).
template <class T>
TextCondition<T> text_condition(std::string_view text, const Vocabulary& vocab);

// Each pair is encoded with its marker prepended, e.g. "[ref#1] mask".
template <class T>
std::vector<ContextInput<T>> context_inputs(const std::vector<ContextPair>& pairs, const Vocabulary& vocab);

// Samples one image for (payload, context). The context is encoded once and
// reused by every step; the unconditional branch sees no text and no context.
ImageTensor generate(const Backbone<float>& model, const Vocabulary& vocab, std::string_view payload,
                     const std::vector<ContextPair>& context, const NoiseSchedule& schedule,
                     const SamplerOptions& options, Rng& rng);

}  // namespace instructdiff
