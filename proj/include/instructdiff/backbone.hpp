#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "instructdiff/tensor.hpp"

namespace instructdiff {

enum class AttentionKind { kNone, kText, kTextContext };

std::string_view to_string(AttentionKind kind);
AttentionKind parse_attention_kind(std::string_view name);

struct LevelConfig {
  int in_resolution = 0;
  int out_resolution = 0;  // in/2 (downsampling) or in (last level)
  int blocks = 1;
  int channels = 0;
  AttentionKind attention = AttentionKind::kNone;
};

struct BackboneConfig {
  int resolution = 32;
  int image_channels = 3;
  int base_channels = 8;  // conv_in width
  int time_sinusoid_dim = 32;
  int time_embed_dim = 64;
  int text_dim = 64;
  int heads = 2;
  int d_model = 32;
  int groups = 4;
  std::vector<LevelConfig> levels;

  // 32x32x3; 32->16 (8 ch), 16->8 (16 ch), 8x8 bottleneck (32 ch) with
  // text + context attention.
  static BackboneConfig desk();
  // 8x8x3 config small enough for finite-difference checks.
  static BackboneConfig micro();

  void validate() const;
  bool has_context_attention() const;
  // Same config with every kTextContext level downgraded to kText.
  BackboneConfig without_context_attention() const;
  int bottleneck_resolution() const { return levels.back().out_resolution; }
  int bottleneck_channels() const { return levels.back().channels; }
  int tokens_per_pair() const { return bottleneck_resolution() * bottleneck_resolution(); }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

bool operator==(const LevelConfig& a, const LevelConfig& b);

nlohmann::ordered_json to_json(const BackboneConfig& config);
BackboneConfig backbone_config_from_json(const nlohmann::json& json);

enum class ParamInit { kFanIn, kZero, kOne };

struct ParamSpec {
  std::string path;
  std::vector<int> shape;
  ParamInit init = ParamInit::kFanIn;
  int fan_in = 1;

  std::size_t count() const;
};

// Every parameter the config implies, in a fixed order.
std::vector<ParamSpec> parameter_layout(const BackboneConfig& config);

bool is_context_attention_path(const std::string& path);

template <class T>
class ParameterSet {
 public:
  struct Entry {
    std::vector<int> shape;
    std::vector<T> values;
  };

  void add(const std::string& path, std::vector<int> shape, std::vector<T> values);
  bool contains(const std::string& path) const { return entries_.count(path) != 0; }
  const Entry& entry(const std::string& path) const;
  Entry& entry(const std::string& path);
  const std::vector<T>& values(const std::string& path) const { return entry(path).values; }
  std::vector<T>& values(const std::string& path) { return entry(path).values; }
  const T* data(const std::string& path) const { return entry(path).values.data(); }
  T* data(const std::string& path) { return entry(path).values.data(); }

  // Sorted path list.
  std::vector<std::string> paths() const;
  std::size_t total_count() const;
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }

  ParameterSet zeros_like() const;
  void fill(T value);
  bool same_layout(const ParameterSet& other) const;

  template <class U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [path, e] : entries_) {
      out.add(path, e.shape, std::vector<U>(e.values.begin(), e.values.end()));
    }
    return out;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (auto ia = a.entries_.begin(), ib = b.entries_.begin(); ia != a.entries_.end(); ++ia, ++ib) {
      if (ia->first != ib->first || ia->second.shape != ib->second.shape || ia->second.values != ib->second.values) {
        return false;
      }
    }
    return true;
  }

 private:
  std::map<std::string, Entry> entries_;
};

// Deterministic in (config, seed). Each tensor draws from its own stream keyed
// by path, so adding or removing layers leaves the other tensors unchanged.
template <class T>
ParameterSet<T> init_params(const BackboneConfig& config, std::uint64_t seed);

struct ParamStats {
  std::size_t total = 0;
  std::size_t context_attention = 0;
};

template <class T>
ParamStats param_stats(const ParameterSet<T>& params, const BackboneConfig& config);

// Embedded text condition: rows x 1 x text_dim. Zero rows means "no text".
template <class T>
struct TextCondition {
  Tensor<T> tokens;
};

// (pairs * tokens_per_pair) x 1 x bottleneck_channels.
template <class T>
struct ContextTokens {
  Tensor<T> tokens;
  std::vector<int> boundaries;  // start row of each pair
  int tokens_per_pair = 0;

  int pairs() const { return static_cast<int>(boundaries.size()); }
  bool empty() const { return boundaries.empty(); }
};

template <class T>
struct ContextInput {
  Tensor<T> image;
  TextCondition<T> text;
};

// Activations kept by a forward pass for the matching backward pass.
template <class T>
class DenoiseTape {
 public:
  DenoiseTape();
  ~DenoiseTape();
  DenoiseTape(DenoiseTape&&) noexcept;
  DenoiseTape& operator=(DenoiseTape&&) noexcept;
  struct Impl;
  std::unique_ptr<Impl> impl;
};

template <class T>
class ContextTape {
 public:
  ContextTape();
  ~ContextTape();
  ContextTape(ContextTape&&) noexcept;
  ContextTape& operator=(ContextTape&&) noexcept;
  struct Impl;
  std::unique_ptr<Impl> impl;
};

// Fixed 2D sinusoidal position code for an r x r grid, `dim` channels per
// position, frequencies pi * 2^(-i/2) for i = 1..dim/4.
template <class T>
Tensor<T> position_code(int resolution, int dim);

template <class T>
class Backbone {
 public:
  Backbone(BackboneConfig config, const ParameterSet<T>& params);
  ~Backbone();

  const BackboneConfig& config() const { return config_; }
  const ParameterSet<T>& params() const { return params_; }

  // v prediction. With a tape, activations are kept for backward().
  Tensor<T> denoise(const Tensor<T>& x_t, int t, const TextCondition<T>& text, const ContextTokens<T>& context,
                    DenoiseTape<T>* tape = nullptr) const;

  // Runs each pair through the shared down-sampling encoder at t = 0 with the
  // pair's own text and flattens the bottleneck map into tokens.
  ContextTokens<T> encode_context(const std::vector<ContextInput<T>>& pairs, ContextTape<T>* tape = nullptr) const;

  // Accumulates d(loss)/d(params) into grads. If context_grad is non-null it
  // receives d(loss)/d(context tokens).
  void backward(DenoiseTape<T>& tape, const Tensor<T>& grad_out, ParameterSet<T>& grads,
                Tensor<T>* context_grad = nullptr) const;
  void backward_context(ContextTape<T>& tape, const Tensor<T>& grad_tokens, ParameterSet<T>& grads) const;

  // Paths read by encode_context (for the sharing check).
  std::vector<std::string> context_encoder_paths() const;

 private:
  BackboneConfig config_;
  const ParameterSet<T>& params_;
};

}  // namespace instructdiff
