#include <cmath>
#include <numeric>

#include "instructdiff/backbone.hpp"
#include "instructdiff/error.hpp"
#include "instructdiff/rng.hpp"

namespace instructdiff {

std::string_view to_string(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::kNone: return "none";
    case AttentionKind::kText: return "text";
    case AttentionKind::kTextContext: return "text+context";
  }
  return "none";
}

AttentionKind parse_attention_kind(std::string_view name) {
  if (name == "none") return AttentionKind::kNone;
  if (name == "text") return AttentionKind::kText;
  if (name == "text+context") return AttentionKind::kTextContext;
  throw ValidationError("unknown attention kind '" + std::string(name) + "'");
}

bool operator==(const LevelConfig& a, const LevelConfig& b) {
  return a.in_resolution == b.in_resolution && a.out_resolution == b.out_resolution && a.blocks == b.blocks &&
         a.channels == b.channels && a.attention == b.attention;
}

BackboneConfig BackboneConfig::desk() {
  BackboneConfig c;
  c.levels = {{32, 16, 1, 8, AttentionKind::kNone},
              {16, 8, 1, 16, AttentionKind::kNone},
              {8, 8, 1, 32, AttentionKind::kTextContext}};
  return c;
}

BackboneConfig BackboneConfig::micro() {
  BackboneConfig c;
  c.resolution = 8;
  c.base_channels = 4;
  c.time_sinusoid_dim = 8;
  c.time_embed_dim = 8;
  c.text_dim = 6;
  c.heads = 2;
  c.d_model = 8;
  c.groups = 2;
  c.levels = {{8, 4, 1, 4, AttentionKind::kNone}, {4, 4, 1, 6, AttentionKind::kTextContext}};
  return c;
}

void BackboneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ValidationError("backbone config: " + msg); };
  if (levels.empty()) fail("no levels");
  if (resolution <= 0 || image_channels <= 0 || base_channels <= 0) fail("non-positive extent");
  if (time_sinusoid_dim <= 0 || time_sinusoid_dim % 2 != 0) fail("time sinusoid width must be even");
  if (time_embed_dim <= 0 || text_dim <= 0) fail("non-positive embedding width");
  if (heads <= 0 || d_model % heads != 0) fail("d_model must be divisible by heads");
  if (d_model % 4 != 0) fail("d_model must be a multiple of 4");
  if (groups <= 0 || base_channels % groups != 0) fail("base channels not divisible by groups");
  int res = resolution;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const auto& l = levels[i];
    const std::string where = "level " + std::to_string(i) + ": ";
    if (l.in_resolution != res) fail(where + "input resolution does not chain from the previous level");
    if (l.blocks < 1) fail(where + "needs at least one block");
    if (l.channels <= 0 || l.channels % groups != 0) fail(where + "channels not divisible by groups");
    const bool last = i + 1 == levels.size();
    if (last) {
      if (l.out_resolution != l.in_resolution) fail(where + "bottleneck level must not downsample");
    } else {
      if (l.out_resolution * 2 != l.in_resolution) fail(where + "levels must halve the resolution");
    }
    if (l.attention == AttentionKind::kTextContext && !last) {
      fail(where + "context attention is only allowed at the bottleneck level");
    }
    res = l.out_resolution;
  }
  if (levels.back().attention == AttentionKind::kNone) fail("bottleneck level needs text attention");
}

bool BackboneConfig::has_context_attention() const {
  for (const auto& l : levels)
    if (l.attention == AttentionKind::kTextContext) return true;
  return false;
}

BackboneConfig BackboneConfig::without_context_attention() const {
  BackboneConfig c = *this;
  for (auto& l : c.levels)
    if (l.attention == AttentionKind::kTextContext) l.attention = AttentionKind::kText;
  return c;
}

nlohmann::ordered_json to_json(const BackboneConfig& config) {
  nlohmann::ordered_json j;
  j["resolution"] = config.resolution;
  j["image_channels"] = config.image_channels;
  j["base_channels"] = config.base_channels;
  j["time_sinusoid_dim"] = config.time_sinusoid_dim;
  j["time_embed_dim"] = config.time_embed_dim;
  j["text_dim"] = config.text_dim;
  j["heads"] = config.heads;
  j["d_model"] = config.d_model;
  j["groups"] = config.groups;
  j["levels"] = nlohmann::ordered_json::array();
  for (const auto& l : config.levels) {
    nlohmann::ordered_json lj;
    lj["in"] = l.in_resolution;
    lj["out"] = l.out_resolution;
    lj["blocks"] = l.blocks;
    lj["channels"] = l.channels;
    lj["attention"] = std::string(to_string(l.attention));
    j["levels"].push_back(lj);
  }
  return j;
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  try {
    BackboneConfig c;
    c.resolution = j.at("resolution").get<int>();
    c.image_channels = j.at("image_channels").get<int>();
    c.base_channels = j.at("base_channels").get<int>();
    c.time_sinusoid_dim = j.at("time_sinusoid_dim").get<int>();
    c.time_embed_dim = j.at("time_embed_dim").get<int>();
    c.text_dim = j.at("text_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.groups = j.at("groups").get<int>();
    for (const auto& lj : j.at("levels")) {
      c.levels.push_back({lj.at("in").get<int>(), lj.at("out").get<int>(), lj.at("blocks").get<int>(),
                          lj.at("channels").get<int>(), parse_attention_kind(lj.at("attention").get<std::string>())});
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("backbone config json: ") + e.what());
  }
}

std::size_t ParamSpec::count() const {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

namespace {

void add_linear(std::vector<ParamSpec>& out, const std::string& prefix, int in, int outw, bool bias,
                ParamInit init = ParamInit::kFanIn) {
  out.push_back({prefix + ".w", {in, outw}, init, in});
  if (bias) out.push_back({prefix + ".b", {outw}, ParamInit::kZero, 1});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& prefix, int channels) {
  out.push_back({prefix + ".g", {channels}, ParamInit::kOne, 1});
  out.push_back({prefix + ".b", {channels}, ParamInit::kZero, 1});
}

void add_resblock(std::vector<ParamSpec>& out, const std::string& prefix, int cin, int cout, int temb) {
  add_norm(out, prefix + ".norm1", cin);
  add_linear(out, prefix + ".conv1", 9 * cin, cout, true);
  add_linear(out, prefix + ".temb", temb, cout, true);
  add_norm(out, prefix + ".norm2", cout);
  add_linear(out, prefix + ".conv2", 9 * cout, cout, true);
  if (cin != cout) add_linear(out, prefix + ".skip", cin, cout, true);
}

void add_attention(std::vector<ParamSpec>& out, const std::string& prefix, int channels, AttentionKind kind,
                   const BackboneConfig& c) {
  if (kind == AttentionKind::kNone) return;
  add_norm(out, prefix + ".text.norm", channels);
  add_linear(out, prefix + ".text.q", channels, c.d_model, false);
  add_linear(out, prefix + ".text.k", c.text_dim, c.d_model, false);
  add_linear(out, prefix + ".text.v", c.text_dim, c.d_model, false);
  add_linear(out, prefix + ".text.out", c.d_model, channels, true);
  if (kind != AttentionKind::kTextContext) return;
  const int cb = c.bottleneck_channels();
  add_norm(out, prefix + ".ctx.norm", channels);
  add_norm(out, prefix + ".ctx.kv_norm", cb);
  add_linear(out, prefix + ".ctx.q", channels, c.d_model, false);
  add_linear(out, prefix + ".ctx.k", cb, c.d_model, false);
  add_linear(out, prefix + ".ctx.v", cb, c.d_model, false);
  add_linear(out, prefix + ".ctx.out", c.d_model, channels, true, ParamInit::kZero);
}

}  // namespace

std::vector<ParamSpec> parameter_layout(const BackboneConfig& c) {
  c.validate();
  std::vector<ParamSpec> out;
  const int e = c.time_embed_dim;
  add_linear(out, "time.fc1", c.time_sinusoid_dim, e, true);
  add_linear(out, "time.fc2", e, e, true);
  add_linear(out, "conv_in", 9 * c.image_channels, c.base_channels, true);
  int ch = c.base_channels;
  for (std::size_t i = 0; i < c.levels.size(); ++i) {
    const auto& l = c.levels[i];
    for (int b = 0; b < l.blocks; ++b) {
      const std::string p = "down." + std::to_string(i);
      add_resblock(out, p + ".res." + std::to_string(b), ch, l.channels, e);
      add_attention(out, p + ".attn." + std::to_string(b), l.channels, l.attention, c);
      ch = l.channels;
    }
  }
  for (std::size_t r = c.levels.size(); r-- > 0;) {
    const auto& l = c.levels[r];
    for (int b = 0; b < l.blocks; ++b) {
      const std::string p = "up." + std::to_string(r);
      const int cin = b == 0 ? ch + l.channels : l.channels;
      add_resblock(out, p + ".res." + std::to_string(b), cin, l.channels, e);
      add_attention(out, p + ".attn." + std::to_string(b), l.channels, l.attention, c);
      ch = l.channels;
    }
  }
  add_norm(out, "out.norm", ch);
  add_linear(out, "out.conv", 9 * ch, c.image_channels, true);
  return out;
}

bool is_context_attention_path(const std::string& path) { return path.find(".ctx.") != std::string::npos; }

template <class T>
void ParameterSet<T>::add(const std::string& path, std::vector<int> shape, std::vector<T> values) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  if (n != values.size()) throw ValidationError("parameter '" + path + "': value count does not match shape");
  if (!entries_.emplace(path, Entry{std::move(shape), std::move(values)}).second) {
    throw ValidationError("duplicate parameter path '" + path + "'");
  }
}

template <class T>
const typename ParameterSet<T>::Entry& ParameterSet<T>::entry(const std::string& path) const {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw ValidationError("missing parameter '" + path + "'");
  return it->second;
}

template <class T>
typename ParameterSet<T>::Entry& ParameterSet<T>::entry(const std::string& path) {
  auto it = entries_.find(path);
  if (it == entries_.end()) throw ValidationError("missing parameter '" + path + "'");
  return it->second;
}

template <class T>
std::vector<std::string> ParameterSet<T>::paths() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& kv : entries_) out.push_back(kv.first);
  return out;
}

template <class T>
std::size_t ParameterSet<T>::total_count() const {
  std::size_t n = 0;
  for (const auto& kv : entries_) n += kv.second.values.size();
  return n;
}

template <class T>
ParameterSet<T> ParameterSet<T>::zeros_like() const {
  ParameterSet out;
  for (const auto& [path, e] : entries_) out.add(path, e.shape, std::vector<T>(e.values.size(), T{}));
  return out;
}

template <class T>
void ParameterSet<T>::fill(T value) {
  for (auto& kv : entries_) std::fill(kv.second.values.begin(), kv.second.values.end(), value);
}

template <class T>
bool ParameterSet<T>::same_layout(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (auto a = entries_.begin(), b = other.entries_.begin(); a != entries_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.shape != b->second.shape) return false;
  }
  return true;
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

template <class T>
ParameterSet<T> init_params(const BackboneConfig& config, std::uint64_t seed) {
  ParameterSet<T> out;
  for (const auto& spec : parameter_layout(config)) {
    std::vector<T> values(spec.count(), T{});
    switch (spec.init) {
      case ParamInit::kZero: break;
      case ParamInit::kOne: std::fill(values.begin(), values.end(), T{1}); break;
      case ParamInit::kFanIn: {
        Rng rng = Rng::derive(seed, fnv1a(spec.path));
        const double scale = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (auto& v : values) v = static_cast<T>(scale * rng.normal());
        break;
      }
    }
    out.add(spec.path, spec.shape, std::move(values));
  }
  return out;
}

template <class T>
ParamStats param_stats(const ParameterSet<T>& params, const BackboneConfig& config) {
  (void)config;
  ParamStats s;
  for (const auto& [path, e] : params.entries()) {
    s.total += e.values.size();
    if (is_context_attention_path(path)) s.context_attention += e.values.size();
  }
  return s;
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template ParameterSet<float> init_params<float>(const BackboneConfig&, std::uint64_t);
template ParameterSet<double> init_params<double>(const BackboneConfig&, std::uint64_t);
template ParamStats param_stats<float>(const ParameterSet<float>&, const BackboneConfig&);
template ParamStats param_stats<double>(const ParameterSet<double>&, const BackboneConfig&);

}  // namespace instructdiff
