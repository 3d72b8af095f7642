#include <algorithm>
#include <cmath>

#include "instructdiff/corpus.hpp"
#include "instructdiff/error.hpp"

namespace instructdiff {

const std::vector<SubjectColor>& subject_colors() {
  static const std::vector<SubjectColor> colors = {
      {"red", {0.95f, 0.15f, 0.15f}},    {"green", {0.15f, 0.90f, 0.20f}}, {"blue", {0.20f, 0.35f, 1.00f}},
      {"yellow", {0.95f, 0.90f, 0.15f}}, {"cyan", {0.15f, 0.90f, 0.95f}},  {"magenta", {0.95f, 0.20f, 0.90f}},
      {"white", {0.95f, 0.95f, 0.95f}},  {"orange", {1.00f, 0.55f, 0.10f}},
  };
  return colors;
}

// Channel levels 0.08 / 0.24 / 0.41 sit in distinct quarter-bins of [0, 0.65].
const std::vector<StylePalette>& style_palettes() {
  static const std::vector<StylePalette> styles = {
      {"ember", {0.41f, 0.08f, 0.08f}, {0.24f, 0.08f, 0.08f}, Texture::kStripesH},
      {"moss", {0.08f, 0.41f, 0.08f}, {0.08f, 0.24f, 0.08f}, Texture::kChecker},
      {"ocean", {0.08f, 0.08f, 0.41f}, {0.08f, 0.08f, 0.24f}, Texture::kStripesV},
      {"olive", {0.41f, 0.41f, 0.08f}, {0.24f, 0.24f, 0.08f}, Texture::kDots},
      {"lagoon", {0.08f, 0.41f, 0.41f}, {0.08f, 0.24f, 0.24f}, Texture::kDiagonal},
      {"plum", {0.41f, 0.08f, 0.41f}, {0.24f, 0.08f, 0.24f}, Texture::kBlocks},
  };
  return styles;
}

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
  }
  return "circle";
}

ShapeKind parse_shape_kind(std::string_view name) {
  if (name == "circle") return ShapeKind::kCircle;
  if (name == "square") return ShapeKind::kSquare;
  if (name == "triangle") return ShapeKind::kTriangle;
  throw ValidationError("unknown shape '" + std::string(name) + "'");
}

nlohmann::ordered_json to_json(const WorldAnnotation& a) {
  nlohmann::ordered_json j;
  j["has_shape"] = a.has_shape;
  j["shape"] = std::string(to_string(a.shape));
  j["color"] = std::string(subject_colors()[static_cast<std::size_t>(a.color)].name);
  j["style"] = std::string(style_palettes()[static_cast<std::size_t>(a.style)].name);
  j["cx"] = a.cx;
  j["cy"] = a.cy;
  j["radius"] = a.radius;
  return j;
}

WorldAnnotation annotation_from_json(const nlohmann::json& j) {
  WorldAnnotation a;
  try {
    a.has_shape = j.at("has_shape").get<bool>();
    a.shape = parse_shape_kind(j.at("shape").get<std::string>());
    const auto color = j.at("color").get<std::string>();
    const auto style = j.at("style").get<std::string>();
    const auto& colors = subject_colors();
    const auto& styles = style_palettes();
    auto ci = std::find_if(colors.begin(), colors.end(), [&](const auto& c) { return c.name == color; });
    auto si = std::find_if(styles.begin(), styles.end(), [&](const auto& s) { return s.name == style; });
    if (ci == colors.end() || si == styles.end()) throw ValidationError("unknown colour or style in annotation");
    a.color = static_cast<int>(ci - colors.begin());
    a.style = static_cast<int>(si - styles.begin());
    a.cx = j.at("cx").get<double>();
    a.cy = j.at("cy").get<double>();
    a.radius = j.at("radius").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("annotation: ") + e.what());
  }
  return a;
}

void randomize_placement(WorldAnnotation& a, Rng& rng) {
  a.radius = 7.0 + 2.0 * rng.uniform();
  const double lo = a.radius + 1.0;
  const double hi = kWorldSize - a.radius - 1.0;
  a.cx = lo + (hi - lo) * rng.uniform();
  a.cy = lo + (hi - lo) * rng.uniform();
  // Squares and triangles sit on the pixel lattice so their pixel count equals
  // the analytic area exactly.
  if (a.shape == ShapeKind::kSquare) {
    a.cx = std::round(a.cx);
    a.cy = std::round(a.cy);
  } else if (a.shape == ShapeKind::kTriangle) {
    a.cx = std::floor(a.cx) + 0.5;
    a.cy = std::round(a.cy);
  }
}

WorldAnnotation random_annotation(Rng& rng) {
  WorldAnnotation a;
  a.shape = static_cast<ShapeKind>(rng.uniform_int(0, kShapeKinds - 1));
  a.color = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(subject_colors().size()) - 1));
  a.style = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(style_palettes().size()) - 1));
  randomize_placement(a, rng);
  return a;
}

namespace {

constexpr double kSquareHalf = 0.85;  // half side as a fraction of radius
constexpr double kTriangleHalf = 0.9;  // half height as a fraction of radius

int square_half(const WorldAnnotation& a) { return std::max(1, static_cast<int>(std::lround(kSquareHalf * a.radius))); }
int triangle_half(const WorldAnnotation& a) {
  return std::max(1, static_cast<int>(std::lround(kTriangleHalf * a.radius)));
}

}  // namespace

bool inside_shape(const WorldAnnotation& a, int x, int y) {
  if (!a.has_shape) return false;
  const double px = x + 0.5 - a.cx;
  const double py = y + 0.5 - a.cy;
  switch (a.shape) {
    case ShapeKind::kCircle: return px * px + py * py <= a.radius * a.radius;
    case ShapeKind::kSquare: {
      const double h = square_half(a);
      return std::abs(px) <= h && std::abs(py) <= h;
    }
    case ShapeKind::kTriangle: {
      // Apex at (0, -m), base at y = +m, half width (y + m) / 2.
      const double m = triangle_half(a);
      return py >= -m && py <= m && std::abs(px) <= (py + m) / 2.0;
    }
  }
  return false;
}

double analytic_area(const WorldAnnotation& a) {
  if (!a.has_shape) return 0.0;
  switch (a.shape) {
    case ShapeKind::kCircle: return M_PI * a.radius * a.radius;
    case ShapeKind::kSquare: return 4.0 * square_half(a) * square_half(a);
    case ShapeKind::kTriangle: return 2.0 * triangle_half(a) * triangle_half(a);
  }
  return 0.0;
}

int texture_bit(Texture texture, int x, int y) {
  switch (texture) {
    case Texture::kStripesH: return (y / 2) % 2;
    case Texture::kChecker: return ((x / 4) + (y / 4)) % 2;
    case Texture::kStripesV: return (x / 2) % 2;
    case Texture::kDots: return (x % 4 < 2 && y % 4 < 2) ? 1 : 0;
    case Texture::kDiagonal: return ((x + y) / 3) % 2;
    case Texture::kBlocks: return ((x / 8) + (y / 8)) % 2;
  }
  return 0;
}

ImageTensor render(const WorldAnnotation& a) {
  const auto& style = style_palettes().at(static_cast<std::size_t>(a.style));
  const auto& subject = subject_colors().at(static_cast<std::size_t>(a.color));
  ImageTensor img(kWorldSize, kWorldSize, 3);
  for (int y = 0; y < kWorldSize; ++y) {
    for (int x = 0; x < kWorldSize; ++x) {
      const int bit = texture_bit(style.texture, x, y);
      for (int c = 0; c < 3; ++c) {
        float v = bit ? style.secondary[static_cast<std::size_t>(c)] : style.primary[static_cast<std::size_t>(c)];
        if (inside_shape(a, x, y)) v = subject.rgb[static_cast<std::size_t>(c)] * (bit ? 0.9f : 1.0f);
        img.at(y, x, c) = 2.0f * v - 1.0f;
      }
    }
  }
  return img;
}

std::string position_phrase(const WorldAnnotation& a) {
  const double third = kWorldSize / 3.0;
  const int col = a.cx < third ? 0 : (a.cx > 2 * third ? 2 : 1);
  const int row = a.cy < third ? 0 : (a.cy > 2 * third ? 2 : 1);
  static const char* const kRow[] = {"top", "", "bottom"};
  static const char* const kCol[] = {"left", "", "right"};
  if (row == 1 && col == 1) return "the center";
  std::string out = "the ";
  if (row != 1) out += kRow[row];
  if (row != 1 && col != 1) out += " ";
  if (col != 1) out += kCol[col];
  return out;
}

std::string caption(const WorldAnnotation& a, CaptionParts parts) {
  std::string out;
  if (parts.subject) {
    out = "a " + std::string(subject_colors().at(static_cast<std::size_t>(a.color)).name) + " " +
          std::string(to_string(a.shape));
  }
  if (parts.style) {
    if (!out.empty()) out += " ";
    out += "in " + std::string(style_palettes().at(static_cast<std::size_t>(a.style)).name) + " style";
  }
  if (parts.position) {
    if (!out.empty()) out += " ";
    out += "at " + position_phrase(a);
  }
  return out;
}

std::vector<WorldSample> synth_world(int n, std::uint64_t seed) {
  if (n < 1) throw ValidationError("synth_world: n must be >= 1");
  Rng rng(seed);
  std::vector<WorldSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    WorldAnnotation a = random_annotation(rng);
    out.push_back({render(a), a, caption(a)});
  }
  return out;
}

Tensor<float> shape_mask(const WorldAnnotation& a) {
  Tensor<float> m(kWorldSize, kWorldSize, 1);
  for (int y = 0; y < kWorldSize; ++y)
    for (int x = 0; x < kWorldSize; ++x) m.at(y, x, 0) = inside_shape(a, x, y) ? 1.0f : 0.0f;
  return m;
}

Tensor<float> mask_boundary(const Tensor<float>& mask) {
  const int h = mask.height();
  const int w = mask.width();
  Tensor<float> out(h, w, 1);
  auto on = [&](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w && mask.at(y, x, 0) > 0.5f; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!on(y, x)) continue;
      if (!on(y - 1, x) || !on(y + 1, x) || !on(y, x - 1) || !on(y, x + 1)) out.at(y, x, 0) = 1.0f;
    }
  return out;
}

Tensor<float> dilate(const Tensor<float>& map, int radius) {
  if (radius < 0) throw ValidationError("dilation radius must be >= 0");
  const int h = map.height();
  const int w = map.width();
  Tensor<float> out(h, w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (map.at(y, x, 0) <= 0.5f) continue;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int yy = y + dy;
          const int xx = x + dx;
          if (yy >= 0 && yy < h && xx >= 0 && xx < w) out.at(yy, xx, 0) = 1.0f;
        }
    }
  return out;
}

Tensor<float> texture_edges(const WorldAnnotation& a) {
  const auto texture = style_palettes().at(static_cast<std::size_t>(a.style)).texture;
  Tensor<float> out(kWorldSize, kWorldSize, 1);
  for (int y = 0; y < kWorldSize; ++y)
    for (int x = 0; x < kWorldSize; ++x) {
      if (inside_shape(a, x, y)) continue;
      const int b = texture_bit(texture, x, y);
      const bool right = x + 1 < kWorldSize && texture_bit(texture, x + 1, y) != b;
      const bool below = y + 1 < kWorldSize && texture_bit(texture, x, y + 1) != b;
      if (right || below) out.at(y, x, 0) = 1.0f;
    }
  return out;
}

Tensor<float> depth_map(const WorldAnnotation& a) {
  Tensor<float> d(kWorldSize, kWorldSize, 1);
  if (!a.has_shape) return d;
  const double span = 2.5 * a.radius;
  for (int y = 0; y < kWorldSize; ++y)
    for (int x = 0; x < kWorldSize; ++x) {
      const double dist = std::hypot(x + 0.5 - a.cx, y + 0.5 - a.cy);
      d.at(y, x, 0) = static_cast<float>(std::clamp(1.0 - dist / span, 0.0, 1.0));
    }
  return d;
}

Controls derive_controls(const ImageTensor& image, const WorldAnnotation& a, int dilation, bool with_texture_edges) {
  if (image.height() != kWorldSize || image.width() != kWorldSize) {
    throw ValidationError("derive_controls: image does not match the world size");
  }
  Controls c;
  c.mask = shape_mask(a);
  Tensor<float> edges = mask_boundary(c.mask);
  if (with_texture_edges) {
    const Tensor<float> t = texture_edges(a);
    for (std::size_t i = 0; i < edges.size(); ++i) edges[i] = std::max(edges[i], t[i]);
  }
  c.edge = dilate(edges, dilation);
  c.depth = depth_map(a);
  return c;
}

ImageTensor control_image(const Tensor<float>& map) {
  ImageTensor img(map.height(), map.width(), 3);
  for (int p = 0; p < map.pixels(); ++p)
    for (int c = 0; c < 3; ++c) img[static_cast<std::size_t>(p) * 3 + c] = 2.0f * map[static_cast<std::size_t>(p)] - 1.0f;
  return img;
}

}  // namespace instructdiff
