#include <cctype>
#include <cmath>

#include "instructdiff/error.hpp"
#include "instructdiff/instruction.hpp"
#include "instructdiff/rng.hpp"

namespace instructdiff {

namespace {

// Words of the synthetic world and the shipped templates, in a fixed order so
// ids never move. Anything else hashes into the OOV buckets.
constexpr std::string_view kKnownWords[] = {
    // punctuation
    ".", ",", ":", ";", "!", "?", "'", "-", "(", ")",
    // world: colours, shapes, styles, positions
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange",
    "circle", "square", "triangle",
    "ember", "moss", "ocean", "olive", "lagoon", "plum",
    "top", "bottom", "left", "right", "center", "middle",
    // template vocabulary
    "a", "again", "aligned", "an", "and", "apply", "art", "artistic", "artwork", "as", "at", "but", "by",
    "colors", "compose", "consistent", "content", "contours", "convert", "copies", "create", "depict",
    "depicting", "depicts", "depth", "draw", "edge", "edges", "featuring", "fills", "follow", "following",
    "follows", "from", "generate", "give", "given", "guide", "guided", "i", "illustrate", "image", "in",
    "inside", "into", "is", "it", "keep", "layout", "like", "look", "make", "manner", "map", "mask", "match",
    "matches", "matching", "me", "new", "object", "of", "onto", "outline", "paint", "painting", "picture",
    "piece", "place", "placed", "placing", "please", "produce", "recreate", "redraw", "reference", "region",
    "render", "repaint", "respects", "restyle", "same", "scene", "shape", "shaped", "show", "showing", "shown",
    "shows", "simple", "single", "sketch", "structure", "style", "styled", "subject", "suggests", "texture",
    "that", "the", "this", "to", "transfer", "turn", "use", "using", "where", "whose", "with", "would",
    "photo", "background", "plain", "empty",
};

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool try_marker(std::string_view text, std::size_t pos, std::size_t* end) {
  if (text.compare(pos, 5, "[ref#") != 0) return false;
  const std::size_t close = text.find(']', pos);
  if (close == std::string_view::npos) return false;
  try {
    const Marker m = Marker::parse(text.substr(pos, close - pos + 1));
    if (m.index() > kMaxMarkers) return false;
  } catch (const ValidationError&) {
    return false;
  }
  *end = close + 1;
  return true;
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) tokens.push_back(std::move(word));
    word.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    std::size_t end = 0;
    if (c == '[' && try_marker(text, i, &end)) {
      flush();
      tokens.emplace_back(text.substr(i, end - i));
      i = end;
    } else if (std::isspace(c)) {
      flush();
      ++i;
    } else if (std::ispunct(c)) {
      flush();
      tokens.emplace_back(1, static_cast<char>(c));
      ++i;
    } else {
      word.push_back(static_cast<char>(std::tolower(c)));
      ++i;
    }
  }
  flush();
  return tokens;
}

Vocabulary::Vocabulary(std::uint64_t seed, int dim, int max_tokens) : seed_(seed), dim_(dim), max_tokens_(max_tokens) {
  if (dim <= 0 || max_tokens <= 0) throw ValidationError("vocabulary dimensions must be positive");
  int next = first_word_id();
  for (std::string_view w : kKnownWords) words_.emplace(std::string(w), next++);
}

int Vocabulary::size() const { return first_word_id() + static_cast<int>(words_.size()) + kOovBuckets; }

int Vocabulary::token_id(std::string_view token) const {
  if (token.starts_with("[ref#")) {
    std::size_t end = 0;
    if (try_marker(token, 0, &end) && end == token.size()) return Marker::parse(token).index();
  }
  if (const auto it = words_.find(token); it != words_.end()) return it->second;
  const int oov_base = first_word_id() + static_cast<int>(words_.size());
  return oov_base + static_cast<int>(fnv1a(token) % kOovBuckets);
}

std::vector<float> Vocabulary::embedding(int id) const {
  std::vector<float> row(static_cast<std::size_t>(dim_), 0.0f);
  if (id == kPadId) return row;
  Rng rng = Rng::derive(seed_, static_cast<std::uint64_t>(id));
  for (auto& v : row) v = static_cast<float>(rng.normal());
  return row;
}

Tensor<float> EmbeddedText::active_rows() const {
  const int dim = embeddings.channels();
  Tensor<float> out(length, 1, dim);
  std::copy(embeddings.data(), embeddings.data() + static_cast<std::size_t>(length) * dim, out.data());
  return out;
}

EmbeddedText embed_text(std::string_view text, const Vocabulary& vocab, Strictness strictness) {
  auto tokens = tokenize(text);
  if (static_cast<int>(tokens.size()) > vocab.max_tokens()) {
    if (strictness == Strictness::kStrict) {
      throw ValidationError("text has " + std::to_string(tokens.size()) + " tokens, limit is " +
                            std::to_string(vocab.max_tokens()));
    }
    tokens.resize(static_cast<std::size_t>(vocab.max_tokens()));
  }
  EmbeddedText out;
  out.length = static_cast<int>(tokens.size());
  out.token_ids.assign(static_cast<std::size_t>(vocab.max_tokens()), Vocabulary::kPadId);
  out.mask.assign(static_cast<std::size_t>(vocab.max_tokens()), false);
  out.embeddings = Tensor<float>(vocab.max_tokens(), 1, vocab.dim());
  for (int i = 0; i < out.length; ++i) {
    const int id = vocab.token_id(tokens[static_cast<std::size_t>(i)]);
    out.token_ids[static_cast<std::size_t>(i)] = id;
    out.mask[static_cast<std::size_t>(i)] = true;
    const auto row = vocab.embedding(id);
    std::copy(row.begin(), row.end(), out.embeddings.data() + static_cast<std::size_t>(i) * vocab.dim());
  }
  return out;
}

}  // namespace instructdiff
