#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "instructdiff/tensor.hpp"

namespace instructdiff {

inline constexpr int kMaxMarkers = 16;       // reserved [ref#1]..[ref#16] token ids
inline constexpr int kMaxContextPairs = 4;   // N_ctx_max
inline constexpr int kMaxTextTokens = 64;    // L_max
inline constexpr int kTextDim = 64;          // d_txt

// "[ref#k]" with k >= 1.
class Marker {
 public:
  explicit Marker(int index);

  // Accepts "ref#k" or "[ref#k]".
  static Marker parse(std::string_view text);

  int index() const { return index_; }
  std::string id() const { return "ref#" + std::to_string(index_); }
  std::string surface() const { return "[" + id() + "]"; }

  friend auto operator<=>(const Marker&, const Marker&) = default;

 private:
  int index_;
};

enum class TaskKind {
  kTxt2Img,
  kControlEdge,
  kControlMask,
  kControlDepth,
  kSubject,
  kStyled,
  kStyleTransfer,
  kStyleMask,  // zero-shot composite, evaluation only
};

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

struct ContextPair {
  Marker marker{1};
  std::string text;
  std::string image_path;  // as written in the record, relative to the record file
  ImageTensor image;
};

enum class Strictness { kStrict, kPermissive };

struct MultiModalInstruction {
  TaskKind task = TaskKind::kTxt2Img;
  std::string payload;
  std::vector<ContextPair> context;
  std::optional<std::string> target_path;
};

// Markers in the order they appear in the payload (repeats included).
std::vector<Marker> find_markers(std::string_view payload);

struct ParseOptions {
  Strictness strictness = Strictness::kStrict;
  std::filesystem::path base_dir;  // image paths resolve against this
  bool load_images = true;
  int image_size = 32;             // 0 disables the size check
};

// Throws ValidationError on any violation. In permissive mode unreferenced
// context pairs are reported through `warnings` instead.
void validate_instruction(const MultiModalInstruction& instruction, Strictness strictness,
                          int image_size, std::vector<std::string>* warnings = nullptr);

MultiModalInstruction parse_instruction(std::string_view record, const ParseOptions& options,
                                        std::vector<std::string>* warnings = nullptr);

// Canonical JSON-lines form (no trailing newline).
std::string serialize_instruction(const MultiModalInstruction& instruction);

std::vector<MultiModalInstruction> read_instruction_file(const std::filesystem::path& path,
                                                         ParseOptions options);

// ---------------------------------------------------------------------------
// Templates

struct InstructionTemplate {
  std::string id;
  TaskKind kind = TaskKind::kTxt2Img;
  std::string text;

  // Distinct placeholder names in order of first appearance.
  std::vector<std::string> placeholders() const;
};

struct Binding {
  std::optional<Marker> marker;  // absent for plain content slots
  std::string text;
};

std::string render_template(const InstructionTemplate& tmpl, const std::map<std::string, Binding>& bindings);

std::vector<InstructionTemplate> load_templates(const std::filesystem::path& file, TaskKind kind);

// ---------------------------------------------------------------------------
// Text embedding

// Lower-cased whitespace/punctuation tokenizer; "[ref#k]" for k in 1..16 is one token.
std::vector<std::string> tokenize(std::string_view text);

// Fixed-seed random embedding table. Id 0 is padding, ids 1..16 are the
// marker tokens, then the known words, then hashed out-of-vocabulary buckets.
class Vocabulary {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kOovBuckets = 1024;

  explicit Vocabulary(std::uint64_t seed = 0x5eed, int dim = kTextDim, int max_tokens = kMaxTextTokens);

  int dim() const { return dim_; }
  int max_tokens() const { return max_tokens_; }
  std::uint64_t seed() const { return seed_; }

  int token_id(std::string_view token) const;
  static bool is_marker_id(int id) { return id >= 1 && id <= kMaxMarkers; }
  int first_word_id() const { return kMaxMarkers + 1; }
  int size() const;

  // Row for a token id; deterministic in (seed, id).
  std::vector<float> embedding(int id) const;

 private:
  std::uint64_t seed_;
  int dim_;
  int max_tokens_;
  std::map<std::string, int, std::less<>> words_;
};

struct EmbeddedText {
  std::vector<int> token_ids;   // max_tokens entries, padded with 0
  Tensor<float> embeddings;     // max_tokens x 1 x dim, zero rows past `length`
  std::vector<bool> mask;       // true for real tokens
  int length = 0;

  // The first `length` rows (length x 1 x dim); what attention consumes.
  Tensor<float> active_rows() const;
};

EmbeddedText embed_text(std::string_view text, const Vocabulary& vocab,
                        Strictness strictness = Strictness::kStrict);

}  // namespace instructdiff
