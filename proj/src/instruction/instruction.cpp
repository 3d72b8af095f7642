#include "instructdiff/instruction.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "instructdiff/error.hpp"
#include "instructdiff/image_io.hpp"

namespace instructdiff {

using ordered_json = nlohmann::ordered_json;

Marker::Marker(int index) : index_(index) {
  if (index < 1) throw ValidationError("marker index must be >= 1, got " + std::to_string(index));
}

Marker Marker::parse(std::string_view text) {
  std::string_view body = text;
  if (body.size() >= 2 && body.front() == '[' && body.back() == ']') body = body.substr(1, body.size() - 2);
  if (!body.starts_with("ref#")) throw ValidationError("bad marker '" + std::string(text) + "'");
  body.remove_prefix(4);
  int index = 0;
  const auto [ptr, ec] = std::from_chars(body.data(), body.data() + body.size(), index);
  if (ec != std::errc{} || ptr != body.data() + body.size() || body.empty() || body.front() == '0') {
    throw ValidationError("bad marker '" + std::string(text) + "'");
  }
  return Marker(index);
}

namespace {

constexpr std::pair<TaskKind, std::string_view> kTaskNames[] = {
    {TaskKind::kTxt2Img, "txt2img"},
    {TaskKind::kControlEdge, "control2img-edge"},
    {TaskKind::kControlMask, "control2img-mask"},
    {TaskKind::kControlDepth, "control2img-depth"},
    {TaskKind::kSubject, "subject"},
    {TaskKind::kStyled, "styled"},
    {TaskKind::kStyleTransfer, "style-transfer"},
    {TaskKind::kStyleMask, "style-mask"},
};

}  // namespace

std::string_view to_string(TaskKind kind) {
  for (const auto& [k, name] : kTaskNames)
    if (k == kind) return name;
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  for (const auto& [k, n] : kTaskNames)
    if (n == name) return k;
  throw ValidationError("unknown task kind '" + std::string(name) + "'");
}

std::vector<Marker> find_markers(std::string_view payload) {
  std::vector<Marker> out;
  std::size_t pos = 0;
  while ((pos = payload.find("[ref#", pos)) != std::string_view::npos) {
    const std::size_t close = payload.find(']', pos);
    if (close == std::string_view::npos) break;
    try {
      out.push_back(Marker::parse(payload.substr(pos, close - pos + 1)));
    } catch (const ValidationError&) {
      // not a marker, e.g. "[ref#x]"
    }
    pos = pos + 1;
  }
  return out;
}

void validate_instruction(const MultiModalInstruction& instruction, Strictness strictness,
                          int image_size, std::vector<std::string>* warnings) {
  if (instruction.context.size() > static_cast<std::size_t>(kMaxContextPairs)) {
    throw ValidationError("context has " + std::to_string(instruction.context.size()) +
                          " pairs, at most " + std::to_string(kMaxContextPairs) + " allowed");
  }
  std::set<int> context_markers;
  for (const auto& pair : instruction.context) {
    if (pair.marker.index() > kMaxMarkers) {
      throw ValidationError("marker " + pair.marker.surface() + " exceeds the reserved range");
    }
    if (!context_markers.insert(pair.marker.index()).second) {
      throw ValidationError("duplicate marker index " + pair.marker.id());
    }
    if (pair.text.empty()) throw ValidationError("context pair " + pair.marker.id() + " has empty text");
    if (image_size > 0 && !pair.image.empty() &&
        (pair.image.height() != image_size || pair.image.width() != image_size || pair.image.channels() != 3)) {
      throw ValidationError("context image for " + pair.marker.id() + " is " + std::to_string(pair.image.height()) +
                            "x" + std::to_string(pair.image.width()) + ", expected " + std::to_string(image_size) +
                            "x" + std::to_string(image_size));
    }
  }
  std::set<int> payload_markers;
  for (const Marker& m : find_markers(instruction.payload)) payload_markers.insert(m.index());
  for (int index : payload_markers) {
    if (!context_markers.contains(index)) {
      throw ValidationError("payload references " + Marker(index).surface() + " but the context has no such pair");
    }
  }
  for (int index : context_markers) {
    if (payload_markers.contains(index)) continue;
    const std::string message = "context pair " + Marker(index).id() + " is not referenced by the payload";
    if (strictness == Strictness::kStrict) throw ValidationError(message);
    if (warnings) warnings->push_back(message);
  }
}

namespace {

const ordered_json& require(const ordered_json& obj, const char* key) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(std::string("malformed record: missing \"") + key + "\"");
  return *it;
}

std::string require_string(const ordered_json& obj, const char* key) {
  const auto& v = require(obj, key);
  if (!v.is_string()) throw ValidationError(std::string("malformed record: \"") + key + "\" must be a string");
  return v.get<std::string>();
}

}  // namespace

MultiModalInstruction parse_instruction(std::string_view record, const ParseOptions& options,
                                        std::vector<std::string>* warnings) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(record);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("malformed record: ") + e.what());
  }
  if (!doc.is_object()) throw ValidationError("malformed record: not a JSON object");

  MultiModalInstruction out;
  out.task = parse_task_kind(require_string(doc, "task"));
  out.payload = require_string(doc, "instruction");
  const auto& context = require(doc, "context");
  if (!context.is_array()) throw ValidationError("malformed record: \"context\" must be an array");
  for (const auto& item : context) {
    if (!item.is_object()) throw ValidationError("malformed record: context entries must be objects");
    ContextPair pair;
    pair.marker = Marker::parse(require_string(item, "marker"));
    pair.text = require_string(item, "text");
    pair.image_path = require_string(item, "image");
    if (options.load_images) {
      try {
        pair.image = load_png(options.base_dir / pair.image_path);
      } catch (const IoError& e) {
        throw ValidationError(std::string("image decode failure: ") + e.what());
      }
    }
    out.context.push_back(std::move(pair));
  }
  const auto target = doc.find("target");
  if (target != doc.end() && !target->is_null()) {
    if (!target->is_string()) throw ValidationError("malformed record: \"target\" must be a string or null");
    out.target_path = target->get<std::string>();
  }
  validate_instruction(out, options.strictness, options.load_images ? options.image_size : 0, warnings);
  return out;
}

std::string serialize_instruction(const MultiModalInstruction& instruction) {
  ordered_json doc;
  doc["task"] = std::string(to_string(instruction.task));
  doc["instruction"] = instruction.payload;
  doc["context"] = ordered_json::array();
  for (const auto& pair : instruction.context) {
    ordered_json item;
    item["marker"] = pair.marker.id();
    item["text"] = pair.text;
    item["image"] = pair.image_path;
    doc["context"].push_back(std::move(item));
  }
  doc["target"] = instruction.target_path ? ordered_json(*instruction.target_path) : ordered_json(nullptr);
  return doc.dump();
}

std::vector<MultiModalInstruction> read_instruction_file(const std::filesystem::path& path, ParseOptions options) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open instruction file " + path.string());
  if (options.base_dir.empty()) options.base_dir = path.parent_path();
  std::vector<MultiModalInstruction> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(parse_instruction(line, options));
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace instructdiff
