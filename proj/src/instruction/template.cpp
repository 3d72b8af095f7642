#include <algorithm>
#include <fstream>
#include <set>

#include "instructdiff/error.hpp"
#include "instructdiff/instruction.hpp"

namespace instructdiff {

namespace {

bool is_name_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_'; }

// Calls on_text for literal spans and on_slot for each {name}.
template <class OnText, class OnSlot>
void scan_template(const std::string& text, OnText on_text, OnSlot on_slot) {
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t open = text.find('{', pos);
    if (open == std::string::npos) break;
    const std::size_t close = text.find('}', open);
    if (close == std::string::npos) break;
    const std::string name = text.substr(open + 1, close - open - 1);
    bool valid = !name.empty();
    for (char c : name) valid = valid && is_name_char(c);
    if (!valid) {
      on_text(text.substr(pos, close + 1 - pos));
      pos = close + 1;
      continue;
    }
    on_text(text.substr(pos, open - pos));
    on_slot(name);
    pos = close + 1;
  }
  on_text(text.substr(std::min(pos, text.size())));
}

}  // namespace

std::vector<std::string> InstructionTemplate::placeholders() const {
  std::vector<std::string> names;
  scan_template(
      text, [](const std::string&) {},
      [&](const std::string& name) {
        if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
      });
  return names;
}

std::string render_template(const InstructionTemplate& tmpl, const std::map<std::string, Binding>& bindings) {
  const auto declared = tmpl.placeholders();
  for (const auto& [name, binding] : bindings) {
    if (std::find(declared.begin(), declared.end(), name) == declared.end()) {
      throw ValidationError("template " + tmpl.id + " has no placeholder {" + name + "}");
    }
  }
  std::string out;
  scan_template(
      tmpl.text, [&](const std::string& literal) { out += literal; },
      [&](const std::string& name) {
        const auto it = bindings.find(name);
        if (it == bindings.end()) throw ValidationError("template " + tmpl.id + ": missing binding for {" + name + "}");
        if (it->second.marker) {
          out += it->second.marker->surface();
          if (!it->second.text.empty()) out += " " + it->second.text;
        } else {
          out += it->second.text;
        }
      });
  return out;
}

std::vector<InstructionTemplate> load_templates(const std::filesystem::path& file, TaskKind kind) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open template file " + file.string());
  std::vector<InstructionTemplate> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    out.push_back({file.stem().string() + "-" + std::to_string(line_no), kind, line});
  }
  if (out.empty()) throw ValidationError("template file " + file.string() + " is empty");
  return out;
}

}  // namespace instructdiff
