#include <algorithm>
#include <fstream>

#include "instructdiff/error.hpp"
#include "instructdiff/evalsvc.hpp"

namespace instructdiff {

using nlohmann::json;
using nlohmann::ordered_json;

void Inventory::validate() const {
  if (items.empty()) throw ValidationError("inventory is empty");
  std::set<std::pair<std::string, std::string>> seen;
  std::map<std::string, std::string> task_of;
  for (const auto& it : items) {
    if (it.input.empty() || it.method.empty()) throw ValidationError("inventory item needs input and method");
    if (it.conditions.empty()) throw ValidationError("inventory item " + it.input + "/" + it.method + " has no conditions");
    if (!seen.emplace(it.input, it.method).second) {
      throw ValidationError("inventory repeats " + it.input + "/" + it.method);
    }
    auto [pos, fresh] = task_of.emplace(it.input, it.task);
    if (!fresh && pos->second != it.task) throw ValidationError("input " + it.input + " spans two tasks");
  }
}

ordered_json Inventory::to_json() const {
  ordered_json j;
  j["items"] = ordered_json::array();
  for (const auto& it : items) {
    ordered_json o;
    o["input"] = it.input;
    o["method"] = it.method;
    o["task"] = it.task;
    o["instruction"] = it.instruction;
    o["conditions"] = it.conditions;
    o["context"] = ordered_json::array();
    for (const auto& c : it.context) o["context"].push_back({{"marker", c.marker}, {"text", c.text}, {"image", c.image}});
    o["candidate"] = it.candidate;
    j["items"].push_back(std::move(o));
  }
  return j;
}

Inventory Inventory::from_json(const json& j) {
  Inventory inv;
  try {
    for (const auto& o : j.at("items")) {
      InventoryItem it;
      it.input = o.at("input").get<std::string>();
      it.method = o.at("method").get<std::string>();
      it.task = o.value("task", std::string());
      it.instruction = o.value("instruction", std::string());
      it.conditions = o.at("conditions").get<std::vector<std::string>>();
      if (o.contains("context")) {
        for (const auto& c : o.at("context")) {
          it.context.push_back(
              {c.at("marker").get<std::string>(), c.at("text").get<std::string>(), c.at("image").get<std::string>()});
        }
      }
      it.candidate = o.value("candidate", std::string());
      inv.items.push_back(std::move(it));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("inventory: ") + e.what());
  }
  inv.validate();
  return inv;
}

Inventory Inventory::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open inventory " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ValidationError("inventory " + path.string() + ": " + e.what());
  }
}

ordered_json Assignment::to_json(const Inventory& inventory) const {
  const auto& it = inventory.items.at(item);
  ordered_json j;
  j["assignment_id"] = id;
  j["session"] = session;
  j["rater"] = rater;
  j["input"] = it.input;
  j["method"] = it.method;
  j["task"] = it.task;
  j["instruction"] = it.instruction;
  j["conditions"] = it.conditions;
  j["context"] = ordered_json::array();
  for (const auto& c : it.context) j["context"].push_back({{"marker", c.marker}, {"text", c.text}, {"image", c.image}});
  j["candidate"] = it.candidate;
  j["block"] = {{"methods", block}, {"done", block_done}, {"total", block.size()}};
  return j;
}

RatingSession::RatingSession(std::string id, const Inventory& inventory, int redundancy)
    : id_(std::move(id)), inventory_(&inventory), redundancy_(redundancy) {
  if (redundancy < 1) throw ValidationError("redundancy must be >= 1");
  inventory.validate();
  for (std::size_t i = 0; i < inventory.items.size(); ++i) {
    const auto& input = inventory.items[i].input;
    auto& list = by_input_[input];
    if (list.empty()) inputs_.push_back(input);
    list.push_back(i);
  }
}

bool RatingSession::rated(const std::string& rater, std::size_t item) const { return rated_.count({rater, item}) > 0; }

Assignment RatingSession::make_assignment(const std::string& rater, std::size_t item) const {
  const auto& it = inventory_->items[item];
  Assignment a;
  a.id = id_ + ":" + rater + ":" + it.input + ":" + it.method;
  a.session = id_;
  a.rater = rater;
  a.item = item;
  for (std::size_t k : by_input_.at(it.input)) {
    a.block.push_back(inventory_->items[k].method);
    if (rated(rater, k)) ++a.block_done;
  }
  return a;
}

std::optional<Assignment> RatingSession::next(const std::string& rater) {
  if (rater.empty()) throw ValidationError("rater id is empty");
  if (auto o = outstanding_.find(rater); o != outstanding_.end()) {
    if (!rated(rater, o->second)) return make_assignment(rater, o->second);
    outstanding_.erase(o);
  }

  std::optional<std::size_t> pick;
  // Finish an input this rater has already opened.
  for (const auto& input : inputs_) {
    const auto s = started_.find(input);
    if (s == started_.end() || !s->second.count(rater)) continue;
    for (std::size_t k : by_input_.at(input)) {
      if (!rated(rater, k)) {
        pick = k;
        break;
      }
    }
    if (pick) break;
  }
  if (!pick) {
    std::size_t best_cover = 0;
    for (const auto& input : inputs_) {
      const auto& raters = started_[input];
      if (raters.count(rater) || raters.size() >= static_cast<std::size_t>(redundancy_)) continue;
      if (!pick || raters.size() < best_cover) {
        pick = by_input_.at(input).front();
        best_cover = raters.size();
      }
    }
  }
  if (!pick) return std::nullopt;

  started_[inventory_->items[*pick].input].insert(rater);
  outstanding_[rater] = *pick;
  Assignment a = make_assignment(rater, *pick);
  issued_[a.id] = {rater, *pick};
  return a;
}

RatingRecord RatingSession::prepare(const json& body, std::int64_t ts) const {
  if (!body.is_object()) throw RatingRejected(400, "malformed", "body must be a JSON object");
  const auto field = [&](const char* name) -> const json& {
    if (!body.contains(name)) throw RatingRejected(400, "malformed", std::string("missing field '") + name + "'");
    return body.at(name);
  };
  const json& id = field("assignment_id");
  const json& sc = field("sc");
  const json& pq = field("pq");
  if (!id.is_string()) throw RatingRejected(400, "malformed", "assignment_id must be a string");
  if (!sc.is_array() || sc.empty()) throw RatingRejected(400, "malformed", "sc must be a non-empty array");
  for (const auto& v : sc)
    if (!v.is_number()) throw RatingRejected(400, "malformed", "sc entries must be numbers");
  if (!pq.is_number()) throw RatingRejected(400, "malformed", "pq must be a number");

  const auto issued = issued_.find(id.get<std::string>());
  if (issued == issued_.end()) throw RatingRejected(400, "unknown_assignment", "assignment was not issued");
  const auto& [rater, item] = issued->second;
  if (body.contains("rater") && body.at("rater") != rater) {
    throw RatingRejected(400, "malformed", "rater does not match the assignment");
  }
  const auto& it = inventory_->items[item];
  if (rated(rater, item)) {
    throw RatingRejected(409, "duplicate", rater + " already rated " + it.input + "/" + it.method);
  }
  if (sc.size() != it.conditions.size()) {
    throw RatingRejected(400, "condition_count",
                         "expected " + std::to_string(it.conditions.size()) + " SC values, got " +
                             std::to_string(sc.size()));
  }
  RatingRecord r;
  r.session = id_;
  r.rater = rater;
  r.sample = it.input;
  r.method = it.method;
  r.task = it.task;
  r.sc = sc.get<std::vector<double>>();
  r.pq = pq.get<double>();
  r.ts = ts;
  for (double v : r.sc)
    if (!on_rating_scale(v)) throw RatingRejected(422, "off_scale", "SC values must be 0, 0.5 or 1");
  if (!on_rating_scale(r.pq)) throw RatingRejected(422, "off_scale", "PQ must be 0, 0.5 or 1");
  return r;
}

std::size_t RatingSession::lookup(const std::string& input, const std::string& method) const {
  const auto list = by_input_.find(input);
  if (list != by_input_.end())
    for (std::size_t k : list->second)
      if (inventory_->items[k].method == method) return k;
  throw ValidationError("rating names " + input + "/" + method + ", which is not in the inventory");
}

void RatingSession::mark(const std::string& rater, std::size_t item) {
  if (!rated_.insert({rater, item}).second) {
    throw ValidationError("duplicate rating by " + rater + " for " + inventory_->items[item].input + "/" +
                          inventory_->items[item].method);
  }
  started_[inventory_->items[item].input].insert(rater);
}

void RatingSession::commit(const RatingRecord& record) { mark(record.rater, lookup(record.sample, record.method)); }

void RatingSession::restore(const RatingRecord& record) { commit(record); }

}  // namespace instructdiff
