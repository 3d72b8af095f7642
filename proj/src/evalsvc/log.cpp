#include <unistd.h>

#include <fstream>

#include "instructdiff/error.hpp"
#include "instructdiff/evalsvc.hpp"

namespace instructdiff {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

RatingsLog::RatingsLog(fs::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  if (fs::exists(path_)) {
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) ++lines_;
  }
  file_ = std::fopen(path_.c_str(), "ab");
  if (!file_) throw IoError("cannot open ratings log " + path_.string());
}

RatingsLog::~RatingsLog() {
  if (file_) std::fclose(file_);
}

std::size_t RatingsLog::append(const RatingRecord& record) {
  record.validate();
  const std::string line = record.to_json().dump() + "\n";
  std::lock_guard lock(mutex_);
  if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0 ||
      ::fsync(::fileno(file_)) != 0) {
    throw IoError("failed to append to " + path_.string());
  }
  return ++lines_;
}

LogContents read_ratings_log(const fs::path& path, bool lenient) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open ratings log " + path.string());
  LogContents out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      out.records.push_back(RatingRecord::from_json(json::parse(line)));
    } catch (const std::exception& e) {
      if (!lenient) throw ValidationError(path.string() + ":" + std::to_string(number) + ": " + e.what());
      out.errors.push_back({number, e.what()});
    }
  }
  return out;
}

void write_snapshot(const fs::path& path, const std::vector<RatingRecord>& records, int r_min) {
  ordered_json j;
  j["format"] = "instructdiff-ratings-snapshot";
  j["records"] = records.size();
  j["ratings"] = ordered_json::array();
  for (const auto& r : records) j["ratings"].push_back(r.to_json());
  if (!records.empty()) j["report"] = aggregate(records, r_min).to_json();
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<RatingRecord> read_snapshot(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open snapshot " + path.string());
  std::vector<RatingRecord> out;
  try {
    const json j = json::parse(in);
    for (const auto& r : j.at("ratings")) out.push_back(RatingRecord::from_json(r));
    if (j.at("records").get<std::size_t>() != out.size()) throw ValidationError("record count mismatch");
  } catch (const json::exception& e) {
    throw ValidationError("snapshot " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace instructdiff
