#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "instructdiff/evalsvc.hpp"

namespace instructdiff {

struct ServiceConfig {
  Inventory inventory;
  std::filesystem::path log_path;
  std::filesystem::path snapshot_path;  // empty: no snapshots
  std::filesystem::path static_dir;     // empty: no /static mount
  int redundancy = 3;
  int r_min = 3;
  std::size_t snapshot_every = 50;
};

// HTTP front end over RatingSession + RatingsLog:
//   GET  /api/session/{id}/next?rater={rid}
//   POST /api/session/{id}/ratings   {assignment_id, sc: [..], pq}
//   GET  /api/report[?task={t}]
//   GET  /static/*
// An existing log is replayed at start-up, so sessions resume where they
// stopped and the report covers every logged rating.
class EvalService {
 public:
  explicit EvalService(ServiceConfig config);
  ~EvalService();
  EvalService(const EvalService&) = delete;
  EvalService& operator=(const EvalService&) = delete;

  // Port 0 picks a free port. Throws IoError when the port is taken.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace instructdiff
