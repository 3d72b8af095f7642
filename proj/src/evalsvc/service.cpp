#include <chrono>
#include <httplib.h>

#include "instructdiff/error.hpp"
#include "instructdiff/eval_service.hpp"

namespace instructdiff {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

void reply(httplib::Response& res, int status, const ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void reject(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  reply(res, status, ordered_json{{"ok", false}, {"error", code}, {"message", message}});
}

}  // namespace

struct EvalService::Impl {
  ServiceConfig config;
  RatingsLog log;
  httplib::Server server;

  std::mutex sessions_mutex;
  struct Guarded {
    std::mutex mutex;
    std::unique_ptr<RatingSession> session;
  };
  std::map<std::string, std::unique_ptr<Guarded>> sessions;

  // Every accepted record in log order; the report reads a copy.
  std::mutex records_mutex;
  std::vector<RatingRecord> records;

  explicit Impl(ServiceConfig c) : config(std::move(c)), log(config.log_path) {
    config.inventory.validate();
    if (std::filesystem::exists(config.log_path) && std::filesystem::file_size(config.log_path) > 0) {
      for (auto& r : read_ratings_log(config.log_path).records) {
        session(r.session).session->restore(r);
        records.push_back(std::move(r));
      }
    }
    routes();
  }

  Guarded& session(const std::string& id) {
    std::lock_guard lock(sessions_mutex);
    auto& slot = sessions[id];
    if (!slot) {
      slot = std::make_unique<Guarded>();
      slot->session = std::make_unique<RatingSession>(id, config.inventory, config.redundancy);
    }
    return *slot;
  }

  void routes() {
    server.Get(R"(/api/session/([^/]+)/next)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string rater = req.get_param_value("rater");
      if (rater.empty()) return reject(res, 400, "malformed", "query parameter 'rater' is required");
      auto& g = session(req.matches[1]);
      std::lock_guard lock(g.mutex);
      const auto a = g.session->next(rater);
      if (!a) return reject(res, 404, "exhausted", "no assignments left for " + rater);
      reply(res, 200, a->to_json(config.inventory));
    });

    server.Post(R"(/api/session/([^/]+)/ratings)", [this](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error& e) {
        return reject(res, 400, "malformed", e.what());
      }
      auto& g = session(req.matches[1]);
      std::lock_guard lock(g.mutex);
      RatingRecord record;
      try {
        record = g.session->prepare(body, now_ms());
      } catch (const RatingRejected& e) {
        return reject(res, e.status(), e.code(), e.what());
      }
      const std::size_t line = log.append(record);
      g.session->commit(record);
      {
        std::lock_guard rl(records_mutex);
        records.push_back(record);
        if (!config.snapshot_path.empty() && config.snapshot_every && records.size() % config.snapshot_every == 0) {
          write_snapshot(config.snapshot_path, records, config.r_min);
        }
      }
      reply(res, 200, ordered_json{{"ok", true}, {"record_id", "r" + std::to_string(line)}});
    });

    server.Get("/api/report", [this](const httplib::Request& req, httplib::Response& res) {
      std::vector<RatingRecord> copy;
      {
        std::lock_guard rl(records_mutex);
        copy = records;
      }
      std::optional<std::string> task;
      if (req.has_param("task")) task = req.get_param_value("task");
      try {
        reply(res, 200, aggregate(copy, config.r_min, task).to_json());
      } catch (const ValidationError& e) {
        reject(res, 404, "empty", e.what());
      }
    });

    if (!config.static_dir.empty() && !server.set_mount_point("/static", config.static_dir.string())) {
      throw IoError("static directory " + config.static_dir.string() + " does not exist");
    }
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        reject(res, 500, "internal", e.what());
      }
    });
  }
};

EvalService::EvalService(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

EvalService::~EvalService() {
  stop();
  if (!impl_->config.snapshot_path.empty() && !impl_->records.empty()) {
    try {
      write_snapshot(impl_->config.snapshot_path, impl_->records, impl_->config.r_min);
    } catch (...) {
    }
  }
}

int EvalService::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw IoError("cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void EvalService::run() { impl_->server.listen_after_bind(); }

void EvalService::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

}  // namespace instructdiff
