#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnlab/snapshot.hpp"

namespace attnlab {

struct Response {
  int status = 200;
  std::string body;
};

using Query = std::map<std::string, std::string>;

struct ServiceOptions {
  std::size_t workers = 2;
  /// Default spacing of test origins for enforcement jobs.
  std::size_t enforce_stride = 4;
};

/// Read-only API over one loaded snapshot plus enforcement jobs. Every body
/// is JSON and carries `schema_version`; errors are
/// {"error": {"code", "message"}} with status 400 or 404.
class SnapshotService {
 public:
  explicit SnapshotService(Snapshot snapshot, ServiceOptions options = {});
  ~SnapshotService();
  SnapshotService(const SnapshotService&) = delete;
  SnapshotService& operator=(const SnapshotService&) = delete;

  Response handle(const std::string& method, const std::string& path, const Query& query = {},
                  const std::string& body = {});

  /// Blocks until the job leaves the queue and finishes; false for an unknown id.
  bool wait(const std::string& job);

  const Snapshot& snapshot() const { return snap_; }

 private:
  struct Job {
    std::string id;
    std::string status = "queued";
    nlohmann::json request;
    nlohmann::json report;
    std::string error;
  };
  struct AttentionEntry {
    std::shared_ptr<const AttentionBundle> bundle;
    STMatrix st;
  };

  Response get_snapshot() const;
  Response get_roads() const;
  Response get_trend(const RoadId& id) const;
  Response get_series(const RoadId& id, const Query& q) const;
  Response get_attention(const RoadId& id, const Query& q);
  Response get_causality(const RoadId& id) const;
  Response get_clusters() const;
  Response get_headclusters(const Query& q) const;
  Response post_enforce(const std::string& body);
  Response get_job(const std::string& id);

  std::shared_ptr<const AttentionEntry> attention(std::size_t road, std::size_t origin, int horizon);
  void run_job(const std::shared_ptr<Job>& job);
  void worker();

  Snapshot snap_;
  ServiceOptions options_;
  std::vector<std::size_t> test_origins_;

  std::mutex cache_mu_;
  std::map<std::tuple<std::size_t, std::size_t, int>, std::shared_ptr<const AttentionEntry>> cache_;

  std::mutex jobs_mu_;
  std::condition_variable jobs_cv_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::deque<std::shared_ptr<Job>> queue_;
  std::size_t next_job_ = 1;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

/// HTTP front end for a service.
class HttpServer {
 public:
  explicit HttpServer(SnapshotService& service);
  ~HttpServer();
  /// Binds and returns the port (port 0 picks a free one). Throws Error.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called.
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace attnlab
