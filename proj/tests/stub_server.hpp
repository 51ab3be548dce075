#pragma once

#include <functional>
#include <string>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace testing {

// Local JSON endpoint on a free port; `reply` maps the request body to a
// (status, body) pair.
class StubServer {
 public:
  using Reply = std::function<std::pair<int, nlohmann::json>(const nlohmann::json&)>;

  explicit StubServer(Reply reply) : reply_(std::move(reply)) {
    server_.Post(".*", [this](const httplib::Request& req, httplib::Response& res) {
      ++calls_;
      auto [status, body] = reply_(nlohmann::json::parse(req.body));
      res.status = status;
      res.set_content(body.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  std::string url(const std::string& path = "/") const { return "http://127.0.0.1:" + std::to_string(port_) + path; }
  int calls() const { return calls_; }

 private:
  Reply reply_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> calls_{0};
};

}  // namespace testing
