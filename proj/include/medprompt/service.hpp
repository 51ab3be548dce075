#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "medprompt/experiment.hpp"

namespace medprompt {

struct ServiceResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";

  nlohmann::json json() const { return nlohmann::json::parse(body); }
};

// Data root layout:
//   datasets/<name>/manifest.json (+ splits in canonical format)
//   backends.json  {"mlm", "vqa", "encoder", "proposals", "prompts", "template"}
//   runs/<digest>/ run artifacts, sweeps/<id>/ sweep tables
class PromptService {
 public:
  explicit PromptService(std::filesystem::path data_root);

  // Transport-independent dispatch; every HTTP route goes through here.
  ServiceResponse handle(const std::string& method, const std::string& path,
                         const std::map<std::string, std::string>& query, const std::string& body) const;

  const std::filesystem::path& root() const { return root_; }

 private:
  struct Dataset {
    DatasetManifest manifest;
    LoadedDataset data;
  };
  struct ImageEntry {
    std::string dataset;
    std::string split;
    ImageRef image;
  };

  nlohmann::json compose(const nlohmann::json& req) const;
  nlohmann::json auto_prompts(const nlohmann::json& req) const;
  nlohmann::json ground(const nlohmann::json& req) const;
  nlohmann::json datasets() const;
  nlohmann::json dataset_images(const std::string& name, const std::map<std::string, std::string>& query) const;
  nlohmann::json runs() const;
  nlohmann::json create_sweep(const nlohmann::json& req) const;
  nlohmann::json get_sweep(const std::string& id) const;
  ServiceResponse image_bytes(const std::string& id) const;

  const ImageEntry& image(const std::string& id) const;
  const Dataset& dataset(const std::string& name) const;
  PromptRequest base_request(const nlohmann::json& req) const;

  std::filesystem::path root_;
  std::map<std::string, Dataset> datasets_;
  std::map<std::string, ImageEntry> images_;
  std::optional<PromptConfig> prompt_config_;
  std::string template_name_ = "default";
  std::unique_ptr<MaskedLmBackend> mlm_;
  std::unique_ptr<VqaBackend> vqa_;
  std::unique_ptr<Grounder> grounder_;
  mutable std::mutex sweep_mutex_;
};

// Runs the HTTP API on host:port until stop() (or forever from serve()).
class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<const PromptService> service);
  ~HttpServer();

  // Binds (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  void listen();  // blocks
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace medprompt
