#include <thread>

#include "httplib.h"
#include "medprompt/error.hpp"
#include "medprompt/http_client.hpp"
#include "medprompt/mlm.hpp"
#include "medprompt/vqa.hpp"

namespace medprompt {

using nlohmann::json;

json post_json(const std::string& endpoint, const json& body, std::chrono::milliseconds timeout, int retries) {
  const auto scheme = endpoint.find("://");
  if (scheme == std::string::npos) throw Error(ErrorCode::kConfigInvalid, "endpoint needs a scheme: " + endpoint);
  const auto slash = endpoint.find('/', scheme + 3);
  const std::string base = endpoint.substr(0, slash);
  const std::string path = slash == std::string::npos ? "/" : endpoint.substr(slash);

  httplib::Client client(base);
  const auto secs = timeout.count() / 1000;
  const auto usecs = (timeout.count() % 1000) * 1000;
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);

  std::string last = "no attempt";
  for (int attempt = 0; attempt <= std::max(0, retries); ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(50 * attempt));
    auto res = client.Post(path, body.dump(), "application/json");
    if (!res) {
      last = httplib::to_string(res.error());
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      last = "HTTP " + std::to_string(res->status);
      if (res->status >= 400 && res->status < 500) break;
      continue;
    }
    try {
      return json::parse(res->body);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kBackendUnreachable, endpoint + " returned malformed JSON: " + e.what());
    }
  }
  throw Error(ErrorCode::kBackendUnreachable, endpoint + ": " + last);
}

HttpMaskedLm::HttpMaskedLm(std::string endpoint, std::chrono::milliseconds timeout, int retries, std::string name)
    : endpoint_(std::move(endpoint)), timeout_(timeout), retries_(retries), name_(std::move(name)) {}

VocabDistribution HttpMaskedLm::fill_mask(const std::string& text, std::size_t top_n) const {
  const json reply = post_json(endpoint_, {{"text", text}, {"top_n", top_n}}, timeout_, retries_);
  std::vector<VocabDistribution::Entry> entries;
  try {
    for (const auto& p : reply.at("predictions"))
      entries.push_back({p.at("token").get<std::string>(), p.at("probability").get<double>()});
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBackendUnreachable, endpoint_ + " reply lacks predictions: " + e.what());
  }
  if (entries.empty()) throw Error(ErrorCode::kEmptyDistribution, "no predictions for '" + text + "'");
  auto dist = VocabDistribution::from_scores(std::move(entries), false).entries();
  if (dist.size() > top_n) dist.resize(top_n);
  return VocabDistribution(std::move(dist));
}

HttpVqa::HttpVqa(std::string endpoint, std::chrono::milliseconds timeout, int retries, std::string name)
    : endpoint_(std::move(endpoint)), timeout_(timeout), retries_(retries), name_(std::move(name)) {}

std::string HttpVqa::answer(const ImageRef& image, const std::string& question) const {
  const json reply =
      post_json(endpoint_, {{"image_id", image.id}, {"image_uri", image.uri}, {"question", question}}, timeout_, retries_);
  if (!reply.contains("answer") || !reply.at("answer").is_string())
    throw Error(ErrorCode::kBackendUnreachable, endpoint_ + " reply lacks an answer");
  return reply.at("answer").get<std::string>();
}

}  // namespace medprompt
