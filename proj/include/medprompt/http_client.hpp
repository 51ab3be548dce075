#pragma once

#include <chrono>
#include <string>

#include "json.hpp"

namespace medprompt {

// POSTs a JSON body to an "http://host[:port]/path" endpoint and parses the
// JSON reply. Connection failures and non-2xx replies are retried `retries`
// times, then reported as backend-unreachable.
nlohmann::json post_json(const std::string& endpoint, const nlohmann::json& body,
                         std::chrono::milliseconds timeout, int retries);

}  // namespace medprompt
