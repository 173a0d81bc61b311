#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "pscdet/error.hpp"
#include "pscdet/grouprank.hpp"

namespace pscdet {

// A chat-completions endpoint standing in for the fine-tuned ranking model.
struct RemoteBackendConfig {
  std::string base_url;   // e.g. http://127.0.0.1:8080 or http://host/v1
  std::string model;
  std::string auth_env;   // name of the env var holding the bearer token
  double timeout_seconds = 30.0;
  int max_in_flight = 4;
  int retry = 2;

  void validate() const {
    if (base_url.empty()) throw DataError("remote config: base_url required");
    if (!(timeout_seconds > 0.0))
      throw DataError("remote config: timeout must be > 0");
    if (max_in_flight < 1)
      throw DataError("remote config: max_in_flight must be >= 1");
    if (retry < 0) throw DataError("remote config: retry must be >= 0");
  }
};

inline RemoteBackendConfig remote_config_from_json(const nlohmann::json& j) {
  RemoteBackendConfig c;
  try {
    c.base_url = j.at("base_url").get<std::string>();
    c.model = j.value("model", std::string());
    c.auth_env = j.value("auth_env", std::string());
    c.timeout_seconds = j.value("timeout_seconds", 30.0);
    c.max_in_flight = j.value("max_in_flight", 4);
    c.retry = j.value("retry", 2);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad remote config JSON: ") + e.what());
  }
  c.validate();
  return c;
}

// Sorted-key dump keeps the request bytes identical for identical groups.
inline std::string chat_request_body(const std::string& model,
                                     const std::string& prompt) {
  nlohmann::json body = {
      {"model", model},
      {"messages",
       nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
  return body.dump();
}

namespace detail {

struct SplitUrl {
  std::string origin;       // scheme://host[:port]
  std::string path_prefix;  // possibly empty, no trailing slash
};

inline SplitUrl split_base_url(const std::string& base_url) {
  SplitUrl s;
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw DataError("remote config: base_url must include a scheme");
  }
  const auto path_start = base_url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) {
    s.origin = base_url;
  } else {
    s.origin = base_url.substr(0, path_start);
    s.path_prefix = base_url.substr(path_start);
  }
  while (!s.path_prefix.empty() && s.path_prefix.back() == '/') {
    s.path_prefix.pop_back();
  }
  return s;
}

inline void set_timeouts(httplib::Client& cli, double seconds) {
  const auto whole = static_cast<time_t>(seconds);
  const auto usec =
      static_cast<time_t>((seconds - static_cast<double>(whole)) * 1e6);
  cli.set_connection_timeout(whole, usec);
  cli.set_read_timeout(whole, usec);
  cli.set_write_timeout(whole, usec);
}

}  // namespace detail

// Serialize -> POST {base}/chat/completions -> parse, with up to cfg.retry
// retries on transport or parse failure.
inline RankResult rank_backend_remote(const RemoteBackendConfig& cfg,
                                      const RankGroup& group) {
  cfg.validate();
  const std::string prompt = serialize_prompt(group);
  const std::string body = chat_request_body(cfg.model, prompt);
  const auto url = detail::split_base_url(cfg.base_url);
  const std::string path = url.path_prefix + "/chat/completions";

  httplib::Headers headers;
  if (!cfg.auth_env.empty()) {
    const char* token = std::getenv(cfg.auth_env.c_str());
    if (token == nullptr) {
      throw BackendError("auth env var '" + cfg.auth_env + "' is not set");
    }
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }

  std::string last_error;
  std::string last_raw;
  const int attempts = cfg.retry + 1;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    httplib::Client cli(url.origin);
    detail::set_timeouts(cli, cfg.timeout_seconds);
    auto res = cli.Post(path, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    last_raw = res->body;
    if (res->status != 200) {
      last_error = "HTTP status " + std::to_string(res->status);
      continue;
    }
    std::string content;
    try {
      const auto envelope = nlohmann::json::parse(res->body);
      content = envelope.at("choices").at(0).at("message").at("content")
                    .get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      last_error = std::string("bad response envelope: ") + e.what();
      continue;
    }
    try {
      ParsedScores parsed = parse_response(content, group.members.size());
      RankResult result;
      result.scores = std::move(parsed.scores);
      result.backend = "remote";
      result.raw_response = res->body;
      return result;
    } catch (const ParseError& e) {
      last_error = e.what();
      continue;
    }
  }
  throw BackendError("rank backend failed after " + std::to_string(attempts) +
                     " attempts; last error: " + last_error +
                     (last_raw.empty() ? "" : "; last response: " + last_raw));
}

// Ranks groups with up to cfg.max_in_flight concurrent requests; results come
// back in input order. Retries stay per-group.
inline std::vector<RankResult> rank_groups_remote(
    const RemoteBackendConfig& cfg, const std::vector<RankGroup>& groups) {
  cfg.validate();
  std::vector<RankResult> results(groups.size());
  std::vector<std::exception_ptr> errors(groups.size());
  std::atomic<std::size_t> next{0};
  const std::size_t workers = std::min<std::size_t>(
      static_cast<std::size_t>(cfg.max_in_flight), std::max<std::size_t>(groups.size(), 1));
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= groups.size()) return;
        try {
          results[i] = rank_backend_remote(cfg, groups[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return results;
}

}  // namespace pscdet
