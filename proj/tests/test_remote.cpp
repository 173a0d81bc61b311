#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "pscdet/remote.hpp"

using namespace pscdet;

namespace {

std::string envelope(const std::string& content) {
  nlohmann::json j = {
      {"choices", {{{"message", {{"content", content}, {"role", "assistant"}}}}}}};
  return j.dump();
}

// In-process chat-completions fixture. The responder is called with the
// 0-based request index and the request body.
class MockServer {
 public:
  explicit MockServer(const std::string& prefix = "") {
    server_.Post(prefix + "/chat/completions",
                 [this](const httplib::Request& req, httplib::Response& res) {
                   int call;
                   std::string body;
                   {
                     std::lock_guard<std::mutex> lock(mu_);
                     call = calls_++;
                     bodies_.push_back(req.body);
                     if (req.has_header("Authorization")) {
                       auth_headers_.push_back(req.get_header_value("Authorization"));
                     }
                   }
                   res.set_content(responder(call, req.body), "application/json");
                 });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string base_url(const std::string& prefix = "") const {
    return "http://127.0.0.1:" + std::to_string(port_) + prefix;
  }

  int calls() {
    std::lock_guard<std::mutex> lock(mu_);
    return calls_;
  }
  std::vector<std::string> bodies() {
    std::lock_guard<std::mutex> lock(mu_);
    return bodies_;
  }
  std::vector<std::string> auth_headers() {
    std::lock_guard<std::mutex> lock(mu_);
    return auth_headers_;
  }

  std::function<std::string(int, const std::string&)> responder =
      [](int, const std::string&) { return envelope("[]"); };

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::mutex mu_;
  int calls_ = 0;
  std::vector<std::string> bodies_;
  std::vector<std::string> auth_headers_;
};

RankGroup group_of(std::size_t n, double feature = 0.25) {
  RankGroup g;
  for (std::size_t i = 0; i < n; ++i) {
    RankMember m;
    m.id = "m" + std::to_string(i);
    m.features = {feature, -feature};
    m.model_score = 0.5;
    g.members.push_back(std::move(m));
  }
  return g;
}

RemoteBackendConfig config_for(const MockServer& server,
                               const std::string& prefix = "") {
  RemoteBackendConfig cfg;
  cfg.base_url = server.base_url(prefix);
  cfg.model = "ranker-v1";
  cfg.timeout_seconds = 5.0;
  cfg.retry = 2;
  return cfg;
}

}  // namespace

TEST(RemoteBackend, FixtureScoresComeBack) {
  MockServer server;
  server.responder = [](int, const std::string&) {
    return envelope("[0.9, 0.1, 0.4]");
  };
  RankResult r = rank_backend_remote(config_for(server), group_of(3));
  EXPECT_EQ(r.backend, "remote");
  ASSERT_EQ(r.scores.size(), 3u);
  EXPECT_DOUBLE_EQ(r.scores[0], 0.9);
  EXPECT_DOUBLE_EQ(r.scores[1], 0.1);
  EXPECT_DOUBLE_EQ(r.scores[2], 0.4);
  EXPECT_FALSE(r.raw_response.empty());
  EXPECT_EQ(server.calls(), 1);
}

TEST(RemoteBackend, RequestBodyCarriesPromptAndModel) {
  MockServer server;
  server.responder = [](int, const std::string&) { return envelope("[0.5]"); };
  RankGroup g = group_of(1);
  rank_backend_remote(config_for(server), g);
  auto bodies = server.bodies();
  ASSERT_EQ(bodies.size(), 1u);
  auto j = nlohmann::json::parse(bodies[0]);
  EXPECT_EQ(j.at("model"), "ranker-v1");
  EXPECT_EQ(j.at("messages").at(0).at("role"), "user");
  EXPECT_EQ(j.at("messages").at(0).at("content"), serialize_prompt(g));
}

TEST(RemoteBackend, IdenticalGroupsGiveByteIdenticalBodies) {
  MockServer server;
  server.responder = [](int, const std::string&) {
    return envelope("[0.5, 0.5]");
  };
  RankGroup g = group_of(2, 1.0 / 3.0);
  rank_backend_remote(config_for(server), g);
  rank_backend_remote(config_for(server), g);
  auto bodies = server.bodies();
  ASSERT_EQ(bodies.size(), 2u);
  EXPECT_EQ(bodies[0], bodies[1]);
}

TEST(RemoteBackend, RetriesThroughGarbageThenSucceeds) {
  MockServer server;
  server.responder = [](int call, const std::string&) {
    if (call < 2) return envelope("beep boop, no numbers here");
    return envelope("[0.7, 0.2]");
  };
  RemoteBackendConfig cfg = config_for(server);
  cfg.retry = 2;
  RankResult r = rank_backend_remote(cfg, group_of(2));
  EXPECT_EQ(server.calls(), 3);
  EXPECT_DOUBLE_EQ(r.scores[0], 0.7);
}

TEST(RemoteBackend, WrongLengthExhaustsRetries) {
  MockServer server;
  server.responder = [](int, const std::string&) {
    return envelope("[0.1, 0.2, 0.3]");  // 3 scores for a 4-group
  };
  RemoteBackendConfig cfg = config_for(server);
  cfg.retry = 2;
  try {
    rank_backend_remote(cfg, group_of(4));
    FAIL() << "expected BackendError";
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("3 attempts"), std::string::npos);
  }
  EXPECT_EQ(server.calls(), 3);
}

TEST(RemoteBackend, HttpErrorStatusIsRetriedThenFails) {
  MockServer server;
  server.responder = [](int, const std::string&) { return std::string(); };
  // Responder contract can't set status; use a dedicated server instead.
  httplib::Server raw;
  raw.Post("/chat/completions",
           [](const httplib::Request&, httplib::Response& res) {
             res.status = 500;
             res.set_content("overloaded", "text/plain");
           });
  const int port = raw.bind_to_any_port("127.0.0.1");
  std::thread th([&raw] { raw.listen_after_bind(); });
  raw.wait_until_ready();

  RemoteBackendConfig cfg;
  cfg.base_url = "http://127.0.0.1:" + std::to_string(port);
  cfg.retry = 1;
  cfg.timeout_seconds = 5.0;
  EXPECT_THROW(rank_backend_remote(cfg, group_of(2)), BackendError);
  raw.stop();
  th.join();
}

TEST(RemoteBackend, TransportFailureIsError) {
  RemoteBackendConfig cfg;
  cfg.base_url = "http://127.0.0.1:1";  // nothing listens there
  cfg.retry = 1;
  cfg.timeout_seconds = 0.5;
  EXPECT_THROW(rank_backend_remote(cfg, group_of(2)), BackendError);
}

TEST(RemoteBackend, BearerTokenFromEnvironment) {
  MockServer server;
  server.responder = [](int, const std::string&) { return envelope("[0.5]"); };
  ::setenv("PSCDET_TEST_TOKEN", "sekrit", 1);
  RemoteBackendConfig cfg = config_for(server);
  cfg.auth_env = "PSCDET_TEST_TOKEN";
  rank_backend_remote(cfg, group_of(1));
  auto auth = server.auth_headers();
  ASSERT_EQ(auth.size(), 1u);
  EXPECT_EQ(auth[0], "Bearer sekrit");
  ::unsetenv("PSCDET_TEST_TOKEN");
}

TEST(RemoteBackend, MissingAuthEnvIsError) {
  MockServer server;
  RemoteBackendConfig cfg = config_for(server);
  cfg.auth_env = "PSCDET_DEFINITELY_UNSET_TOKEN";
  EXPECT_THROW(rank_backend_remote(cfg, group_of(1)), BackendError);
  EXPECT_EQ(server.calls(), 0);
}

TEST(RemoteBackend, PathPrefixIsHonored) {
  MockServer server("/v1");
  server.responder = [](int, const std::string&) { return envelope("[0.5]"); };
  RankResult r = rank_backend_remote(config_for(server, "/v1"), group_of(1));
  EXPECT_DOUBLE_EQ(r.scores[0], 0.5);
}

TEST(RemoteBackend, ConcurrentGroupsKeepInputOrder) {
  MockServer server;
  // score every member with (member count)/10, read back from the prompt
  server.responder = [](int, const std::string& body) {
    const auto j = nlohmann::json::parse(body);
    const std::string prompt = j.at("messages").at(0).at("content");
    std::size_t members = 0;
    for (char c : prompt) members += c == '\n' ? 1 : 0;
    members -= 1;  // instruction line
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t i = 0; i < members; ++i) {
      arr.push_back(static_cast<double>(members) / 10.0);
    }
    return envelope(arr.dump());
  };
  std::vector<RankGroup> groups;
  for (std::size_t n = 1; n <= 5; ++n) groups.push_back(group_of(n));
  RemoteBackendConfig cfg = config_for(server);
  cfg.max_in_flight = 3;
  auto results = rank_groups_remote(cfg, groups);
  ASSERT_EQ(results.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    ASSERT_EQ(results[i].scores.size(), i + 1);
    EXPECT_DOUBLE_EQ(results[i].scores[0],
                     static_cast<double>(i + 1) / 10.0);
  }
  EXPECT_EQ(server.calls(), 5);
}

TEST(RemoteConfig, JsonParsingAndValidation) {
  nlohmann::json j = {{"base_url", "http://localhost:9"},
                      {"model", "m"},
                      {"auth_env", "TOKEN"},
                      {"timeout_seconds", 2.5},
                      {"max_in_flight", 2},
                      {"retry", 1}};
  RemoteBackendConfig cfg = remote_config_from_json(j);
  EXPECT_EQ(cfg.base_url, "http://localhost:9");
  EXPECT_EQ(cfg.max_in_flight, 2);

  j["timeout_seconds"] = 0.0;
  EXPECT_THROW(remote_config_from_json(j), DataError);
  j.erase("base_url");
  j["timeout_seconds"] = 1.0;
  EXPECT_THROW(remote_config_from_json(j), DataError);
}
