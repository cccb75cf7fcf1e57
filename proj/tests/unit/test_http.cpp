// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "mcbm/error.hpp"
#include "mcbm/mllm.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <atomic>
#include <json.hpp>
#include <thread>

using namespace mcbm;
using nlohmann::json;

namespace {

struct LocalServer {
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<int> chat_calls{0};
  std::atomic<int> failures_left{0};
  std::string last_auth;
  std::string last_body;
  std::string last_path;

  LocalServer() {
    server.Post(R"(/v1/chat/completions)", [this](const httplib::Request& req, httplib::Response& res) {
      ++chat_calls;
      last_auth = req.get_header_value("Authorization");
      last_body = req.body;
      last_path = req.path;
      if (failures_left > 0) {
        --failures_left;
        res.status = 429;
        return;
      }
      res.set_content(json{{"choices", {{{"message", {{"content", "1: yes"}}}}}}}.dump(),
                      "application/json");
    });
    server.Post("/v1/embeddings", [this](const httplib::Request& req, httplib::Response& res) {
      last_body = req.body;
      const json in = json::parse(req.body);
      json data = json::array();
      for (size_t i = 0; i < in["input"].size(); ++i) {
        data.push_back({{"embedding", {1.0, static_cast<double>(i)}}});
      }
      res.set_content(json{{"data", data}}.dump(), "application/json");
    });
    server.Post("/v1/bad/chat/completions", [](const httplib::Request&, httplib::Response& res) {
      res.status = 400;
      res.set_content("bad request", "text/plain");
    });
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LocalServer() {
    server.stop();
    thread.join();
  }
  HttpConfig config(const std::string& base = "/v1") const {
    HttpConfig c;
    c.endpoint = "http://127.0.0.1:" + std::to_string(port) + base;
    c.api_key = "secret-key";
    c.timeout_seconds = 5;
    c.transport_retries = 1;
    return c;
  }
};

ChatRequest simple_request() {
  ChatRequest r;
  r.model = "m";
  r.parts = {ChatPart::Text("hi"), ChatPart::Png("xy")};
  return r;
}

}  // namespace

TEST_SUITE("http") {
  TEST_CASE("chat posts the payload with a bearer credential") {
    LocalServer srv;
    auto backend = make_http_backend(srv.config());
    const ChatRequest r = simple_request();
    CHECK(backend->chat(r) == "1: yes");
    CHECK(srv.last_path == "/v1/chat/completions");
    CHECK(srv.last_auth == "Bearer secret-key");
    CHECK(srv.last_body == chat_payload(r));
  }

  TEST_CASE("embeddings come back one per input") {
    LocalServer srv;
    auto backend = make_http_backend(srv.config());
    const auto v = backend->embed("e", {"a", "b", "c"});
    REQUIRE(v.size() == 3);
    CHECK(v[2][1] == 2.0);
    CHECK(srv.last_body == embedding_payload("e", {"a", "b", "c"}));
  }

  TEST_CASE("rate limiting is retried") {
    LocalServer srv;
    srv.failures_left = 1;
    auto backend = make_http_backend(srv.config());
    CHECK(backend->chat(simple_request()) == "1: yes");
    CHECK(srv.chat_calls == 2);
  }

  TEST_CASE("persistent failures surface as service errors") {
    LocalServer srv;
    srv.failures_left = 5;
    auto backend = make_http_backend(srv.config());
    CHECK_THROWS_AS(backend->chat(simple_request()), ServiceError);
    CHECK(srv.chat_calls == 2);
    auto bad = make_http_backend(srv.config("/v1/bad"));
    CHECK_THROWS_AS(bad->chat(simple_request()), ServiceError);
    HttpConfig dead = srv.config();
    dead.endpoint = "http://127.0.0.1:1/v1";
    dead.transport_retries = 0;
    CHECK_THROWS_AS(make_http_backend(dead)->chat(simple_request()), ServiceError);
  }

  TEST_CASE("configuration is validated") {
    HttpConfig c;
    CHECK_THROWS_AS(make_http_backend(c), ValidationError);
    c.endpoint = "http://localhost:9";
    CHECK_THROWS_AS(make_http_backend(c), ValidationError);
    c.api_key = "k";
    c.endpoint = "ftp://x";
    CHECK_THROWS_AS(make_http_backend(c), ValidationError);
  }
}
