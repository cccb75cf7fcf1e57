// Copyright 2026 The mcbm Authors
// SPDX-License-Identifier: Apache-2.0

#include "mcbm/mllm.hpp"

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <regex>
#include <thread>

#include <json.hpp>

namespace mcbm {

using nlohmann::json;

namespace {

class HttpBackend : public MllmBackend {
 public:
  explicit HttpBackend(HttpConfig config) : config_(std::move(config)) {
    static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(config_.endpoint, m, url_re)) {
      throw ValidationError("MLLM endpoint must be an http(s) URL, got '" + config_.endpoint + "'");
    }
    origin_ = m[1].str();
    base_path_ = m[2].matched ? m[2].str() : "";
    while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
  }

  std::string chat(const ChatRequest& request) override {
    const json reply = post("/chat/completions", chat_payload(request));
    try {
      const json& content = reply.at("choices").at(0).at("message").at("content");
      return content.is_null() ? std::string() : content.get<std::string>();
    } catch (const json::exception& e) {
      throw ServiceError(std::string("unexpected chat response shape: ") + e.what());
    }
  }

  std::vector<std::vector<double>> embed(const std::string& model,
                                         const std::vector<std::string>& inputs) override {
    const json reply = post("/embeddings", embedding_payload(model, inputs));
    try {
      std::vector<std::vector<double>> out;
      for (const json& item : reply.at("data")) {
        out.push_back(item.at("embedding").get<std::vector<double>>());
      }
      return out;
    } catch (const json::exception& e) {
      throw ServiceError(std::string("unexpected embedding response shape: ") + e.what());
    }
  }

 private:
  json post(const std::string& route, const std::string& body) {
    std::string last_error;
    for (int attempt = 0; attempt <= config_.transport_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(std::chrono::milliseconds(250 << attempt));
      httplib::Client client(origin_);
      client.set_connection_timeout(config_.timeout_seconds, 0);
      client.set_read_timeout(config_.timeout_seconds, 0);
      client.set_write_timeout(config_.timeout_seconds, 0);
      httplib::Headers headers;
      if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
      auto res = client.Post(base_path_ + route, headers, body, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) {
        throw ServiceError("MLLM service returned HTTP " + std::to_string(res->status) + ": " +
                           res->body.substr(0, 300));
      }
      try {
        return json::parse(res->body);
      } catch (const json::exception& e) {
        throw ServiceError(std::string("MLLM service returned invalid JSON: ") + e.what());
      }
    }
    throw ServiceError("MLLM service unreachable at " + origin_ + base_path_ + route + " (" +
                       last_error + ")");
  }

  HttpConfig config_;
  std::string origin_;
  std::string base_path_;
};

}  // namespace

HttpConfig http_config_from_env() {
  HttpConfig cfg;
  if (const char* e = std::getenv("MCBM_MLLM_ENDPOINT")) cfg.endpoint = e;
  if (const char* k = std::getenv("MCBM_MLLM_API_KEY")) cfg.api_key = k;
  return cfg;
}

std::unique_ptr<MllmBackend> make_http_backend(const HttpConfig& config) {
  if (config.endpoint.empty()) {
    throw ValidationError("http backend requires an endpoint (set MCBM_MLLM_ENDPOINT)");
  }
  if (config.api_key.empty()) {
    throw ValidationError("http backend requires a credential (set MCBM_MLLM_API_KEY)");
  }
  return std::make_unique<HttpBackend>(config);
}

}  // namespace mcbm
