#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "counterfact/model.hpp"

namespace cfx {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;                           // 0 binds an ephemeral port
  std::filesystem::path models_dir;          // scanned by GET /models; empty lists nothing
  std::filesystem::path data_root;           // dataset references resolve below it; empty disables them
  std::vector<std::string> cors_origins{"http://localhost:5173", "http://127.0.0.1:5173"};  // "*" allows any
  std::size_t threads = 8;
  std::size_t max_horizon = 64;
  std::size_t max_ig_steps = 1024;

  void validate() const;
  nlohmann::json to_json() const;
  static ServiceConfig from_json(const nlohmann::json& j);
};

inline constexpr const char* kCheckpointExtension = ".cfxm";

struct HttpResult {
  int status = 200;
  std::string body;  // JSON
};

// Request handling independent of the transport. Holds the immutable model; every handler is
// safe to call concurrently.
class Service {
 public:
  Service(std::shared_ptr<const Model> model, ServiceConfig config);

  const ServiceConfig& config() const noexcept { return config_; }
  bool has_model() const noexcept { return model_ != nullptr; }
  const std::string& model_digest() const noexcept { return digest_; }

  HttpResult health() const;
  HttpResult models() const;
  HttpResult schema() const;
  HttpResult predict(const std::string& body) const;
  HttpResult attribute(const std::string& body) const;

  // CORS: the value for Access-Control-Allow-Origin, or empty when the origin is not allowed.
  std::string allowed_origin(const std::string& origin) const;

 private:
  HttpResult guarded(const char* route, const std::string& body,
                     nlohmann::json (Service::*handler)(const nlohmann::json&) const) const;
  nlohmann::json handle_predict(const nlohmann::json& req) const;
  nlohmann::json handle_attribute(const nlohmann::json& req) const;

  std::shared_ptr<const Model> model_;
  ServiceConfig config_;
  std::string digest_;
};

// HTTP/1.1 front-end over a Service.
class HttpServer {
 public:
  explicit HttpServer(const Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds host:port from the service config and returns the bound port.
  int bind();
  // Serves until stop(); bind() must have succeeded.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cfx
