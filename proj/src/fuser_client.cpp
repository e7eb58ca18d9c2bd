// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#include "capfuse/fuser_client.hpp"

#include <atomic>
#include <cctype>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "capfuse/text.hpp"
#include "httplib.h"
#include "json.hpp"

namespace capfuse {

namespace fs = std::filesystem;

void FuserBackendConfig::validate() const {
  if (max_in_flight < 1) throw std::invalid_argument("max_in_flight must be >= 1");
  if (retry_max < 0) throw std::invalid_argument("retry_max must be >= 0");
  if (backoff_base_ms < 0) throw std::invalid_argument("backoff_base_ms must be >= 0");
}

std::string cache_key(std::string_view prompt_text, std::string_view model_id) {
  std::string bytes;
  bytes.reserve(prompt_text.size() + 1 + model_id.size());
  bytes.append(prompt_text);
  bytes.push_back('\0');
  bytes.append(model_id);
  return sha256_hex(bytes);
}

std::string mock_fuse(const FusePrompt& prompt) {
  std::vector<std::string> parts;
  parts.reserve(prompt.object_phrases.size() + 1);
  for (const std::string& phrase : prompt.object_phrases) {
    std::string p = phrase;
    if (!p.empty() && p.back() == '.') p.pop_back();
    if (!p.empty()) p[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(p[0])));
    parts.push_back(std::move(p));
  }
  if (!prompt.scene_texts.empty()) {
    parts.push_back("text \"" + join(prompt.scene_texts, " ") + "\"");
  }
  return prompt.caption + ", featuring " + join(parts, "; ");
}

Completion MockFuserBackend::complete(const FusePrompt& prompt, int /*max_tokens*/) {
  Completion c;
  c.text = mock_fuse(prompt);
  c.model = std::string(kMockModelId);
  return c;
}

namespace {
std::pair<std::string, std::string> split_endpoint(const std::string& endpoint) {
  const auto scheme = endpoint.find("://");
  const auto path_start =
      endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) return {endpoint, ""};
  std::string path = endpoint.substr(path_start);
  while (!path.empty() && path.back() == '/') path.pop_back();
  return {endpoint.substr(0, path_start), path};
}
}  // namespace

HttpFuserBackend::HttpFuserBackend(const FuserBackendConfig& cfg)
    : model_id_(cfg.model_id), timeout_ms_(cfg.timeout_ms) {
  std::string endpoint = cfg.endpoint;
  if (endpoint.empty()) {
    if (const char* env = std::getenv(std::string(kEndpointEnv).c_str())) endpoint = env;
  }
  if (endpoint.empty()) throw std::invalid_argument("no fuser endpoint configured");
  std::tie(host_, path_) = split_endpoint(endpoint);
  if (const char* key = std::getenv(cfg.api_key_env.c_str())) api_key_ = key;
}

HttpFuserBackend::~HttpFuserBackend() = default;

Completion HttpFuserBackend::complete(const FusePrompt& prompt, int max_tokens) {
  // httplib::Client is not thread-safe; one per call keeps this reentrant.
  httplib::Client client(host_);
  client.set_connection_timeout(std::chrono::milliseconds(timeout_ms_));
  client.set_read_timeout(std::chrono::milliseconds(timeout_ms_));
  client.set_write_timeout(std::chrono::milliseconds(timeout_ms_));
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  nlohmann::json body = {{"prompt", prompt.text}, {"max_tokens", max_tokens}};
  auto res = client.Post(path_ + "/fuse", headers, body.dump(), "application/json");

  Completion c;
  if (!res) {
    c.status = res.error() == httplib::Error::Read || res.error() == httplib::Error::Write ||
                       res.error() == httplib::Error::Connection
                   ? Completion::Status::kTimeout
                   : Completion::Status::kBackendError;
    c.message = httplib::to_string(res.error());
    return c;
  }
  c.http_status = res->status;
  if (res->status == 401 || res->status == 403) {
    c.status = Completion::Status::kAuthFailure;
    c.message = res->body;
    return c;
  }
  if (res->status == 408 || res->status == 504) {
    c.status = Completion::Status::kTimeout;
    return c;
  }
  if (res->status != 200) {
    c.status = Completion::Status::kBackendError;
    c.message = res->body;
    return c;
  }
  try {
    auto j = nlohmann::json::parse(res->body);
    c.text = j.value("completion", std::string());
    c.model = j.value("model", model_id_);
  } catch (const nlohmann::json::exception& e) {
    c.status = Completion::Status::kBackendError;
    c.message = std::string("bad response body: ") + e.what();
  }
  return c;
}

std::optional<std::string> MemoryFuseCache::get(const std::string& key) {
  std::lock_guard lock(mu_);
  if (auto it = entries_.find(key); it != entries_.end()) return it->second;
  return std::nullopt;
}

void MemoryFuseCache::put(const std::string& key, const std::string& completion) {
  std::lock_guard lock(mu_);
  entries_[key] = completion;
}

std::size_t MemoryFuseCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

DiskFuseCache::DiskFuseCache(std::string dir) : dir_(std::move(dir)) {
  fs::create_directories(dir_);
}

std::string DiskFuseCache::path_for(const std::string& key) const {
  return (fs::path(dir_) / key.substr(0, 2) / (key + ".txt")).string();
}

std::optional<std::string> DiskFuseCache::get(const std::string& key) {
  std::ifstream in(path_for(key), std::ios::binary);
  if (!in) return std::nullopt;
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void DiskFuseCache::put(const std::string& key, const std::string& completion) {
  fs::create_directories(fs::path(dir_) / key.substr(0, 2));
  write_file_atomic(path_for(key), completion);
}

std::string_view to_string(FuseError::Kind kind) {
  switch (kind) {
    case FuseError::Kind::kTimeout: return "timeout";
    case FuseError::Kind::kBackendError: return "backend-error";
    case FuseError::Kind::kEmptyCompletion: return "empty-completion";
  }
  return "unknown";
}

namespace {

bool retryable(const Completion& c) {
  if (c.status == Completion::Status::kTimeout) return true;
  return c.status == Completion::Status::kBackendError &&
         (c.http_status == 0 || c.http_status == 429 || c.http_status >= 500);
}

FuseOutcome fuse_one(const FuseRequest& req, const FuserBackendConfig& cfg,
                     FuserBackend& backend, const std::string& model_id, FuseCache* cache,
                     const Sleeper& sleep) {
  const std::string key = cache ? cache_key(req.prompt.text, model_id) : std::string();
  if (cache) {
    if (auto hit = cache->get(key); hit && !hit->empty()) {
      return {FuseResult{req.image_id, *hit, true, 0, model_id}, std::nullopt};
    }
  }
  int attempts = 0;
  while (true) {
    ++attempts;
    Completion c = backend.complete(req.prompt, cfg.max_tokens);
    if (c.status == Completion::Status::kAuthFailure) {
      throw AuthFailure("fuser backend rejected credentials (HTTP " +
                        std::to_string(c.http_status) + ")");
    }
    if (c.status == Completion::Status::kOk) {
      if (c.text.empty()) {
        return {std::nullopt, FuseError{FuseError::Kind::kEmptyCompletion, req.image_id,
                                        c.http_status, attempts, "backend returned no text"}};
      }
      if (cache) cache->put(key, c.text);
      return {FuseResult{req.image_id, std::move(c.text), false, attempts,
                         c.model.empty() ? model_id : c.model},
              std::nullopt};
    }
    if (!retryable(c) || attempts > cfg.retry_max) {
      const auto kind = c.status == Completion::Status::kTimeout
                            ? FuseError::Kind::kTimeout
                            : FuseError::Kind::kBackendError;
      return {std::nullopt,
              FuseError{kind, req.image_id, c.http_status, attempts, c.message}};
    }
    const std::chrono::milliseconds delay(static_cast<long long>(cfg.backoff_base_ms)
                                          << std::min(attempts - 1, 20));
    if (sleep) {
      sleep(delay);
    } else if (delay.count() > 0) {
      std::this_thread::sleep_for(delay);
    }
  }
}

}  // namespace

std::vector<FuseOutcome> fuse_batch(const std::vector<FuseRequest>& requests,
                                    const FuserBackendConfig& cfg, FuserBackend& backend,
                                    FuseCache* cache, const Sleeper& sleep) {
  cfg.validate();
  std::vector<FuseOutcome> outcomes(requests.size());
  if (requests.empty()) return outcomes;
  const std::string model_id = backend.model_id();

  const std::size_t workers = std::min(cfg.max_in_flight, requests.size());
  if (workers == 1) {
    for (std::size_t i = 0; i < requests.size(); ++i) {
      outcomes[i] = fuse_one(requests[i], cfg, backend, model_id, cache, sleep);
    }
    return outcomes;
  }

  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto work = [&] {
    while (!abort.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= requests.size()) return;
      try {
        outcomes[i] = fuse_one(requests[i], cfg, backend, model_id, cache, sleep);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        abort.store(true);
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return outcomes;
}

}  // namespace capfuse
