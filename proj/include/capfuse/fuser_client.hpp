// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "capfuse/promptgen.hpp"

namespace capfuse {

inline constexpr std::string_view kMockModelId = "mock-fuser-v1";
inline constexpr std::string_view kApiKeyEnv = "CAPFUSE_LLM_API_KEY";
inline constexpr std::string_view kEndpointEnv = "CAPFUSE_LLM_ENDPOINT";

struct FuserBackendConfig {
  std::string endpoint;
  /// Name of the environment variable holding the API key.
  std::string api_key_env = std::string(kApiKeyEnv);
  /// Model id used for cache keys when talking to a remote endpoint.
  std::string model_id = "remote-fuser";
  std::size_t max_in_flight = 4;
  int retry_max = 3;
  int backoff_base_ms = 200;
  int timeout_ms = 30000;
  int max_tokens = 200;

  void validate() const;
};

/// sha256 over prompt bytes, a NUL separator, then model id bytes.
std::string cache_key(std::string_view prompt_text, std::string_view model_id);

/// Deterministic stand-in for the LLM: the caption, then ", featuring ",
/// then the object phrases (period dropped, first letter lowercased) joined
/// by "; ", then `text "..."` for scene text.
std::string mock_fuse(const FusePrompt& prompt);

/// What a single backend call produced.
struct Completion {
  enum class Status { kOk, kTimeout, kBackendError, kAuthFailure };
  Status status = Status::kOk;
  int http_status = 0;
  std::string text;
  std::string model;
  std::string message;
};

class FuserBackend {
 public:
  virtual ~FuserBackend() = default;
  virtual std::string model_id() const = 0;
  /// Must be safe to call from several threads at once.
  virtual Completion complete(const FusePrompt& prompt, int max_tokens) = 0;
};

class MockFuserBackend final : public FuserBackend {
 public:
  std::string model_id() const override { return std::string(kMockModelId); }
  Completion complete(const FusePrompt& prompt, int max_tokens) override;
};

/// `POST {endpoint}/fuse` with `{"prompt", "max_tokens"}`; expects
/// `{"completion", "model"}`. Sends `Authorization: Bearer <key>` when the
/// configured environment variable is set.
class HttpFuserBackend final : public FuserBackend {
 public:
  explicit HttpFuserBackend(const FuserBackendConfig& cfg);
  ~HttpFuserBackend() override;

  std::string model_id() const override { return model_id_; }
  Completion complete(const FusePrompt& prompt, int max_tokens) override;

 private:
  std::string host_;
  std::string path_;
  std::string api_key_;
  std::string model_id_;
  int timeout_ms_;
};

class FuseCache {
 public:
  virtual ~FuseCache() = default;
  virtual std::optional<std::string> get(const std::string& key) = 0;
  virtual void put(const std::string& key, const std::string& completion) = 0;
};

class MemoryFuseCache final : public FuseCache {
 public:
  std::optional<std::string> get(const std::string& key) override;
  void put(const std::string& key, const std::string& completion) override;
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::string> entries_;
};

/// One file per entry at `{dir}/{key[0:2]}/{key}.txt`, written atomically.
class DiskFuseCache final : public FuseCache {
 public:
  explicit DiskFuseCache(std::string dir);
  std::optional<std::string> get(const std::string& key) override;
  void put(const std::string& key, const std::string& completion) override;
  std::string path_for(const std::string& key) const;

 private:
  std::string dir_;
};

struct FuseResult {
  std::string image_id;
  std::string enriched_caption;
  bool cache_hit = false;
  int attempts = 0;
  std::string backend_model_id;
};

struct FuseError {
  enum class Kind { kTimeout, kBackendError, kEmptyCompletion };
  Kind kind = Kind::kBackendError;
  std::string image_id;
  int http_status = 0;
  int attempts = 0;
  std::string message;
};

std::string_view to_string(FuseError::Kind kind);

struct FuseOutcome {
  std::optional<FuseResult> result;
  std::optional<FuseError> error;

  bool ok() const { return result.has_value(); }
};

/// The backend rejected our credentials. Aborts the whole batch.
class AuthFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

struct FuseRequest {
  std::string image_id;
  FusePrompt prompt;
};

/// Fuses every request, returning outcomes index-aligned with `requests`.
/// The cache (may be null) is consulted before any backend call and filled
/// after each success. Timeouts and 5xx/429 responses are retried up to
/// `retry_max` times with delays backoff_base_ms * 2^(n-1); empty
/// completions are not retried. Throws AuthFailure on 401/403.
std::vector<FuseOutcome> fuse_batch(const std::vector<FuseRequest>& requests,
                                    const FuserBackendConfig& cfg, FuserBackend& backend,
                                    FuseCache* cache, const Sleeper& sleep = {});

}  // namespace capfuse
