// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "capfuse/fuser_client.hpp"
#include "httplib.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace capfuse;

namespace {

FusePrompt prompt_for(const std::string& caption, std::vector<std::string> phrases,
                      std::vector<std::string> scene = {}) {
  std::vector<OrderedObject> objs;
  for (std::size_t i = 0; i < phrases.size(); ++i) {
    OrderedObject o;
    o.detection.object_class = phrases[i];
    o.detection.box = {0, 0, 1, 1};
    o.rank = i;
    objs.push_back(o);
  }
  return render_fuse_prompt(caption, objs, scene);
}

std::vector<FuseRequest> requests(std::size_t n) {
  std::vector<FuseRequest> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({"img-" + std::to_string(i), prompt_for("caption " + std::to_string(i), {"cat"})});
  }
  return out;
}

FuserBackendConfig fast_config(std::size_t in_flight = 1) {
  FuserBackendConfig cfg;
  cfg.max_in_flight = in_flight;
  cfg.backoff_base_ms = 0;
  return cfg;
}

/// Counts calls and tracks peak concurrency; fails the first `failures`
/// calls for each prompt.
class CountingBackend final : public FuserBackend {
 public:
  explicit CountingBackend(int failures = 0, Completion::Status fail_as = Completion::Status::kTimeout)
      : failures_(failures), fail_as_(fail_as) {}

  std::string model_id() const override { return "counting"; }

  Completion complete(const FusePrompt& prompt, int) override {
    const int now = ++in_flight_;
    int peak = peak_.load();
    while (now > peak && !peak_.compare_exchange_weak(peak, now)) {
    }
    // Vary latency so completion order differs from submission order.
    std::this_thread::sleep_for(std::chrono::microseconds(prompt.text.size() % 7 * 100));
    ++calls_;
    Completion c;
    bool fail = false;
    {
      std::lock_guard lock(mu_);
      fail = seen_[prompt.text]++ < failures_;
    }
    if (fail) {
      c.status = fail_as_;
      c.http_status = fail_as_ == Completion::Status::kBackendError ? 503 : 0;
    } else {
      c.text = "fused: " + prompt.caption;
      c.model = "counting";
    }
    --in_flight_;
    return c;
  }

  int calls() const { return calls_; }
  int peak() const { return peak_; }

 private:
  int failures_;
  Completion::Status fail_as_;
  std::atomic<int> calls_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> peak_{0};
  std::mutex mu_;
  std::map<std::string, int> seen_;
};

class FixedBackend final : public FuserBackend {
 public:
  explicit FixedBackend(Completion c) : c_(std::move(c)) {}
  std::string model_id() const override { return "fixed"; }
  Completion complete(const FusePrompt&, int) override {
    ++calls;
    return c_;
  }
  std::atomic<int> calls{0};

 private:
  Completion c_;
};

}  // namespace

TEST_CASE("cache keys depend on exact bytes and model") {
  CHECK(cache_key("prompt", "m") == cache_key("prompt", "m"));
  CHECK(cache_key("prompt", "m") != cache_key("prompt ", "m"));
  CHECK(cache_key("prompt", "m1") != cache_key("prompt", "m2"));
  CHECK(cache_key("ab", "c") != cache_key("a", "bc"));
  CHECK(cache_key("", "").size() == 64);
  // sha256 of a single NUL byte.
  CHECK(cache_key("", "") == "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d");
}

TEST_CASE("mock fusion is mechanical") {
  const FusePrompt p = render_fuse_prompt(
      "a man at a desk",
      [] {
        OrderedObject laptop, cat;
        laptop.detection = {"laptop", 0.9, {0, 0, 1, 1}, {{"black", 0.9}}};
        cat.detection = {"cat", 0.9, {1, 0, 2, 1}, {{"gray", 0.9}}};
        cat.rank = 1;
        return std::vector<OrderedObject>{laptop, cat};
      }(),
      {});
  CHECK(p.object_phrases == std::vector<std::string>{"A black laptop.", "A gray cat."});
  CHECK(mock_fuse(p) == "a man at a desk, featuring a black laptop; a gray cat");
  CHECK(mock_fuse(p) == mock_fuse(p));

  const FusePrompt scene = render_fuse_prompt("a man at a desk", {}, {"SALE"});
  CHECK(mock_fuse(scene) == "a man at a desk, featuring text \"SALE\"");
}

TEST_CASE("warm cache issues zero requests") {
  CountingBackend backend;
  MemoryFuseCache cache;
  const auto reqs = requests(3);
  for (const auto& r : reqs) cache.put(cache_key(r.prompt.text, "counting"), "cached " + r.image_id);

  const auto out = fuse_batch(reqs, fast_config(4), backend, &cache);
  CHECK(backend.calls() == 0);
  REQUIRE(out.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(out[i].ok());
    CHECK(out[i].result->cache_hit);
    CHECK(out[i].result->attempts == 0);
    CHECK(out[i].result->enriched_caption == "cached img-" + std::to_string(i));
  }
}

TEST_CASE("cold run fills the cache, second run is free") {
  CountingBackend backend;
  MemoryFuseCache cache;
  const auto reqs = requests(20);
  const auto first = fuse_batch(reqs, fast_config(4), backend, &cache);
  CHECK(backend.calls() == 20);
  CHECK(cache.size() == 20);
  const auto second = fuse_batch(reqs, fast_config(4), backend, &cache);
  CHECK(backend.calls() == 20);
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    CHECK(second[i].result->enriched_caption == first[i].result->enriched_caption);
    CHECK_FALSE(first[i].result->cache_hit);
    CHECK(second[i].result->cache_hit);
  }
}

TEST_CASE("transient failures are retried") {
  CountingBackend backend(2);
  FuserBackendConfig cfg = fast_config();
  cfg.retry_max = 3;
  const auto out = fuse_batch(requests(1), cfg, backend, nullptr);
  REQUIRE(out[0].ok());
  CHECK(out[0].result->attempts == 3);
  CHECK(backend.calls() == 3);
}

TEST_CASE("retries stop at retry_max") {
  CountingBackend backend(5, Completion::Status::kBackendError);
  FuserBackendConfig cfg = fast_config();
  cfg.retry_max = 2;
  const auto out = fuse_batch(requests(1), cfg, backend, nullptr);
  REQUIRE_FALSE(out[0].ok());
  CHECK(out[0].error->kind == FuseError::Kind::kBackendError);
  CHECK(out[0].error->attempts == 3);
  CHECK(out[0].error->http_status == 503);
}

TEST_CASE("backoff doubles per attempt") {
  CountingBackend backend(3);
  FuserBackendConfig cfg = fast_config();
  cfg.retry_max = 3;
  cfg.backoff_base_ms = 50;
  std::vector<long long> delays;
  fuse_batch(requests(1), cfg, backend, nullptr,
             [&](std::chrono::milliseconds d) { delays.push_back(d.count()); });
  CHECK(delays == std::vector<long long>{50, 100, 200});
}

TEST_CASE("empty completion is a per-item error") {
  FixedBackend backend(Completion{Completion::Status::kOk, 200, "", "fixed", ""});
  MemoryFuseCache cache;
  const auto out = fuse_batch(requests(2), fast_config(), backend, &cache);
  for (const auto& o : out) {
    REQUIRE_FALSE(o.ok());
    CHECK(o.error->kind == FuseError::Kind::kEmptyCompletion);
    CHECK(to_string(o.error->kind) == "empty-completion");
  }
  CHECK(cache.size() == 0);
}

TEST_CASE("auth failure aborts the batch") {
  FixedBackend backend(Completion{Completion::Status::kAuthFailure, 401, "", "", "nope"});
  CHECK_THROWS_AS(fuse_batch(requests(10), fast_config(4), backend, nullptr), AuthFailure);
  CHECK(backend.calls < 10);
}

TEST_CASE("results stay aligned with inputs and concurrency is bounded") {
  for (std::size_t in_flight : {1u, 3u, 8u}) {
    CountingBackend backend;
    const auto reqs = requests(40);
    const auto out = fuse_batch(reqs, fast_config(in_flight), backend, nullptr);
    CHECK(backend.peak() <= static_cast<int>(in_flight));
    for (std::size_t i = 0; i < reqs.size(); ++i) {
      CHECK(out[i].result->image_id == reqs[i].image_id);
      CHECK(out[i].result->enriched_caption == "fused: " + reqs[i].prompt.caption);
    }
  }
}

TEST_CASE("mock backend output is independent of parallelism") {
  MockFuserBackend mock;
  const auto reqs = requests(64);
  const auto serial = fuse_batch(reqs, fast_config(1), mock, nullptr);
  const auto parallel = fuse_batch(reqs, fast_config(16), mock, nullptr);
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    CHECK(serial[i].result->enriched_caption == parallel[i].result->enriched_caption);
    CHECK(serial[i].result->backend_model_id == std::string(kMockModelId));
  }
}

TEST_CASE("disk cache layout and concurrent writers") {
  TempDir dir;
  DiskFuseCache cache(dir.file("cache"));
  const std::string key = cache_key("p", "m");
  CHECK_FALSE(cache.get(key));
  cache.put(key, "value\nwith newline");
  CHECK(std::filesystem::exists(dir.path() / "cache" / key.substr(0, 2) / (key + ".txt")));
  CHECK(cache.get(key) == std::optional<std::string>("value\nwith newline"));

  std::vector<std::thread> writers;
  for (int t = 0; t < 8; ++t) {
    writers.emplace_back([&, t] {
      for (int i = 0; i < 50; ++i) cache.put(cache_key(std::to_string(i), "m"), "v" + std::to_string(i));
      (void)t;
    });
  }
  for (auto& w : writers) w.join();
  for (int i = 0; i < 50; ++i) {
    CHECK(cache.get(cache_key(std::to_string(i), "m")) == std::optional<std::string>("v" + std::to_string(i)));
  }
}

TEST_CASE("config validation") {
  FuserBackendConfig cfg;
  cfg.max_in_flight = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.max_in_flight = 1;
  cfg.retry_max = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("http backend speaks the fuse wire protocol") {
  std::atomic<int> hits{0};
  std::string seen_auth;
  nlohmann::json seen_body;
  httplib::Server server;
  server.Post("/llm/fuse", [&](const httplib::Request& req, httplib::Response& res) {
    const int n = ++hits;
    seen_auth = req.get_header_value("Authorization");
    seen_body = nlohmann::json::parse(req.body);
    if (seen_auth != "Bearer sekret") {
      res.status = 401;
      return;
    }
    if (n == 2) {  // one transient failure
      res.status = 503;
      return;
    }
    res.set_content(nlohmann::json{{"completion", "remote says hi"}, {"model", "flan-t5-xl-fuser"}}.dump(),
                    "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  FuserBackendConfig cfg = fast_config();
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/llm";
  cfg.api_key_env = "CAPFUSE_TEST_KEY_FOR_HTTP";
  cfg.max_tokens = 123;

  SUBCASE("authorized with one retry") {
    ::setenv("CAPFUSE_TEST_KEY_FOR_HTTP", "sekret", 1);
    HttpFuserBackend backend(cfg);
    const auto first = fuse_batch(requests(1), cfg, backend, nullptr);
    REQUIRE(first[0].ok());
    CHECK(first[0].result->enriched_caption == "remote says hi");
    CHECK(first[0].result->backend_model_id == "flan-t5-xl-fuser");
    CHECK(seen_body.at("max_tokens") == 123);
    CHECK(seen_body.at("prompt") == requests(1)[0].prompt.text);
    const auto second = fuse_batch(requests(1), cfg, backend, nullptr);
    REQUIRE(second[0].ok());
    CHECK(second[0].result->attempts == 2);
  }
  SUBCASE("missing key is an auth failure") {
    ::unsetenv("CAPFUSE_TEST_KEY_FOR_HTTP");
    HttpFuserBackend backend(cfg);
    CHECK_THROWS_AS(fuse_batch(requests(1), cfg, backend, nullptr), AuthFailure);
  }
  server.stop();
  t.join();
}
