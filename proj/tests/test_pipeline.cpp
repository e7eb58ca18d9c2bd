// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <sstream>

#include "capfuse/pipeline.hpp"
#include "capfuse/text.hpp"
#include "corpus.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace capfuse;
namespace fs = std::filesystem;

namespace {

PipelineConfig small_config(std::size_t shard_size = 7) {
  PipelineConfig cfg;
  cfg.shard_size = shard_size;
  cfg.fuser.backoff_base_ms = 0;
  return cfg;
}

ShardManifest manifest_with(std::vector<ShardStatus> statuses, const std::string& hash = "h") {
  ShardManifest m;
  m.run_id = "r";
  m.config_hash = hash;
  m.shard_size = 10;
  m.record_count = statuses.size() * 10;
  for (std::size_t i = 0; i < statuses.size(); ++i) {
    ShardEntry e;
    e.shard_id = i;
    e.span = {i * 10, i * 10 + 10};
    e.status = statuses[i];
    if (e.status == ShardStatus::kDone) e.output_checksum = "abc";
    m.shards.push_back(e);
  }
  return m;
}

CaptionRecord caption(const std::string& id, const std::string& text) {
  CaptionRecord r;
  r.image_id = id;
  r.original_caption = text;
  return r;
}

BundleResult bundle_with(std::vector<Detection> dets, std::vector<OcrToken> toks = {}) {
  ExpertBundle b;
  b.image_id = "x";
  b.image_width = 100;
  b.image_height = 100;
  b.detections = std::move(dets);
  b.ocr_tokens = std::move(toks);
  return {b, std::nullopt};
}

std::size_t count_lines(const std::string& s) {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

class ThrowingExperts final : public ExpertBackend {
 public:
  BundleResult fetch(const std::string&) override { throw SourceUnreachable("experts down"); }
};

class RejectingFuser final : public FuserBackend {
 public:
  std::string model_id() const override { return "rejecting"; }
  Completion complete(const FusePrompt&, int) override {
    return {Completion::Status::kAuthFailure, 401, "", "", "bad key"};
  }
};

}  // namespace

TEST_CASE("shard planning") {
  const auto spans = plan_shards(10, 3);
  CHECK(spans == std::vector<ShardSpan>{{0, 3}, {3, 6}, {6, 9}, {9, 10}});
  CHECK(plan_shards(9, 3).size() == 3);
  CHECK(plan_shards(1, 100) == std::vector<ShardSpan>{{0, 1}});
  CHECK_THROWS_AS(plan_shards(0, 3), std::invalid_argument);
  CHECK_THROWS_AS(plan_shards(3, 0), std::invalid_argument);
}

TEST_CASE("shard planning partitions the input") {
  gen::Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = gen::uniform(rng, 1, 500);
    const std::size_t size = gen::uniform(rng, 1, 60);
    const auto spans = plan_shards(n, size);
    CHECK(spans.size() == (n + size - 1) / size);
    std::size_t cursor = 0;
    for (const auto& s : spans) {
      CHECK(s.begin == cursor);
      CHECK(s.size() >= 1);
      CHECK(s.size() <= size);
      cursor = s.end;
    }
    CHECK(cursor == n);
  }
}

TEST_CASE("resume picks every unfinished shard") {
  using S = ShardStatus;
  const auto m = manifest_with({S::kDone, S::kFailed, S::kPending, S::kInProgress, S::kDone});
  CHECK(resume(m, "h") == std::vector<std::size_t>{1, 2, 3});
  CHECK(resume(manifest_with({S::kDone, S::kDone}), "h").empty());
  CHECK_THROWS_AS(resume(m, "other"), ConfigMismatch);
}

TEST_CASE("manifest round-trips and validates") {
  using S = ShardStatus;
  auto m = manifest_with({S::kDone, S::kFailed});
  m.shards[1].reason = "boom";
  m.shards[0].counters = {10, 8, 1, 1};
  const auto back = ShardManifest::from_json(m.to_json());
  CHECK(back.shards[1].reason == "boom");
  CHECK(back.counters() == RunCounters{10, 8, 1, 1});
  CHECK(back.to_json() == m.to_json());

  auto gap = m;
  gap.shards[1].span.begin = 11;
  CHECK_THROWS_AS(gap.validate(), std::logic_error);
  auto unchecked = m;
  unchecked.shards[0].output_checksum.clear();
  CHECK_THROWS_AS(unchecked.validate(), std::logic_error);
}

TEST_CASE("config hash tracks output-affecting settings only") {
  const PipelineConfig base = small_config();
  PipelineConfig other = base;
  CHECK(config_hash(base, 10) == config_hash(other, 10));
  other.fuser.max_in_flight = 99;
  CHECK(config_hash(base, 10) == config_hash(other, 10));
  CHECK(config_hash(base, 10) != config_hash(base, 11));
  other.filter.detection_threshold = 0.5;
  CHECK(config_hash(base, 10) != config_hash(other, 10));
  other = base;
  other.prompt.scene_text = false;
  CHECK(config_hash(base, 10) != config_hash(other, 10));
  other = base;
  other.shard_size = 8;
  CHECK(config_hash(base, 10) != config_hash(other, 10));
}

TEST_CASE("prepare_record outcomes") {
  const PipelineConfig cfg = small_config();
  const Detection dog{"dog", 0.9, {10, 10, 40, 40}, {{"brown", 0.5}, {"tiny", 0.1}}};
  const Detection ghost{"ghost", 0.7, {50, 50, 60, 60}, {}};

  SUBCASE("fuse") {
    const auto p = prepare_record(caption("x", "a dog"), bundle_with({dog, ghost}), cfg);
    REQUIRE(p.kind == PreparedRecord::Kind::kFuse);
    CHECK(p.prompt.object_phrases == std::vector<std::string>{"A brown dog."});
  }
  SUBCASE("missing bundle passes through") {
    BundleResult missing{std::nullopt, BundleError{BundleError::Kind::kMissing, "x", 0, ""}};
    CHECK(prepare_record(caption("x", "a dog"), missing, cfg).kind ==
          PreparedRecord::Kind::kPassthrough);
  }
  SUBCASE("invalid bundle fails the record") {
    BundleResult bad{std::nullopt, BundleError{BundleError::Kind::kInvalid, "x", 0, "degenerate box"}};
    const auto p = prepare_record(caption("x", "a dog"), bad, cfg);
    CHECK(p.kind == PreparedRecord::Kind::kFailed);
    CHECK(p.reason.find("degenerate box") != std::string::npos);
  }
  SUBCASE("empty caption fails the record") {
    CHECK(prepare_record(caption("x", ""), bundle_with({dog}), cfg).kind ==
          PreparedRecord::Kind::kFailed);
  }
  SUBCASE("everything filtered out passes through") {
    CHECK(prepare_record(caption("x", "a dog"), bundle_with({ghost}), cfg).kind ==
          PreparedRecord::Kind::kPassthrough);
  }
  SUBCASE("scene text alone is enough") {
    const auto p = prepare_record(caption("x", "a wall"),
                                  bundle_with({}, {{"EXIT", 0.9, {1, 1, 5, 5}}}), cfg);
    REQUIRE(p.kind == PreparedRecord::Kind::kFuse);
    CHECK(p.prompt.scene_texts == std::vector<std::string>{"EXIT"});
  }
  SUBCASE("OCR ignored when disabled") {
    auto b = bundle_with({}, {{"EXIT", 0.9, {1, 1, 5, 5}}});
    b.bundle->ocr_enabled = false;
    CHECK(prepare_record(caption("x", "a wall"), b, cfg).kind ==
          PreparedRecord::Kind::kPassthrough);
  }
}

TEST_CASE("run writes shards, manifest and failures") {
  TempDir dir;
  const auto corpus = gen::make_corpus(50, 7);
  gen::MapExpertBackend experts(corpus.bundles);
  MockFuserBackend mock;
  const RunResult r = run_pipeline(corpus.captions, experts, mock, dir.file("out"), small_config());
  CHECK(r.exit_code == 0);
  CHECK(r.manifest.shards.size() == 8);
  for (const auto& s : r.manifest.shards) {
    CHECK(s.status == ShardStatus::kDone);
    CHECK(s.output_checksum == sha256_hex(read_file(dir.file("out/" + shard_file_name(s.shard_id)))));
  }

  // Counters against an independent tally of the files.
  const std::string output = gen::read_run_output(dir.path() / "out");
  const std::string failures = read_file(dir.file("out/failures.jsonl"));
  std::size_t fused = 0, passthrough = 0;
  std::istringstream lines(output);
  for (std::string line; std::getline(lines, line);) {
    const auto rec = parse_caption(line);
    (rec.enriched_caption ? fused : passthrough) += 1;
    if (rec.enriched_caption) {
      CHECK(rec.fuse_provenance->model_id == std::string(kMockModelId));
      CHECK_FALSE(rec.fuse_provenance->timestamp);
    }
  }
  const RunCounters c = r.manifest.counters();
  CHECK(c.records_in == 50);
  CHECK(c.records_fused == fused);
  CHECK(c.records_passthrough == passthrough);
  CHECK(c.records_failed == count_lines(failures));
  CHECK(c.records_fused + c.records_passthrough + c.records_failed == c.records_in);
  CHECK(c.records_failed > 0);
  CHECK(c.records_passthrough > 0);

  const auto fail = nlohmann::json::parse(failures.substr(0, failures.find('\n')));
  CHECK(fail.at("stage") == "ingest");
}

TEST_CASE("output bytes do not depend on worker count") {
  const auto corpus = gen::make_corpus(120, 9);
  gen::MapExpertBackend experts(corpus.bundles);
  MockFuserBackend mock;
  std::vector<std::string> outputs;
  for (std::size_t workers : {1u, 3u, 8u}) {
    TempDir dir;
    RunOptions opts;
    opts.workers = workers;
    run_pipeline(corpus.captions, experts, mock, dir.file("out"), small_config(10), opts);
    outputs.push_back(gen::read_run_output(dir.path() / "out") +
                      read_file(dir.file("out/failures.jsonl")));
  }
  CHECK(outputs[0] == outputs[1]);
  CHECK(outputs[0] == outputs[2]);
}

TEST_CASE("an interrupted run resumes to the same bytes") {
  const auto corpus = gen::make_corpus(80, 11);
  gen::MapExpertBackend experts(corpus.bundles);
  MockFuserBackend mock;
  const PipelineConfig cfg = small_config(10);

  TempDir clean;
  run_pipeline(corpus.captions, experts, mock, clean.file("out"), cfg);
  const std::string expected = gen::read_run_output(clean.path() / "out");

  TempDir crashed;
  const std::string out = crashed.file("out");
  run_pipeline(corpus.captions, experts, mock, out, cfg);
  // Fake a crash: shard 3 mid-write, shard 5 never started.
  auto m = ShardManifest::load(out + "/manifest.json");
  m.shards[3].status = ShardStatus::kInProgress;
  m.shards[3].output_checksum.clear();
  m.shards[5].status = ShardStatus::kPending;
  m.shards[5].output_checksum.clear();
  m.save(out + "/manifest.json");
  fs::remove(out + "/" + shard_file_name(5));
  write_file_atomic(out + "/" + shard_file_name(3) + ".tmp.123.0", "partial");

  std::vector<std::size_t> rerun;
  RunOptions opts;
  opts.on_shard_done = [&](const ShardEntry& e) { rerun.push_back(e.shard_id); };
  const auto r = run_pipeline(corpus.captions, experts, mock, out, cfg, opts);
  CHECK(r.exit_code == 0);
  std::sort(rerun.begin(), rerun.end());
  CHECK(rerun == std::vector<std::size_t>{3, 5});
  CHECK(gen::read_run_output(out) == expected);
  CHECK_FALSE(fs::exists(out + "/" + shard_file_name(3) + ".tmp.123.0"));

  // A finished run is a no-op.
  rerun.clear();
  run_pipeline(corpus.captions, experts, mock, out, cfg, opts);
  CHECK(rerun.empty());
}

TEST_CASE("resuming under a different config is refused") {
  const auto corpus = gen::make_corpus(20, 3);
  gen::MapExpertBackend experts(corpus.bundles);
  MockFuserBackend mock;
  TempDir dir;
  run_pipeline(corpus.captions, experts, mock, dir.file("out"), small_config());
  PipelineConfig changed = small_config();
  changed.filter.attribute_threshold = 0.5;
  CHECK_THROWS_AS(run_pipeline(corpus.captions, experts, mock, dir.file("out"), changed),
                  ConfigMismatch);
}

TEST_CASE("unreachable experts fail shards, and a retry completes them") {
  const auto corpus = gen::make_corpus(30, 5);
  MockFuserBackend mock;
  TempDir dir;
  ThrowingExperts down;
  const auto failed = run_pipeline(corpus.captions, down, mock, dir.file("out"), small_config(10));
  CHECK(failed.exit_code == 2);
  for (const auto& s : failed.manifest.shards) {
    CHECK(s.status == ShardStatus::kFailed);
    CHECK(s.reason.find("experts down") != std::string::npos);
  }
  CHECK_THROWS_AS(summarize(failed.manifest, dir.file("out")), IncompleteRun);

  gen::MapExpertBackend up(corpus.bundles);
  const auto retried = run_pipeline(corpus.captions, up, mock, dir.file("out"), small_config(10));
  CHECK(retried.exit_code == 0);
  CHECK(retried.manifest.counters().records_in == 30);
}

TEST_CASE("auth failure aborts the run") {
  const auto corpus = gen::make_corpus(30, 5);
  gen::MapExpertBackend experts(corpus.bundles);
  RejectingFuser fuser;
  TempDir dir;
  CHECK_THROWS_AS(run_pipeline(corpus.captions, experts, fuser, dir.file("out"), small_config(10)),
                  AuthFailure);
  const auto m = ShardManifest::load(dir.file("out/manifest.json"));
  CHECK(m.shards[0].status == ShardStatus::kFailed);
  CHECK(m.shards[0].reason.rfind("run aborted", 0) == 0);
}

TEST_CASE("full provenance adds timestamp and cache flag") {
  const auto corpus = gen::make_corpus(20, 13);
  gen::MapExpertBackend experts(corpus.bundles);
  MockFuserBackend mock;
  TempDir dir;
  PipelineConfig cfg = small_config();
  cfg.full_provenance = true;
  RunOptions opts;
  opts.cache_dir = dir.file("cache");
  run_pipeline(corpus.captions, experts, mock, dir.file("out"), cfg, opts);
  std::istringstream lines(gen::read_run_output(dir.path() / "out"));
  std::size_t checked = 0;
  for (std::string line; std::getline(lines, line);) {
    const auto rec = parse_caption(line);
    if (!rec.enriched_caption) continue;
    CHECK(rec.fuse_provenance->timestamp);
    CHECK(rec.fuse_provenance->cache_hit == std::optional<bool>(false));
    ++checked;
  }
  CHECK(checked > 0);

  // Same inputs into a new directory hit the warm cache.
  run_pipeline(corpus.captions, experts, mock, dir.file("out2"), cfg, opts);
  std::istringstream again(gen::read_run_output(dir.path() / "out2"));
  for (std::string line; std::getline(again, line);) {
    const auto rec = parse_caption(line);
    if (rec.enriched_caption) CHECK(rec.fuse_provenance->cache_hit == std::optional<bool>(true));
  }
}

TEST_CASE("file-based run and summary") {
  TempDir dir;
  const auto corpus = gen::make_corpus(40, 17);
  gen::write_corpus(corpus, dir.file("captions.jsonl"), dir.file("bundles.jsonl"));
  const auto r = run_pipeline(dir.file("captions.jsonl"), dir.file("bundles.jsonl"),
                              dir.file("out"), small_config(16));
  CHECK(r.exit_code == 0);

  gen::MapExpertBackend experts(corpus.bundles);
  MockFuserBackend mock;
  TempDir mem;
  run_pipeline(corpus.captions, experts, mock, mem.file("out"), small_config(16));
  CHECK(gen::read_run_output(dir.path() / "out") == gen::read_run_output(mem.path() / "out"));

  const RunReport report = summarize(r.manifest, dir.file("out"));
  CHECK(report.counters == r.manifest.counters());
  REQUIRE(report.enriched_lengths);
  CHECK(report.enriched_lengths->mean_tokens > 4);
  const auto j = nlohmann::json::parse(to_json(report));
  CHECK(j.at("counters").at("records_in") == 40);
}
