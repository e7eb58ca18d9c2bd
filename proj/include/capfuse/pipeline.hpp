// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "capfuse/datamodel.hpp"
#include "capfuse/eval_metrics.hpp"
#include "capfuse/expert_ingest.hpp"
#include "capfuse/fuser_client.hpp"
#include "capfuse/promptgen.hpp"
#include "capfuse/spatial.hpp"

namespace capfuse {

enum class BackendKind { kMock, kHttp };

struct PipelineConfig {
  FilterConfig filter;
  OrderKey order_key = OrderKey::kCenter;
  PromptOptions prompt;
  BackendKind backend = BackendKind::kMock;
  FuserBackendConfig fuser;
  std::size_t shard_size = 10000;
  /// Include timestamp and cache_hit in the output provenance. These vary
  /// between runs, so the default keeps outputs byte-reproducible.
  bool full_provenance = false;
};

/// Canonical JSON of every setting that affects output bytes. Worker count
/// and cache location are deliberately absent.
std::string effective_config_json(const PipelineConfig& cfg, std::size_t record_count);
std::string config_hash(const PipelineConfig& cfg, std::size_t record_count);

/// Half-open record range [begin, end).
struct ShardSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  friend bool operator==(const ShardSpan&, const ShardSpan&) = default;
};

/// ceil(record_count / shard_size) contiguous spans covering the input.
/// Throws std::invalid_argument when either argument is zero.
std::vector<ShardSpan> plan_shards(std::size_t record_count, std::size_t shard_size);

enum class ShardStatus { kPending, kInProgress, kDone, kFailed };

std::string_view to_string(ShardStatus status);
ShardStatus parse_shard_status(std::string_view s);

struct RunCounters {
  std::size_t records_in = 0;
  std::size_t records_fused = 0;
  std::size_t records_passthrough = 0;
  std::size_t records_failed = 0;

  RunCounters& operator+=(const RunCounters& o);
  friend bool operator==(const RunCounters&, const RunCounters&) = default;
};

struct ShardEntry {
  std::size_t shard_id = 0;
  ShardSpan span;
  ShardStatus status = ShardStatus::kPending;
  std::string output_checksum;  // sha256 of the shard output file, once done
  std::string reason;           // why the shard failed
  RunCounters counters;
};

struct ShardManifest {
  std::string run_id;
  std::string config_hash;
  std::size_t record_count = 0;
  std::size_t shard_size = 0;
  std::vector<ShardEntry> shards;
  /// Wall time summed over every invocation that worked on this run.
  double elapsed_seconds = 0.0;

  /// Sum over done shards.
  RunCounters counters() const;
  /// Throws std::logic_error when spans do not partition [0, record_count)
  /// or a done shard lacks a checksum.
  void validate() const;

  std::string to_json() const;
  static ShardManifest from_json(std::string_view text);
  static ShardManifest load(const std::string& path);
  void save(const std::string& path) const;
};

class ConfigMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ids of shards still to run: pending, failed, and in_progress ones left
/// behind by an interrupted process. Throws ConfigMismatch when the
/// manifest was produced under a different effective configuration.
std::vector<std::size_t> resume(const ShardManifest& manifest,
                                const std::string& current_config_hash);

std::string shard_file_name(std::size_t shard_id);
std::string shard_failures_file_name(std::size_t shard_id);

/// What happened to one record before the fuser is called.
struct PreparedRecord {
  enum class Kind { kFuse, kPassthrough, kFailed };
  Kind kind = Kind::kPassthrough;
  FusePrompt prompt;   // set for kFuse
  std::string reason;  // set for kFailed
};

/// filter -> assign OCR -> order -> render, for a single record.
PreparedRecord prepare_record(const CaptionRecord& record, const BundleResult& bundle,
                              const PipelineConfig& cfg);

struct ShardOutput {
  std::string output;    // JSONL, one line per fused or passthrough record
  std::string failures;  // JSONL, one line per failed record
  RunCounters counters;
};

/// Runs every record in `span` through prepare_record and the fuser.
/// Propagates AuthFailure and SourceUnreachable.
ShardOutput process_shard(const ShardSpan& span, const std::vector<CaptionRecord>& captions,
                          ExpertBackend& experts, const PipelineConfig& cfg,
                          FuserBackend& fuser, FuseCache* cache);

/// Processes one shard and writes `shard-{id}.jsonl` (and its failures
/// sidecar) into `out_dir` by rename. Returns the updated entry: done with a
/// checksum, or failed with a reason. AuthFailure propagates.
ShardEntry run_shard(const ShardEntry& entry, const std::vector<CaptionRecord>& captions,
                     ExpertBackend& experts, const PipelineConfig& cfg, FuserBackend& fuser,
                     FuseCache* cache, const std::string& out_dir);

struct RunOptions {
  std::size_t workers = 1;
  std::string cache_dir;  // empty = no persistent cache
  /// Called after each shard finishes, under the manifest lock.
  std::function<void(const ShardEntry&)> on_shard_done;
};

struct RunResult {
  int exit_code = 0;  // 0 ok, 2 some shards failed
  ShardManifest manifest;
};

/// Runs (or resumes) a whole job into `out_dir`: manifest.json,
/// shard-NNNNNN.jsonl, failures.jsonl. Throws ConfigMismatch (exit 3) and
/// AuthFailure.
RunResult run_pipeline(const std::string& captions_path, const std::string& bundles_source,
                       const std::string& out_dir, const PipelineConfig& cfg,
                       const RunOptions& options = {});

/// Same, with captions and backends supplied by the caller.
RunResult run_pipeline(const std::vector<CaptionRecord>& captions, ExpertBackend& experts,
                       FuserBackend& fuser, const std::string& out_dir,
                       const PipelineConfig& cfg, const RunOptions& options = {});

class IncompleteRun : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunReport {
  RunCounters counters;
  std::optional<LengthStats> enriched_lengths;  // none if nothing was fused
  double throughput_records_per_s = 0.0;
};

/// Aggregates a finished run. Throws IncompleteRun naming unfinished shards.
RunReport summarize(const ShardManifest& manifest, const std::string& out_dir,
                    const TokenBudget& budget = {});

std::string to_json(const RunReport& report);

}  // namespace capfuse
