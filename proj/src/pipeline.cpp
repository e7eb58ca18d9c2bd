// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#include "capfuse/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "capfuse/text.hpp"
#include "json.hpp"

namespace capfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string_view to_string(OrderKey key) {
  return key == OrderKey::kCenter ? "center" : "xmin";
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json counters_json(const RunCounters& c) {
  return {{"records_in", c.records_in},
          {"records_fused", c.records_fused},
          {"records_passthrough", c.records_passthrough},
          {"records_failed", c.records_failed}};
}

RunCounters counters_from_json(const json& j) {
  return {j.at("records_in").get<std::size_t>(), j.at("records_fused").get<std::size_t>(),
          j.at("records_passthrough").get<std::size_t>(),
          j.at("records_failed").get<std::size_t>()};
}

std::string failure_line(const std::string& image_id, std::string_view stage,
                         std::string_view error, const std::string& message) {
  json j = {{"image_id", image_id}, {"stage", stage}, {"error", error}, {"message", message}};
  return j.dump();
}

}  // namespace

std::string effective_config_json(const PipelineConfig& cfg, std::size_t record_count) {
  const bool mock = cfg.backend == BackendKind::kMock;
  json j = {
      {"detection_threshold", cfg.filter.detection_threshold},
      {"attribute_threshold", cfg.filter.attribute_threshold},
      {"strict_inequality", cfg.filter.strict_inequality},
      {"order_key", to_string(cfg.order_key)},
      {"scene_text", cfg.prompt.scene_text},
      {"source_budget", cfg.prompt.budget.source_budget},
      {"backend", mock ? "mock" : "http"},
      {"model_id", mock ? std::string(kMockModelId) : cfg.fuser.model_id},
      {"max_tokens", cfg.fuser.max_tokens},
      {"shard_size", cfg.shard_size},
      {"record_count", record_count},
      {"full_provenance", cfg.full_provenance},
  };
  return j.dump();
}

std::string config_hash(const PipelineConfig& cfg, std::size_t record_count) {
  return sha256_hex(effective_config_json(cfg, record_count));
}

std::vector<ShardSpan> plan_shards(std::size_t record_count, std::size_t shard_size) {
  if (record_count == 0 || shard_size == 0) {
    throw std::invalid_argument("record count and shard size must be positive");
  }
  std::vector<ShardSpan> spans;
  spans.reserve((record_count + shard_size - 1) / shard_size);
  for (std::size_t begin = 0; begin < record_count; begin += shard_size) {
    spans.push_back({begin, std::min(begin + shard_size, record_count)});
  }
  return spans;
}

std::string_view to_string(ShardStatus status) {
  switch (status) {
    case ShardStatus::kPending: return "pending";
    case ShardStatus::kInProgress: return "in_progress";
    case ShardStatus::kDone: return "done";
    case ShardStatus::kFailed: return "failed";
  }
  return "pending";
}

ShardStatus parse_shard_status(std::string_view s) {
  if (s == "pending") return ShardStatus::kPending;
  if (s == "in_progress") return ShardStatus::kInProgress;
  if (s == "done") return ShardStatus::kDone;
  if (s == "failed") return ShardStatus::kFailed;
  throw std::invalid_argument("unknown shard status '" + std::string(s) + "'");
}

RunCounters& RunCounters::operator+=(const RunCounters& o) {
  records_in += o.records_in;
  records_fused += o.records_fused;
  records_passthrough += o.records_passthrough;
  records_failed += o.records_failed;
  return *this;
}

RunCounters ShardManifest::counters() const {
  RunCounters total;
  for (const ShardEntry& s : shards) {
    if (s.status == ShardStatus::kDone) total += s.counters;
  }
  return total;
}

void ShardManifest::validate() const {
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    const ShardEntry& s = shards[i];
    if (s.shard_id != i) throw std::logic_error("shard ids must be 0..n-1 in order");
    if (s.span.begin != cursor || s.span.end <= s.span.begin) {
      throw std::logic_error("shard " + std::to_string(i) + " does not continue the partition");
    }
    cursor = s.span.end;
    if (s.status == ShardStatus::kDone && s.output_checksum.empty()) {
      throw std::logic_error("done shard " + std::to_string(i) + " has no checksum");
    }
  }
  if (cursor != record_count) throw std::logic_error("shards do not cover every record");
}

std::string ShardManifest::to_json() const {
  json shard_list = json::array();
  for (const ShardEntry& s : shards) {
    shard_list.push_back({{"shard_id", s.shard_id},
                          {"begin", s.span.begin},
                          {"end", s.span.end},
                          {"status", capfuse::to_string(s.status)},
                          {"output_checksum", s.output_checksum},
                          {"reason", s.reason},
                          {"counters", counters_json(s.counters)}});
  }
  json j = {{"run_id", run_id},
            {"config_hash", config_hash},
            {"record_count", record_count},
            {"shard_size", shard_size},
            {"elapsed_seconds", elapsed_seconds},
            {"counters", counters_json(counters())},
            {"shards", std::move(shard_list)}};
  return j.dump(1);
}

ShardManifest ShardManifest::from_json(std::string_view text) {
  const json j = json::parse(text.begin(), text.end());
  ShardManifest m;
  m.run_id = j.at("run_id").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.record_count = j.at("record_count").get<std::size_t>();
  m.shard_size = j.at("shard_size").get<std::size_t>();
  m.elapsed_seconds = j.value("elapsed_seconds", 0.0);
  for (const json& js : j.at("shards")) {
    ShardEntry s;
    s.shard_id = js.at("shard_id").get<std::size_t>();
    s.span = {js.at("begin").get<std::size_t>(), js.at("end").get<std::size_t>()};
    s.status = parse_shard_status(js.at("status").get<std::string>());
    s.output_checksum = js.value("output_checksum", std::string());
    s.reason = js.value("reason", std::string());
    if (auto it = js.find("counters"); it != js.end()) s.counters = counters_from_json(*it);
    m.shards.push_back(std::move(s));
  }
  m.validate();
  return m;
}

ShardManifest ShardManifest::load(const std::string& path) {
  return from_json(read_file(path));
}

void ShardManifest::save(const std::string& path) const { write_file_atomic(path, to_json()); }

std::vector<std::size_t> resume(const ShardManifest& manifest,
                                const std::string& current_config_hash) {
  if (manifest.config_hash != current_config_hash) {
    throw ConfigMismatch(
        "output directory was produced with a different configuration (manifest " +
        manifest.config_hash.substr(0, 12) + ", current " +
        current_config_hash.substr(0, 12) +
        "); use a fresh output directory or restore the original settings");
  }
  std::vector<std::size_t> plan;
  for (const ShardEntry& s : manifest.shards) {
    if (s.status != ShardStatus::kDone) plan.push_back(s.shard_id);
  }
  return plan;
}

std::string shard_file_name(std::size_t shard_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "shard-%06zu.jsonl", shard_id);
  return buf;
}

std::string shard_failures_file_name(std::size_t shard_id) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "shard-%06zu.failures.jsonl", shard_id);
  return buf;
}

PreparedRecord prepare_record(const CaptionRecord& record, const BundleResult& bundle,
                              const PipelineConfig& cfg) {
  PreparedRecord out;
  if (record.original_caption.empty()) {
    out.kind = PreparedRecord::Kind::kFailed;
    out.reason = "empty original caption";
    return out;
  }
  if (!bundle.ok()) {
    if (bundle.error && bundle.error->kind != BundleError::Kind::kMissing) {
      out.kind = PreparedRecord::Kind::kFailed;
      out.reason = std::string(to_string(bundle.error->kind)) + ": " + bundle.error->message;
    }
    return out;  // no expert output at all: passthrough
  }

  ExpertBundle b = filter_attributes(filter_detections(*bundle.bundle, cfg.filter), cfg.filter);
  if (!b.ocr_enabled) b.ocr_tokens.clear();
  const OcrAssignment assignment = assign_ocr_tokens(b.detections, b.ocr_tokens);
  const auto objects = order_left_to_right(b.detections, b.ocr_tokens, assignment, cfg.order_key);
  std::vector<std::string> scene_texts;
  for (const OcrToken& t : assignment.unassigned) scene_texts.push_back(t.text);
  try {
    out.prompt = render_fuse_prompt(record.original_caption, objects, scene_texts, cfg.prompt);
    out.kind = PreparedRecord::Kind::kFuse;
  } catch (const NothingToFuse&) {
    out.kind = PreparedRecord::Kind::kPassthrough;
  }
  return out;
}

ShardOutput process_shard(const ShardSpan& span, const std::vector<CaptionRecord>& captions,
                          ExpertBackend& experts, const PipelineConfig& cfg,
                          FuserBackend& fuser, FuseCache* cache) {
  if (span.end > captions.size()) throw std::out_of_range("shard span beyond input");
  std::vector<PreparedRecord> prepared;
  prepared.reserve(span.size());
  std::vector<FuseRequest> requests;
  std::vector<std::size_t> request_of(span.size(), SIZE_MAX);
  for (std::size_t i = span.begin; i < span.end; ++i) {
    const CaptionRecord& rec = captions[i];
    prepared.push_back(prepare_record(rec, experts.fetch(rec.image_id), cfg));
    if (prepared.back().kind == PreparedRecord::Kind::kFuse) {
      request_of[i - span.begin] = requests.size();
      requests.push_back({rec.image_id, std::move(prepared.back().prompt)});
    }
  }
  const std::vector<FuseOutcome> fused = fuse_batch(requests, cfg.fuser, fuser, cache);

  ShardOutput out;
  const std::string timestamp = cfg.full_provenance ? utc_timestamp() : std::string();
  for (std::size_t k = 0; k < prepared.size(); ++k) {
    CaptionRecord rec = captions[span.begin + k];
    ++out.counters.records_in;
    const PreparedRecord& p = prepared[k];
    if (p.kind == PreparedRecord::Kind::kFailed) {
      ++out.counters.records_failed;
      out.failures += failure_line(rec.image_id, "ingest", "invalid-input", p.reason) + "\n";
      continue;
    }
    if (p.kind == PreparedRecord::Kind::kPassthrough) {
      ++out.counters.records_passthrough;
      rec.enriched_caption.reset();
      rec.fuse_provenance.reset();
      out.output += serialize(rec) + "\n";
      continue;
    }
    const FuseOutcome& outcome = fused[request_of[k]];
    if (!outcome.ok()) {
      ++out.counters.records_failed;
      const FuseError& e = *outcome.error;
      out.failures +=
          failure_line(rec.image_id, "fuse", to_string(e.kind),
                       e.message + (e.http_status ? " (HTTP " + std::to_string(e.http_status) + ")"
                                                  : std::string())) +
          "\n";
      continue;
    }
    ++out.counters.records_fused;
    rec.enriched_caption = outcome.result->enriched_caption;
    FuseProvenance prov{outcome.result->backend_model_id, std::nullopt, std::nullopt};
    if (cfg.full_provenance) {
      prov.timestamp = timestamp;
      prov.cache_hit = outcome.result->cache_hit;
    }
    rec.fuse_provenance = std::move(prov);
    out.output += serialize(rec) + "\n";
  }
  return out;
}

ShardEntry run_shard(const ShardEntry& entry, const std::vector<CaptionRecord>& captions,
                     ExpertBackend& experts, const PipelineConfig& cfg, FuserBackend& fuser,
                     FuseCache* cache, const std::string& out_dir) {
  ShardEntry updated = entry;
  try {
    ShardOutput out = process_shard(entry.span, captions, experts, cfg, fuser, cache);
    const fs::path dir(out_dir);
    write_file_atomic((dir / shard_failures_file_name(entry.shard_id)).string(), out.failures);
    write_file_atomic((dir / shard_file_name(entry.shard_id)).string(), out.output);
    updated.status = ShardStatus::kDone;
    updated.output_checksum = sha256_hex(out.output);
    updated.reason.clear();
    updated.counters = out.counters;
  } catch (const AuthFailure&) {
    throw;
  } catch (const std::exception& e) {
    updated.status = ShardStatus::kFailed;
    updated.output_checksum.clear();
    updated.reason = e.what();
    updated.counters = {};
  }
  return updated;
}

namespace {

void remove_stale_temp_files(const fs::path& dir) {
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().filename().string().find(".tmp.") != std::string::npos) {
      std::error_code ec;
      fs::remove(entry.path(), ec);
    }
  }
}

void merge_failures(const ShardManifest& manifest, const fs::path& dir) {
  std::string merged;
  for (const ShardEntry& s : manifest.shards) {
    if (s.status != ShardStatus::kDone) continue;
    const fs::path p = dir / shard_failures_file_name(s.shard_id);
    if (fs::exists(p)) merged += read_file(p.string());
  }
  write_file_atomic((dir / "failures.jsonl").string(), merged);
}

}  // namespace

RunResult run_pipeline(const std::vector<CaptionRecord>& captions, ExpertBackend& experts,
                       FuserBackend& fuser, const std::string& out_dir,
                       const PipelineConfig& cfg, const RunOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  cfg.filter.validate();
  cfg.fuser.validate();
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  const std::string manifest_path = (dir / "manifest.json").string();
  const std::string hash = config_hash(cfg, captions.size());

  ShardManifest manifest;
  if (fs::exists(manifest_path)) {
    manifest = ShardManifest::load(manifest_path);
  } else {
    manifest.run_id = sha256_hex(hash + utc_timestamp() +
                                 std::to_string(started.time_since_epoch().count()))
                          .substr(0, 16);
    manifest.config_hash = hash;
    manifest.record_count = captions.size();
    manifest.shard_size = cfg.shard_size;
    const auto spans = plan_shards(captions.size(), cfg.shard_size);
    for (std::size_t i = 0; i < spans.size(); ++i) {
      manifest.shards.push_back({i, spans[i], ShardStatus::kPending, "", "", {}});
    }
    manifest.save(manifest_path);
  }
  const std::vector<std::size_t> plan = resume(manifest, hash);
  remove_stale_temp_files(dir);

  std::optional<DiskFuseCache> cache;
  if (!options.cache_dir.empty()) cache.emplace(options.cache_dir);

  std::mutex manifest_mu;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> abort{false};
  std::exception_ptr fatal;

  auto set_entry = [&](const ShardEntry& e) {
    std::lock_guard lock(manifest_mu);
    manifest.shards[e.shard_id] = e;
    manifest.save(manifest_path);
    if (e.status == ShardStatus::kDone && options.on_shard_done) options.on_shard_done(e);
  };

  auto work = [&] {
    while (!abort.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= plan.size()) return;
      ShardEntry entry;
      {
        std::lock_guard lock(manifest_mu);
        entry = manifest.shards[plan[i]];
      }
      entry.status = ShardStatus::kInProgress;
      set_entry(entry);
      try {
        set_entry(run_shard(entry, captions, experts, cfg, fuser,
                            cache ? &*cache : nullptr, out_dir));
      } catch (const std::exception& e) {
        entry.status = ShardStatus::kFailed;
        entry.reason = std::string("run aborted: ") + e.what();
        set_entry(entry);
        std::lock_guard lock(manifest_mu);
        if (!fatal) fatal = std::current_exception();
        abort.store(true);
      }
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, plan.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (std::thread& t : pool) t.join();
  }

  {
    std::lock_guard lock(manifest_mu);
    manifest.elapsed_seconds +=
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    manifest.save(manifest_path);
  }
  merge_failures(manifest, dir);
  if (fatal) std::rethrow_exception(fatal);

  RunResult result;
  result.manifest = manifest;
  for (const ShardEntry& s : manifest.shards) {
    if (s.status != ShardStatus::kDone) result.exit_code = 2;
  }
  return result;
}

RunResult run_pipeline(const std::string& captions_path, const std::string& bundles_source,
                       const std::string& out_dir, const PipelineConfig& cfg,
                       const RunOptions& options) {
  const std::vector<CaptionRecord> captions = read_caption_file(captions_path);
  auto experts = open_expert_backend(bundles_source);
  std::unique_ptr<FuserBackend> fuser;
  if (cfg.backend == BackendKind::kMock) {
    fuser = std::make_unique<MockFuserBackend>();
  } else {
    fuser = std::make_unique<HttpFuserBackend>(cfg.fuser);
  }
  return run_pipeline(captions, *experts, *fuser, out_dir, cfg, options);
}

RunReport summarize(const ShardManifest& manifest, const std::string& out_dir,
                    const TokenBudget& budget) {
  std::vector<std::string> unfinished;
  for (const ShardEntry& s : manifest.shards) {
    if (s.status != ShardStatus::kDone) {
      unfinished.push_back(std::to_string(s.shard_id) + " (" +
                           std::string(to_string(s.status)) +
                           (s.reason.empty() ? "" : ": " + s.reason) + ")");
    }
  }
  if (!unfinished.empty()) {
    throw IncompleteRun("run incomplete; unfinished shards: " + join(unfinished, ", "));
  }
  RunReport report;
  report.counters = manifest.counters();
  std::vector<std::string> enriched;
  for (const ShardEntry& s : manifest.shards) {
    std::ifstream in(fs::path(out_dir) / shard_file_name(s.shard_id));
    if (!in) throw IncompleteRun("missing output for shard " + std::to_string(s.shard_id));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      CaptionRecord r = parse_caption(line);
      if (r.enriched_caption) enriched.push_back(std::move(*r.enriched_caption));
    }
  }
  if (!enriched.empty()) report.enriched_lengths = length_stats(enriched, budget);
  if (manifest.elapsed_seconds > 0.0) {
    report.throughput_records_per_s =
        static_cast<double>(report.counters.records_in) / manifest.elapsed_seconds;
  }
  return report;
}

std::string to_json(const RunReport& report) {
  json j = {{"counters", counters_json(report.counters)},
            {"throughput_records_per_s", report.throughput_records_per_s}};
  if (report.enriched_lengths) {
    const LengthStats& l = *report.enriched_lengths;
    j["enriched_lengths"] = {{"mean_tokens", l.mean_tokens}, {"p50", l.p50}, {"p95", l.p95},
                             {"frac_over_30", l.frac_over_30}, {"frac_over_60", l.frac_over_60}};
  } else {
    j["enriched_lengths"] = nullptr;
  }
  return j.dump(2);
}

}  // namespace capfuse
