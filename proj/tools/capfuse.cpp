// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

// capfuse command-line tool.

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "capfuse/datamodel.hpp"
#include "capfuse/eval_metrics.hpp"
#include "capfuse/expert_ingest.hpp"
#include "capfuse/fuser_client.hpp"
#include "capfuse/humaneval.hpp"
#include "capfuse/pipeline.hpp"
#include "capfuse/promptgen.hpp"
#include "capfuse/spatial.hpp"
#include "capfuse/text.hpp"
#include "json.hpp"

using namespace capfuse;
using nlohmann::json;

namespace {

constexpr int kExitError = 1;
constexpr int kExitPartial = 2;
constexpr int kExitConfigMismatch = 3;
constexpr int kExitAuth = 4;

// Options shared by every subcommand that runs records through the
// filter -> order -> render chain.
struct ChainOptions {
  double det_threshold = 0.7;
  double attr_threshold = 0.2;
  bool inclusive = false;
  std::string scene_text = "on";
  std::string order = "center";

  void add_to(CLI::App* app) {
    app->add_option("--det-threshold", det_threshold, "Keep detections scoring above this")
        ->check(CLI::Range(0.0, 1.0));
    app->add_option("--attr-threshold", attr_threshold, "Keep attributes scoring above this")
        ->check(CLI::Range(0.0, 1.0));
    app->add_flag("--inclusive", inclusive, "Keep scores equal to a threshold (>= instead of >)");
    app->add_option("--scene-text", scene_text, "Emit the line for unassigned OCR text")
        ->check(CLI::IsMember({"on", "off"}));
    app->add_option("--order", order, "Left-to-right sort key")
        ->check(CLI::IsMember({"center", "xmin"}));
  }

  PipelineConfig pipeline_config() const {
    PipelineConfig cfg;
    cfg.filter = {det_threshold, attr_threshold, !inclusive};
    cfg.order_key = order == "xmin" ? OrderKey::kXMin : OrderKey::kCenter;
    cfg.prompt.scene_text = scene_text == "on";
    return cfg;
  }
};

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  return out;
}

template <typename F>
void for_each_line(const std::string& path, F&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!trim(line).empty()) fn(line, line_no);
  }
}

void report_bundle_error(const BundleError& e) {
  std::cerr << "warning: " << e.image_id << ": " << to_string(e.kind);
  if (e.line) std::cerr << " (line " << e.line << ")";
  std::cerr << ": " << e.message << "\n";
}

// ---- validate ----

int cmd_validate(const std::string& captions, const std::string& bundles) {
  std::size_t bad = 0, total = 0;
  auto check = [&](const std::string& path, auto validator) {
    for_each_line(path, [&](const std::string& line, std::size_t line_no) {
      ++total;
      const ValidationReport r = validator(line);
      for (const Violation& v : r.violations) {
        std::cout << path << ":" << line_no << ": " << v.field << ": " << v.message << "\n";
      }
      bad += r.ok() ? 0 : 1;
    });
  };
  if (!captions.empty()) check(captions, validate_caption_line);
  if (!bundles.empty()) check(bundles, validate_bundle_line);
  std::cout << total - bad << "/" << total << " records valid\n";
  return bad ? kExitError : 0;
}

// ---- filter ----

int cmd_filter(const std::string& in_path, const std::string& out_path, const ChainOptions& opt) {
  const FilterConfig cfg = opt.pipeline_config().filter;
  cfg.validate();
  auto out = open_output(out_path);
  std::size_t kept_dets = 0, in_dets = 0, errors = 0;
  for_each_line(in_path, [&](const std::string& line, std::size_t line_no) {
    try {
      const ExpertBundle b = parse_bundle(line);
      const ExpertBundle f = filter_attributes(filter_detections(b, cfg), cfg);
      in_dets += b.detections.size();
      kept_dets += f.detections.size();
      out << serialize(f) << "\n";
    } catch (const std::exception& e) {
      ++errors;
      std::cerr << "warning: " << in_path << ":" << line_no << ": " << e.what() << "\n";
    }
  });
  std::cerr << "kept " << kept_dets << " of " << in_dets << " detections";
  if (errors) std::cerr << "; skipped " << errors << " bad lines";
  std::cerr << "\n";
  return 0;
}

// ---- prompt / finetune ----

struct PromptRow {
  CaptionRecord record;
  PreparedRecord prepared;
};

// Prepares every caption against the bundle source, reporting per-item
// problems on stderr.
std::vector<PromptRow> prepare_all(const std::string& bundles, const std::string& captions,
                                   const PipelineConfig& cfg) {
  cfg.filter.validate();
  auto experts = open_expert_backend(bundles);
  std::vector<PromptRow> rows;
  for (CaptionRecord& rec : read_caption_file(captions)) {
    const BundleResult b = experts->fetch(rec.image_id);
    if (b.error && b.error->kind != BundleError::Kind::kMissing) report_bundle_error(*b.error);
    PreparedRecord p = prepare_record(rec, b, cfg);
    rows.push_back({std::move(rec), std::move(p)});
  }
  return rows;
}

int cmd_prompt(const std::string& bundles, const std::string& captions,
               const std::string& out_path, const ChainOptions& opt) {
  const auto rows = prepare_all(bundles, captions, opt.pipeline_config());
  auto out = open_output(out_path);
  std::size_t emitted = 0, over = 0;
  for (const PromptRow& row : rows) {
    if (row.prepared.kind != PreparedRecord::Kind::kFuse) continue;
    const FusePrompt& p = row.prepared.prompt;
    out << json{{"image_id", row.record.image_id},
                {"prompt", p.text},
                {"object_count", p.object_count},
                {"token_count", p.token_count},
                {"over_budget", p.over_budget}}
               .dump()
        << "\n";
    ++emitted;
    over += p.over_budget ? 1 : 0;
  }
  std::cerr << emitted << " prompts (" << over << " over budget), "
            << rows.size() - emitted << " records without anything to fuse\n";
  return 0;
}

int cmd_finetune(const std::string& bundles, const std::string& captions,
                 const std::string& out_path, const std::string& style, const ChainOptions& opt) {
  const auto rows = prepare_all(bundles, captions, opt.pipeline_config());
  const InputStyle input_style = style == "concat" ? InputStyle::kConcat : InputStyle::kPrompt;
  auto out = open_output(out_path);
  std::size_t emitted = 0, skipped = 0;
  for (const PromptRow& row : rows) {
    const auto& target = row.record.enriched_caption;
    if (row.prepared.kind != PreparedRecord::Kind::kFuse || !target || trim(*target).empty()) {
      ++skipped;
      continue;
    }
    out << serialize(make_finetune_pair(row.prepared.prompt, *target, {}, input_style)) << "\n";
    ++emitted;
  }
  std::cerr << emitted << " pairs written, " << skipped << " records skipped\n";
  return 0;
}

// ---- run / summarize ----

struct RunArgs {
  std::string captions, bundles, out, backend = "mock", cache_dir, endpoint, model_id;
  std::size_t shard_size = 10000, workers = 1, max_in_flight = 4;
  int retry_max = 3;
  bool full_provenance = false;
};

int cmd_run(const RunArgs& a, const ChainOptions& opt) {
  PipelineConfig cfg = opt.pipeline_config();
  cfg.shard_size = a.shard_size;
  cfg.backend = a.backend == "http" ? BackendKind::kHttp : BackendKind::kMock;
  cfg.full_provenance = a.full_provenance;
  cfg.fuser.endpoint = a.endpoint;
  if (!a.model_id.empty()) cfg.fuser.model_id = a.model_id;
  cfg.fuser.max_in_flight = a.max_in_flight;
  cfg.fuser.retry_max = a.retry_max;

  RunOptions ro;
  ro.workers = a.workers;
  ro.cache_dir = a.cache_dir;
  ro.on_shard_done = [](const ShardEntry& e) {
    std::cerr << "shard " << e.shard_id << " done (" << e.counters.records_in << " records)\n";
  };
  const RunResult r = run_pipeline(a.captions, a.bundles, a.out, cfg, ro);
  const RunCounters c = r.manifest.counters();
  std::cout << json{{"records_in", c.records_in},
                    {"records_fused", c.records_fused},
                    {"records_passthrough", c.records_passthrough},
                    {"records_failed", c.records_failed}}
                   .dump()
            << "\n";
  for (const ShardEntry& s : r.manifest.shards) {
    if (s.status != ShardStatus::kDone) {
      std::cerr << "shard " << s.shard_id << " " << to_string(s.status) << ": " << s.reason << "\n";
    }
  }
  return r.exit_code == 0 ? 0 : kExitPartial;
}

int cmd_summarize(const std::string& out_dir) {
  const ShardManifest m = ShardManifest::load(out_dir + "/manifest.json");
  std::cout << to_json(summarize(m, out_dir)) << "\n";
  return 0;
}

// ---- eval ----

std::unordered_map<std::string, std::string> load_pairing(const std::string& path,
                                                          const EmbeddingSet& captions) {
  std::unordered_map<std::string, std::string> pairing;
  if (path.empty()) {
    for (const std::string& id : captions.ids) pairing[id] = id;
    return pairing;
  }
  for_each_line(path, [&](const std::string& line, std::size_t) {
    const json j = json::parse(line);
    pairing[j.at("caption_id").get<std::string>()] = j.at("image_id").get<std::string>();
  });
  return pairing;
}

int cmd_clipscore(const std::string& captions_path, const std::string& images_path,
                  const std::string& pairing_path, const std::string& compare_path,
                  double weight, const std::string& scale, const std::string& basis) {
  const ClipScoreConfig cfg{weight, scale == "raw" ? ReportScale::kRaw : ReportScale::kPercent};
  const EmbeddingSet captions = read_embeddings(captions_path);
  const EmbeddingSet images = read_embeddings(images_path);
  captions.validate();
  images.validate();
  const auto pairing = load_pairing(pairing_path, captions);
  json out = {{"clip_score", mean_clip_score(captions, images, pairing, cfg)},
              {"n", captions.size()}};
  if (!compare_path.empty()) {
    // Voting: the original captions are --captions, the fused ones --compare,
    // matched by caption id.
    const EmbeddingSet fused = read_embeddings(compare_path);
    fused.validate();
    const VoteBasis vb = basis == "clip" ? VoteBasis::kClipScore : VoteBasis::kRawCosine;
    const auto orig_scores = per_pair_scores(captions, images, pairing, vb, cfg);
    const auto fused_index = fused.index();
    EmbeddingSet fused_aligned;
    fused_aligned.ids = captions.ids;
    fused_aligned.vectors = Matrix(captions.size(), fused.dim());
    for (std::size_t i = 0; i < captions.size(); ++i) {
      auto it = fused_index.find(captions.ids[i]);
      if (it == fused_index.end()) {
        throw std::invalid_argument("no fused embedding for caption '" + captions.ids[i] + "'");
      }
      for (std::size_t d = 0; d < fused.dim(); ++d) fused_aligned.vectors(i, d) = fused.vectors(it->second, d);
    }
    const auto fused_scores = per_pair_scores(fused_aligned, images, pairing, vb, cfg);
    const VoteSummary v = vote_preference(orig_scores, fused_scores);
    out["compare_clip_score"] = mean_clip_score(fused_aligned, images, pairing, cfg);
    out["vote"] = {{"original_frac", v.original_frac}, {"fused_frac", v.fused_frac},
                   {"tie_frac", v.tie_frac},           {"original_wins", v.original_wins},
                   {"fused_wins", v.fused_wins},       {"ties", v.ties},
                   {"basis", basis}};
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

std::vector<std::size_t> parse_ks(const std::string& spec) {
  std::vector<std::size_t> ks;
  std::stringstream ss(spec);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!trim(item).empty()) ks.push_back(std::stoul(std::string(trim(item))));
  }
  return ks;
}

int cmd_retrieval(const std::string& sim_path, const std::string& itm_path,
                  const std::string& gt_path, const std::string& ks_spec, std::size_t rerank_k,
                  const std::string& direction) {
  RetrievalSetup setup;
  setup.sim = read_raw_matrix(sim_path, sim_path + ".json").data;
  if (!itm_path.empty()) setup.itm = read_raw_matrix(itm_path, itm_path + ".json").data;
  const json gt = json::parse(read_file(gt_path));
  setup.text_to_image = gt.at("text_to_image").get<std::vector<std::size_t>>();
  setup.image_to_texts.assign(setup.sim.rows, {});
  for (std::size_t t = 0; t < setup.text_to_image.size(); ++t) {
    if (setup.text_to_image[t] >= setup.sim.rows) {
      throw std::invalid_argument("ground truth names image " +
                                  std::to_string(setup.text_to_image[t]) + " out of range");
    }
    setup.image_to_texts[setup.text_to_image[t]].push_back(t);
  }
  const auto ks = parse_ks(ks_spec);
  json out = json::object();
  auto emit = [&](Direction d, const char* name) {
    json entry;
    for (const auto& [k, v] : recall_at_k(setup, d, ks)) entry["R@" + std::to_string(k)] = v;
    if (rerank_k > 0) {
      if (!setup.itm) throw std::invalid_argument("--rerank-k needs --itm");
      setup.k_candidates = rerank_k;
      std::vector<std::size_t> rks;
      for (std::size_t k : ks) if (k <= rerank_k) rks.push_back(k);
      json re;
      for (const auto& [k, v] : rerank_topk(setup, d, rks)) re["R@" + std::to_string(k)] = v;
      entry["rerank"] = re;
      entry["rerank_k"] = rerank_k;
    }
    out[name] = entry;
  };
  if (direction != "t2i") emit(Direction::kImageToText, "image_to_text");
  if (direction != "i2t") emit(Direction::kTextToImage, "text_to_image");
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_lengths(const std::string& captions_path, const std::string& field) {
  std::vector<std::string> texts;
  for (const CaptionRecord& r : read_caption_file(captions_path)) {
    if (field == "original") {
      texts.push_back(r.original_caption);
    } else if (r.enriched_caption) {
      texts.push_back(*r.enriched_caption);
    }
  }
  const LengthStats s = length_stats(texts);
  std::cout << json{{"n", texts.size()},           {"mean_tokens", s.mean_tokens},
                    {"p50", s.p50},                {"p95", s.p95},
                    {"frac_over_30", s.frac_over_30}, {"frac_over_60", s.frac_over_60}}
                   .dump(2)
            << "\n";
  return 0;
}

// ---- serve ----

StudyServer* g_server = nullptr;

extern "C" void handle_stop(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(const std::string& config_path, const std::string& log_path,
              const std::string& static_dir, const std::string& host, int port) {
  Study study(StudyConfig::load(config_path), log_path);
  StudyServer server(study, {static_dir});
  g_server = &server;
  std::signal(SIGINT, handle_stop);
  std::signal(SIGTERM, handle_stop);
  int bound = port;
  if (port == 0) {
    bound = server.bind_to_any_port(host);
    std::cerr << "listening on " << host << ":" << bound << "\n";
    server.listen_after_bind();
  } else {
    std::cerr << "listening on " << host << ":" << bound << "\n";
    if (!server.listen(host, port)) throw std::runtime_error("cannot listen on port " + std::to_string(port));
  }
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capfuse: caption enrichment by fusing vision-expert outputs"};
  app.require_subcommand(1);
  int exit_code = 0;

  std::string captions, bundles, in, out;

  auto* validate = app.add_subcommand("validate", "Check caption and bundle JSONL files");
  validate->add_option("--captions", captions, "Caption JSONL")->check(CLI::ExistingFile);
  validate->add_option("--bundles", bundles, "Expert bundle JSONL")->check(CLI::ExistingFile);

  ChainOptions filter_opts;
  auto* filter = app.add_subcommand("filter", "Apply confidence thresholds to expert bundles");
  filter->add_option("--in", in, "Bundle JSONL")->required()->check(CLI::ExistingFile);
  filter->add_option("--out", out, "Filtered bundle JSONL")->required();
  filter_opts.add_to(filter);

  ChainOptions prompt_opts;
  auto* prompt = app.add_subcommand("prompt", "Render fusion prompts");
  prompt->add_option("--in", in, "Bundle JSONL or http:// endpoint")->required();
  prompt->add_option("--captions", captions, "Caption JSONL")->required()->check(CLI::ExistingFile);
  prompt->add_option("--out", out, "Prompt JSONL")->required();
  prompt_opts.add_to(prompt);

  ChainOptions ft_opts;
  std::string input_style = "prompt";
  auto* finetune = app.add_subcommand("finetune", "Build fine-tuning pairs from enriched captions");
  finetune->add_option("--in", in, "Bundle JSONL or http:// endpoint")->required();
  finetune->add_option("--captions", captions, "Caption JSONL with enriched_caption targets")
      ->required()
      ->check(CLI::ExistingFile);
  finetune->add_option("--out", out, "Pair JSONL")->required();
  finetune->add_option("--input-style", input_style, "Model input serialization")
      ->check(CLI::IsMember({"prompt", "concat"}));
  ft_opts.add_to(finetune);

  ChainOptions run_opts;
  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Sharded end-to-end enrichment run");
  run->add_option("--captions", run_args.captions, "Caption JSONL")->required()->check(CLI::ExistingFile);
  run->add_option("--bundles", run_args.bundles, "Bundle JSONL or http:// endpoint")->required();
  run->add_option("--out", run_args.out, "Output directory")->required();
  run->add_option("--shard-size", run_args.shard_size, "Records per shard")->check(CLI::PositiveNumber);
  run->add_option("--workers", run_args.workers, "Concurrent shards")->check(CLI::PositiveNumber);
  run->add_option("--backend", run_args.backend, "Fuser backend")->check(CLI::IsMember({"mock", "http"}));
  run->add_option("--cache-dir", run_args.cache_dir, "Persistent completion cache");
  run->add_option("--endpoint", run_args.endpoint, "Fuser endpoint (default: $CAPFUSE_LLM_ENDPOINT)");
  run->add_option("--model-id", run_args.model_id, "Remote model id used in cache keys");
  run->add_option("--max-in-flight", run_args.max_in_flight, "Concurrent requests per shard")
      ->check(CLI::PositiveNumber);
  run->add_option("--retry-max", run_args.retry_max, "Retries for transient errors")
      ->check(CLI::NonNegativeNumber);
  run->add_flag("--full-provenance", run_args.full_provenance,
                "Record timestamp and cache hit per record (breaks byte reproducibility)");
  run_opts.add_to(run);

  std::string out_dir;
  auto* summarize_cmd = app.add_subcommand("summarize", "Report on a finished run");
  summarize_cmd->add_option("--out", out_dir, "Run output directory")->required()->check(CLI::ExistingDirectory);

  auto* eval = app.add_subcommand("eval", "Evaluation metrics");
  eval->require_subcommand(1);

  std::string images, pairing, compare, scale = "percent", basis = "raw";
  double weight = 2.5;
  auto* clip = eval->add_subcommand("clipscore", "Mean CLIPScore, optionally with a vote");
  clip->add_option("--captions", captions, "Caption embeddings")->required()->check(CLI::ExistingFile);
  clip->add_option("--images", images, "Image embeddings")->required()->check(CLI::ExistingFile);
  clip->add_option("--pairing", pairing, "JSONL {caption_id, image_id}; default pairs equal ids");
  clip->add_option("--compare", compare, "Fused caption embeddings to vote against --captions");
  clip->add_option("--weight", weight, "CLIPScore weight");
  clip->add_option("--scale", scale, "Report scale")->check(CLI::IsMember({"percent", "raw"}));
  clip->add_option("--vote-basis", basis, "Per-pair comparison score")->check(CLI::IsMember({"raw", "clip"}));

  std::string sim, itm, gt, ks = "1,5,10", direction = "both";
  std::size_t rerank_k = 0;
  auto* retrieval = eval->add_subcommand("retrieval", "Recall@K from ITC (and ITM) score matrices");
  retrieval->add_option("--sim", sim, "images x texts f32 matrix (sidecar at <path>.json)")
      ->required()
      ->check(CLI::ExistingFile);
  retrieval->add_option("--itm", itm, "ITM matrix, same shape")->check(CLI::ExistingFile);
  retrieval->add_option("--gt", gt, "JSON {\"text_to_image\": [...]}")->required()->check(CLI::ExistingFile);
  retrieval->add_option("--k", ks, "Comma-separated cut-offs");
  retrieval->add_option("--rerank-k", rerank_k, "Re-rank the top K candidates by ITM (0 = off)");
  retrieval->add_option("--direction", direction)->check(CLI::IsMember({"i2t", "t2i", "both"}));

  std::string field = "enriched";
  auto* lengths = eval->add_subcommand("lengths", "Caption length statistics");
  lengths->add_option("--captions", captions, "Caption JSONL")->required()->check(CLI::ExistingFile);
  lengths->add_option("--field", field)->check(CLI::IsMember({"enriched", "original"}));

  std::string study_config, log_path = "votes.jsonl", static_dir, host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "Run the human-evaluation study server");
  serve->add_option("--study-config", study_config, "Study JSON")->required()->check(CLI::ExistingFile);
  serve->add_option("--port", port, "TCP port (0 = any)");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--log", log_path, "Append-only vote log");
  serve->add_option("--static", static_dir, "Survey UI bundle directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) {
      if (captions.empty() && bundles.empty()) throw CLI::ValidationError("need --captions or --bundles");
      exit_code = cmd_validate(captions, bundles);
    } else if (*filter) {
      exit_code = cmd_filter(in, out, filter_opts);
    } else if (*prompt) {
      exit_code = cmd_prompt(in, captions, out, prompt_opts);
    } else if (*finetune) {
      exit_code = cmd_finetune(in, captions, out, input_style, ft_opts);
    } else if (*run) {
      exit_code = cmd_run(run_args, run_opts);
    } else if (*summarize_cmd) {
      exit_code = cmd_summarize(out_dir);
    } else if (*clip) {
      exit_code = cmd_clipscore(captions, images, pairing, compare, weight, scale, basis);
    } else if (*retrieval) {
      exit_code = cmd_retrieval(sim, itm, gt, ks, rerank_k, direction);
    } else if (*lengths) {
      exit_code = cmd_lengths(captions, field);
    } else if (*serve) {
      exit_code = cmd_serve(study_config, log_path, static_dir, host, port);
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const ConfigMismatch& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfigMismatch;
  } catch (const AuthFailure& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitAuth;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return exit_code;
}
