// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

// Python bindings. Records and bundles cross the boundary as JSON text; the
// package's __init__ converts to and from dicts.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "capfuse/datamodel.hpp"
#include "capfuse/eval_metrics.hpp"
#include "capfuse/expert_ingest.hpp"
#include "capfuse/fuser_client.hpp"
#include "capfuse/humaneval.hpp"
#include "capfuse/pipeline.hpp"
#include "capfuse/promptgen.hpp"
#include "capfuse/spatial.hpp"
#include "json.hpp"

namespace py = pybind11;
using namespace capfuse;

namespace {

FilterConfig make_filter(double det, double attr, bool strict) {
  FilterConfig cfg{det, attr, strict};
  cfg.validate();
  return cfg;
}

OrderKey parse_order(const std::string& s) {
  if (s == "center") return OrderKey::kCenter;
  if (s == "xmin") return OrderKey::kXMin;
  throw std::invalid_argument("order must be 'center' or 'xmin'");
}

Direction parse_direction(const std::string& s) {
  if (s == "i2t") return Direction::kImageToText;
  if (s == "t2i") return Direction::kTextToImage;
  throw std::invalid_argument("direction must be 'i2t' or 't2i'");
}

Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
  Matrix m(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols) throw std::invalid_argument("ragged matrix");
    for (std::size_t c = 0; c < m.cols; ++c) m(r, c) = rows[r][c];
  }
  return m;
}

RetrievalSetup make_setup(const std::vector<std::vector<double>>& sim,
                          const std::optional<std::vector<std::vector<double>>>& itm,
                          const std::vector<std::size_t>& text_to_image, std::size_t k_candidates) {
  RetrievalSetup s;
  s.sim = to_matrix(sim);
  if (itm) s.itm = to_matrix(*itm);
  s.text_to_image = text_to_image;
  s.image_to_texts.assign(s.sim.rows, {});
  for (std::size_t t = 0; t < text_to_image.size(); ++t) {
    if (text_to_image[t] >= s.sim.rows) throw std::invalid_argument("ground truth out of range");
    s.image_to_texts[text_to_image[t]].push_back(t);
  }
  s.k_candidates = k_candidates;
  return s;
}

py::dict counters_dict(const RunCounters& c) {
  py::dict d;
  d["records_in"] = c.records_in;
  d["records_fused"] = c.records_fused;
  d["records_passthrough"] = c.records_passthrough;
  d["records_failed"] = c.records_failed;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "capfuse native core";

  py::register_exception<ConfigMismatch>(m, "ConfigMismatch", PyExc_RuntimeError);
  py::register_exception<AuthFailure>(m, "AuthFailure", PyExc_RuntimeError);
  py::register_exception<NothingToFuse>(m, "NothingToFuse", PyExc_ValueError);
  py::register_exception<IncompleteRun>(m, "IncompleteRun", PyExc_RuntimeError);

  // ---- datamodel / ingest ----
  m.def(
      "validate_caption_line",
      [](const std::string& line) {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& v : validate_caption_line(line).violations) out.emplace_back(v.field, v.message);
        return out;
      },
      py::arg("line"), "Schema and invariant violations of one caption JSONL line.");
  m.def(
      "validate_bundle_line",
      [](const std::string& line) {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& v : validate_bundle_line(line).violations) out.emplace_back(v.field, v.message);
        return out;
      },
      py::arg("line"));
  m.def(
      "filter_bundle",
      [](const std::string& bundle_json, double det, double attr, bool strict) {
        const FilterConfig cfg = make_filter(det, attr, strict);
        return serialize(filter_attributes(filter_detections(parse_bundle(bundle_json), cfg), cfg));
      },
      py::arg("bundle_json"), py::arg("det_threshold") = 0.7, py::arg("attr_threshold") = 0.2,
      py::arg("strict") = true);

  // ---- promptgen ----
  py::class_<FusePrompt>(m, "FusePrompt")
      .def_readonly("text", &FusePrompt::text)
      .def_readonly("object_count", &FusePrompt::object_count)
      .def_readonly("token_count", &FusePrompt::token_count)
      .def_readonly("over_budget", &FusePrompt::over_budget)
      .def_readonly("caption", &FusePrompt::caption)
      .def_readonly("object_phrases", &FusePrompt::object_phrases)
      .def_readonly("scene_texts", &FusePrompt::scene_texts)
      .def("__repr__", [](const FusePrompt& p) { return "<FusePrompt " + std::to_string(p.token_count) + " tokens>"; });

  m.def(
      "render_fuse_prompt",
      [](const std::string& caption,
         const std::vector<std::tuple<std::string, std::vector<std::string>, std::vector<std::string>>>& objects,
         const std::vector<std::string>& scene_texts, bool scene_text) {
        std::vector<OrderedObject> objs;
        for (std::size_t i = 0; i < objects.size(); ++i) {
          OrderedObject o;
          o.detection.object_class = std::get<0>(objects[i]);
          o.detection.confidence = 1.0;
          o.detection.box = {0, 0, 1, 1};
          for (const auto& a : std::get<1>(objects[i])) o.detection.attributes.push_back({a, 1.0});
          o.assigned_texts = std::get<2>(objects[i]);
          o.rank = i;
          o.original_index = i;
          objs.push_back(std::move(o));
        }
        PromptOptions opts;
        opts.scene_text = scene_text;
        return render_fuse_prompt(caption, objs, scene_texts, opts);
      },
      py::arg("caption"), py::arg("objects"), py::arg("scene_texts") = std::vector<std::string>{},
      py::arg("scene_text") = true,
      "objects: already-ordered (class, attributes, texts) tuples.");
  m.def(
      "prepare_prompt",
      [](const std::string& caption, const std::string& bundle_json, double det, double attr,
         bool scene_text, const std::string& order) -> std::optional<FusePrompt> {
        PipelineConfig cfg;
        cfg.filter = make_filter(det, attr, true);
        cfg.prompt.scene_text = scene_text;
        cfg.order_key = parse_order(order);
        CaptionRecord rec;
        rec.original_caption = caption;
        const ExpertBundle b = parse_bundle(bundle_json);
        rec.image_id = b.image_id;
        const PreparedRecord p = prepare_record(rec, BundleResult{b, std::nullopt}, cfg);
        if (p.kind == PreparedRecord::Kind::kFailed) throw std::invalid_argument(p.reason);
        if (p.kind == PreparedRecord::Kind::kPassthrough) return std::nullopt;
        return p.prompt;
      },
      py::arg("caption"), py::arg("bundle_json"), py::arg("det_threshold") = 0.7,
      py::arg("attr_threshold") = 0.2, py::arg("scene_text") = true, py::arg("order") = "center",
      "Filter, assign OCR, order and render; None when nothing survives.");
  m.def("count_tokens", [](const std::string& s) { return count_tokens(s); }, py::arg("text"));
  m.def(
      "make_finetune_pair",
      [](const FusePrompt& p, const std::string& target, const std::string& style) {
        const InputStyle is = style == "concat" ? InputStyle::kConcat : InputStyle::kPrompt;
        if (style != "concat" && style != "prompt") throw std::invalid_argument("style must be 'prompt' or 'concat'");
        return serialize(make_finetune_pair(p, target, {}, is));
      },
      py::arg("prompt"), py::arg("target"), py::arg("input_style") = "prompt");

  // ---- fuser ----
  m.def("cache_key", &cache_key, py::arg("prompt_text"), py::arg("model_id"));
  m.def("mock_fuse", &mock_fuse, py::arg("prompt"));
  m.attr("MOCK_MODEL_ID") = std::string(kMockModelId);

  // ---- eval ----
  m.def(
      "clip_score",
      [](const std::vector<double>& t, const std::vector<double>& i, double weight, bool percent) {
        return clip_score(t, i, {weight, percent ? ReportScale::kPercent : ReportScale::kRaw});
      },
      py::arg("text_vec"), py::arg("image_vec"), py::arg("weight") = 2.5, py::arg("percent") = true);
  m.def(
      "vote_preference",
      [](const std::vector<double>& orig, const std::vector<double>& fused) {
        const VoteSummary v = vote_preference(orig, fused);
        py::dict d;
        d["original_wins"] = v.original_wins;
        d["fused_wins"] = v.fused_wins;
        d["ties"] = v.ties;
        d["original_frac"] = v.original_frac;
        d["fused_frac"] = v.fused_frac;
        d["tie_frac"] = v.tie_frac;
        return d;
      },
      py::arg("original_scores"), py::arg("fused_scores"));
  m.def(
      "recall_at_k",
      [](const std::vector<std::vector<double>>& sim, const std::vector<std::size_t>& text_to_image,
         const std::vector<std::size_t>& ks, const std::string& direction) {
        return recall_at_k(make_setup(sim, std::nullopt, text_to_image, 1), parse_direction(direction), ks);
      },
      py::arg("sim"), py::arg("text_to_image"), py::arg("ks"), py::arg("direction") = "i2t",
      "sim is images x texts.");
  m.def(
      "rerank_topk",
      [](const std::vector<std::vector<double>>& sim, const std::vector<std::vector<double>>& itm,
         const std::vector<std::size_t>& text_to_image, const std::vector<std::size_t>& ks,
         std::size_t k_candidates, const std::string& direction) {
        return rerank_topk(make_setup(sim, itm, text_to_image, k_candidates), parse_direction(direction), ks);
      },
      py::arg("sim"), py::arg("itm"), py::arg("text_to_image"), py::arg("ks"), py::arg("k_candidates"),
      py::arg("direction") = "i2t");
  m.def(
      "length_stats",
      [](const std::vector<std::string>& captions) {
        const LengthStats s = length_stats(captions);
        py::dict d;
        d["mean_tokens"] = s.mean_tokens;
        d["p50"] = s.p50;
        d["p95"] = s.p95;
        d["frac_over_30"] = s.frac_over_30;
        d["frac_over_60"] = s.frac_over_60;
        return d;
      },
      py::arg("captions"));

  // ---- pipeline ----
  m.def(
      "run_pipeline",
      [](const std::string& captions, const std::string& bundles, const std::string& out_dir,
         std::size_t shard_size, std::size_t workers, double det, double attr, bool scene_text,
         const std::string& cache_dir) {
        PipelineConfig cfg;
        cfg.filter = make_filter(det, attr, true);
        cfg.prompt.scene_text = scene_text;
        cfg.shard_size = shard_size;
        RunOptions opts;
        opts.workers = workers;
        opts.cache_dir = cache_dir;
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(captions, bundles, out_dir, cfg, opts);
        }
        return py::make_tuple(r.exit_code, counters_dict(r.manifest.counters()));
      },
      py::arg("captions"), py::arg("bundles"), py::arg("out_dir"), py::arg("shard_size") = 10000,
      py::arg("workers") = 1, py::arg("det_threshold") = 0.7, py::arg("attr_threshold") = 0.2,
      py::arg("scene_text") = true, py::arg("cache_dir") = "",
      "Runs or resumes a mock-backend job. Returns (exit_code, counters).");
  m.def(
      "summarize",
      [](const std::string& out_dir) {
        return to_json(summarize(ShardManifest::load(out_dir + "/manifest.json"), out_dir));
      },
      py::arg("out_dir"));

  // ---- humaneval ----
  m.def(
      "make_session",
      [](const std::string& study_config_json, const std::string& rater_token) {
        const Session s = make_session(StudyConfig::from_json(study_config_json), rater_token);
        std::vector<std::string> orders;
        for (PresentedOrder o : s.orders) orders.emplace_back(to_string(o));
        return py::make_tuple(s.id, s.pair_ids, orders);
      },
      py::arg("study_config_json"), py::arg("rater_token"));
  m.attr("DEFAULT_STUDY_QUESTION") = std::string(kDefaultStudyQuestion);
}
