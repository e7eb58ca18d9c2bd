// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#include "capfuse/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "capfuse/text.hpp"

namespace capfuse {

using nlohmann::json;

namespace {

bool in_unit_range(double v) { return v >= 0.0 && v <= 1.0; }

void check_confidence(double c, const std::string& field,
                      std::vector<Violation>& out) {
  if (!in_unit_range(c)) out.push_back({field, "confidence out of range"});
}

void check_box(const BoundingBox& b, const std::string& field,
               const ExpertBundle* frame, std::vector<Violation>& out) {
  const double coords[] = {b.x_min, b.y_min, b.x_max, b.y_max};
  for (double c : coords) {
    if (!std::isfinite(c)) {
      out.push_back({field, "non-finite coordinate"});
      return;
    }
  }
  if (std::any_of(std::begin(coords), std::end(coords),
                  [](double c) { return c < 0.0; })) {
    out.push_back({field, "negative coordinate"});
  }
  if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max)) {
    out.push_back({field, "degenerate box"});
  }
  if (frame != nullptr && frame->image_width > 0 && frame->image_height > 0) {
    const auto w = static_cast<double>(frame->image_width);
    const auto h = static_cast<double>(frame->image_height);
    if (b.x_max > w || b.y_max > h || b.x_min > w || b.y_min > h) {
      out.push_back({field, "box outside image"});
    }
  }
}

std::string indexed(std::string_view name, std::size_t i) {
  return std::string(name) + "[" + std::to_string(i) + "]";
}

[[noreturn]] void schema_fail(const std::string& what) {
  throw SchemaError(what);
}

const json& require(const json& j, const char* key) {
  if (!j.is_object()) schema_fail("expected a JSON object");
  auto it = j.find(key);
  if (it == j.end()) schema_fail(std::string("missing key '") + key + "'");
  return *it;
}

double number_at(const json& j, const char* key) {
  const json& v = require(j, key);
  if (!v.is_number()) schema_fail(std::string("'") + key + "' must be a number");
  return v.get<double>();
}

std::string string_at(const json& j, const char* key) {
  const json& v = require(j, key);
  if (!v.is_string()) schema_fail(std::string("'") + key + "' must be a string");
  return v.get<std::string>();
}

const json& array_at(const json& j, const char* key) {
  const json& v = require(j, key);
  if (!v.is_array()) schema_fail(std::string("'") + key + "' must be an array");
  return v;
}

json parse_line(std::string_view line) {
  try {
    return json::parse(line.begin(), line.end());
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("malformed JSON: ") + e.what());
  }
}

template <typename Validate, typename Parse>
ValidationReport validate_line(std::string_view line, Parse parse,
                               Validate validate) {
  ValidationReport report;
  try {
    report = validate(parse(line));
  } catch (const SchemaError& e) {
    report.violations.push_back({"", e.what()});
  } catch (const json::exception& e) {
    report.violations.push_back({"", e.what()});
  }
  return report;
}

}  // namespace

std::string_view to_string(SourceDataset source) {
  switch (source) {
    case SourceDataset::kCoco: return "coco";
    case SourceDataset::kSbu: return "sbu";
    case SourceDataset::kCc: return "cc";
    case SourceDataset::kCc12: return "cc12";
    case SourceDataset::kOther: return "other";
  }
  return "other";
}

SourceDataset parse_source_dataset(std::string_view tag) {
  if (tag == "coco") return SourceDataset::kCoco;
  if (tag == "sbu") return SourceDataset::kSbu;
  if (tag == "cc") return SourceDataset::kCc;
  if (tag == "cc12") return SourceDataset::kCc12;
  return SourceDataset::kOther;
}

bool ValidationReport::contains(std::string_view message) const {
  return std::any_of(violations.begin(), violations.end(),
                     [&](const Violation& v) { return v.message == message; });
}

ValidationReport validate_bundle(const ExpertBundle& bundle) {
  ValidationReport report;
  auto& out = report.violations;
  if (bundle.image_id.empty()) out.push_back({"image_id", "empty image id"});
  if (bundle.image_width <= 0 || bundle.image_height <= 0) {
    out.push_back({"width/height", "non-positive image size"});
  }
  for (std::size_t i = 0; i < bundle.detections.size(); ++i) {
    const Detection& d = bundle.detections[i];
    const std::string path = indexed("detections", i);
    if (d.object_class.empty()) out.push_back({path + ".class", "empty object class"});
    check_confidence(d.confidence, path + ".confidence", out);
    check_box(d.box, path + ".box", &bundle, out);
    for (std::size_t k = 0; k < d.attributes.size(); ++k) {
      const Attribute& a = d.attributes[k];
      const std::string apath = path + "." + indexed("attributes", k);
      if (a.name.empty()) out.push_back({apath + ".name", "empty attribute name"});
      check_confidence(a.confidence, apath + ".confidence", out);
    }
  }
  for (std::size_t i = 0; i < bundle.ocr_tokens.size(); ++i) {
    const OcrToken& t = bundle.ocr_tokens[i];
    const std::string path = indexed("ocr", i);
    if (trim(t.text).empty()) out.push_back({path + ".text", "empty OCR text"});
    check_confidence(t.confidence, path + ".confidence", out);
    check_box(t.box, path + ".box", &bundle, out);
  }
  return report;
}

ValidationReport validate_record(const CaptionRecord& record,
                                 const ExpertBundle* bundle) {
  ValidationReport report;
  auto& out = report.violations;
  if (record.image_id.empty()) out.push_back({"image_id", "empty image id"});
  if (record.original_caption.empty()) {
    out.push_back({"caption", "empty original caption"});
  }
  if (record.enriched_caption && record.enriched_caption->empty()) {
    out.push_back({"enriched_caption", "empty enriched caption"});
  }
  if (bundle != nullptr) {
    if (bundle->image_id != record.image_id) {
      out.push_back({"image_id", "bundle image id mismatch"});
    }
    for (Violation& v : validate_bundle(*bundle).violations) {
      v.field = "bundle." + v.field;
      out.push_back(std::move(v));
    }
  }
  return report;
}

ValidationReport validate_caption_line(std::string_view line) {
  return validate_line(line, parse_caption, [](const CaptionRecord& r) {
    return validate_record(r);
  });
}

ValidationReport validate_bundle_line(std::string_view line) {
  return validate_line(line, parse_bundle, validate_bundle);
}

json to_json(const BoundingBox& box) {
  return json::array({box.x_min, box.y_min, box.x_max, box.y_max});
}

json to_json(const ExpertBundle& bundle) {
  json dets = json::array();
  for (const Detection& d : bundle.detections) {
    json attrs = json::array();
    for (const Attribute& a : d.attributes) {
      attrs.push_back({{"name", a.name}, {"confidence", a.confidence}});
    }
    dets.push_back({{"class", d.object_class},
                    {"confidence", d.confidence},
                    {"box", to_json(d.box)},
                    {"attributes", std::move(attrs)}});
  }
  json ocr = json::array();
  for (const OcrToken& t : bundle.ocr_tokens) {
    ocr.push_back({{"text", t.text},
                   {"confidence", t.confidence},
                   {"box", to_json(t.box)}});
  }
  json j = json::object();
  j["image_id"] = bundle.image_id;
  j["width"] = bundle.image_width;
  j["height"] = bundle.image_height;
  j["ocr_enabled"] = bundle.ocr_enabled;
  j["detections"] = std::move(dets);
  j["ocr"] = std::move(ocr);
  return j;
}

json to_json(const CaptionRecord& record) {
  json j = json::object();
  j["image_id"] = record.image_id;
  j["image_uri"] = record.image_uri;
  j["caption"] = record.original_caption;
  j["enriched_caption"] =
      record.enriched_caption ? json(*record.enriched_caption) : json(nullptr);
  j["source"] = std::string(to_string(record.source_dataset));
  if (record.fuse_provenance) {
    const FuseProvenance& p = *record.fuse_provenance;
    json prov = {{"model", p.model_id}};
    if (p.timestamp) prov["timestamp"] = *p.timestamp;
    if (p.cache_hit) prov["cache_hit"] = *p.cache_hit;
    j["provenance"] = std::move(prov);
  }
  return j;
}

BoundingBox box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4) {
    schema_fail("box must be an array [x0,y0,x1,y1]");
  }
  for (const json& v : j) {
    if (!v.is_number()) schema_fail("box coordinates must be numbers");
  }
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
          j[3].get<double>()};
}

ExpertBundle bundle_from_json(const json& j) {
  ExpertBundle b;
  b.image_id = string_at(j, "image_id");
  const json& w = require(j, "width");
  const json& h = require(j, "height");
  if (!w.is_number_integer() || !h.is_number_integer()) {
    schema_fail("'width' and 'height' must be integers");
  }
  b.image_width = w.get<std::int64_t>();
  b.image_height = h.get<std::int64_t>();
  if (auto it = j.find("ocr_enabled"); it != j.end()) {
    if (!it->is_boolean()) schema_fail("'ocr_enabled' must be a boolean");
    b.ocr_enabled = it->get<bool>();
  }
  for (const json& jd : array_at(j, "detections")) {
    Detection d;
    d.object_class = string_at(jd, "class");
    d.confidence = number_at(jd, "confidence");
    d.box = box_from_json(require(jd, "box"));
    if (auto it = jd.find("attributes"); it != jd.end()) {
      if (!it->is_array()) schema_fail("'attributes' must be an array");
      for (const json& ja : *it) {
        d.attributes.push_back({string_at(ja, "name"), number_at(ja, "confidence")});
      }
    }
    b.detections.push_back(std::move(d));
  }
  if (auto it = j.find("ocr"); it != j.end()) {
    if (!it->is_array()) schema_fail("'ocr' must be an array");
    for (const json& jt : *it) {
      b.ocr_tokens.push_back({string_at(jt, "text"), number_at(jt, "confidence"),
                              box_from_json(require(jt, "box"))});
    }
  }
  return b;
}

CaptionRecord caption_from_json(const json& j) {
  CaptionRecord r;
  r.image_id = string_at(j, "image_id");
  r.original_caption = string_at(j, "caption");
  if (auto it = j.find("image_uri"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) schema_fail("'image_uri' must be a string");
    r.image_uri = it->get<std::string>();
  }
  if (auto it = j.find("enriched_caption"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) schema_fail("'enriched_caption' must be a string or null");
    r.enriched_caption = it->get<std::string>();
  }
  if (auto it = j.find("source"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) schema_fail("'source' must be a string");
    r.source_dataset = parse_source_dataset(it->get<std::string>());
  }
  if (auto it = j.find("provenance"); it != j.end() && !it->is_null()) {
    FuseProvenance p;
    p.model_id = string_at(*it, "model");
    if (auto ts = it->find("timestamp"); ts != it->end() && ts->is_string()) {
      p.timestamp = ts->get<std::string>();
    }
    if (auto ch = it->find("cache_hit"); ch != it->end() && ch->is_boolean()) {
      p.cache_hit = ch->get<bool>();
    }
    r.fuse_provenance = std::move(p);
  }
  return r;
}

std::string serialize(const ExpertBundle& bundle) { return to_json(bundle).dump(); }
std::string serialize(const CaptionRecord& record) { return to_json(record).dump(); }

ExpertBundle parse_bundle(std::string_view line) {
  return bundle_from_json(parse_line(line));
}

CaptionRecord parse_caption(std::string_view line) {
  return caption_from_json(parse_line(line));
}

std::vector<CaptionRecord> read_caption_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open caption file: " + path);
  std::vector<CaptionRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      records.push_back(parse_caption(line));
    } catch (const SchemaError& e) {
      throw SchemaError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace capfuse
