// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace capfuse {

/// Axis-aligned box in absolute pixel coordinates, origin at the top-left.
struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Attribute {
  std::string name;
  double confidence = 0.0;

  friend bool operator==(const Attribute&, const Attribute&) = default;
};

struct Detection {
  std::string object_class;
  double confidence = 0.0;
  BoundingBox box;
  std::vector<Attribute> attributes;

  friend bool operator==(const Detection&, const Detection&) = default;
};

struct OcrToken {
  std::string text;
  double confidence = 0.0;
  BoundingBox box;

  friend bool operator==(const OcrToken&, const OcrToken&) = default;
};

/// Everything the vision experts reported for one image.
struct ExpertBundle {
  std::string image_id;
  std::int64_t image_width = 0;
  std::int64_t image_height = 0;
  bool ocr_enabled = true;
  std::vector<Detection> detections;
  std::vector<OcrToken> ocr_tokens;

  friend bool operator==(const ExpertBundle&, const ExpertBundle&) = default;
};

enum class SourceDataset { kCoco, kSbu, kCc, kCc12, kOther };

std::string_view to_string(SourceDataset source);
/// Unknown tags map to kOther.
SourceDataset parse_source_dataset(std::string_view tag);

struct FuseProvenance {
  std::string model_id;
  std::optional<std::string> timestamp;
  std::optional<bool> cache_hit;

  friend bool operator==(const FuseProvenance&, const FuseProvenance&) = default;
};

struct CaptionRecord {
  std::string image_id;
  std::string image_uri;
  std::string original_caption;
  std::optional<std::string> enriched_caption;
  SourceDataset source_dataset = SourceDataset::kOther;
  std::optional<FuseProvenance> fuse_provenance;

  friend bool operator==(const CaptionRecord&, const CaptionRecord&) = default;
};

struct Violation {
  std::string field;    // dotted path, e.g. "detections[2].box"
  std::string message;  // e.g. "degenerate box"

  friend bool operator==(const Violation&, const Violation&) = default;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  bool contains(std::string_view message) const;
};

/// Checks every record and bundle invariant. Violations are returned as
/// data; this never throws for any input.
ValidationReport validate_record(const CaptionRecord& record,
                                 const ExpertBundle* bundle = nullptr);
ValidationReport validate_bundle(const ExpertBundle& bundle);

/// Validates one serialized JSONL line (either schema). Malformed JSON and
/// schema mismatches become violations instead of exceptions.
ValidationReport validate_caption_line(std::string_view line);
ValidationReport validate_bundle_line(std::string_view line);

/// Thrown by the from_json parsers when a line does not match the schema.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json to_json(const BoundingBox& box);
nlohmann::json to_json(const ExpertBundle& bundle);
nlohmann::json to_json(const CaptionRecord& record);

BoundingBox box_from_json(const nlohmann::json& j);
ExpertBundle bundle_from_json(const nlohmann::json& j);
CaptionRecord caption_from_json(const nlohmann::json& j);

/// Compact single-line serializations used for the JSONL files.
std::string serialize(const ExpertBundle& bundle);
std::string serialize(const CaptionRecord& record);
ExpertBundle parse_bundle(std::string_view line);
CaptionRecord parse_caption(std::string_view line);

/// Reads a caption JSONL file. Blank lines are skipped; a malformed line
/// throws SchemaError naming the line number.
std::vector<CaptionRecord> read_caption_file(const std::string& path);

}  // namespace capfuse
