// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "capfuse/datamodel.hpp"

namespace capfuse {

/// Confidence cut-offs applied to raw expert output. A detection survives
/// when its confidence exceeds `detection_threshold`; an attribute when its
/// confidence exceeds `attribute_threshold`. With `strict_inequality` off the
/// comparisons become >=.
struct FilterConfig {
  double detection_threshold = 0.7;
  double attribute_threshold = 0.2;
  bool strict_inequality = true;

  /// Throws std::invalid_argument when a threshold leaves [0,1].
  void validate() const;
};

ExpertBundle filter_detections(const ExpertBundle& bundle, const FilterConfig& cfg);
ExpertBundle filter_attributes(const ExpertBundle& bundle, const FilterConfig& cfg);

/// The backing store cannot be reached at all (missing file, refused
/// connection). Fatal for the whole stream.
class SourceUnreachable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BundleError {
  enum class Kind { kMissing, kParse, kInvalid, kBackend };
  Kind kind = Kind::kMissing;
  std::string image_id;
  std::size_t line = 0;  // 1-based source line for parse errors, 0 otherwise
  std::string message;
};

std::string_view to_string(BundleError::Kind kind);

/// Either a bundle or the reason there is none.
struct BundleResult {
  std::optional<ExpertBundle> bundle;
  std::optional<BundleError> error;

  bool ok() const { return bundle.has_value(); }
};

class ExpertBackend {
 public:
  virtual ~ExpertBackend() = default;
  /// Per-item problems come back as BundleResult errors. Only
  /// SourceUnreachable is thrown.
  virtual BundleResult fetch(const std::string& image_id) = 0;
};

/// Precomputed bundles in a JSONL file, indexed by image_id on open.
class FileExpertBackend final : public ExpertBackend {
 public:
  /// Throws SourceUnreachable if the file cannot be opened.
  explicit FileExpertBackend(const std::string& path);

  BundleResult fetch(const std::string& image_id) override;

  std::size_t size() const { return entries_.size(); }
  /// Malformed lines from which no image_id could be recovered.
  const std::vector<BundleError>& orphan_errors() const { return orphans_; }

 private:
  std::unordered_map<std::string, BundleResult> entries_;
  std::vector<BundleError> orphans_;
};

/// Queries `GET {endpoint}/bundle/{image_id}`. 404 is a per-item miss,
/// connection failure is SourceUnreachable.
class HttpExpertBackend final : public ExpertBackend {
 public:
  explicit HttpExpertBackend(std::string endpoint, int timeout_ms = 10000);
  ~HttpExpertBackend() override;

  BundleResult fetch(const std::string& image_id) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Single-reader stream over a list of requested ids. Yields results in
/// request order.
class BundleStream {
 public:
  BundleStream(ExpertBackend& backend, std::vector<std::string> image_ids)
      : backend_(&backend), ids_(std::move(image_ids)) {}

  std::optional<BundleResult> next();

 private:
  ExpertBackend* backend_;
  std::vector<std::string> ids_;
  std::size_t pos_ = 0;
};

/// `path_or_endpoint` starting with http:// selects the HTTP backend.
std::unique_ptr<ExpertBackend> open_expert_backend(const std::string& path_or_endpoint);

BundleStream load_bundles(ExpertBackend& backend, std::vector<std::string> image_ids);

}  // namespace capfuse
