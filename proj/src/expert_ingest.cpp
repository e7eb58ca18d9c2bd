// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#include "capfuse/expert_ingest.hpp"

#include <fstream>
#include <mutex>
#include <regex>

#include "capfuse/text.hpp"
#include "httplib.h"

namespace capfuse {

namespace {

bool passes(double confidence, double threshold, bool strict) {
  return strict ? confidence > threshold : confidence >= threshold;
}

// Best-effort recovery of the id from a line that failed to parse, so the
// error can be reported against the right request.
std::optional<std::string> sniff_image_id(const std::string& line) {
  static const std::regex kId(R"re("image_id"\s*:\s*"([^"\\]*)")re");
  std::smatch m;
  if (std::regex_search(line, m, kId)) return m[1].str();
  return std::nullopt;
}

}  // namespace

void FilterConfig::validate() const {
  auto check = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::invalid_argument(std::string(name) + " must lie in [0,1]");
    }
  };
  check(detection_threshold, "detection_threshold");
  check(attribute_threshold, "attribute_threshold");
}

ExpertBundle filter_detections(const ExpertBundle& bundle, const FilterConfig& cfg) {
  ExpertBundle out = bundle;
  out.detections.clear();
  for (const Detection& d : bundle.detections) {
    if (passes(d.confidence, cfg.detection_threshold, cfg.strict_inequality)) {
      out.detections.push_back(d);
    }
  }
  return out;
}

ExpertBundle filter_attributes(const ExpertBundle& bundle, const FilterConfig& cfg) {
  ExpertBundle out = bundle;
  for (Detection& d : out.detections) {
    std::erase_if(d.attributes, [&](const Attribute& a) {
      return !passes(a.confidence, cfg.attribute_threshold, cfg.strict_inequality);
    });
  }
  return out;
}

std::string_view to_string(BundleError::Kind kind) {
  switch (kind) {
    case BundleError::Kind::kMissing: return "missing";
    case BundleError::Kind::kParse: return "parse";
    case BundleError::Kind::kInvalid: return "invalid";
    case BundleError::Kind::kBackend: return "backend";
  }
  return "unknown";
}

FileExpertBackend::FileExpertBackend(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SourceUnreachable("cannot open expert bundle file: " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    BundleResult result;
    std::string id;
    try {
      ExpertBundle b = parse_bundle(line);
      id = b.image_id;
      ValidationReport report = validate_bundle(b);
      if (report.ok()) {
        result.bundle = std::move(b);
      } else {
        const Violation& v = report.violations.front();
        result.error = BundleError{BundleError::Kind::kInvalid, id, line_no,
                                   v.field + ": " + v.message};
      }
    } catch (const SchemaError& e) {
      auto sniffed = sniff_image_id(line);
      BundleError err{BundleError::Kind::kParse, sniffed.value_or(""), line_no,
                      "line " + std::to_string(line_no) + ": " + e.what()};
      if (!sniffed) {
        orphans_.push_back(std::move(err));
        continue;
      }
      id = *sniffed;
      result.error = std::move(err);
    }
    auto [it, inserted] = entries_.try_emplace(id, std::move(result));
    if (!inserted) {
      it->second = BundleResult{
          std::nullopt,
          BundleError{BundleError::Kind::kInvalid, id, line_no,
                      "duplicate image_id at line " + std::to_string(line_no)}};
    }
  }
}

BundleResult FileExpertBackend::fetch(const std::string& image_id) {
  auto it = entries_.find(image_id);
  if (it == entries_.end()) {
    return {std::nullopt,
            BundleError{BundleError::Kind::kMissing, image_id, 0, "no bundle for id"}};
  }
  return it->second;
}

struct HttpExpertBackend::Impl {
  std::mutex mu;
  httplib::Client client;
  std::string base_path;

  Impl(const std::string& host, std::string path, int timeout_ms)
      : client(host), base_path(std::move(path)) {
    client.set_connection_timeout(std::chrono::milliseconds(timeout_ms));
    client.set_read_timeout(std::chrono::milliseconds(timeout_ms));
  }
};

namespace {
// Splits "http://host:port/prefix" into ("http://host:port", "/prefix").
std::pair<std::string, std::string> split_endpoint(const std::string& endpoint) {
  const auto scheme = endpoint.find("://");
  const auto path_start =
      endpoint.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) return {endpoint, ""};
  std::string path = endpoint.substr(path_start);
  while (!path.empty() && path.back() == '/') path.pop_back();
  return {endpoint.substr(0, path_start), path};
}
}  // namespace

HttpExpertBackend::HttpExpertBackend(std::string endpoint, int timeout_ms) {
  auto [host, path] = split_endpoint(endpoint);
  impl_ = std::make_unique<Impl>(host, path, timeout_ms);
}

HttpExpertBackend::~HttpExpertBackend() = default;

BundleResult HttpExpertBackend::fetch(const std::string& image_id) {
  const std::string path =
      impl_->base_path + "/bundle/" + httplib::detail::encode_url(image_id);
  httplib::Result res;
  {
    std::lock_guard lock(impl_->mu);
    res = impl_->client.Get(path);
  }
  if (!res) {
    throw SourceUnreachable("expert service unreachable: " +
                            httplib::to_string(res.error()));
  }
  if (res->status == 404) {
    return {std::nullopt,
            BundleError{BundleError::Kind::kMissing, image_id, 0, "no bundle for id"}};
  }
  if (res->status != 200) {
    return {std::nullopt, BundleError{BundleError::Kind::kBackend, image_id, 0,
                                      "HTTP status " + std::to_string(res->status)}};
  }
  try {
    ExpertBundle b = parse_bundle(res->body);
    if (b.image_id != image_id) {
      return {std::nullopt, BundleError{BundleError::Kind::kInvalid, image_id, 0,
                                        "service returned bundle for " + b.image_id}};
    }
    ValidationReport report = validate_bundle(b);
    if (!report.ok()) {
      const Violation& v = report.violations.front();
      return {std::nullopt, BundleError{BundleError::Kind::kInvalid, image_id, 0,
                                        v.field + ": " + v.message}};
    }
    return {std::move(b), std::nullopt};
  } catch (const SchemaError& e) {
    return {std::nullopt,
            BundleError{BundleError::Kind::kParse, image_id, 0, e.what()}};
  }
}

std::optional<BundleResult> BundleStream::next() {
  if (pos_ >= ids_.size()) return std::nullopt;
  return backend_->fetch(ids_[pos_++]);
}

std::unique_ptr<ExpertBackend> open_expert_backend(const std::string& path_or_endpoint) {
  if (path_or_endpoint.rfind("http://", 0) == 0) {
    return std::make_unique<HttpExpertBackend>(path_or_endpoint);
  }
  return std::make_unique<FileExpertBackend>(path_or_endpoint);
}

BundleStream load_bundles(ExpertBackend& backend, std::vector<std::string> image_ids) {
  return BundleStream(backend, std::move(image_ids));
}

}  // namespace capfuse
