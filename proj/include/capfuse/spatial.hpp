// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "capfuse/datamodel.hpp"

namespace capfuse {

/// Closed containment: a box encloses itself.
bool encloses(const BoundingBox& outer, const BoundingBox& inner);

struct OcrAssignment {
  /// For each input token, the index of the detection it belongs to.
  std::vector<std::optional<std::size_t>> token_to_detection;
  /// Tokens enclosed by no detection, in input order.
  std::vector<OcrToken> unassigned;
};

/// Each token goes to the enclosing detection with the smallest box area.
/// Equal areas are resolved by smaller x_min, then smaller y_min, then lower
/// detection index.
OcrAssignment assign_ocr_tokens(const std::vector<Detection>& detections,
                                const std::vector<OcrToken>& tokens);

enum class OrderKey { kCenter, kXMin };

struct OrderedObject {
  Detection detection;
  std::vector<std::string> assigned_texts;
  std::size_t rank = 0;
  std::size_t original_index = 0;
};

/// Sorts by horizontal position (box center, or x_min), then vertical
/// center, then larger area first, then original index. Returned objects are
/// in rank order.
std::vector<OrderedObject> order_left_to_right(const std::vector<Detection>& detections,
                                               OrderKey key = OrderKey::kCenter);

/// Same ordering, with each object carrying the OCR texts assigned to it.
std::vector<OrderedObject> order_left_to_right(const std::vector<Detection>& detections,
                                               const std::vector<OcrToken>& tokens,
                                               const OcrAssignment& assignment,
                                               OrderKey key = OrderKey::kCenter);

}  // namespace capfuse
