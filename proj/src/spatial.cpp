// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#include "capfuse/spatial.hpp"

#include <algorithm>
#include <numeric>
#include <tuple>

namespace capfuse {

bool encloses(const BoundingBox& outer, const BoundingBox& inner) {
  return outer.x_min <= inner.x_min && outer.y_min <= inner.y_min &&
         outer.x_max >= inner.x_max && outer.y_max >= inner.y_max;
}

OcrAssignment assign_ocr_tokens(const std::vector<Detection>& detections,
                                const std::vector<OcrToken>& tokens) {
  OcrAssignment out;
  out.token_to_detection.reserve(tokens.size());
  for (const OcrToken& token : tokens) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < detections.size(); ++i) {
      const BoundingBox& candidate = detections[i].box;
      if (!encloses(candidate, token.box)) continue;
      if (!best) {
        best = i;
        continue;
      }
      const BoundingBox& incumbent = detections[*best].box;
      // Scanning in index order, so only a strictly better key replaces.
      if (std::tuple(candidate.area(), candidate.x_min, candidate.y_min) <
          std::tuple(incumbent.area(), incumbent.x_min, incumbent.y_min)) {
        best = i;
      }
    }
    out.token_to_detection.push_back(best);
    if (!best) out.unassigned.push_back(token);
  }
  return out;
}

std::vector<OrderedObject> order_left_to_right(const std::vector<Detection>& detections,
                                               OrderKey key) {
  return order_left_to_right(detections, {}, OcrAssignment{}, key);
}

std::vector<OrderedObject> order_left_to_right(const std::vector<Detection>& detections,
                                               const std::vector<OcrToken>& tokens,
                                               const OcrAssignment& assignment,
                                               OrderKey key) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto horizontal = [&](const BoundingBox& b) {
    return key == OrderKey::kCenter ? b.center_x() : b.x_min;
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const BoundingBox& ba = detections[a].box;
    const BoundingBox& bb = detections[b].box;
    // Area is negated so larger boxes come first.
    return std::tuple(horizontal(ba), ba.center_y(), -ba.area(), a) <
           std::tuple(horizontal(bb), bb.center_y(), -bb.area(), b);
  });

  std::vector<OrderedObject> objects;
  objects.reserve(detections.size());
  std::vector<std::size_t> rank_of(detections.size());
  for (std::size_t r = 0; r < order.size(); ++r) {
    rank_of[order[r]] = r;
    objects.push_back({detections[order[r]], {}, r, order[r]});
  }
  for (std::size_t t = 0; t < assignment.token_to_detection.size() && t < tokens.size();
       ++t) {
    if (const auto& det = assignment.token_to_detection[t]; det && *det < rank_of.size()) {
      objects[rank_of[*det]].assigned_texts.push_back(tokens[t].text);
    }
  }
  return objects;
}

}  // namespace capfuse
