// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

// Seeded random inputs for the property suites. Values are drawn from
// coarse grids so that threshold boundaries and geometric ties actually
// occur.

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "capfuse/datamodel.hpp"
#include "capfuse/eval_metrics.hpp"

namespace capfuse::gen {

using Rng = std::mt19937_64;

inline std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Multiples of 1/20 in [0,1]; hits 0.2 and 0.7 exactly.
inline double grid_confidence(Rng& rng) { return static_cast<double>(uniform(rng, 0, 20)) / 20.0; }

inline BoundingBox grid_box(Rng& rng, int extent) {
  const auto x0 = static_cast<double>(uniform(rng, 0, extent - 1));
  const auto y0 = static_cast<double>(uniform(rng, 0, extent - 1));
  const auto x1 = x0 + static_cast<double>(uniform(rng, 1, extent - static_cast<int>(x0)));
  const auto y1 = y0 + static_cast<double>(uniform(rng, 1, extent - static_cast<int>(y0)));
  return {x0, y0, x1, y1};
}

inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = {"dog",  "cat",   "laptop", "sign", "car",
                                             "tree", "person", "cup",   "desk", "bus"};
  return v;
}

inline const std::vector<std::string>& attribute_names() {
  static const std::vector<std::string> v = {"red",   "small", "old",   "wooden", "black",
                                             "white", "large", "shiny", "brown"};
  return v;
}

inline Detection random_detection(Rng& rng, int extent, std::size_t max_attrs = 4) {
  Detection d;
  d.object_class = vocabulary()[uniform(rng, 0, vocabulary().size() - 1)];
  d.confidence = grid_confidence(rng);
  d.box = grid_box(rng, extent);
  const std::size_t n_attrs = uniform(rng, 0, max_attrs);
  for (std::size_t k = 0; k < n_attrs; ++k) {
    d.attributes.push_back(
        {attribute_names()[uniform(rng, 0, attribute_names().size() - 1)], grid_confidence(rng)});
  }
  return d;
}

inline ExpertBundle random_bundle(Rng& rng, const std::string& id, std::size_t max_dets = 12,
                                  std::size_t max_tokens = 4) {
  ExpertBundle b;
  b.image_id = id;
  b.image_width = 64;
  b.image_height = 64;
  b.ocr_enabled = uniform(rng, 0, 4) != 0;
  const std::size_t n = uniform(rng, 0, max_dets);
  for (std::size_t i = 0; i < n; ++i) b.detections.push_back(random_detection(rng, 64));
  const std::size_t t = uniform(rng, 0, max_tokens);
  for (std::size_t i = 0; i < t; ++i) {
    b.ocr_tokens.push_back({"TXT" + std::to_string(i), grid_confidence(rng), grid_box(rng, 64)});
  }
  return b;
}

/// A scene on a small grid so equal areas and shared x_min are common.
struct Scene {
  std::vector<Detection> detections;
  std::vector<OcrToken> tokens;
};

inline Scene random_scene(Rng& rng, std::size_t max_dets = 50, std::size_t max_tokens = 20) {
  Scene s;
  const int extent = 16;
  const std::size_t n = uniform(rng, 0, max_dets);
  for (std::size_t i = 0; i < n; ++i) s.detections.push_back(random_detection(rng, extent, 0));
  const std::size_t t = uniform(rng, 0, max_tokens);
  for (std::size_t i = 0; i < t; ++i) {
    // Small token boxes so enclosure is frequent.
    const auto x0 = static_cast<double>(uniform(rng, 0, extent - 2));
    const auto y0 = static_cast<double>(uniform(rng, 0, extent - 2));
    s.tokens.push_back({"T" + std::to_string(i), 0.9,
                        {x0, y0, x0 + static_cast<double>(uniform(rng, 1, 2)),
                         y0 + static_cast<double>(uniform(rng, 1, 2))}});
  }
  return s;
}

/// Random retrieval setup with quantized scores (ties are common) and a
/// many-to-one text->image ground truth where every image has a text.
inline RetrievalSetup random_retrieval(Rng& rng, std::size_t max_images = 20,
                                       std::size_t max_texts = 100) {
  RetrievalSetup s;
  const std::size_t n_img = uniform(rng, 1, max_images);
  const std::size_t n_txt = uniform(rng, n_img, std::max(n_img, max_texts));
  s.sim = Matrix(n_img, n_txt);
  s.itm = Matrix(n_img, n_txt);
  const std::size_t levels = uniform(rng, 2, 12);
  for (double& v : s.sim.values) v = static_cast<double>(uniform(rng, 0, levels)) / levels;
  for (double& v : s.itm->values) v = static_cast<double>(uniform(rng, 0, levels)) / levels;
  s.text_to_image.resize(n_txt);
  s.image_to_texts.assign(n_img, {});
  for (std::size_t t = 0; t < n_txt; ++t) {
    const std::size_t img = t < n_img ? t : uniform(rng, 0, n_img - 1);
    s.text_to_image[t] = img;
    s.image_to_texts[img].push_back(t);
  }
  s.k_candidates = 1;
  return s;
}

}  // namespace capfuse::gen
