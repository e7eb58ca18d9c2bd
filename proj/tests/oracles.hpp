// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

// Brute-force reference implementations. These deliberately take the
// slowest obvious route (enumerate, fully sort) and share no code with the
// library paths they check.

#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <vector>

#include "capfuse/datamodel.hpp"
#include "capfuse/eval_metrics.hpp"

namespace capfuse::oracle {

inline bool contains(const BoundingBox& o, const BoundingBox& i) {
  return !(i.x_min < o.x_min) && !(i.y_min < o.y_min) && !(i.x_max > o.x_max) &&
         !(i.y_max > o.y_max);
}

/// Collect every enclosing detection, then pick the minimum under
/// (area, x_min, y_min, index) by a full sort.
inline std::optional<std::size_t> smallest_enclosing(const std::vector<Detection>& dets,
                                                     const BoundingBox& token) {
  struct Cand {
    double area, x_min, y_min;
    std::size_t index;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const BoundingBox& b = dets[i].box;
    if (contains(b, token)) {
      cands.push_back({(b.x_max - b.x_min) * (b.y_max - b.y_min), b.x_min, b.y_min, i});
    }
  }
  if (cands.empty()) return std::nullopt;
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.area != b.area) return a.area < b.area;
    if (a.x_min != b.x_min) return a.x_min < b.x_min;
    if (a.y_min != b.y_min) return a.y_min < b.y_min;
    return a.index < b.index;
  });
  return cands.front().index;
}

/// Full ranking of the searched side for one query: similarity descending,
/// index ascending on ties.
inline std::vector<std::size_t> full_ranking(const std::vector<double>& sim) {
  std::vector<std::size_t> order(sim.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  return order;
}

struct OracleQuery {
  std::vector<double> sim;
  std::vector<double> itm;
  std::vector<std::size_t> truth;
};

inline std::vector<OracleQuery> queries(const RetrievalSetup& s, Direction d) {
  std::vector<OracleQuery> out;
  if (d == Direction::kImageToText) {
    for (std::size_t i = 0; i < s.sim.rows; ++i) {
      OracleQuery q;
      for (std::size_t t = 0; t < s.sim.cols; ++t) {
        q.sim.push_back(s.sim(i, t));
        q.itm.push_back(s.itm ? (*s.itm)(i, t) : 0.0);
      }
      q.truth = s.image_to_texts[i];
      out.push_back(std::move(q));
    }
  } else {
    for (std::size_t t = 0; t < s.sim.cols; ++t) {
      OracleQuery q;
      for (std::size_t i = 0; i < s.sim.rows; ++i) {
        q.sim.push_back(s.sim(i, t));
        q.itm.push_back(s.itm ? (*s.itm)(i, t) : 0.0);
      }
      q.truth = {s.text_to_image[t]};
      out.push_back(std::move(q));
    }
  }
  return out;
}

inline bool hit_in_prefix(const std::vector<std::size_t>& ranking, std::size_t k,
                          const std::vector<std::size_t>& truth) {
  for (std::size_t pos = 0; pos < k && pos < ranking.size(); ++pos) {
    if (std::find(truth.begin(), truth.end(), ranking[pos]) != truth.end()) return true;
  }
  return false;
}

inline std::map<std::size_t, double> recall(const RetrievalSetup& s, Direction d,
                                            const std::vector<std::size_t>& ks) {
  const auto qs = queries(s, d);
  std::map<std::size_t, double> out;
  for (std::size_t k : ks) {
    std::size_t hits = 0;
    for (const auto& q : qs) hits += hit_in_prefix(full_ranking(q.sim), k, q.truth);
    out[k] = static_cast<double>(hits) / static_cast<double>(qs.size());
  }
  return out;
}

/// Full sort, cut to K, then re-sort the K survivors by ITM with a stable
/// sort so the similarity order breaks ITM ties.
inline std::map<std::size_t, double> rerank(const RetrievalSetup& s, Direction d,
                                            const std::vector<std::size_t>& ks) {
  const auto qs = queries(s, d);
  std::map<std::size_t, double> out;
  for (std::size_t k : ks) {
    std::size_t hits = 0;
    for (const auto& q : qs) {
      std::vector<std::size_t> ranking = full_ranking(q.sim);
      ranking.resize(s.k_candidates);
      std::stable_sort(ranking.begin(), ranking.end(),
                       [&](std::size_t a, std::size_t b) { return q.itm[a] > q.itm[b]; });
      hits += hit_in_prefix(ranking, k, q.truth);
    }
    out[k] = static_cast<double>(hits) / static_cast<double>(qs.size());
  }
  return out;
}

}  // namespace capfuse::oracle
