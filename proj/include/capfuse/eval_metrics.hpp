// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "capfuse/promptgen.hpp"

namespace capfuse {

/// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<const double> row(std::size_t r) const {
    return {values.data() + r * cols, cols};
  }
};

/// Named vectors of a common dimension.
struct EmbeddingSet {
  std::vector<std::string> ids;
  Matrix vectors;  // one row per id
  bool unit_normalized = false;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return vectors.cols; }
  std::span<const double> vec(std::size_t i) const { return vectors.row(i); }
  /// Throws std::invalid_argument on shape mismatch or, when
  /// unit_normalized is set, a norm off by more than 1e-6.
  void validate() const;
  std::unordered_map<std::string, std::size_t> index() const;
};

enum class ReportScale { kRaw, kPercent };

struct ClipScoreConfig {
  double weight = 2.5;
  ReportScale scale = ReportScale::kPercent;
};

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// weight * max(cos(text, image), 0), times 100 in percent mode.
/// Throws std::invalid_argument for a zero vector or a dimension mismatch.
double clip_score(std::span<const double> text_vec, std::span<const double> image_vec,
                  const ClipScoreConfig& cfg = {});

/// Mean clip_score over all captions. `pairing` maps caption id to image
/// id; a caption without an entry is an error naming it.
double mean_clip_score(const EmbeddingSet& captions, const EmbeddingSet& images,
                       const std::unordered_map<std::string, std::string>& pairing,
                       const ClipScoreConfig& cfg = {});

struct VoteSummary {
  std::size_t original_wins = 0;
  std::size_t fused_wins = 0;
  std::size_t ties = 0;
  std::size_t total = 0;
  double original_frac = 0.0;
  double fused_frac = 0.0;
  /// The last non-empty bucket is stored as a complement so that
  /// (original_frac + fused_frac) + tie_frac == 1.0 exactly.
  double tie_frac = 0.0;
};

VoteSummary vote_preference(std::span<const double> original_scores,
                            std::span<const double> fused_scores);

enum class VoteBasis { kRawCosine, kClipScore };

/// Per-image scores for each caption set, ready for vote_preference.
std::vector<double> per_pair_scores(const EmbeddingSet& captions, const EmbeddingSet& images,
                                    const std::unordered_map<std::string, std::string>& pairing,
                                    VoteBasis basis, const ClipScoreConfig& cfg = {});

enum class Direction { kImageToText, kTextToImage };

struct RetrievalSetup {
  Matrix sim;                 // images x texts, ITC similarity
  std::optional<Matrix> itm;  // same shape, ITM match score
  std::vector<std::vector<std::size_t>> image_to_texts;
  std::vector<std::size_t> text_to_image;
  std::size_t k_candidates = 1;

  void validate() const;
};

/// Recall at each k: a query hits when any ground-truth item ranks within
/// the top k (similarity descending, lower index first on ties).
std::map<std::size_t, double> recall_at_k(const RetrievalSetup& setup, Direction direction,
                                          const std::vector<std::size_t>& ks);

/// Like recall_at_k, but the top k_candidates by similarity are reordered by
/// ITM score (ties: similarity, then index) before hits are counted.
std::map<std::size_t, double> rerank_topk(const RetrievalSetup& setup, Direction direction,
                                          const std::vector<std::size_t>& ks);

struct LengthStats {
  double mean_tokens = 0.0;
  double p50 = 0.0;
  double p95 = 0.0;
  double frac_over_30 = 0.0;
  double frac_over_60 = 0.0;
};

/// Token-length statistics via count_tokens. Percentiles use the
/// nearest-rank definition. Throws std::invalid_argument on empty input.
LengthStats length_stats(const std::vector<std::string>& captions,
                         const TokenBudget& budget = {});

// ---- file formats ----

/// JSONL with one `{"id": ..., "vec": [...]}` per line.
EmbeddingSet read_embeddings_jsonl(const std::string& path);

/// Little-endian float32 row-major matrix plus a JSON sidecar
/// `{"ids": [...], "dim": d, "dtype": "f32", "order": "row-major"}`.
struct RawMatrix {
  std::vector<std::string> ids;
  Matrix data;
};

RawMatrix read_raw_matrix(const std::string& bin_path, const std::string& sidecar_path);
void write_raw_matrix(const std::string& bin_path, const std::string& sidecar_path,
                      const std::vector<std::string>& ids, const Matrix& data);

/// Loads either form: `*.jsonl` as JSONL, otherwise raw with
/// `{path}.json` as the sidecar.
EmbeddingSet read_embeddings(const std::string& path);

}  // namespace capfuse
