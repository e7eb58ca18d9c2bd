// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#include "capfuse/eval_metrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "capfuse/text.hpp"
#include "json.hpp"

namespace capfuse {

using nlohmann::json;

void EmbeddingSet::validate() const {
  if (vectors.rows != ids.size()) {
    throw std::invalid_argument("embedding set has " + std::to_string(ids.size()) +
                                " ids but " + std::to_string(vectors.rows) + " vectors");
  }
  if (vectors.values.size() != vectors.rows * vectors.cols) {
    throw std::invalid_argument("embedding matrix storage does not match its shape");
  }
  if (!unit_normalized) return;
  for (std::size_t i = 0; i < size(); ++i) {
    const auto v = vec(i);
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (std::abs(norm - 1.0) > 1e-6) {
      throw std::invalid_argument("embedding '" + ids[i] + "' is not unit-normalized");
    }
  }
}

std::unordered_map<std::string, std::size_t> EmbeddingSet::index() const {
  std::unordered_map<std::string, std::size_t> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out.emplace(ids[i], i);
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw std::invalid_argument("zero vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double clip_score(std::span<const double> text_vec, std::span<const double> image_vec,
                  const ClipScoreConfig& cfg) {
  if (!(cfg.weight > 0.0)) throw std::invalid_argument("CLIPScore weight must be positive");
  const double raw = cfg.weight * std::max(cosine_similarity(text_vec, image_vec), 0.0);
  return cfg.scale == ReportScale::kPercent ? raw * 100.0 : raw;
}

std::vector<double> per_pair_scores(const EmbeddingSet& captions, const EmbeddingSet& images,
                                    const std::unordered_map<std::string, std::string>& pairing,
                                    VoteBasis basis, const ClipScoreConfig& cfg) {
  if (captions.dim() != images.dim() && captions.size() > 0 && images.size() > 0) {
    throw std::invalid_argument("caption and image embeddings differ in dimension");
  }
  const auto image_index = images.index();
  std::vector<double> scores;
  scores.reserve(captions.size());
  for (std::size_t i = 0; i < captions.size(); ++i) {
    const std::string& id = captions.ids[i];
    auto p = pairing.find(id);
    if (p == pairing.end()) throw std::invalid_argument("no image paired with caption '" + id + "'");
    auto img = image_index.find(p->second);
    if (img == image_index.end()) {
      throw std::invalid_argument("paired image '" + p->second + "' not in image set");
    }
    const auto tv = captions.vec(i);
    const auto iv = images.vec(img->second);
    scores.push_back(basis == VoteBasis::kRawCosine ? cosine_similarity(tv, iv)
                                                    : clip_score(tv, iv, cfg));
  }
  return scores;
}

double mean_clip_score(const EmbeddingSet& captions, const EmbeddingSet& images,
                       const std::unordered_map<std::string, std::string>& pairing,
                       const ClipScoreConfig& cfg) {
  if (captions.size() == 0) throw std::invalid_argument("no captions to score");
  const auto scores = per_pair_scores(captions, images, pairing, VoteBasis::kClipScore, cfg);
  return std::accumulate(scores.begin(), scores.end(), 0.0) /
         static_cast<double>(scores.size());
}

VoteSummary vote_preference(std::span<const double> original_scores,
                            std::span<const double> fused_scores) {
  if (original_scores.size() != fused_scores.size()) {
    throw std::invalid_argument("score lists differ in length");
  }
  if (original_scores.empty()) throw std::invalid_argument("no scores to vote on");
  VoteSummary s;
  s.total = original_scores.size();
  for (std::size_t i = 0; i < s.total; ++i) {
    if (fused_scores[i] > original_scores[i]) {
      ++s.fused_wins;
    } else if (original_scores[i] > fused_scores[i]) {
      ++s.original_wins;
    } else {
      ++s.ties;
    }
  }
  const auto n = static_cast<double>(s.total);
  s.original_frac = static_cast<double>(s.original_wins) / n;
  s.fused_frac = static_cast<double>(s.fused_wins) / n;
  // The last non-empty bucket takes the complement. 1 - x is exact for
  // x >= 0.5 and otherwise off by under half an ulp of 1, so summing the
  // fields in declaration order gives exactly 1.
  if (s.ties > 0) {
    s.tie_frac = 1.0 - (s.original_frac + s.fused_frac);
  } else if (s.fused_wins > 0) {
    s.fused_frac = 1.0 - s.original_frac;
  } else {
    s.original_frac = 1.0;
  }
  return s;
}

void RetrievalSetup::validate() const {
  if (sim.values.size() != sim.rows * sim.cols) throw std::invalid_argument("bad sim matrix");
  if (sim.rows == 0 || sim.cols == 0) throw std::invalid_argument("empty sim matrix");
  if (itm && (itm->rows != sim.rows || itm->cols != sim.cols)) {
    throw std::invalid_argument("itm matrix shape differs from sim matrix");
  }
  if (image_to_texts.size() != sim.rows) {
    throw std::invalid_argument("ground truth must list texts for every image");
  }
  if (text_to_image.size() != sim.cols) {
    throw std::invalid_argument("ground truth must give an image for every text");
  }
  for (const auto& texts : image_to_texts) {
    if (texts.empty()) throw std::invalid_argument("image without ground-truth text");
    for (std::size_t t : texts) {
      if (t >= sim.cols) throw std::invalid_argument("ground-truth text index out of range");
    }
  }
  for (std::size_t img : text_to_image) {
    if (img >= sim.rows) throw std::invalid_argument("ground-truth image index out of range");
  }
  auto finite = [](const Matrix& m) {
    return std::all_of(m.values.begin(), m.values.end(),
                       [](double v) { return std::isfinite(v); });
  };
  if (!finite(sim) || (itm && !finite(*itm))) {
    throw std::invalid_argument("score matrices must be finite");
  }
  if (k_candidates == 0) throw std::invalid_argument("k_candidates must be positive");
}

namespace {

// Scores of one query against the searched side, copied out so both
// directions share the ranking code.
struct Query {
  std::vector<double> sim;
  std::vector<double> itm;
  std::vector<std::size_t> truth;
};

std::size_t searched_size(const RetrievalSetup& s, Direction d) {
  return d == Direction::kImageToText ? s.sim.cols : s.sim.rows;
}

std::size_t query_count(const RetrievalSetup& s, Direction d) {
  return d == Direction::kImageToText ? s.sim.rows : s.sim.cols;
}

Query make_query(const RetrievalSetup& s, Direction d, std::size_t q, bool with_itm) {
  Query out;
  const std::size_t n = searched_size(s, d);
  out.sim.resize(n);
  if (with_itm) out.itm.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t r = d == Direction::kImageToText ? q : j;
    const std::size_t c = d == Direction::kImageToText ? j : q;
    out.sim[j] = s.sim(r, c);
    if (with_itm) out.itm[j] = (*s.itm)(r, c);
  }
  if (d == Direction::kImageToText) {
    out.truth = s.image_to_texts[q];
  } else {
    out.truth = {s.text_to_image[q]};
  }
  return out;
}

void check_ks(const std::vector<std::size_t>& ks, std::size_t limit) {
  if (ks.empty()) throw std::invalid_argument("no k values requested");
  for (std::size_t k : ks) {
    if (k == 0 || k > limit) {
      throw std::invalid_argument("k=" + std::to_string(k) + " outside [1, " +
                                  std::to_string(limit) + "]");
    }
  }
}

// Recall from the 0-based rank of each query's best ground-truth item
// (nullopt = not retrieved at all).
std::map<std::size_t, double> tally(const std::vector<std::optional<std::size_t>>& best_rank,
                                    const std::vector<std::size_t>& ks) {
  std::map<std::size_t, double> out;
  for (std::size_t k : ks) {
    std::size_t hits = 0;
    for (const auto& r : best_rank) hits += (r && *r < k) ? 1 : 0;
    out[k] = static_cast<double>(hits) / static_cast<double>(best_rank.size());
  }
  return out;
}

}  // namespace

std::map<std::size_t, double> recall_at_k(const RetrievalSetup& setup, Direction direction,
                                          const std::vector<std::size_t>& ks) {
  setup.validate();
  const std::size_t n = searched_size(setup, direction);
  check_ks(ks, n);
  std::vector<std::optional<std::size_t>> best(query_count(setup, direction));
  for (std::size_t q = 0; q < best.size(); ++q) {
    const Query query = make_query(setup, direction, q, false);
    // Rank of item t = number of items ordered strictly before it.
    for (std::size_t t : query.truth) {
      std::size_t ahead = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (query.sim[j] > query.sim[t] || (query.sim[j] == query.sim[t] && j < t)) ++ahead;
      }
      if (!best[q] || ahead < *best[q]) best[q] = ahead;
    }
  }
  return tally(best, ks);
}

std::map<std::size_t, double> rerank_topk(const RetrievalSetup& setup, Direction direction,
                                          const std::vector<std::size_t>& ks) {
  setup.validate();
  if (!setup.itm) throw std::invalid_argument("re-ranking requires an ITM matrix");
  const std::size_t n = searched_size(setup, direction);
  const std::size_t k_cand = setup.k_candidates;
  if (k_cand > n) throw std::invalid_argument("k_candidates exceeds searched-side size");
  check_ks(ks, k_cand);

  std::vector<std::optional<std::size_t>> best(query_count(setup, direction));
  std::vector<std::size_t> order(n);
  for (std::size_t q = 0; q < best.size(); ++q) {
    const Query query = make_query(setup, direction, q, true);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k_cand),
                      order.end(), [&](std::size_t a, std::size_t b) {
                        if (query.sim[a] != query.sim[b]) return query.sim[a] > query.sim[b];
                        return a < b;
                      });
    std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k_cand),
              [&](std::size_t a, std::size_t b) {
                if (query.itm[a] != query.itm[b]) return query.itm[a] > query.itm[b];
                if (query.sim[a] != query.sim[b]) return query.sim[a] > query.sim[b];
                return a < b;
              });
    for (std::size_t pos = 0; pos < k_cand; ++pos) {
      if (std::find(query.truth.begin(), query.truth.end(), order[pos]) != query.truth.end()) {
        best[q] = pos;
        break;
      }
    }
  }
  return tally(best, ks);
}

LengthStats length_stats(const std::vector<std::string>& captions, const TokenBudget& budget) {
  if (captions.empty()) throw std::invalid_argument("no captions");
  std::vector<std::size_t> lengths;
  lengths.reserve(captions.size());
  for (const std::string& c : captions) lengths.push_back(count_tokens(c));
  std::sort(lengths.begin(), lengths.end());
  const auto n = static_cast<double>(lengths.size());
  auto nearest_rank = [&](double p) {
    const auto rank = static_cast<std::size_t>(std::ceil(p * n));
    return static_cast<double>(lengths[std::max<std::size_t>(rank, 1) - 1]);
  };
  LengthStats s;
  s.mean_tokens =
      static_cast<double>(std::accumulate(lengths.begin(), lengths.end(), std::size_t{0})) / n;
  s.p50 = nearest_rank(0.50);
  s.p95 = nearest_rank(0.95);
  auto over = [&](std::size_t limit) {
    return static_cast<double>(std::count_if(lengths.begin(), lengths.end(),
                                             [&](std::size_t l) { return l > limit; })) /
           n;
  };
  s.frac_over_30 = over(budget.base_caption_budget);
  s.frac_over_60 = over(budget.caption_budget);
  return s;
}

EmbeddingSet read_embeddings_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  EmbeddingSet set;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      const auto& vec = j.at("vec");
      if (set.ids.empty()) set.vectors.cols = vec.size();
      if (vec.size() != set.vectors.cols || vec.empty()) {
        throw std::runtime_error("vector dimension " + std::to_string(vec.size()) +
                                 " differs from " + std::to_string(set.vectors.cols));
      }
      set.ids.push_back(j.at("id").get<std::string>());
      for (const json& v : vec) set.vectors.values.push_back(v.get<double>());
      ++set.vectors.rows;
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return set;
}

namespace {
float decode_f32_le(const unsigned char* p) {
  std::uint32_t bits = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
                       (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
  return std::bit_cast<float>(bits);
}

void encode_f32_le(float f, unsigned char* p) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) p[i] = static_cast<unsigned char>(bits >> (8 * i));
}
}  // namespace

RawMatrix read_raw_matrix(const std::string& bin_path, const std::string& sidecar_path) {
  const json meta = json::parse(read_file(sidecar_path));
  if (meta.value("dtype", std::string("f32")) != "f32") {
    throw std::runtime_error(sidecar_path + ": only dtype f32 is supported");
  }
  if (meta.value("order", std::string("row-major")) != "row-major") {
    throw std::runtime_error(sidecar_path + ": only row-major order is supported");
  }
  RawMatrix out;
  out.ids = meta.at("ids").get<std::vector<std::string>>();
  const auto dim = meta.at("dim").get<std::size_t>();
  const std::string bytes = read_file(bin_path);
  const std::size_t expected = out.ids.size() * dim * 4;
  if (bytes.size() != expected) {
    throw std::runtime_error(bin_path + ": expected " + std::to_string(expected) +
                             " bytes, found " + std::to_string(bytes.size()));
  }
  out.data = Matrix(out.ids.size(), dim);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < out.data.values.size(); ++i) {
    out.data.values[i] = decode_f32_le(p + 4 * i);
  }
  return out;
}

void write_raw_matrix(const std::string& bin_path, const std::string& sidecar_path,
                      const std::vector<std::string>& ids, const Matrix& data) {
  if (ids.size() != data.rows) throw std::invalid_argument("ids/rows mismatch");
  std::string bytes(data.values.size() * 4, '\0');
  auto* p = reinterpret_cast<unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < data.values.size(); ++i) {
    encode_f32_le(static_cast<float>(data.values[i]), p + 4 * i);
  }
  write_file_atomic(bin_path, bytes);
  json meta = {{"ids", ids}, {"dim", data.cols}, {"dtype", "f32"}, {"order", "row-major"}};
  write_file_atomic(sidecar_path, meta.dump());
}

EmbeddingSet read_embeddings(const std::string& path) {
  if (path.size() >= 6 && path.compare(path.size() - 6, 6, ".jsonl") == 0) {
    return read_embeddings_jsonl(path);
  }
  RawMatrix raw = read_raw_matrix(path, path + ".json");
  EmbeddingSet set;
  set.ids = std::move(raw.ids);
  set.vectors = std::move(raw.data);
  return set;
}

}  // namespace capfuse
