// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace capfuse {

inline constexpr std::string_view kDefaultStudyQuestion =
    "Does caption 2 provide an additional meaningful and truthful description of the "
    "image compared to caption 1?";

struct StudyPair {
  std::string image_uri;
  std::string caption_original;
  std::string caption_enriched;
};

struct StudyConfig {
  std::vector<StudyPair> pairs;
  std::size_t sample_size = 400;
  std::uint64_t seed = 0;
  std::string question_text = std::string(kDefaultStudyQuestion);
  /// Bearer token required by the results endpoint. Empty disables it.
  std::string admin_token;

  /// Throws std::invalid_argument if sample_size exceeds the pair count or
  /// the question is empty.
  void validate() const;
  static StudyConfig from_json(std::string_view text);
  static StudyConfig load(const std::string& path);
};

enum class Answer { kYes, kNo };
enum class PresentedOrder { kOrigFirst, kEnrichedFirst };

std::string_view to_string(Answer a);
std::string_view to_string(PresentedOrder o);
Answer parse_answer(std::string_view s);
PresentedOrder parse_presented_order(std::string_view s);

struct Session {
  std::string id;
  std::string rater_token;
  std::vector<std::size_t> pair_ids;         // indices into StudyConfig::pairs
  std::vector<PresentedOrder> orders;        // parallel to pair_ids
};

/// Sampling for one rater: sample_size distinct pairs and an independent
/// fair coin per pair for display order, all derived from (seed, token).
Session make_session(const StudyConfig& cfg, std::string_view rater_token);

struct Vote {
  std::string session_id;
  std::size_t pair_id = 0;
  Answer answer = Answer::kYes;
  PresentedOrder presented_order = PresentedOrder::kOrigFirst;
  std::string timestamp;
};

/// One pair as shown to a rater: captions already swapped per presented
/// order, with no hint of which one is which.
struct ServedPair {
  std::size_t n = 0;
  std::size_t total = 0;
  std::string image_uri;
  std::string caption_a;
  std::string caption_b;
  std::string question;
};

struct PairTally {
  std::size_t yes = 0;
  std::size_t no = 0;
  friend bool operator==(const PairTally&, const PairTally&) = default;
};

struct Aggregate {
  double yes_frac = 0.0;
  double no_frac = 0.0;
  std::map<std::size_t, PairTally> per_pair;
  std::map<std::string, PairTally> per_presented_order;
  std::size_t n_raters = 0;
  std::size_t n_votes = 0;

  friend bool operator==(const Aggregate&, const Aggregate&) = default;
};

/// Throws std::invalid_argument on an empty vote list.
Aggregate aggregate(const std::vector<Vote>& votes);

/// "yes", "no" or "tie" for a pair tally.
std::string_view majority(const PairTally& t);

class StudyError : public std::runtime_error {
 public:
  enum class Code { kUnknownSession, kUnknownPair, kConflict, kBadRequest };
  StudyError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

enum class VoteStatus { kRecorded, kDuplicate };

/// Live study state with an append-only JSONL log. All methods are safe to
/// call concurrently.
class Study {
 public:
  /// Replays `log_path` if it exists, then appends to it. An empty path
  /// keeps everything in memory.
  explicit Study(StudyConfig cfg, std::string log_path = {});

  const StudyConfig& config() const { return cfg_; }

  /// Idempotent per rater token.
  Session create_session(const std::string& rater_token);
  std::optional<Session> find_session(const std::string& session_id) const;

  /// n is the 0-based position within the session.
  ServedPair serve(const std::string& session_id, std::size_t n) const;

  /// Votes on the n-th pair of a session; presented order is taken from
  /// the session, never from the caller.
  VoteStatus record_vote(const std::string& session_id, std::size_t n, Answer answer);
  /// Checks the vote against the session (pair served, order matches).
  VoteStatus record_vote(const Vote& vote);

  /// Positions in the session that already have a vote.
  std::vector<bool> answered(const std::string& session_id) const;

  std::vector<Vote> votes() const;
  Aggregate results() const;

 private:
  VoteStatus record_locked(Vote vote, bool write_log);
  void append_log(const std::string& line);

  StudyConfig cfg_;
  std::string log_path_;
  std::ofstream log_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, Session> sessions_;
  std::unordered_map<std::string, std::string> session_by_token_;
  std::vector<Vote> votes_;
  std::map<std::pair<std::string, std::size_t>, std::size_t> vote_index_;
};

/// Reads the vote entries of a study log.
std::vector<Vote> read_vote_log(const std::string& path);

std::string to_json(const Aggregate& agg);

struct StudyServerOptions {
  std::string static_dir;  // survey UI bundle; empty = no static route
};

/// HTTP front end:
///   POST /api/session            {"rater_token"} -> session summary
///   GET  /api/session/{id}       -> progress (answered flags)
///   GET  /api/session/{id}/pair/{n} -> {image_uri, caption_a, caption_b, question}
///   POST /api/vote               {"session_id", "n", "answer"} -> ack
///   GET  /api/results            (Authorization: Bearer <admin_token>)
class StudyServer {
 public:
  StudyServer(Study& study, StudyServerOptions options = {});
  ~StudyServer();
  StudyServer(const StudyServer&) = delete;
  StudyServer& operator=(const StudyServer&) = delete;

  /// Blocks until stop().
  bool listen(const std::string& host, int port);
  /// Binds an ephemeral port and returns it; then call listen_after_bind().
  int bind_to_any_port(const std::string& host);
  bool listen_after_bind();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace capfuse
