// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#include "capfuse/humaneval.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>

#include "capfuse/text.hpp"
#include "json.hpp"

namespace capfuse {

using nlohmann::json;

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string session_digest(std::uint64_t seed, std::string_view token) {
  std::string material = std::to_string(seed);
  material.push_back('\0');
  material.append(token);
  return sha256_hex(material);
}

// Unbiased draw from [0, bound) by rejection; std::uniform_int_distribution
// is not reproducible across standard libraries.
std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t bound) {
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % bound;
}

json vote_json(const Vote& v) {
  return {{"type", "vote"},
          {"session_id", v.session_id},
          {"pair_id", v.pair_id},
          {"answer", to_string(v.answer)},
          {"presented_order", to_string(v.presented_order)},
          {"timestamp", v.timestamp}};
}

Vote vote_from_json(const json& j) {
  Vote v;
  v.session_id = j.at("session_id").get<std::string>();
  v.pair_id = j.at("pair_id").get<std::size_t>();
  v.answer = parse_answer(j.at("answer").get<std::string>());
  v.presented_order = parse_presented_order(j.at("presented_order").get<std::string>());
  v.timestamp = j.value("timestamp", std::string());
  return v;
}

}  // namespace

void StudyConfig::validate() const {
  if (sample_size == 0) throw std::invalid_argument("sample_size must be positive");
  if (sample_size > pairs.size()) {
    throw std::invalid_argument("sample_size " + std::to_string(sample_size) +
                                " exceeds the " + std::to_string(pairs.size()) +
                                " available pairs");
  }
  if (trim(question_text).empty()) throw std::invalid_argument("question_text is empty");
}

StudyConfig StudyConfig::from_json(std::string_view text) {
  const json j = json::parse(text.begin(), text.end());
  StudyConfig cfg;
  for (const json& p : j.at("pairs")) {
    cfg.pairs.push_back({p.at("image_uri").get<std::string>(),
                         p.at("caption_original").get<std::string>(),
                         p.at("caption_enriched").get<std::string>()});
  }
  cfg.sample_size = j.value("sample_size", cfg.sample_size);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.question_text = j.value("question_text", cfg.question_text);
  cfg.admin_token = j.value("admin_token", cfg.admin_token);
  cfg.validate();
  return cfg;
}

StudyConfig StudyConfig::load(const std::string& path) { return from_json(read_file(path)); }

std::string_view to_string(Answer a) { return a == Answer::kYes ? "yes" : "no"; }

std::string_view to_string(PresentedOrder o) {
  return o == PresentedOrder::kOrigFirst ? "orig_first" : "enriched_first";
}

Answer parse_answer(std::string_view s) {
  if (s == "yes") return Answer::kYes;
  if (s == "no") return Answer::kNo;
  throw StudyError(StudyError::Code::kBadRequest, "answer must be \"yes\" or \"no\"");
}

PresentedOrder parse_presented_order(std::string_view s) {
  if (s == "orig_first") return PresentedOrder::kOrigFirst;
  if (s == "enriched_first") return PresentedOrder::kEnrichedFirst;
  throw StudyError(StudyError::Code::kBadRequest, "unknown presented_order");
}

Session make_session(const StudyConfig& cfg, std::string_view rater_token) {
  const std::string digest = session_digest(cfg.seed, rater_token);
  Session s;
  s.id = "s-" + digest.substr(0, 20);
  s.rater_token = std::string(rater_token);
  std::mt19937_64 rng(std::stoull(digest.substr(20, 16), nullptr, 16));

  // Partial Fisher-Yates: the first sample_size slots are the sample.
  std::vector<std::size_t> idx(cfg.pairs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < cfg.sample_size; ++i) {
    const std::size_t j = i + bounded(rng, idx.size() - i);
    std::swap(idx[i], idx[j]);
  }
  s.pair_ids.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cfg.sample_size));
  s.orders.reserve(cfg.sample_size);
  for (std::size_t i = 0; i < cfg.sample_size; ++i) {
    s.orders.push_back((rng() >> 63) ? PresentedOrder::kEnrichedFirst
                                     : PresentedOrder::kOrigFirst);
  }
  return s;
}

std::string_view majority(const PairTally& t) {
  if (t.yes > t.no) return "yes";
  if (t.no > t.yes) return "no";
  return "tie";
}

Aggregate aggregate(const std::vector<Vote>& votes) {
  if (votes.empty()) throw std::invalid_argument("no votes to aggregate");
  Aggregate agg;
  std::set<std::string> raters;
  std::size_t yes = 0;
  for (const Vote& v : votes) {
    const bool is_yes = v.answer == Answer::kYes;
    yes += is_yes ? 1 : 0;
    PairTally& pair = agg.per_pair[v.pair_id];
    PairTally& order = agg.per_presented_order[std::string(to_string(v.presented_order))];
    (is_yes ? pair.yes : pair.no)++;
    (is_yes ? order.yes : order.no)++;
    raters.insert(v.session_id);
  }
  agg.n_votes = votes.size();
  agg.n_raters = raters.size();
  agg.yes_frac = static_cast<double>(yes) / static_cast<double>(votes.size());
  agg.no_frac = 1.0 - agg.yes_frac;
  return agg;
}

Study::Study(StudyConfig cfg, std::string log_path)
    : cfg_(std::move(cfg)), log_path_(std::move(log_path)) {
  cfg_.validate();
  if (log_path_.empty()) return;
  bool needs_newline = false;
  if (std::filesystem::exists(log_path_)) {
    const std::string contents = read_file(log_path_);
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < contents.size()) {
      std::size_t eol = contents.find('\n', pos);
      const bool last = eol == std::string::npos;
      if (last) eol = contents.size();
      const std::string_view line(contents.data() + pos, eol - pos);
      ++line_no;
      json j;
      if (!trim(line).empty()) {
        try {
          j = json::parse(line);
        } catch (const json::parse_error&) {
          // A torn final line from a crash mid-append is dropped; anything
          // earlier means the log is corrupt.
          if (!last) {
            throw std::runtime_error(log_path_ + ":" + std::to_string(line_no) +
                                     ": corrupt log");
          }
          std::filesystem::resize_file(log_path_, pos);
          break;
        }
      }
      const std::string type = j.is_object() ? j.value("type", std::string()) : "";
      if (type == "session") {
        Session s = make_session(cfg_, j.at("rater_token").get<std::string>());
        session_by_token_[s.rater_token] = s.id;
        sessions_[s.id] = std::move(s);
      } else if (type == "vote") {
        record_locked(vote_from_json(j), false);
      }
      needs_newline = last;
      pos = last ? contents.size() : eol + 1;
    }
  }
  log_.open(log_path_, std::ios::app);
  if (!log_) throw std::runtime_error("cannot open vote log " + log_path_);
  // Complete final entry whose newline never made it to disk.
  if (needs_newline) log_ << '\n' << std::flush;
}

void Study::append_log(const std::string& line) {
  if (!log_.is_open()) return;
  log_ << line << '\n';
  log_.flush();
}

Session Study::create_session(const std::string& rater_token) {
  if (rater_token.empty()) {
    throw StudyError(StudyError::Code::kBadRequest, "rater_token must be non-empty");
  }
  std::lock_guard lock(mu_);
  if (auto it = session_by_token_.find(rater_token); it != session_by_token_.end()) {
    return sessions_.at(it->second);
  }
  Session s = make_session(cfg_, rater_token);
  append_log(json{{"type", "session"}, {"session_id", s.id}, {"rater_token", rater_token}}.dump());
  session_by_token_[rater_token] = s.id;
  sessions_[s.id] = s;
  return s;
}

std::optional<Session> Study::find_session(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  if (auto it = sessions_.find(session_id); it != sessions_.end()) return it->second;
  return std::nullopt;
}

ServedPair Study::serve(const std::string& session_id, std::size_t n) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) {
    throw StudyError(StudyError::Code::kUnknownSession, "unknown session " + session_id);
  }
  const Session& s = it->second;
  if (n >= s.pair_ids.size()) {
    throw StudyError(StudyError::Code::kUnknownPair, "pair index out of range");
  }
  const StudyPair& pair = cfg_.pairs[s.pair_ids[n]];
  ServedPair out;
  out.n = n;
  out.total = s.pair_ids.size();
  out.image_uri = pair.image_uri;
  out.question = cfg_.question_text;
  if (s.orders[n] == PresentedOrder::kOrigFirst) {
    out.caption_a = pair.caption_original;
    out.caption_b = pair.caption_enriched;
  } else {
    out.caption_a = pair.caption_enriched;
    out.caption_b = pair.caption_original;
  }
  return out;
}

VoteStatus Study::record_vote(const std::string& session_id, std::size_t n, Answer answer) {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) {
    throw StudyError(StudyError::Code::kUnknownSession, "unknown session " + session_id);
  }
  const Session& s = it->second;
  if (n >= s.pair_ids.size()) {
    throw StudyError(StudyError::Code::kUnknownPair, "pair index out of range");
  }
  return record_locked({session_id, s.pair_ids[n], answer, s.orders[n], utc_timestamp()}, true);
}

VoteStatus Study::record_vote(const Vote& vote) {
  std::lock_guard lock(mu_);
  Vote v = vote;
  if (v.timestamp.empty()) v.timestamp = utc_timestamp();
  return record_locked(std::move(v), true);
}

VoteStatus Study::record_locked(Vote vote, bool write_log) {
  auto it = sessions_.find(vote.session_id);
  if (it == sessions_.end()) {
    throw StudyError(StudyError::Code::kUnknownSession, "unknown session " + vote.session_id);
  }
  const Session& s = it->second;
  std::size_t pos = s.pair_ids.size();
  for (std::size_t i = 0; i < s.pair_ids.size(); ++i) {
    if (s.pair_ids[i] == vote.pair_id) pos = i;
  }
  if (pos == s.pair_ids.size()) {
    throw StudyError(StudyError::Code::kUnknownPair, "pair " + std::to_string(vote.pair_id) +
                                                         " was not served to this session");
  }
  if (s.orders[pos] != vote.presented_order) {
    throw StudyError(StudyError::Code::kBadRequest, "presented_order differs from serve time");
  }
  const auto key = std::make_pair(vote.session_id, vote.pair_id);
  if (auto existing = vote_index_.find(key); existing != vote_index_.end()) {
    if (votes_[existing->second].answer == vote.answer) return VoteStatus::kDuplicate;
    throw StudyError(StudyError::Code::kConflict, "a different answer was already recorded");
  }
  if (write_log) append_log(vote_json(vote).dump());
  vote_index_[key] = votes_.size();
  votes_.push_back(std::move(vote));
  return VoteStatus::kRecorded;
}

std::vector<bool> Study::answered(const std::string& session_id) const {
  std::lock_guard lock(mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) {
    throw StudyError(StudyError::Code::kUnknownSession, "unknown session " + session_id);
  }
  std::vector<bool> out;
  for (std::size_t pair_id : it->second.pair_ids) {
    out.push_back(vote_index_.count({session_id, pair_id}) > 0);
  }
  return out;
}

std::vector<Vote> Study::votes() const {
  std::lock_guard lock(mu_);
  return votes_;
}

Aggregate Study::results() const { return aggregate(votes()); }

std::vector<Vote> read_vote_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vote log " + path);
  std::vector<Vote> out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw;
    }
    if (j.value("type", std::string()) == "vote") out.push_back(vote_from_json(j));
  }
  return out;
}

std::string to_json(const Aggregate& agg) {
  json per_pair = json::object();
  for (const auto& [id, t] : agg.per_pair) {
    per_pair[std::to_string(id)] = {{"yes", t.yes}, {"no", t.no}, {"majority", majority(t)}};
  }
  json per_order = json::object();
  for (const auto& [order, t] : agg.per_presented_order) {
    per_order[order] = {{"yes", t.yes}, {"no", t.no}};
  }
  return json{{"yes_frac", agg.yes_frac},
              {"no_frac", agg.no_frac},
              {"n_raters", agg.n_raters},
              {"n_votes", agg.n_votes},
              {"per_pair", std::move(per_pair)},
              {"per_presented_order", std::move(per_order)}}
      .dump();
}

}  // namespace capfuse
