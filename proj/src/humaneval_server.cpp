// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#include "capfuse/humaneval.hpp"
#include "httplib.h"
#include "json.hpp"

namespace capfuse {

using nlohmann::json;

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

int status_for(StudyError::Code code) {
  switch (code) {
    case StudyError::Code::kUnknownSession:
    case StudyError::Code::kUnknownPair: return 404;
    case StudyError::Code::kConflict: return 409;
    case StudyError::Code::kBadRequest: return 400;
  }
  return 400;
}

// Runs a handler, mapping the error types the study raises onto HTTP codes.
template <typename F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const StudyError& e) {
    send_error(res, status_for(e.code()), e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, std::string("bad request body: ") + e.what());
  } catch (const std::invalid_argument& e) {
    send_error(res, 400, e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

json session_json(const Study& study, const Session& s) {
  const auto answered = study.answered(s.id);
  std::size_t next = answered.size();
  for (std::size_t i = 0; i < answered.size(); ++i) {
    if (!answered[i]) {
      next = i;
      break;
    }
  }
  return {{"session_id", s.id},
          {"total", s.pair_ids.size()},
          {"answered", answered},
          {"next_unanswered", next},
          {"question", study.config().question_text}};
}

}  // namespace

struct StudyServer::Impl {
  Study& study;
  StudyServerOptions options;
  httplib::Server server;

  Impl(Study& s, StudyServerOptions o) : study(s), options(std::move(o)) { routes(); }

  void routes() {
    server.Post("/api/session", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const json body = json::parse(req.body);
        const Session s = study.create_session(body.at("rater_token").get<std::string>());
        send_json(res, 200, session_json(study, s));
      });
    });

    server.Get(R"(/api/session/([^/]+))",
               [this](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, [&] {
                   auto s = study.find_session(req.matches[1]);
                   if (!s) throw StudyError(StudyError::Code::kUnknownSession, "unknown session");
                   send_json(res, 200, session_json(study, *s));
                 });
               });

    server.Get(R"(/api/session/([^/]+)/pair/(\d+))",
               [this](const httplib::Request& req, httplib::Response& res) {
                 guarded(res, [&] {
                   const ServedPair p =
                       study.serve(req.matches[1], std::stoull(req.matches[2].str()));
                   send_json(res, 200,
                             {{"n", p.n},
                              {"total", p.total},
                              {"image_uri", p.image_uri},
                              {"caption_a", p.caption_a},
                              {"caption_b", p.caption_b},
                              {"question", p.question}});
                 });
               });

    server.Post("/api/vote", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const json body = json::parse(req.body);
        const VoteStatus st =
            study.record_vote(body.at("session_id").get<std::string>(),
                              body.at("n").get<std::size_t>(),
                              parse_answer(body.at("answer").get<std::string>()));
        send_json(res, 200,
                  {{"status", st == VoteStatus::kRecorded ? "recorded" : "duplicate"}});
      });
    });

    server.Get("/api/results", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const std::string& admin = study.config().admin_token;
        if (!admin.empty() && req.get_header_value("Authorization") != "Bearer " + admin) {
          send_error(res, 403, "admin token required");
          return;
        }
        const auto votes = study.votes();
        if (votes.empty()) {
          send_json(res, 200, {{"n_votes", 0}});
          return;
        }
        res.status = 200;
        res.set_content(to_json(aggregate(votes)), "application/json");
      });
    });

    if (!options.static_dir.empty()) server.set_mount_point("/", options.static_dir);
  }
};

StudyServer::StudyServer(Study& study, StudyServerOptions options)
    : impl_(std::make_unique<Impl>(study, std::move(options))) {}

StudyServer::~StudyServer() = default;

bool StudyServer::listen(const std::string& host, int port) {
  return impl_->server.listen(host, port);
}

int StudyServer::bind_to_any_port(const std::string& host) {
  return impl_->server.bind_to_any_port(host);
}

bool StudyServer::listen_after_bind() { return impl_->server.listen_after_bind(); }

void StudyServer::stop() { impl_->server.stop(); }

void StudyServer::wait_until_ready() const { impl_->server.wait_until_ready(); }

}  // namespace capfuse
