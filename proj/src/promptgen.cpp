// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#include "capfuse/promptgen.hpp"

#include "capfuse/text.hpp"
#include "json.hpp"

namespace capfuse {

namespace {

constexpr std::string_view kCaptionLead = "A caption of an image is given: ";
constexpr std::string_view kObjectsLead =
    "The following objects are detected in the image from left to right:";
constexpr std::string_view kSceneTextLead = "Additional text in the image: ";
constexpr std::string_view kInstruction =
    "Write a comprehensive and concise caption of the scene using the objects detected.";

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

}  // namespace

std::size_t count_tokens(std::string_view text) {
  std::size_t count = 0;
  bool in_token = false;
  for (char c : text) {
    if (is_space(c)) {
      in_token = false;
    } else if (!in_token) {
      in_token = true;
      ++count;
    }
  }
  return count;
}

std::string strip_terminal_period(std::string_view caption) {
  while (!caption.empty() && (is_space(caption.back()) || caption.back() == '.')) {
    caption.remove_suffix(1);
  }
  return std::string(caption);
}

std::string render_object_phrase(const OrderedObject& obj) {
  const auto& attrs = obj.detection.attributes;
  std::string out = "A ";
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    if (i > 0) out += (i + 1 == attrs.size()) ? " and " : ", ";
    out += attrs[i].name;
  }
  if (!attrs.empty()) out += ' ';
  out += obj.detection.object_class;
  if (!obj.assigned_texts.empty()) {
    out += " with the following text: ";
    out += join(obj.assigned_texts, " ");
  }
  out += '.';
  return out;
}

FusePrompt render_fuse_prompt(std::string_view original_caption,
                              const std::vector<OrderedObject>& objects,
                              const std::vector<std::string>& scene_texts,
                              const PromptOptions& options) {
  const bool with_scene = options.scene_text && !scene_texts.empty();
  if (objects.empty() && !with_scene) throw NothingToFuse();

  FusePrompt p;
  p.caption = strip_terminal_period(original_caption);
  p.object_count = objects.size();
  if (with_scene) p.scene_texts = scene_texts;

  std::string& t = p.text;
  t += kCaptionLead;
  t += p.caption;
  t += ".\n";
  t += kObjectsLead;
  t += '\n';
  for (const OrderedObject& obj : objects) {
    p.object_phrases.push_back(render_object_phrase(obj));
    t += p.object_phrases.back();
    t += '\n';
  }
  if (with_scene) {
    t += kSceneTextLead;
    t += join(scene_texts, " ");
    t += ".\n";
  }
  t += kInstruction;

  p.token_count = options.counter(p.text);
  p.over_budget = p.token_count > options.budget.source_budget;
  return p;
}

FinetunePair make_finetune_pair(const FusePrompt& prompt, std::string_view enriched,
                                const TokenBudget& budget, InputStyle style,
                                const TokenCounter& counter) {
  if (enriched.empty()) throw std::invalid_argument("enriched caption is empty");
  FinetunePair pair;
  if (style == InputStyle::kPrompt) {
    pair.input = prompt.text;
  } else {
    // Caption followed by the expert phrases on one line.
    std::vector<std::string> parts{prompt.caption + "."};
    parts.insert(parts.end(), prompt.object_phrases.begin(), prompt.object_phrases.end());
    if (!prompt.scene_texts.empty()) {
      parts.push_back(std::string(kSceneTextLead) + join(prompt.scene_texts, " ") + ".");
    }
    pair.input = join(parts, " ");
  }
  pair.target = std::string(enriched);
  if (counter(pair.input) > budget.source_budget) pair.flags.push_back("source_over_budget");
  if (counter(pair.target) > budget.target_budget) pair.flags.push_back("target_over_budget");
  return pair;
}

std::string serialize(const FinetunePair& pair) {
  nlohmann::json j = nlohmann::json::object();
  j["input"] = pair.input;
  j["target"] = pair.target;
  j["flags"] = pair.flags;
  return j.dump();
}

}  // namespace capfuse
