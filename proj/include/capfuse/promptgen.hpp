// Copyright 2026 The capfuse Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "capfuse/spatial.hpp"

namespace capfuse {

/// Token limits for the fuser's source/target and for generated captions.
struct TokenBudget {
  std::size_t source_budget = 100;
  std::size_t target_budget = 200;
  std::size_t caption_budget = 60;
  /// Caption length of the unenriched captioning setup; used by length_stats.
  std::size_t base_caption_budget = 30;
};

/// Number of maximal runs of non-whitespace characters.
std::size_t count_tokens(std::string_view text);

using TokenCounter = std::function<std::size_t(std::string_view)>;

struct PromptOptions {
  /// Emit the "Additional text in the image" line for OCR text no object
  /// encloses. Off gives the bare template.
  bool scene_text = true;
  TokenBudget budget;
  TokenCounter counter = count_tokens;
};

struct FusePrompt {
  std::string text;
  std::size_t object_count = 0;
  std::size_t token_count = 0;
  bool over_budget = false;

  // Structured parts, kept so the prompt can be re-serialized or mocked
  // without reparsing `text`.
  std::string caption;  // trailing period removed
  std::vector<std::string> object_phrases;
  std::vector<std::string> scene_texts;
};

class NothingToFuse : public std::invalid_argument {
 public:
  NothingToFuse() : std::invalid_argument("nothing to fuse") {}
};

/// `A {a1}, {a2} and {ak} {class}[ with the following text: {texts}].`
std::string render_object_phrase(const OrderedObject& obj);

/// Renders the multi-line fusing prompt. Objects must already be in rank
/// order. Throws NothingToFuse when there are no objects and no scene texts
/// (or scene text is disabled).
FusePrompt render_fuse_prompt(std::string_view original_caption,
                              const std::vector<OrderedObject>& objects,
                              const std::vector<std::string>& scene_texts,
                              const PromptOptions& options = {});

/// Strips trailing whitespace and periods so exactly one period can be
/// appended.
std::string strip_terminal_period(std::string_view caption);

enum class InputStyle { kPrompt, kConcat };

struct FinetunePair {
  std::string input;
  std::string target;
  std::vector<std::string> flags;  // "source_over_budget", "target_over_budget"
};

/// Builds one fusing-dataset example. Over-budget sides are flagged, never
/// truncated. Throws std::invalid_argument for an empty target.
FinetunePair make_finetune_pair(const FusePrompt& prompt, std::string_view enriched,
                                const TokenBudget& budget = {},
                                InputStyle style = InputStyle::kPrompt,
                                const TokenCounter& counter = count_tokens);

/// JSONL line `{"input": ..., "target": ..., "flags": [...]}`.
std::string serialize(const FinetunePair& pair);

}  // namespace capfuse
