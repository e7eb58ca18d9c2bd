# Copyright 2026 The capfuse Authors.
# SPDX-License-Identifier: Apache-2.0
"""Caption enrichment by fusing vision-expert outputs (native core bindings)."""

import json as _json

from . import _core
from ._core import (
    DEFAULT_STUDY_QUESTION,
    MOCK_MODEL_ID,
    AuthFailure,
    ConfigMismatch,
    FusePrompt,
    IncompleteRun,
    NothingToFuse,
    cache_key,
    clip_score,
    count_tokens,
    length_stats,
    make_finetune_pair,
    mock_fuse,
    recall_at_k,
    render_fuse_prompt,
    rerank_topk,
    run_pipeline,
    validate_bundle_line,
    validate_caption_line,
    vote_preference,
)

__all__ = [
    "DEFAULT_STUDY_QUESTION", "MOCK_MODEL_ID", "AuthFailure", "ConfigMismatch", "FusePrompt",
    "IncompleteRun", "NothingToFuse", "cache_key", "clip_score", "count_tokens", "filter_bundle",
    "length_stats", "make_finetune_pair", "make_session", "mock_fuse", "prepare_prompt",
    "recall_at_k", "render_fuse_prompt", "rerank_topk", "run_pipeline", "summarize",
    "validate_bundle_line", "validate_caption_line", "vote_preference",
]


def filter_bundle(bundle, det_threshold=0.7, attr_threshold=0.2, strict=True):
    """Apply detection and attribute thresholds to a bundle dict."""
    out = _core.filter_bundle(_json.dumps(bundle), det_threshold, attr_threshold, strict)
    return _json.loads(out)


def prepare_prompt(caption, bundle, det_threshold=0.7, attr_threshold=0.2, scene_text=True,
                   order="center"):
    """Full prompt for one caption and bundle dict, or None if nothing survives."""
    return _core.prepare_prompt(caption, _json.dumps(bundle), det_threshold, attr_threshold,
                                scene_text, order)


def summarize(out_dir):
    return _json.loads(_core.summarize(str(out_dir)))


def make_session(study_config, rater_token):
    """(session_id, pair_ids, presented_orders) for a study config dict."""
    return _core.make_session(_json.dumps(study_config), rater_token)
