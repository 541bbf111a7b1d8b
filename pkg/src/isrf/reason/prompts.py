"""Three-stage (forward / backward / fuse) prompt rendering for items and users."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

STAGES = ("forward", "backward", "fuse")


class PromptError(ValueError):
    pass


@lru_cache(maxsize=None)
def load_template(entity: str, stage: str) -> str:
    if stage not in STAGES:
        raise PromptError(f"unknown stage {stage!r}")
    return resources.files("isrf.reason").joinpath("templates", f"{entity}_{stage}.txt").read_text("utf-8")


def template_version() -> str:
    return resources.files("isrf.reason").joinpath("templates", "VERSION").read_text("utf-8").strip()


def _fill(entity: str, stage: str, body: dict, context) -> str:
    if stage == "backward":
        if not context:
            raise PromptError(f"{entity} prompt stage 'backward' needs the forward output as context")
        body["context"] = context
    elif stage == "fuse":
        if not context or len(context) != 2 or not all(context):
            raise PromptError(f"{entity} prompt stage 'fuse' needs (positive, negative) context")
        body["positive"], body["negative"] = context
    return load_template(entity, stage).format(**body)


def render_item_prompt(attributes: Mapping[str, str], stage: str, context=None) -> str:
    """``context`` is the forward text for ``backward`` and a ``(positive, negative)`` pair for ``fuse``."""
    if not attributes:
        raise PromptError("item prompt needs at least one attribute")
    lines = "\n".join(f"{k}: {v}" for k, v in attributes.items())
    return _fill("item", stage, {"attributes": lines}, context)


def render_user_prompt(sampled_items: Sequence[str], stage: str, context=None) -> str:
    if len(sampled_items) == 0:
        raise PromptError("user prompt needs at least one sampled item")
    lines = "\n".join(f"- {t}" for t in sampled_items)
    return _fill("user", stage, {"items": lines}, context)


def sample_history(history: Sequence[int], n: int = 10, seed: int = 0, user: int = 0) -> list[int]:
    """Uniform sample without replacement, keeping chronological order."""
    if len(history) <= n:
        return list(history)
    rng = np.random.default_rng([seed, user])
    picked = np.sort(rng.choice(len(history), size=n, replace=False))
    return [history[i] for i in picked]
