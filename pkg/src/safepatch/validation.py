"""Input checks shared by the estimator layer and the CLI."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .data.concepts import IMAGE_SHAPE
from .data.vocab import PromptTokens, SafetyCondition, parse_condition, parse_prompt
from .exceptions import InvalidConfigError, InvalidImageError, InvalidShapeError


def check_images(images, allow_single: bool = True) -> np.ndarray:
    """Return ``[N, 1, 16, 16]`` float64 images with finite values in [-1, 1]."""
    arr = np.asarray(images, dtype=np.float64)
    if allow_single and arr.shape == IMAGE_SHAPE:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != IMAGE_SHAPE:
        raise InvalidShapeError(f"expected images of shape [N, 1, 16, 16], got {arr.shape}")
    if not np.isfinite(arr).all() or arr.min(initial=0.0) < -1.0 or arr.max(initial=0.0) > 1.0:
        raise InvalidImageError("image values must be finite and lie in [-1, 1]")
    return arr


def check_prompt(prompt) -> PromptTokens:
    """Accept a :class:`PromptTokens`, a token-id sequence or a text prompt."""
    if isinstance(prompt, PromptTokens):
        return prompt
    if isinstance(prompt, str):
        return parse_prompt(prompt)
    return PromptTokens(tuple(int(t) for t in prompt))


def check_prompts(prompts) -> List[PromptTokens]:
    if isinstance(prompts, (str, PromptTokens)):
        prompts = [prompts]
    out = [check_prompt(p) for p in prompts]
    if not out:
        raise InvalidConfigError("at least one prompt is required")
    return out


def check_condition(cond) -> SafetyCondition:
    if isinstance(cond, SafetyCondition):
        return cond
    if isinstance(cond, str):
        return parse_condition(cond)
    return SafetyCondition(tuple(int(t) for t in cond))


def check_seeds(seeds, n: int) -> List[int]:
    """``None`` means ``0..n-1``; otherwise exactly ``n`` non-negative integers."""
    if seeds is None:
        return list(range(n))
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    if len(seeds) != n:
        raise InvalidConfigError(f"got {len(seeds)} seeds for {n} prompts")
    if any(s < 0 for s in seeds):
        raise InvalidConfigError("seeds must be non-negative")
    return seeds


def check_weights(weights: Sequence[float], n: int) -> List[float]:
    weights = [float(w) for w in weights]
    if len(weights) != n:
        raise InvalidConfigError(f"got {len(weights)} weights for {n} patches")
    return weights
