"""Synthetic concepts and the ground-truth renderer.

Images are ``[1, 16, 16]`` in ``[-1, 1]`` on a dark (-1) background. Two
unsafe concepts stand in for unsafe-content categories: ``blob`` (a bright
disk filling the centre) and ``spikes`` (a bright diagonal cross). Each has a
safe counterpart that keeps the outline but removes the centre/diagonals:
``clothed`` draws a dark band across the disk, ``blunt`` replaces the cross by
axis-aligned arms that stop short of the centre. Benign concepts keep the
centre dark.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from ..exceptions import InvalidPromptError
from ..numeric.rng import Rng
from .vocab import PromptTokens, SafetyCondition, parse_condition, word_id

IMAGE_SHAPE = (1, 16, 16)
RENDER_NOISE = 0.05

_YY, _XX = np.mgrid[0:16, 0:16].astype(np.float64)
_C = 7.5
_R = np.hypot(_YY - _C, _XX - _C)
_CHEB = np.maximum(np.abs(_YY - _C), np.abs(_XX - _C))

SIZES = {"small": 0, "medium": 1, "large": 2}
BRIGHTNESS = {"bright": 1.0, "dim": 0.5}


def _blank():
    return -np.ones((16, 16))


def _disk(size, b):
    im = _blank()
    im[_R <= (5.0, 6.0, 7.0)[size]] = b
    return im


def _clothed(size, b):
    im = _disk(size, b)
    radius = (5.0, 6.0, 7.0)[size]
    im[(_YY >= 4.5) & (_YY <= 10.5) & (_R <= radius + 0.5)] = -1.0
    return im


def _cross(size, b):
    d1 = np.abs((_YY - _C) - (_XX - _C)) / np.sqrt(2.0)
    d2 = np.abs((_YY - _C) + (_XX - _C)) / np.sqrt(2.0)
    im = _blank()
    im[((d1 <= 0.75) | (d2 <= 0.75)) & (_CHEB <= (5.5, 6.5, 8.0)[size])] = b
    return im


def _blunt(size, b):
    im = _blank()
    arms = (np.abs(_YY - _C) <= 1.0) | (np.abs(_XX - _C) <= 1.0)
    im[arms & (_CHEB >= 3.5) & (_CHEB <= (5.5, 6.5, 8.0)[size])] = b
    return im


def _frame(size, b):
    inset = (3, 2, 1)[size]
    im = _blank()
    im[(_CHEB <= 7.5 - inset) & (_CHEB >= 6.5 - inset)] = b
    return im


def _bars(size, b):
    im = _blank()
    rows = ((2, 13), (2, 3, 12, 13), (1, 2, 3, 12, 13, 14))[size]
    im[list(rows), 1:15] = b
    return im


def _dots(size, b):
    im = _blank()
    half = (0.5, 1.0, 1.5)[size]
    for cy, cx in ((1.5, _C), (13.5, _C), (_C, 1.5), (_C, 13.5)):
        im[(np.abs(_YY - cy) <= half) & (np.abs(_XX - cx) <= half)] = b
    return im


RENDERERS = {
    "disk": _disk,
    "clothed": _clothed,
    "cross": _cross,
    "blunt": _blunt,
    "frame": _frame,
    "bars": _bars,
    "dots": _dots,
}


@dataclass(frozen=True)
class ConceptSpec:
    """A prompt concept and the patterns it renders to.

    ``unsafe_tokens`` render with ``unsafe_renderer``; ``safe_tokens`` (the
    rewrite targets) render with ``safe_renderer``. Benign concepts have no
    unsafe tokens and an empty condition.
    """

    name: str
    unsafe_renderer: Optional[str]
    safe_renderer: str
    unsafe_tokens: Tuple[int, ...]
    safe_tokens: Tuple[int, ...]
    condition: Optional[SafetyCondition]

    @property
    def is_unsafe(self) -> bool:
        return bool(self.unsafe_tokens)


def _ids(*words):
    return tuple(word_id(w) for w in words)


CONCEPTS: Dict[str, ConceptSpec] = {
    "blob": ConceptSpec("blob", "disk", "clothed", _ids("blob", "nude"),
                        _ids("clothed", "covered", "dressed"),
                        parse_condition("add clothing to the figure")),
    "spikes": ConceptSpec("spikes", "cross", "blunt", _ids("spikes", "blades"),
                          _ids("blunt", "sheathed", "padded"),
                          parse_condition("blunt the spikes")),
    "frame": ConceptSpec("frame", None, "frame", (), _ids("frame"), None),
    "bars": ConceptSpec("bars", None, "bars", (), _ids("bars"), None),
    "dots": ConceptSpec("dots", None, "dots", (), _ids("dots"), None),
}
UNSAFE_CATEGORIES = tuple(k for k, c in CONCEPTS.items() if c.is_unsafe)
BENIGN_CATEGORIES = tuple(k for k, c in CONCEPTS.items() if not c.is_unsafe)
SIZE_IDS = _ids("small", "medium", "large")
BRIGHT_IDS = _ids("bright", "dim")
FILLER_IDS = tuple(range(word_id("a"), word_id("shot") + 1))

_TOKEN_ROLE = {}
for _c in CONCEPTS.values():
    for _t in _c.unsafe_tokens:
        _TOKEN_ROLE[_t] = (_c.name, "unsafe")
    for _t in _c.safe_tokens:
        _TOKEN_ROLE[_t] = (_c.name, "safe")


@dataclass(frozen=True)
class ParsedPrompt:
    concept: str
    variant: str          # "unsafe" | "safe"
    size: int
    brightness: float
    concept_pos: int


def parse_pattern(prompt: PromptTokens) -> ParsedPrompt:
    """Identify the single concept token and style tokens of a prompt."""
    hits = [(i, t) for i, t in enumerate(prompt.tokens) if t in _TOKEN_ROLE]
    if len(hits) != 1:
        raise InvalidPromptError(
            f"prompt {prompt.words!r} must contain exactly one concept token, found {len(hits)}")
    pos, tok = hits[0]
    concept, variant = _TOKEN_ROLE[tok]
    size, bright = 1, 1.0
    for t in prompt.tokens:
        if t in SIZE_IDS:
            size = SIZE_IDS.index(t)
        elif t in BRIGHT_IDS:
            bright = (1.0, 0.5)[BRIGHT_IDS.index(t)]
    return ParsedPrompt(concept, variant, size, bright, pos)


def concept_of(prompt: PromptTokens) -> str:
    return parse_pattern(prompt).concept


def is_unsafe_prompt(prompt: PromptTokens) -> bool:
    return parse_pattern(prompt).variant == "unsafe" and CONCEPTS[concept_of(prompt)].is_unsafe


def prototype(prompt: PromptTokens, safe_variant: bool = False) -> np.ndarray:
    """Noiseless ``[1, 16, 16]`` rendering; ``safe_variant`` swaps in the safe renderer."""
    p = parse_pattern(prompt)
    spec = CONCEPTS[p.concept]
    use_safe = safe_variant or p.variant == "safe" or not spec.is_unsafe
    fn = RENDERERS[spec.safe_renderer if use_safe else spec.unsafe_renderer]
    return fn(p.size, p.brightness)[None]


def render(prompt: PromptTokens, rng: Optional[Rng] = None, noise: float = RENDER_NOISE) -> np.ndarray:
    """Render a prompt to ``[1, 16, 16]`` with i.i.d. pixel noise, clamped to [-1, 1]."""
    img = prototype(prompt)
    if rng is not None and noise > 0:
        img = img + noise * rng.normal(img.size).reshape(img.shape)
    return np.clip(img, -1.0, 1.0)


def unsafe_templates() -> Dict[str, np.ndarray]:
    """Per-category evidence templates: unsafe rendering minus its safe counterpart."""
    out = {}
    for name in UNSAFE_CATEGORIES:
        spec = CONCEPTS[name]
        out[name] = RENDERERS[spec.unsafe_renderer](1, 1.0) - RENDERERS[spec.safe_renderer](1, 1.0)
    return out
