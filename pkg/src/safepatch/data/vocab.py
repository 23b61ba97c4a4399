"""Prompt and safety-condition vocabularies.

Both vocabularies have 32 ids with 0 reserved for padding. Prompts name one
concept token plus optional style and filler tokens; safety conditions are
short instruction sequences, with ``NO_OP`` as the reserved singleton.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

from ..exceptions import InvalidTokenError

VOCAB_SIZE = 32
COND_VOCAB_SIZE = 32
MAX_LEN = 8
PAD = 0

PROMPT_WORDS = [
    "<pad>",
    "blob", "nude",                       # unsafe: blob
    "clothed", "covered", "dressed",      # safe counterparts of blob
    "spikes", "blades",                   # unsafe: spikes
    "blunt", "sheathed", "padded",        # safe counterparts of spikes
    "frame", "bars", "dots",              # benign
    "small", "medium", "large",           # size
    "bright", "dim",                      # brightness
    "a", "photo", "of", "the", "art", "painting", "scene", "figure",
    "image", "style", "detailed", "render", "shot",  # fillers
]
assert len(PROMPT_WORDS) == VOCAB_SIZE

COND_WORDS = [
    "<pad>", "<no-op>",
    "add", "clothing", "to", "the", "figure", "cover", "body",
    "blunt", "remove", "spikes", "sheathe", "blades",
] + [f"<c{i}>" for i in range(14, COND_VOCAB_SIZE)]
assert len(COND_WORDS) == COND_VOCAB_SIZE

NO_OP_ID = 1

_WORD_TO_ID = {w: i for i, w in enumerate(PROMPT_WORDS)}
_COND_TO_ID = {w: i for i, w in enumerate(COND_WORDS)}


def _validate(tokens: Sequence[int], vocab: int, what: str) -> Tuple[int, ...]:
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise InvalidTokenError(f"{what} must be non-empty")
    if len(tokens) > MAX_LEN:
        raise InvalidTokenError(f"{what} longer than {MAX_LEN} tokens")
    for t in tokens:
        if not 0 < t < vocab:
            raise InvalidTokenError(f"{what} id {t} outside [1, {vocab})")
    return tokens


@dataclass(frozen=True)
class PromptTokens:
    tokens: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", _validate(self.tokens, VOCAB_SIZE, "prompt"))

    def __len__(self):
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    @property
    def words(self) -> str:
        return " ".join(PROMPT_WORDS[t] for t in self.tokens)

    def __str__(self):
        return " ".join(str(t) for t in self.tokens)


@dataclass(frozen=True)
class SafetyCondition:
    tokens: Tuple[int, ...]

    def __post_init__(self):
        toks = _validate(self.tokens, COND_VOCAB_SIZE, "condition")
        if NO_OP_ID in toks and toks != (NO_OP_ID,):
            raise InvalidTokenError("the no-op token may only appear as the singleton condition")
        object.__setattr__(self, "tokens", toks)

    @property
    def is_noop(self) -> bool:
        return self.tokens == (NO_OP_ID,)

    @property
    def words(self) -> str:
        return " ".join(COND_WORDS[t] for t in self.tokens)

    def __str__(self):
        return " ".join(str(t) for t in self.tokens)


NO_OP = SafetyCondition((NO_OP_ID,))


def _parse(text: str, table: dict, what: str) -> Tuple[int, ...]:
    ids = []
    for item in text.split():
        if item.lstrip("-").isdigit():
            ids.append(int(item))
        elif item in table:
            ids.append(table[item])
        else:
            raise InvalidTokenError(f"unknown {what} word {item!r}")
    return tuple(ids)


def parse_prompt(text: str) -> PromptTokens:
    """Parse space-separated ids or vocabulary words."""
    return PromptTokens(_parse(text, _WORD_TO_ID, "prompt"))


def parse_condition(text: str) -> SafetyCondition:
    return SafetyCondition(_parse(text, _COND_TO_ID, "condition"))


def word_id(word: str) -> int:
    return _WORD_TO_ID[word]


def pad_batch(seqs: Iterable[Sequence[int]], length: int = MAX_LEN):
    """Right-pad id sequences with ``PAD``; returns ``(ids, mask)`` arrays."""
    import numpy as np

    seqs = [tuple(s) for s in seqs]
    ids = np.zeros((len(seqs), length), dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask
