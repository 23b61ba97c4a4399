"""Training records, dataset builders and the dataset file format.

Dataset files hold one record per line, four tab-separated fields::

    <prompt ids, space separated>\t<condition ids>\t<is_benign 0|1>\t<image hex>

The image field is the base-16 encoding of the little-endian float32
row-major ``1x16x16`` block (2048 hex characters). Manifests are plain text,
one ``key=value`` line per record plus a trailing summary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..exceptions import CorruptFileError, InvalidConfigError, InvalidImageError, NoSafeCandidateError
from ..numeric.rng import Rng
from .concepts import (
    BENIGN_CATEGORIES,
    BRIGHT_IDS,
    CONCEPTS,
    FILLER_IDS,
    IMAGE_SHAPE,
    SIZE_IDS,
    UNSAFE_CATEGORIES,
    concept_of,
    render,
)
from .rewriter import RewriterClient, RuleRewriter, rewrite_unsafe_prompt
from .vocab import MAX_LEN, NO_OP, PromptTokens, SafetyCondition

logger = logging.getLogger(__name__)

ImageGenerator = Callable[[Sequence[PromptTokens], Sequence[int]], np.ndarray]


@dataclass(frozen=True)
class DatasetPair:
    """One training record: prompt, target image, safety condition, benign flag."""

    prompt: PromptTokens
    image: np.ndarray
    condition: SafetyCondition
    is_benign: bool

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.shape != IMAGE_SHAPE:
            raise InvalidImageError(f"record image must be {IMAGE_SHAPE}, got {img.shape}")
        if img.min() < -1.0 or img.max() > 1.0:
            raise InvalidImageError("record image outside [-1, 1]")
        if self.is_benign != self.condition.is_noop:
            raise InvalidConfigError("benign records must carry the no-op condition and only they may")
        object.__setattr__(self, "image", img)

    @property
    def category(self) -> str:
        return concept_of(self.prompt)


# -- prompt sampling --------------------------------------------------------

def random_prompt(category: str, rng: Rng, variant: str = "unsafe") -> PromptTokens:
    """Draw a prompt for ``category``: concept token, optional style tokens, 0-4 fillers."""
    spec = CONCEPTS[category]
    pool = spec.unsafe_tokens if (variant == "unsafe" and spec.is_unsafe) else spec.safe_tokens
    u = rng.uniform(4)
    n_fill = int(rng.integers(0, 5, 1)[0])
    toks = [pool[int(u[0] * len(pool))]]
    if u[1] < 0.85:
        toks.append(SIZE_IDS[int(rng.integers(0, 3, 1)[0])])
    if u[2] < 0.7:
        toks.append(BRIGHT_IDS[int(u[3] < 0.3)])
    fillers = [FILLER_IDS[i] for i in rng.integers(0, len(FILLER_IDS), n_fill)]
    cut = int(rng.integers(0, n_fill + 1, 1)[0])
    toks = fillers[:cut] + toks + fillers[cut:]
    return PromptTokens(tuple(toks[:MAX_LEN]))


def sample_prompts(category: str, n: int, rng: Rng, variant: str = "unsafe",
                   exclude: Iterable[PromptTokens] = (), unique: bool = True) -> List[PromptTokens]:
    exclude = set(exclude)
    out: List[PromptTokens] = []
    seen = set()
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 100 * n + 1000:
            raise InvalidConfigError(f"could not draw {n} distinct {category} prompts")
        p = random_prompt(category, rng, variant)
        if p in exclude or (unique and p in seen):
            continue
        seen.add(p)
        out.append(p)
    return out


def sample_benign_prompts(n: int, rng: Rng, exclude: Iterable[PromptTokens] = ()) -> List[PromptTokens]:
    """``n`` distinct prompts cycling through the benign concepts."""
    per = -(-n // len(BENIGN_CATEGORIES))
    groups = [sample_prompts(c, per, rng.fold(i), exclude=exclude) for i, c in enumerate(BENIGN_CATEGORIES)]
    return [p for g in zip(*groups) for p in g][:n]


PANEL_SEED = 20_240_601


def make_panel(category: str, n_prompts: int = 50, seed: int = PANEL_SEED) -> List[PromptTokens]:
    """Fixed evaluation prompts for a category (unsafe variant for unsafe concepts).

    ``category="benign"`` mixes the benign concepts round-robin.
    """
    cats = BENIGN_CATEGORIES if category == "benign" else (category,)
    if any(c not in CONCEPTS for c in cats):
        raise InvalidConfigError(f"unknown panel category {category!r}")
    rng = Rng(seed).fold(sum(ord(ch) for ch in category))
    per = [sample_prompts(c, -(-n_prompts // len(cats)), rng) for c in cats]
    mixed = [p for group in zip(*per) for p in group]
    return mixed[:n_prompts]


def panel_exclusions(n_prompts: int = 50) -> set:
    out = set()
    for cat in UNSAFE_CATEGORIES + ("benign",):
        out.update(make_panel(cat, n_prompts))
    return out


# -- image selection ---------------------------------------------------------

def select_safe_image(images: np.ndarray, safe_prompt: PromptTokens,
                      classifier: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                      scorer: Optional[Callable[[np.ndarray, PromptTokens], float]] = None,
                      threshold: Optional[float] = None) -> Tuple[int, np.ndarray]:
    """Pick the best safe candidate image.

    Drops every image whose unsafe score exceeds ``threshold`` (the raised
    filtering threshold by default), then returns ``(index, image)`` of the
    survivor with the highest alignment to ``safe_prompt``.
    """
    from ..evaluation import RAISED_THRESHOLD, alignment_score, unsafe_score

    classifier = classifier or unsafe_score
    scorer = scorer or alignment_score
    threshold = RAISED_THRESHOLD if threshold is None else threshold
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if len(images) == 0:
        raise InvalidConfigError("select_safe_image needs at least one candidate")
    scores = np.asarray(classifier(images))
    ok = np.flatnonzero(scores <= threshold)
    if ok.size == 0:
        raise NoSafeCandidateError("every candidate image exceeded the unsafe threshold")
    align = [scorer(images[i], safe_prompt) for i in ok]
    best = int(ok[int(np.argmax(align))])
    return best, images[best]


# -- builders ---------------------------------------------------------------

@dataclass
class Manifest:
    entries: List[Dict[str, object]]
    counts: Dict[str, int]
    warnings: List[str]

    def to_text(self) -> str:
        lines = []
        for e in self.entries:
            lines.append(" ".join(f"{k}={_fmt(v)}" for k, v in e.items()))
        for k, v in self.counts.items():
            lines.append(f"count.{k}={v}")
        for w in self.warnings:
            lines.append(f"warning={w}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    if isinstance(v, PromptTokens) or isinstance(v, SafetyCondition):
        return ",".join(str(t) for t in v.tokens)
    return str(v)


def balance_warnings(counts: Dict[str, int]) -> List[str]:
    """Flag categories holding more than twice the mean per-category count."""
    if len(counts) < 2:
        return []
    mean = sum(counts.values()) / len(counts)
    return [f"category {k} has {v} records (> 2x mean {mean:.1f})" for k, v in counts.items() if v > 2 * mean]


def build_pair_dataset(unsafe_prompts: Sequence[PromptTokens], client: Optional[RewriterClient] = None,
                       size: int = 100, rng: Optional[Rng] = None, k: int = 4, images_per_prompt: int = 4,
                       generator: Optional[ImageGenerator] = None, max_retries: int = 3
                       ) -> Tuple[List[DatasetPair], Manifest]:
    """Build ``size`` (unsafe prompt, safe image, condition) records.

    Prompts are used round-robin. For each one the client proposes ``k``
    safe prompts, ``images_per_prompt`` candidates are produced for each
    (renderer by default, ``generator(prompts, seeds)`` when given), and
    :func:`select_safe_image` picks the target. Failed selections retry with
    fresh draws up to ``max_retries`` times.
    """
    if size < 1:
        raise InvalidConfigError("dataset size must be >= 1")
    if not unsafe_prompts:
        raise InvalidConfigError("no unsafe prompts given")
    client = client or RuleRewriter()
    rng = rng or Rng(0)
    records, entries = [], []
    counts: Dict[str, int] = {}
    for i in range(size):
        prompt = unsafe_prompts[i % len(unsafe_prompts)]
        candidates, cond = rewrite_unsafe_prompt(client, prompt, k)
        for attempt in range(max_retries + 1):
            stream = rng.fold(i, attempt)
            cand_prompts = [c for c in candidates for _ in range(images_per_prompt)]
            if generator is None:
                images = np.stack([render(c, stream) for c in cand_prompts])
            else:
                seeds = [int(s) for s in stream.integers(0, 2**31 - 1, len(cand_prompts))]
                images = np.clip(np.asarray(generator(cand_prompts, seeds)), -1.0, 1.0)
            try:
                idx, img = select_safe_image(images, cand_prompts[0])
            except NoSafeCandidateError:
                if attempt == max_retries:
                    raise NoSafeCandidateError(
                        f"no safe candidate for prompt {prompt.words!r} after {max_retries + 1} attempts")
                continue
            break
        rec = DatasetPair(prompt, img, cond, is_benign=cond.is_noop)
        records.append(rec)
        cat = rec.category
        counts[cat] = counts.get(cat, 0) + 1
        entries.append({"index": i, "category": cat, "prompt": prompt, "safe_prompt": cand_prompts[idx],
                        "candidate": idx, "attempts": attempt + 1,
                        "source": "renderer" if generator is None else "model", "condition": cond})
    warnings = balance_warnings(counts)
    for w in warnings:
        logger.warning(w)
    return records, Manifest(entries, counts, warnings)


def build_benign_dataset(benign_prompts: Sequence[PromptTokens], size: int = 100,
                         rng: Optional[Rng] = None) -> List[DatasetPair]:
    """Benign records rendered from benign prompts, all with the no-op condition."""
    if size < 1:
        raise InvalidConfigError("dataset size must be >= 1")
    if not benign_prompts:
        raise InvalidConfigError("no benign prompts given")
    rng = rng or Rng(0)
    out = []
    for i in range(size):
        p = benign_prompts[i % len(benign_prompts)]
        out.append(DatasetPair(p, render(p, rng.fold(i)), NO_OP, True))
    return out


def build_base_corpus(size: int, rng: Optional[Rng] = None,
                      exclude: Iterable[PromptTokens] = ()) -> List[DatasetPair]:
    """Mixed corpus used to train the base model.

    Rotates through unsafe and safe variants of the unsafe concepts and
    through the benign concepts, so unsafe prompts render unsafe images.
    """
    if size < 1:
        raise InvalidConfigError("corpus size must be >= 1")
    rng = rng or Rng(0)
    client = RuleRewriter()
    groups = [(c, "unsafe") for c in UNSAFE_CATEGORIES] + [(c, "safe") for c in UNSAFE_CATEGORIES] \
        + [(c, "safe") for c in BENIGN_CATEGORIES]
    exclude = set(exclude)
    out = []
    for i in range(size):
        cat, variant = groups[i % len(groups)]
        stream = rng.fold(i)
        while True:
            p = random_prompt(cat, stream, variant)
            if p not in exclude:
                break
        cond = client.condition(p)
        out.append(DatasetPair(p, render(p, stream), cond, cond.is_noop))
    return out


# -- file format ------------------------------------------------------------

def encode_image(img: np.ndarray) -> str:
    return np.asarray(img, dtype="<f4").reshape(IMAGE_SHAPE).tobytes(order="C").hex()


def decode_image(text: str) -> np.ndarray:
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise CorruptFileError(f"image block is not hex: {exc}") from exc
    if len(raw) != 4 * 256:
        raise CorruptFileError(f"image block has {len(raw)} bytes, expected 1024")
    return np.frombuffer(raw, dtype="<f4").reshape(IMAGE_SHAPE).astype(np.float64)


def format_record(rec: DatasetPair) -> str:
    return "\t".join([str(rec.prompt), str(rec.condition), "1" if rec.is_benign else "0",
                      encode_image(rec.image)])


def parse_record(line: str) -> DatasetPair:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 4:
        raise CorruptFileError(f"expected 4 tab-separated fields, got {len(parts)}")
    try:
        prompt = PromptTokens(tuple(int(t) for t in parts[0].split()))
        cond = SafetyCondition(tuple(int(t) for t in parts[1].split()))
        flag = {"0": False, "1": True}[parts[2]]
    except (ValueError, KeyError) as exc:
        raise CorruptFileError(f"bad record: {exc}") from exc
    return DatasetPair(prompt, decode_image(parts[3]), cond, flag)


def write_dataset(path, records: Sequence[DatasetPair]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for rec in records:
            fh.write(format_record(rec) + "\n")


def read_dataset(path) -> List[DatasetPair]:
    path = Path(path)
    if not path.exists():
        raise InvalidConfigError(f"dataset file not found: {path}")
    with open(path, encoding="ascii") as fh:
        return [parse_record(line) for line in fh if line.strip()]
