"""scikit-learn style wrappers around the functional core.

>>> model = ToyTextToImage(max_steps=4000).fit(corpus)        # doctest: +SKIP
>>> sc = SafeControl(category="blob").fit(pairs, benign, model=model)  # doctest: +SKIP
>>> patched = model.attach(sc.patch_)                        # doctest: +SKIP
>>> images = patched.generate(prompts, seeds)                # doctest: +SKIP
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data.datasets import DatasetPair
from .data.rewriter import RewriterClient, RuleRewriter
from .diffusion import (
    BaseTrainConfig,
    DenoiserParams,
    NoiseSchedule,
    generate,
    make_schedule,
    train_base,
)
from .exceptions import InvalidConfigError
from .numeric import Rng
from .patch import PatchParams, check_compatible, init_patch, merge_patches
from .training import PatchTrainLog, TrainConfig, train_patch
from .validation import check_condition, check_prompts, check_seeds, check_weights

_DTYPES = {"float64": np.float64, "float32": np.float32}
CHUNK = 64


def worker_count() -> int:
    """Thread cap from ``SAFEPATCH_THREADS`` (default 1)."""
    raw = os.environ.get("SAFEPATCH_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise InvalidConfigError(f"SAFEPATCH_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise InvalidConfigError("SAFEPATCH_THREADS must be >= 1")
    return n


def generate_parallel(base, schedule, prompts, seeds, patch=None, conditions=None) -> np.ndarray:
    """Sample in fixed-size chunks, fanned out over ``worker_count()`` threads.

    Chunk boundaries do not depend on the thread count, so results are
    identical for any number of workers.
    """
    starts = list(range(0, len(prompts), CHUNK))

    def run(lo):
        conds = None if conditions is None else list(conditions[lo:lo + CHUNK])
        return generate(base, schedule, list(prompts[lo:lo + CHUNK]), list(seeds[lo:lo + CHUNK]), patch, conds,
                        chunk=CHUNK)

    workers = min(worker_count(), max(len(starts), 1))
    if workers == 1:
        parts = [run(lo) for lo in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    return np.concatenate(parts) if parts else np.zeros((0, 1, 16, 16))


class ToyTextToImage(BaseEstimator):
    """The locked toy text-to-image model.

    Parameters
    ----------
    T, beta_start, beta_end : noise schedule.
    max_steps, batch_size, lr : base training.
    seed : initialisation and training seed.
    dtype : ``"float64"`` or ``"float32"``.
    """

    def __init__(self, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02, max_steps: int = 4000,
                 batch_size: int = 32, lr: float = 2e-3, seed: int = 0, dtype: str = "float64"):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.dtype = dtype

    def _init(self):
        if self.dtype not in _DTYPES:
            raise InvalidConfigError(f"dtype must be one of {sorted(_DTYPES)}")
        self.schedule_ = make_schedule(self.T, self.beta_start, self.beta_end)
        self.base_ = DenoiserParams.init(self.seed, _DTYPES[self.dtype])

    def fit(self, corpus: Sequence[DatasetPair], y=None):
        self._init()
        cfg = BaseTrainConfig(steps=self.max_steps, batch_size=self.batch_size, lr=self.lr)
        self.base_, self.log_ = train_base(self.base_, list(corpus), self.schedule_, cfg, Rng(self.seed).fold(1))
        self.base_.set_trainable(False)
        return self

    @classmethod
    def from_base(cls, base: DenoiserParams, schedule: Optional[NoiseSchedule] = None) -> "ToyTextToImage":
        schedule = schedule or make_schedule()
        dtype = "float32" if base.dtype == np.float32 else "float64"
        model = cls(T=schedule.T, beta_start=float(schedule.betas[0]), beta_end=float(schedule.betas[-1]),
                    dtype=dtype)
        model.schedule_ = schedule
        model.base_ = base
        return model

    def generate(self, prompts, seeds=None) -> np.ndarray:
        """One ``[1, 16, 16]`` image per prompt; seed ``i`` drives sample ``i``."""
        check_is_fitted(self, "base_")
        prompts = check_prompts(prompts)
        return generate_parallel(self.base_, self.schedule_, prompts, check_seeds(seeds, len(prompts)))

    def predict(self, prompts, seeds=None) -> np.ndarray:
        return self.generate(prompts, seeds)

    def attach(self, patch, client: Optional[RewriterClient] = None) -> "PatchedModel":
        """A sampler routing every step through ``patch``; the model itself is untouched."""
        check_is_fitted(self, "base_")
        if isinstance(patch, SafeControl):
            patch = patch.patch_
        check_compatible(patch, self.base_)
        return PatchedModel(self, patch, client)


class PatchedModel:
    """Base model plus one attached patch.

    The safety condition for each prompt comes from ``client.condition``
    (the rule rewriter by default) unless ``conditions`` are passed.
    """

    def __init__(self, model: ToyTextToImage, patch: PatchParams, client: Optional[RewriterClient] = None):
        self.model = model
        self.patch = patch
        self.client = client or RuleRewriter()

    def generate(self, prompts, seeds=None, conditions=None) -> np.ndarray:
        prompts = check_prompts(prompts)
        seeds = check_seeds(seeds, len(prompts))
        if conditions is None:
            conditions = [self.client.condition(p) for p in prompts]
        else:
            conditions = [check_condition(c) for c in conditions]
            if len(conditions) != len(prompts):
                raise InvalidConfigError("one condition per prompt is required")
        return generate_parallel(self.model.base_, self.model.schedule_, prompts, seeds, self.patch, conditions)

    predict = generate

    def detach(self) -> ToyTextToImage:
        return self.model


class SafeControl(BaseEstimator):
    """A safety patch trained for one category against a fitted :class:`ToyTextToImage`."""

    def __init__(self, category: str = "blob", max_steps: int = 10_000, batch_size: int = 32, lr: float = 1e-3,
                 benign_mix_ratio: float = 0.3, seed: int = 0, eval_every: int = 0, target_rate: float = 0.40,
                 stop_at_target: bool = False):
        self.category = category
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr = lr
        self.benign_mix_ratio = benign_mix_ratio
        self.seed = seed
        self.eval_every = eval_every
        self.target_rate = target_rate
        self.stop_at_target = stop_at_target

    def train_config(self) -> TrainConfig:
        return TrainConfig(max_steps=self.max_steps, batch_size=self.batch_size, lr=self.lr,
                           benign_mix_ratio=self.benign_mix_ratio, seed=self.seed, eval_every=self.eval_every,
                           target_rate=self.target_rate, stop_at_target=self.stop_at_target)

    def fit(self, pairs: Sequence[DatasetPair], benign: Sequence[DatasetPair] = (), *, model: ToyTextToImage,
            evaluator=None, metrics=None):
        """Train on ``pairs`` mixed with ``benign``; ``evaluator(patch) -> unsafe rate`` runs every ``eval_every``."""
        check_is_fitted(model, "base_")
        patch = init_patch(model.base_, self.seed, self.category)
        self.patch_, self.log_ = train_patch(model.base_, patch, list(pairs), list(benign), model.schedule_,
                                             self.train_config(), evaluator=evaluator, metrics=metrics)
        self.patch_.set_trainable(False)
        return self

    @property
    def name(self) -> str:
        return f"Safe-Control_{self.category}"

    @classmethod
    def from_patch(cls, patch: PatchParams) -> "SafeControl":
        sc = cls(category=patch.meta.get("category", ""))
        sc.patch_ = patch
        sc.log_ = PatchTrainLog()
        return sc


def merge(controls: Sequence, weights: Optional[Sequence[float]] = None) -> SafeControl:
    """Merge fitted :class:`SafeControl` objects (or raw patches) by weighted averaging."""
    patches = []
    for c in controls:
        if isinstance(c, SafeControl):
            check_is_fitted(c, "patch_")
            patches.append(c.patch_)
        else:
            patches.append(c)
    weights = check_weights(weights if weights is not None else [1.0] * len(patches), len(patches))
    merged = merge_patches(list(zip(patches, weights)))
    sc = SafeControl.from_patch(merged)
    sc.category = merged.meta.get("category", "multiple")
    return sc
