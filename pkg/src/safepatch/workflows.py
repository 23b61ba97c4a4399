"""End-to-end steps shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
import os
import statistics
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .config import RunConfig
from .data.concepts import UNSAFE_CATEGORIES
from .data.datasets import (
    DatasetPair,
    Manifest,
    build_base_corpus,
    build_benign_dataset,
    build_pair_dataset,
    make_panel,
    panel_exclusions,
    read_dataset,
    sample_benign_prompts,
    sample_prompts,
)
from .diffusion import BaseTrainConfig, DenoiserParams, NoiseSchedule, make_schedule, train_base
from .estimators import PatchedModel, ToyTextToImage
from .evaluation import EvalReport, evaluate, unsafe_probability
from .exceptions import InvalidConfigError
from .numeric import Rng
from .patch import PatchParams, init_patch
from .training import PatchTrainLog, TrainConfig, train_patch

logger = logging.getLogger(__name__)


def dtype_of(cfg: RunConfig):
    return np.float32 if cfg.precision == 32 else np.float64


def schedule_of(cfg: RunConfig) -> NoiseSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def schedule_meta(schedule: NoiseSchedule) -> Dict[str, str]:
    return {"T": str(schedule.T), "beta_start": repr(float(schedule.betas[0])),
            "beta_end": repr(float(schedule.betas[-1]))}


def schedule_from_meta(meta: Dict[str, str]) -> NoiseSchedule:
    try:
        return make_schedule(int(meta["T"]), float(meta["beta_start"]), float(meta["beta_end"]))
    except KeyError:
        return make_schedule()


def exclusions(cfg: RunConfig) -> set:
    return panel_exclusions(cfg.panel_prompts)


def base_corpus(cfg: RunConfig) -> List[DatasetPair]:
    if cfg.corpus:
        if not os.path.isfile(cfg.corpus):
            raise FileNotFoundError(f"corpus file {cfg.corpus!r} not found")
        return read_dataset(cfg.corpus)
    return build_base_corpus(cfg.corpus_size, Rng(cfg.seed).fold(0xC0), exclude=exclusions(cfg))


def fit_base(cfg: RunConfig, corpus: Optional[Sequence[DatasetPair]] = None):
    """Train the base model; returns ``(base, schedule, log)``."""
    corpus = list(corpus) if corpus is not None else base_corpus(cfg)
    schedule = schedule_of(cfg)
    base = DenoiserParams.init(cfg.seed, dtype_of(cfg))
    tc = BaseTrainConfig(steps=cfg.base_steps, batch_size=cfg.base_batch_size, lr=cfg.base_lr,
                         log_every=cfg.log_every)
    base, log = train_base(base, corpus, schedule, tc, Rng(cfg.seed).fold(0xB0))
    base.set_trainable(False)
    return base, schedule, log


def build_data(cfg: RunConfig, category: Optional[str] = None, size: Optional[int] = None,
               seed: Optional[int] = None, generator: Optional[Callable] = None,
               ) -> Tuple[List[DatasetPair], List[DatasetPair], Manifest]:
    """Pair and benign records for one category, disjoint from the evaluation panels."""
    category = category or cfg.category
    size = size or cfg.pair_size
    seed = cfg.seed if seed is None else seed
    rng = Rng(seed).fold(0xDA7A, sum(map(ord, category)))
    excl = exclusions(cfg)
    unsafe = sample_prompts(category, cfg.unsafe_prompts, rng.fold(1), exclude=excl)
    pairs, manifest = build_pair_dataset(unsafe, size=size, rng=rng.fold(2), k=cfg.rewrite_k,
                                         images_per_prompt=cfg.images_per_prompt, generator=generator)
    n_benign_prompts = min(cfg.benign_size, 60)
    benign = build_benign_dataset(sample_benign_prompts(n_benign_prompts, rng.fold(3), exclude=excl),
                                  cfg.benign_size, rng.fold(4))
    return pairs, benign, manifest


def model_of(base: DenoiserParams, schedule: NoiseSchedule) -> ToyTextToImage:
    return ToyTextToImage.from_base(base, schedule)


def panel(cfg: RunConfig, category: str):
    return make_panel(category, cfg.panel_prompts, cfg.panel_seed)


def panel_evaluator(cfg: RunConfig, base: DenoiserParams, schedule: NoiseSchedule, category: str):
    """``patch -> unsafe rate`` on the category's evaluation panel."""
    prompts = panel(cfg, category)
    model = model_of(base, schedule)

    def evaluator(patch: PatchParams) -> float:
        return unsafe_probability(PatchedModel(model, patch), prompts, cfg.seeds_per_prompt).overall

    return evaluator


def train_config(cfg: RunConfig, seed: Optional[int] = None, **overrides) -> TrainConfig:
    tc = TrainConfig(max_steps=cfg.max_steps, batch_size=cfg.batch_size, lr=cfg.lr, beta1=cfg.beta1,
                     beta2=cfg.beta2, eps=cfg.adam_eps, benign_mix_ratio=cfg.benign_mix_ratio,
                     seed=cfg.seed if seed is None else seed, log_every=cfg.log_every,
                     eval_every=cfg.eval_every, target_rate=cfg.target_rate, stop_at_target=cfg.stop_at_target)
    for k, v in overrides.items():
        setattr(tc, k, v)
    return tc.validate()


def fit_patch(cfg: RunConfig, base: DenoiserParams, schedule: NoiseSchedule, pairs, benign,
              category: Optional[str] = None, seed: Optional[int] = None, metrics: Optional[TextIO] = None,
              **overrides) -> Tuple[PatchParams, PatchTrainLog]:
    category = category or cfg.category
    tc = train_config(cfg, seed, **overrides)
    evaluator = panel_evaluator(cfg, base, schedule, category) if tc.eval_every else None
    patch = init_patch(base, tc.seed, category)
    patch, log = train_patch(base, patch, pairs, benign, schedule, tc, evaluator=evaluator, metrics=metrics)
    patch.set_trainable(False)
    return patch, log


def evaluate_models(cfg: RunConfig, base: DenoiserParams, schedule: NoiseSchedule,
                    patches: Sequence[Tuple[str, PatchParams]] = (),
                    categories: Sequence[str] = UNSAFE_CATEGORIES) -> List[EvalReport]:
    """Base report first, then one report per named patch, all on the same panels and seeds."""
    unsafe = [p for c in categories for p in panel(cfg, c)]
    benign = panel(cfg, "benign")
    model = model_of(base, schedule)
    reports = [evaluate(model, "base", unsafe, benign, cfg.seeds_per_prompt)]
    for name, patch in patches:
        reports.append(evaluate(PatchedModel(model, patch), name, unsafe, benign, cfg.seeds_per_prompt))
    return reports


@dataclass
class SweepResult:
    """Steps-to-target per (size, seed); ``None`` when the target was not reached."""

    budget: int
    runs: Dict[Tuple[int, int], Optional[int]] = field(default_factory=dict)

    def medians(self) -> Dict[int, float]:
        sizes = sorted({s for s, _ in self.runs})
        out = {}
        for size in sizes:
            vals = [self.runs[k] for k in sorted(self.runs) if k[0] == size]
            out[size] = statistics.median(self.budget + 1 if v is None else v for v in vals)
        return out

    def non_increasing(self) -> bool:
        med = [v for _, v in sorted(self.medians().items())]
        return all(b <= a for a, b in zip(med, med[1:]))

    def summary(self) -> str:
        lines = [f"budget={self.budget}"]
        for (size, seed), v in sorted(self.runs.items()):
            lines.append(f"size={size} seed={seed} steps_to_target={'none' if v is None else v}")
        for size, m in self.medians().items():
            lines.append(f"size={size} median_steps_to_target={m:g}")
        lines.append(f"trend={'non-increasing' if self.non_increasing() else 'violated'}")
        return "\n".join(lines) + "\n"


def run_sweep(cfg: RunConfig, base: DenoiserParams, schedule: NoiseSchedule, sizes: Sequence[int],
              seeds: Sequence[int], out_dir: Optional[str] = None, eval_every: Optional[int] = None,
              stop_at_target: Optional[bool] = None) -> SweepResult:
    """Train one patch per (dataset size, seed) under a shared budget and record steps-to-target."""
    eval_every = eval_every or cfg.eval_every or 100
    stop = cfg.stop_at_target if stop_at_target is None else stop_at_target
    result = SweepResult(cfg.max_steps)
    for size in sizes:
        for seed in seeds:
            pairs, benign, _ = build_data(cfg, size=size, seed=seed)
            metrics = None
            if out_dir:
                metrics = open(os.path.join(out_dir, f"run_size{size}_seed{seed}.metrics"), "w")
            try:
                _, log = fit_patch(cfg, base, schedule, pairs, benign, seed=seed, metrics=metrics,
                                   eval_every=eval_every, stop_at_target=stop)
            finally:
                if metrics:
                    metrics.close()
            result.runs[(size, seed)] = log.steps_to_target
            logger.info("sweep size=%d seed=%d steps_to_target=%s", size, seed, log.steps_to_target)
    return result
