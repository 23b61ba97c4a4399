"""Patch training against a frozen base model."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .data.datasets import DatasetPair
from .diffusion import DenoiserParams, NoiseSchedule, diffusion_batch, encode_prompts, predict_noise
from .exceptions import InvalidConfigError, NonFiniteError
from .numeric import Adam, Rng, Tensor, backward, mse
from .patch import PatchParams, encode_conditions, patch_forward

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Patch-training hyperparameters.

    ``eval_every`` > 0 calls the evaluator every that many steps; with
    ``stop_at_target`` training ends at the first evaluation whose unsafe
    rate is at most ``target_rate``.
    """

    max_steps: int = 10_000
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    benign_mix_ratio: float = 0.3
    seed: int = 0
    log_every: int = 50
    eval_every: int = 0
    target_rate: float = 0.40
    stop_at_target: bool = False

    def validate(self) -> "TrainConfig":
        if self.max_steps < 1 or self.batch_size < 1:
            raise InvalidConfigError("max_steps and batch_size must be >= 1")
        if not 0.0 <= self.benign_mix_ratio <= 1.0:
            raise InvalidConfigError("benign_mix_ratio must lie in [0, 1]")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise InvalidConfigError("lr must be finite and >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise InvalidConfigError("Adam betas must lie in [0, 1) and eps > 0")
        if self.log_every < 1 or self.eval_every < 0:
            raise InvalidConfigError("log_every must be >= 1 and eval_every >= 0")
        return self

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


def sample_batch(pairs: Sequence[DatasetPair], benign: Sequence[DatasetPair], config: TrainConfig,
                 step: int) -> List[DatasetPair]:
    """Records for one step; a pure function of ``(config.seed, step)`` and the data.

    Each slot independently comes from ``benign`` with probability
    ``benign_mix_ratio`` and from ``pairs`` otherwise. With no benign
    records every slot is a pair.
    """
    if not pairs and not (benign and config.benign_mix_ratio == 1.0):
        raise InvalidConfigError("pair dataset is empty")
    rng = Rng(config.seed).fold(0xBA7C, step)
    ratio = config.benign_mix_ratio if benign else 0.0
    is_benign = rng.fold(0).uniform(config.batch_size) < ratio
    pick_pair = rng.fold(1).integers(0, max(len(pairs), 1), config.batch_size)
    pick_benign = rng.fold(2).integers(0, max(len(benign), 1), config.batch_size)
    return [benign[j] if b else pairs[i] for b, i, j in zip(is_benign, pick_pair, pick_benign)]


@dataclass
class PatchTrainLog:
    losses: List[Tuple[int, float]] = field(default_factory=list)
    evals: List[Tuple[int, float]] = field(default_factory=list)
    steps_run: int = 0
    steps_to_target: Optional[int] = None

    def lines(self) -> List[str]:
        out = [f"step={s} loss={l:.6f}" for s, l in self.losses]
        out += [f"step={s} unsafe_rate={r:.4f}" for s, r in self.evals]
        return out


def patch_loss(base: DenoiserParams, patch: PatchParams, schedule: NoiseSchedule,
               batch: Sequence[DatasetPair], rng: Rng) -> Tensor:
    """Noise-prediction MSE of the patched model on ``batch``."""
    images = np.stack([r.image for r in batch])
    zt, t, eps = diffusion_batch(images, schedule, rng, base.dtype)
    zt = Tensor(zt)
    text = encode_prompts(base, [r.prompt for r in batch])
    cond = encode_conditions(patch, [r.condition for r in batch])
    inj = patch_forward(patch, base, zt, t, text, cond)
    return mse(Tensor(eps), predict_noise(base, zt, t, text, inj))


def train_patch(base: DenoiserParams, patch: PatchParams, pairs: Sequence[DatasetPair],
                benign: Sequence[DatasetPair], schedule: NoiseSchedule, config: Optional[TrainConfig] = None,
                evaluator: Optional[Callable[[PatchParams], float]] = None,
                metrics: Optional[TextIO] = None) -> Tuple[PatchParams, PatchTrainLog]:
    """Adam on the patch tensors only; ``base`` is read but never written.

    ``metrics`` receives one ``key=value`` line per logged step or
    evaluation.
    """
    config = (config or TrainConfig()).validate()
    if not pairs and not benign:
        raise InvalidConfigError("dataset is empty")
    if patch.dtype != base.dtype:
        raise InvalidConfigError(f"patch precision {patch.dtype} differs from base {base.dtype}")
    saved = [t.requires_grad for t in base]
    base.set_trainable(False)
    patch.set_trainable(True)
    params = list(patch)
    opt = Adam(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
    log = PatchTrainLog()

    def emit(line: str):
        if metrics is not None:
            metrics.write(line + "\n")
            metrics.flush()

    try:
        for step in range(1, config.max_steps + 1):
            batch = sample_batch(pairs, benign, config, step)
            loss = patch_loss(base, patch, schedule, batch, Rng(config.seed).fold(0xD1FF, step))
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at step {step}")
            backward(loss, params)
            opt.step()
            log.steps_run = step
            if step % config.log_every == 0 or step == config.max_steps:
                log.losses.append((step, value))
                emit(f"step={step} loss={value:.6f}")
                logger.info("patch step=%d loss=%.5f", step, value)
            if evaluator is not None and config.eval_every and step % config.eval_every == 0:
                rate = float(evaluator(patch))
                log.evals.append((step, rate))
                emit(f"step={step} unsafe_rate={rate:.4f}")
                if log.steps_to_target is None and rate <= config.target_rate:
                    log.steps_to_target = step
                    if config.stop_at_target:
                        break
    finally:
        for t, flag in zip(base, saved):
            t.requires_grad = flag
    patch.meta["steps"] = str(log.steps_run)
    patch.meta["pairs"] = str(len(pairs))
    return patch, log
