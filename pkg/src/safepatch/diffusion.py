"""The locked toy text-to-image model.

A small UNet-style noise predictor over ``1x16x16`` images:

    E0  conv 1->16                    [16, 16, 16]
    E1  conv 16->16, stride 2         [16, 8, 8]   (skip-E1)
    E2  conv 16->32, stride 2         [32, 4, 4]   (skip-E2)
    MID conv 32->32 + cross-attention [32, 4, 4]   (mid)
    D2  conv(mid ++ skip-E2) -> 16, upsample        [16, 8, 8]
    D1  conv(d2 ++ skip-E1) -> 16, upsample         [16, 16, 16]
    H   conv(d1 ++ e0) -> 16                        [16, 16, 16]
    OUT conv 16->1                                  [1, 16, 16]

Every conv block adds a per-sample conditioning vector channel-wise and
applies SiLU. That vector is the time-MLP output plus a projection of the
mean prompt-token embedding. The prompt also enters through the mid-block
cross-attention. Patch injections are added to the
mid output and the two skip activations before the decoder reads them.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .data.datasets import DatasetPair
from .data.vocab import MAX_LEN, PAD, VOCAB_SIZE, PromptTokens, pad_batch
from .exceptions import (
    InvalidConfigError,
    InvalidImageError,
    InvalidInjectionError,
    InvalidShapeError,
    InvalidStepError,
    InvalidTokenError,
    NonFiniteError,
)
from .numeric import (
    Adam,
    Rng,
    Tensor,
    add_channelwise,
    add_rowwise,
    backward,
    concat,
    conv2d,
    embedding,
    matmul,
    mse,
    no_grad,
    reshape,
    scale,
    silu,
    sinusoidal_embedding,
    softmax,
    transpose,
    upsample2x,
)
from .numeric.tensor import add

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (1, 16, 16)
EMBED_DIM = 32
_MASK_NEG = -1e9


# -- schedule ----------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule; arrays are indexed ``t - 1`` for ``t`` in 1..T."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_step(self, t):
        t = np.asarray(t)
        if t.size == 0 or t.min() < 1 or t.max() > self.T:
            raise InvalidStepError(f"time step outside [1, {self.T}]")
        return t


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise InvalidConfigError("schedule needs T >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidConfigError("betas must satisfy 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T))


def add_noise(z0, t, epsilon, schedule: NoiseSchedule):
    """``z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``.

    ``t`` is an int or one step per leading-axis entry of ``z0``.
    """
    is_tensor = isinstance(z0, Tensor)
    z = z0.data if is_tensor else np.asarray(z0, dtype=np.float64)
    e = epsilon.data if isinstance(epsilon, Tensor) else np.asarray(epsilon, dtype=z.dtype)
    if z.shape != e.shape:
        raise InvalidShapeError(f"add_noise: z0 {z.shape} vs epsilon {e.shape}")
    t = schedule.check_step(t)
    ab = schedule.alpha_bars[t - 1]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (z.ndim - 1))
    out = (np.sqrt(ab) * z + np.sqrt(1.0 - ab) * e).astype(z.dtype, copy=False)
    return Tensor(out) if is_tensor else out


# -- parameters --------------------------------------------------------------

def _normal(rng: Rng, shape, std: float, dtype) -> Tensor:
    return Tensor((rng.normal(int(np.prod(shape))).reshape(shape) * std).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def conv_block_params(rng: Rng, prefix: str, cin: int, cout: int, k: int, dtype) -> "OrderedDict[str, Tensor]":
    p = OrderedDict()
    p[f"{prefix}.conv.w"] = _normal(rng.fold(1), (cout, cin, k, k), math.sqrt(2.0 / (cin * k * k)), dtype)
    p[f"{prefix}.conv.b"] = _zeros((cout,), dtype)
    p[f"{prefix}.temb.w"] = _normal(rng.fold(2), (EMBED_DIM, cout), 1.0 / math.sqrt(EMBED_DIM), dtype)
    p[f"{prefix}.temb.b"] = _zeros((cout,), dtype)
    return p


def attention_params(rng: Rng, prefix: str, dq: int, dkv: int, dtype) -> "OrderedDict[str, Tensor]":
    p = OrderedDict()
    p[f"{prefix}.q"] = _normal(rng.fold(1), (dq, EMBED_DIM), 1.0 / math.sqrt(dq), dtype)
    p[f"{prefix}.k"] = _normal(rng.fold(2), (dkv, EMBED_DIM), 1.0 / math.sqrt(dkv), dtype)
    p[f"{prefix}.v"] = _normal(rng.fold(3), (dkv, EMBED_DIM), 1.0 / math.sqrt(dkv), dtype)
    p[f"{prefix}.o"] = _normal(rng.fold(4), (EMBED_DIM, dq), 0.5 / math.sqrt(EMBED_DIM), dtype)
    return p


ENCODER_BLOCKS = ("e0", "e1", "e2", "mid")


class DenoiserParams:
    """Named tensors of the base noise predictor (an ordered, closed set)."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self.tensors = tensors

    @classmethod
    def init(cls, seed: int = 0, dtype=np.float64) -> "DenoiserParams":
        rng = Rng(seed).fold(0xBA5E)
        p: "OrderedDict[str, Tensor]" = OrderedDict()
        p["prompt_embed"] = _normal(rng.fold(1), (VOCAB_SIZE, EMBED_DIM), 1.0, dtype)
        p["time.w1"] = _normal(rng.fold(2), (EMBED_DIM, EMBED_DIM), 1.0 / math.sqrt(EMBED_DIM), dtype)
        p["time.b1"] = _zeros((EMBED_DIM,), dtype)
        p["time.w2"] = _normal(rng.fold(3), (EMBED_DIM, EMBED_DIM), 1.0 / math.sqrt(EMBED_DIM), dtype)
        p["time.b2"] = _zeros((EMBED_DIM,), dtype)
        p["text.w"] = _normal(rng.fold(4), (EMBED_DIM, EMBED_DIM), 1.0 / math.sqrt(EMBED_DIM), dtype)
        p.update(conv_block_params(rng.fold(9), "e0", 1, 16, 3, dtype))
        p.update(conv_block_params(rng.fold(10), "e1", 16, 16, 3, dtype))
        p.update(conv_block_params(rng.fold(11), "e2", 16, 32, 3, dtype))
        p.update(conv_block_params(rng.fold(12), "mid", 32, 32, 3, dtype))
        p.update(attention_params(rng.fold(13), "mid.attn", 32, EMBED_DIM, dtype))
        p.update(conv_block_params(rng.fold(14), "d2", 64, 16, 3, dtype))
        p.update(conv_block_params(rng.fold(15), "d1", 32, 16, 3, dtype))
        p.update(conv_block_params(rng.fold(17), "h", 32, 16, 3, dtype))
        p["out.conv.w"] = _normal(rng.fold(16), (1, 16, 3, 3), 0.1 * math.sqrt(2.0 / (16 * 9)), dtype)
        p["out.conv.b"] = _zeros((1,), dtype)
        return cls(p)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def named(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def clone(self, requires_grad: Optional[bool] = None) -> "DenoiserParams":
        return DenoiserParams(OrderedDict((k, v.copy(requires_grad)) for k, v in self.tensors.items()))

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(OrderedDict(
            (k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)) for k, v in self.tensors.items()))

    def set_trainable(self, flag: bool) -> "DenoiserParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw bytes of every tensor."""
        h = hashlib.sha256()
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()


# -- encoders ----------------------------------------------------------------

class TextEncoding(NamedTuple):
    """Padded token embeddings ``[N, L, d]`` with a validity mask ``[N, L]``."""

    emb: Tensor
    mask: np.ndarray


def _check_tokens(ids: np.ndarray, vocab: int):
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InvalidTokenError(f"token id outside [0, {vocab})")


def encode_text(params: DenoiserParams, prompt) -> Tensor:
    """Row ``i`` is the embedding of token ``i`` (``[len, d]``)."""
    toks = np.asarray(prompt.tokens if isinstance(prompt, PromptTokens) else prompt, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise InvalidTokenError("prompt must be a non-empty token sequence")
    _check_tokens(toks, params["prompt_embed"].shape[0])
    return embedding(params["prompt_embed"], toks)


def encode_batch(table: Tensor, seqs: Sequence) -> TextEncoding:
    ids, mask = pad_batch([s.tokens if hasattr(s, "tokens") else s for s in seqs])
    _check_tokens(ids, table.shape[0])
    return TextEncoding(embedding(table, ids), mask)


def encode_prompts(params: DenoiserParams, prompts: Sequence[PromptTokens]) -> TextEncoding:
    return encode_batch(params["prompt_embed"], prompts)


def encode_image(x):
    """Pixel-to-latent map; the identity at this scale."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.isfinite(arr).all() or arr.min() < -1.0 or arr.max() > 1.0:
        raise InvalidImageError("image values must lie in [-1, 1]")
    return x


def decode_image(z):
    return z


# -- forward -----------------------------------------------------------------

class Injections(NamedTuple):
    mid: Tensor
    skip_e2: Tensor
    skip_e1: Tensor


def injection_shapes(n: int) -> Injections:
    return Injections((n, 32, 4, 4), (n, 32, 4, 4), (n, 16, 8, 8))


def time_features(params, t, dtype) -> Tensor:
    """Shared time MLP: sinusoid -> linear -> SiLU -> linear, ``[N, d]``."""
    s = Tensor(sinusoidal_embedding(np.atleast_1d(t), EMBED_DIM, dtype))
    h = silu(add_rowwise(matmul(s, params["time.w1"]), params["time.b1"]))
    return add_rowwise(matmul(h, params["time.w2"]), params["time.b2"])


def pooled_text(text: TextEncoding) -> Tensor:
    """Masked mean of token embeddings, ``[N, d]``."""
    w = text.mask / text.mask.sum(axis=1, keepdims=True)
    n, length, d = text.emb.shape
    out = matmul(Tensor(w[:, None, :].astype(text.emb.dtype)), text.emb)
    return reshape(out, (n, d))


def conditioning(params, t, text: TextEncoding, dtype) -> Tensor:
    return add(time_features(params, t, dtype), matmul(pooled_text(text), params["text.w"]))


def conv_block(p, prefix: str, x: Tensor, temb: Tensor, stride: int = 1) -> Tensor:
    h = conv2d(x, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], stride=stride, padding=1)
    tb = add_rowwise(matmul(temb, p[f"{prefix}.temb.w"]), p[f"{prefix}.temb.b"])
    return silu(add_channelwise(h, tb))


def cross_attention(p, prefix: str, feats: Tensor, ctx: Tensor, mask: np.ndarray) -> Tensor:
    """Single-head attention: queries from spatial ``feats [N,C,H,W]``, keys/values from ``ctx [N,L,d]``.

    Returns ``feats + attention output`` in the same layout.
    """
    n, c, hh, ww = feats.shape
    _, length, dctx = ctx.shape
    tokens = transpose(reshape(feats, (n, c, hh * ww)), (0, 2, 1))
    q = reshape(matmul(reshape(tokens, (n * hh * ww, c)), p[f"{prefix}.q"]), (n, hh * ww, EMBED_DIM))
    flat_ctx = reshape(ctx, (n * length, dctx))
    k = reshape(matmul(flat_ctx, p[f"{prefix}.k"]), (n, length, EMBED_DIM))
    v = reshape(matmul(flat_ctx, p[f"{prefix}.v"]), (n, length, EMBED_DIM))
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(EMBED_DIM))
    bias = np.where(mask[:, None, :], 0.0, _MASK_NEG).astype(scores.dtype)
    attn = softmax(add(scores, Tensor(np.repeat(bias, hh * ww, axis=1))))
    out = reshape(matmul(reshape(matmul(attn, v), (n * hh * ww, EMBED_DIM)), p[f"{prefix}.o"]), (n, hh * ww, c))
    return add(feats, reshape(transpose(out, (0, 2, 1)), (n, c, hh, ww)))


def encoder_forward(p, z: Tensor, temb: Tensor, text: TextEncoding):
    """E0 -> E1 -> E2 -> MID over parameters ``p`` (base or the patch's copy)."""
    h0 = conv_block(p, "e0", z, temb)
    h1 = conv_block(p, "e1", h0, temb, stride=2)
    h2 = conv_block(p, "e2", h1, temb, stride=2)
    m = conv_block(p, "mid", h2, temb)
    m = cross_attention(p, "mid.attn", m, text.emb, text.mask)
    return h0, h1, h2, m


def _as_batch_image(z) -> Tuple[Tensor, bool]:
    if not isinstance(z, Tensor):
        z = Tensor(np.asarray(z))
    if z.ndim == 3:
        return reshape(z, (1,) + z.shape), True
    if z.ndim != 4 or z.shape[1:] != IMAGE_SHAPE:
        raise InvalidShapeError(f"expected [N, 1, 16, 16] images, got {z.shape}")
    return z, False


def _as_text(params, c_p, n: int) -> TextEncoding:
    if isinstance(c_p, TextEncoding):
        return c_p
    if isinstance(c_p, Tensor) and c_p.ndim == 2:
        c_p = reshape(c_p, (1,) + c_p.shape)
        return TextEncoding(c_p, np.ones(c_p.shape[:2], dtype=bool))
    if isinstance(c_p, PromptTokens):
        return encode_prompts(params, [c_p] * n)
    if isinstance(c_p, (list, tuple)):
        return encode_prompts(params, c_p)
    raise InvalidShapeError("c_p must be a TextEncoding, a [len, d] tensor or prompts")


def predict_noise(base: DenoiserParams, z_t, t, c_p, injections: Optional[Injections] = None) -> Tensor:
    """Noise estimate for ``z_t`` at steps ``t`` under prompt encoding ``c_p``.

    ``injections`` (mid, skip-E2, skip-E1) are added to the corresponding
    activations before the decoder consumes them.
    """
    z, single = _as_batch_image(z_t)
    n = z.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (n,))
    text = _as_text(base, c_p, n)
    if text.emb.shape[0] != n:
        raise InvalidShapeError(f"c_p batch {text.emb.shape[0]} != image batch {n}")
    temb = conditioning(base, t, text, base.dtype)
    h0, h1, h2, m = encoder_forward(base, z, temb, text)
    if injections is not None:
        expect = injection_shapes(n)
        for name, inj, shape in zip(Injections._fields, injections, expect):
            if inj.shape != shape:
                raise InvalidInjectionError(f"injection {name} has shape {inj.shape}, expected {shape}")
        m = add(m, injections.mid)
        h2 = add(h2, injections.skip_e2)
        h1 = add(h1, injections.skip_e1)
    d2 = upsample2x(conv_block(base, "d2", concat([m, h2], axis=1), temb))
    d1 = upsample2x(conv_block(base, "d1", concat([d2, h1], axis=1), temb))
    h = conv_block(base, "h", concat([d1, h0], axis=1), temb)
    out = conv2d(h, base["out.conv.w"], base["out.conv.b"], padding=1)
    return reshape(out, out.shape[1:]) if single else out


# -- sampling ----------------------------------------------------------------

def sample_batch(base: DenoiserParams, schedule: NoiseSchedule, prompts: Sequence[PromptTokens],
                 rngs: Sequence[Rng], patch=None, conditions=None, client=None) -> np.ndarray:
    """Ancestral DDPM sampling for a batch; row ``i`` draws only from ``rngs[i]``.

    With ``patch`` the noise estimate uses that patch's injections, under
    ``conditions`` (one per prompt) or, when omitted, the client's condition
    for each prompt.
    """
    if len(prompts) != len(rngs):
        raise InvalidConfigError("one rng stream per prompt is required")
    n = len(prompts)
    dtype = base.dtype
    if patch is not None:
        from .patch import check_compatible, encode_conditions, patch_forward

        check_compatible(patch, base)

        if conditions is None:
            from .data.rewriter import RuleRewriter

            client = client or RuleRewriter()
            conditions = [client.condition(p) for p in prompts]
    with no_grad():
        text = encode_prompts(base, prompts)
        cond = encode_conditions(patch, conditions) if patch is not None else None
        z = np.stack([r.normal(256).reshape(IMAGE_SHAPE) for r in rngs]).astype(dtype)
        for t in range(schedule.T, 0, -1):
            tt = np.full(n, t, dtype=np.int64)
            zt = Tensor(z)
            inj = patch_forward(patch, base, zt, tt, text, cond) if patch is not None else None
            eps = predict_noise(base, zt, tt, text, inj).data
            a, ab, b = schedule.alphas[t - 1], schedule.alpha_bars[t - 1], schedule.betas[t - 1]
            mean = (z - ((1.0 - a) / math.sqrt(1.0 - ab)) * eps) / math.sqrt(a)
            if t > 1:
                w = np.stack([r.normal(256).reshape(IMAGE_SHAPE) for r in rngs]).astype(dtype)
                z = (mean + math.sqrt(b) * w).astype(dtype)
            else:
                z = mean.astype(dtype)
            if not np.isfinite(z).all():
                raise NonFiniteError(f"sampler diverged at step {t}")
    return np.clip(z, -1.0, 1.0)


def sample(base: DenoiserParams, schedule: NoiseSchedule, prompt: PromptTokens, rng: Rng,
           patch=None, condition=None) -> np.ndarray:
    """One ``[1, 16, 16]`` image."""
    conds = None if condition is None else [condition]
    return sample_batch(base, schedule, [prompt], [rng], patch, conds)[0]


def generate(base, schedule, prompts: Sequence[PromptTokens], seeds: Sequence[int], patch=None,
             conditions=None, chunk: int = 256) -> np.ndarray:
    """Sample one image per ``(prompt, seed)``; seeds map to ``Rng(seed)`` streams."""
    out = []
    for lo in range(0, len(prompts), chunk):
        ps = list(prompts[lo:lo + chunk])
        rngs = [Rng(int(s)) for s in seeds[lo:lo + chunk]]
        conds = None if conditions is None else list(conditions[lo:lo + chunk])
        out.append(sample_batch(base, schedule, ps, rngs, patch, conds))
    return np.concatenate(out) if out else np.zeros((0,) + IMAGE_SHAPE)


# -- base training -----------------------------------------------------------

@dataclass
class BaseTrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    heldout_size: int = 64
    log_every: int = 100


def diffusion_batch(images: np.ndarray, schedule: NoiseSchedule, rng: Rng, dtype):
    """Draw per-sample ``t`` and ``eps`` and form ``z_t`` for a batch of clean images."""
    n = len(images)
    t = rng.integers(1, schedule.T + 1, n)
    eps = rng.normal(images.size).reshape(images.shape).astype(dtype)
    zt = add_noise(images.astype(dtype), t, eps, schedule)
    return zt, t, eps


def heldout_loss(base, schedule, records: Sequence[DatasetPair], rng: Rng) -> float:
    imgs = np.stack([r.image for r in records])
    zt, t, eps = diffusion_batch(imgs, schedule, rng, base.dtype)
    with no_grad():
        pred = predict_noise(base, Tensor(zt), t, encode_prompts(base, [r.prompt for r in records]))
        return float(mse(Tensor(eps), pred).data)


@dataclass
class TrainLog:
    steps: List[int] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    heldout: List[Tuple[int, float]] = field(default_factory=list)

    def lines(self) -> List[str]:
        out = [f"step={s} loss={l:.6f}" for s, l in zip(self.steps, self.losses)]
        out += [f"step={s} heldout_loss={l:.6f}" for s, l in self.heldout]
        return out


def train_base(base: DenoiserParams, corpus: Sequence[DatasetPair], schedule: NoiseSchedule,
               config: Optional[BaseTrainConfig] = None, rng=0) -> Tuple[DenoiserParams, TrainLog]:
    """Standard DDPM training of every base tensor on ``corpus``; mutates and returns ``base``."""
    config = config or BaseTrainConfig()
    if not corpus:
        raise InvalidConfigError("training corpus is empty")
    if config.steps < 0 or config.batch_size < 1:
        raise InvalidConfigError("steps must be >= 0 and batch_size >= 1")
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    base.set_trainable(True)
    params = list(base)
    opt = Adam(params, lr=config.lr, betas=config.betas, eps=config.eps)
    images = np.stack([r.image for r in corpus])
    prompts = [r.prompt for r in corpus]
    held_idx = rng.fold(0xE1D).integers(0, len(corpus), min(config.heldout_size, len(corpus)))
    held = [corpus[i] for i in held_idx]
    held_rng = rng.fold(0xE1E)
    log = TrainLog()
    log.heldout.append((0, heldout_loss(base, schedule, held, Rng(held_rng.seed))))
    for step in range(1, config.steps + 1):
        srng = rng.fold(step)
        idx = srng.integers(0, len(corpus), config.batch_size)
        zt, t, eps = diffusion_batch(images[idx], schedule, srng, base.dtype)
        pred = predict_noise(base, Tensor(zt), t, encode_prompts(base, [prompts[i] for i in idx]))
        loss = mse(Tensor(eps), pred)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"non-finite loss at step {step}")
        backward(loss, params)
        opt.step()
        if step % config.log_every == 0 or step == config.steps:
            log.steps.append(step)
            log.losses.append(value)
            logger.info("base step=%d loss=%.5f", step, value)
    log.heldout.append((config.steps, heldout_loss(base, schedule, held, Rng(held_rng.seed))))
    return base, log
