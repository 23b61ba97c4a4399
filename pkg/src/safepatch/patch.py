"""Safety patch: a trainable encoder copy steered by a condition mapper.

The patch holds a copy of the base encoder (E0, E1, E2, MID and the
mid attention), a mapper ``M(z_t, c_s)`` that cross-attends from image
positions to the safety-condition tokens, and four 1x1 convolutions that
start at exactly zero::

    z' = z_t + zero_in(M(z_t, c_s))
    h0', h1', h2', m' = copy_encoder(z', t, c_p)
    injections = zero_mid(m'), zero_e2(h2'), zero_e1(h1')

The base model adds the injections to its mid output and skip activations.
Because every zero conv starts at zero, a fresh patch changes nothing.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .data.vocab import COND_VOCAB_SIZE, SafetyCondition
from .diffusion import (
    EMBED_DIM,
    ENCODER_BLOCKS,
    DenoiserParams,
    Injections,
    TextEncoding,
    _as_batch_image,
    _as_text,
    _normal,
    _zeros,
    attention_params,
    conditioning,
    cross_attention,
    encode_batch,
    encoder_forward,
)
from .exceptions import IncompatiblePatchError, InvalidConfigError, InvalidShapeError
from .numeric import Rng, Tensor, add, conv2d, silu

MAPPER_CHANNELS = 8
MAPPER_FEATURES = 16
COPY_PREFIX = "copy."
ZERO_CONVS = {"zero_in": (1, MAPPER_CHANNELS), "zero_mid": (32, 32), "zero_e2": (32, 32), "zero_e1": (16, 16)}


def _is_encoder_tensor(name: str) -> bool:
    return name.split(".")[0] in ENCODER_BLOCKS


class PatchParams:
    """Named patch tensors plus string metadata.

    ``meta`` records what the patch was trained for (``kind``, ``category``,
    ``steps``, ...). It is carried through storage but never read by the
    forward pass.
    """

    def __init__(self, tensors: "OrderedDict[str, Tensor]", meta: Optional[Dict[str, str]] = None):
        self.tensors = tensors
        self.meta = dict(meta or {})

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

    def signature(self) -> Tuple[Tuple[str, tuple], ...]:
        return tuple((k, v.shape) for k, v in self.tensors.items())

    def clone(self) -> "PatchParams":
        return PatchParams(OrderedDict((k, v.copy()) for k, v in self.tensors.items()), self.meta)

    def set_trainable(self, flag: bool) -> "PatchParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def copy_view(self) -> Dict[str, Tensor]:
        """Encoder-copy tensors under their base names."""
        n = len(COPY_PREFIX)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(COPY_PREFIX)}


def init_patch(base: DenoiserParams, seed: int = 0, category: str = "") -> PatchParams:
    """Fresh patch: a bitwise copy of the base encoder, a random mapper and zeroed 1x1 convs."""
    dtype = base.dtype
    rng = Rng(seed).fold(0x9A7C)
    p: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, t in base.named():
        if _is_encoder_tensor(name):
            p[COPY_PREFIX + name] = Tensor(t.data.copy(), requires_grad=True)
    p["map.cond_embed"] = _normal(rng.fold(1), (COND_VOCAB_SIZE, EMBED_DIM), 1.0, dtype)
    p["map.feat.w"] = _normal(rng.fold(2), (MAPPER_FEATURES, 1, 3, 3), math.sqrt(2.0 / 9), dtype)
    p["map.feat.b"] = _zeros((MAPPER_FEATURES,), dtype)
    p.update(attention_params(rng.fold(3), "map.attn", MAPPER_FEATURES, EMBED_DIM, dtype))
    p["map.proj.w"] = _normal(rng.fold(4), (MAPPER_CHANNELS, MAPPER_FEATURES, 1, 1),
                              math.sqrt(1.0 / MAPPER_FEATURES), dtype)
    p["map.proj.b"] = _zeros((MAPPER_CHANNELS,), dtype)
    for name, (cout, cin) in ZERO_CONVS.items():
        p[f"{name}.w"] = _zeros((cout, cin, 1, 1), dtype)
        p[f"{name}.b"] = _zeros((cout,), dtype)
    meta = {"kind": "patch", "category": category, "seed": str(seed), "base": base.digest()[:16]}
    return PatchParams(p, meta)


def check_compatible(patch: PatchParams, base: DenoiserParams) -> None:
    """Raise :class:`IncompatiblePatchError` unless ``patch`` fits ``base``."""
    copy = patch.copy_view()
    expect = {k: v.shape for k, v in base.named() if _is_encoder_tensor(k)}
    if {k: v.shape for k, v in copy.items()} != expect:
        raise IncompatiblePatchError("patch encoder copy does not match the base architecture")
    missing = [f"{z}.w" for z in ZERO_CONVS if f"{z}.w" not in patch.tensors]
    if missing:
        raise IncompatiblePatchError(f"patch lacks {missing}")
    if patch.dtype != base.dtype:
        raise IncompatiblePatchError(f"patch precision {patch.dtype} differs from base {base.dtype}")


def encode_conditions(patch: PatchParams, conditions: Sequence[SafetyCondition]) -> TextEncoding:
    return encode_batch(patch["map.cond_embed"], conditions)


def map_condition(patch: PatchParams, z_t, cond) -> Tensor:
    """Mapper output ``[N, MAPPER_CHANNELS, 16, 16]``.

    Each pixel's features query the condition tokens (single head, padded
    positions masked) and the attended value is added back residually.
    """
    z, _ = _as_batch_image(z_t)
    if not isinstance(cond, TextEncoding):
        cond = encode_conditions(patch, cond)
    feat = silu(conv2d(z, patch["map.feat.w"], patch["map.feat.b"], padding=1))
    feat = cross_attention(patch.tensors, "map.attn", feat, cond.emb, cond.mask)
    return conv2d(feat, patch["map.proj.w"], patch["map.proj.b"])


def _zero_conv(patch: PatchParams, name: str, x: Tensor) -> Tensor:
    return conv2d(x, patch[f"{name}.w"], patch[f"{name}.b"])


def patch_forward(patch: PatchParams, base: DenoiserParams, z_t, t, c_p, cond) -> Injections:
    """Injections (mid, skip-E2, skip-E1) for the base forward pass."""
    z, _ = _as_batch_image(z_t)
    n = z.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.int64)), (n,))
    text = _as_text(base, c_p, n)
    if not isinstance(cond, TextEncoding):
        cond = encode_conditions(patch, cond)
    if cond.emb.shape[0] != n:
        raise InvalidShapeError(f"condition batch {cond.emb.shape[0]} != image batch {n}")
    zc = add(z, _zero_conv(patch, "zero_in", map_condition(patch, z, cond)))
    temb = conditioning(base, t, text, base.dtype)
    copy = patch.copy_view()
    copy["text.w"] = base["text.w"]
    _, h1, h2, m = encoder_forward(copy, zc, temb, text)
    return Injections(_zero_conv(patch, "zero_mid", m), _zero_conv(patch, "zero_e2", h2),
                      _zero_conv(patch, "zero_e1", h1))


def merge_patches(patches: Sequence[Tuple[PatchParams, float]]) -> PatchParams:
    """Weighted average ``sum(w_i theta_i) / sum(w_i)`` of compatible patches.

    Terms are summed in a canonical order (by content digest), so the result
    does not depend on the order of ``patches``.
    """
    if not patches:
        raise InvalidConfigError("merge needs at least one patch")
    weights = [float(w) for _, w in patches]
    if any(not math.isfinite(w) or w < 0 for w in weights) or sum(weights) <= 0:
        raise InvalidConfigError("merge weights must be finite, non-negative and not all zero")
    sig = patches[0][0].signature()
    for p, _ in patches[1:]:
        if p.signature() != sig:
            raise IncompatiblePatchError("patches differ in tensor names or shapes")
    dtypes = {p.dtype for p, _ in patches}
    if len(dtypes) != 1:
        raise IncompatiblePatchError(f"patches differ in precision: {sorted(map(str, dtypes))}")
    order = sorted(range(len(patches)), key=lambda i: (patches[i][0].digest(), weights[i]))
    total = 0.0
    for i in order:
        total += weights[i]
    out: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, _ in sig:
        acc = None
        for i in order:
            term = weights[i] * patches[i][0][name].data
            acc = term if acc is None else acc + term
        out[name] = Tensor((acc / total).astype(patches[0][0].dtype), requires_grad=False)
    cats = [patches[i][0].meta.get("category", "") for i in order]
    meta = {
        "kind": "merged-patch",
        "category": "+".join(c for c in cats if c),
        "components": str(len(patches)),
        "weights": ",".join(repr(weights[i] / total) for i in order),
        "base": patches[0][0].meta.get("base", ""),
    }
    return PatchParams(out, meta)

