"""Dense tensors with a dynamic reverse-mode tape.

Every op output records its parents and a backward closure when any input
participates in differentiation. :func:`backward` walks that graph once,
writes ``.grad`` only on the requested parameter set, then frees the tape.

Shapes never broadcast implicitly. The only mixed-shape ops are the explicit
bias helpers (:func:`add_rowwise`, :func:`add_channelwise`) and
tensor-scalar scaling.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..exceptions import (
    ContractError,
    InvalidShapeError,
    NonFiniteError,
    StaleTapeError,
)
from .rng import Rng, check_shape

DEFAULT_DTYPE = np.float64

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float array that may participate in the tape.

    Leaves created with ``requires_grad=True`` are trainable parameters;
    op outputs carry ``_parents``/``_backward`` while the tape is alive.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._consumed = False
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def on_tape(self) -> bool:
        return self.requires_grad or self._backward is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def copy(self, requires_grad: Optional[bool] = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg, name=self.name)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _raise_item(t):
    raise InvalidShapeError(f"item() needs a single element, tensor has shape {t.shape}")


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def randn(shape, rng: Rng, dtype=DEFAULT_DTYPE) -> Tensor:
    """I.i.d. standard normals; advances ``rng.counter`` by ``prod(shape)``."""
    shape = check_shape(shape)
    n = int(np.prod(shape))
    return Tensor(rng.normal(n).reshape(shape).astype(dtype, copy=False))


# -- tape plumbing ---------------------------------------------------------

def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._consumed = False
    out.name = op
    if _grad_enabled() and any(p.on_tape for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise InvalidShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def backward(loss: Tensor, params: Iterable[Tensor]) -> None:
    """Populate ``p.grad = d loss / d p`` for each ``p`` in ``params``.

    Only tensors in ``params`` receive ``.grad``; a parameter that is not
    connected to ``loss`` gets an all-zero gradient. The tape is released
    afterwards, so a second call without a fresh forward pass raises
    :class:`StaleTapeError`.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StaleTapeError("tape already consumed; run the forward pass again")
    params = list(params)
    param_ids = {id(p) for p in params}

    order: list = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    # order is parents-before-children; mark nodes that lead to a param
    needs = {}
    for node in order:
        needs[id(node)] = id(node) in param_ids or any(needs.get(id(p), False) for p in node._parents)

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if id(node) not in param_ids else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        flags = tuple(needs.get(id(p), False) for p in node._parents)
        if not any(flags):
            continue
        pgrads = node._backward(g, flags)
        for p, pg, flag in zip(node._parents, pgrads, flags):
            if not flag or pg is None:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for p in params:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else _check_finite(np.asarray(g, dtype=p.dtype), "backward")

    for node in order:
        node._parents = ()
        node._backward = None
    loss._consumed = True


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g, f: (g, g))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, "sub", (a, b), lambda g, f: (g, -g if f[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g, f):
        return (g * b.data if f[0] else None, g * a.data if f[1] else None)

    return _make(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, "scale", (a,), lambda g, f: (g * s,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
    out = x * sig

    def bw(g, f):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _make(out, "silu", (a,), bw)


def elementwise(op: str, *operands):
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``scale``, ``silu``."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale, "silu": silu}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*operands)


def add_rowwise(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., d] + b[d]`` (explicit bias over the last axis)."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise InvalidShapeError(f"add_rowwise: {x.shape} vs bias {b.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, "add_rowwise", (x, b),
                 lambda g, f: (g, g.sum(axis=axes) if f[1] else None))


def add_channelwise(x: Tensor, b: Tensor) -> Tensor:
    """``x[N, C, H, W] + b[N, C]`` with ``b`` spread over spatial positions."""
    if x.ndim != 4 or b.shape != x.shape[:2]:
        raise InvalidShapeError(f"add_channelwise: {x.shape} vs {b.shape}")
    return _make(x.data + b.data[:, :, None, None], "add_channelwise", (x, b),
                 lambda g, f: (g, g.sum(axis=(2, 3)) if f[1] else None))


# -- shape ops -------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise InvalidShapeError(f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g, f: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
                 lambda g, f: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
            raise InvalidShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g, f):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), "concat", tuple(xs), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    if x.ndim != 4:
        raise InvalidShapeError(f"upsample2x expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g, f):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, "upsample2x", (x,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]

    def bw(g, f):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise InvalidShapeError(f"embedding ids out of range [0, {vocab})")
    return _make(table.data[ids], "embedding", (table,), bw)


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors, or batched over a shared leading axis."""
    if a.ndim == 2 and b.ndim == 2:
        ok = a.shape[1] == b.shape[0]
    elif a.ndim == 3 and b.ndim == 3:
        ok = a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    else:
        ok = False
    if not ok:
        raise InvalidShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g, f):
        ga = g @ np.swapaxes(b.data, -1, -2) if f[0] else None
        gb = np.swapaxes(a.data, -1, -2) @ g if f[1] else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    if x.shape[-1] < 1:
        raise InvalidShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g, f):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences as a 0-d tensor."""
    _same_shape(a, b, "mse")
    d = a.data - b.data
    n = d.size

    def bw(g, f):
        ga = g * (2.0 / n) * d
        return (ga if f[0] else None, -ga if f[1] else None)

    return _make(np.asarray(np.mean(d * d), dtype=a.dtype), "mse", (a, b), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,),
                 lambda g, f: (np.full_like(x.data, g / n),))


# -- convolution -----------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _conv_shifted(xd, kd, bias, padding, ho, wo, has_bias):
    """Stride-1 conv on a flat padded layout.

    With the padded input laid out as ``[C, N*Hp*Wp]``, kernel offset
    ``(i, j)`` is a column shift by ``i*Wp + j``. One GEMM produces every
    offset's contribution and shifted slices are summed.
    """
    n, cin, h, w = xd.shape
    cout, _, kh, kw = kd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    length = n * hp * wp
    lq = length - (kh - 1) * wp - (kw - 1)
    shifts = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]
    xp = np.zeros((cin, n, hp, wp), dtype=xd.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = xd.transpose(1, 0, 2, 3)
    xf = xp.reshape(cin, length)
    kall = np.ascontiguousarray(kd.transpose(2, 3, 0, 1)).reshape(kh * kw * cout, cin)
    y = (kall @ xf).reshape(kh, kw, cout, length)
    full = np.zeros((cout, length), dtype=xd.dtype)
    acc = full[:, :lq]
    for i, j, sh in shifts:
        acc += y[i, j, :, sh:sh + lq]
    del y
    out = full.reshape(cout, n, hp, wp)[:, :, :ho, :wo]
    if has_bias:
        out = out + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def bw(g, f):
        gfull = np.zeros((cout, n, hp, wp), dtype=xd.dtype)
        gfull[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gf = gfull.reshape(cout, length)[:, :lq]
        gx = gk = gb = None
        if f[1]:
            gk = np.empty((kh, kw, cout, cin), dtype=xd.dtype)
            for i, j, sh in shifts:
                gk[i, j] = gf @ xf[:, sh:sh + lq].T
            gk = np.ascontiguousarray(gk.transpose(2, 3, 0, 1))
        if has_bias and f[2]:
            gb = g.sum(axis=(0, 2, 3))
        if f[0]:
            z = (np.ascontiguousarray(kall.T.reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3))
                 .reshape(kh * kw * cin, cout) @ gf).reshape(kh, kw, cin, lq)
            gxf = np.zeros((cin, length), dtype=xd.dtype)
            for i, j, sh in shifts:
                gxf[:, sh:sh + lq] += z[i, j]
            gx = np.ascontiguousarray(
                gxf.reshape(cin, n, hp, wp)[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))
        return (gx, gk, gb) if has_bias else (gx, gk)

    return out, bw


def _conv_im2col(xd, kd, bias, stride, padding, ho, wo, has_bias):
    n, cin, h, w = xd.shape
    cout, _, kh, kw = kd.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    xt = xp.transpose(1, 0, 2, 3)  # [C, N, Hp, Wp] view
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    # cols: [C, kh, kw, N, Ho, Wo] -> [C*kh*kw, N*Ho*Wo]
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + hs:stride, j:j + ws:stride]
    cols = cols.reshape(cin * kh * kw, n * ho * wo)
    kmat = kd.reshape(cout, cin * kh * kw)
    out = kmat @ cols
    if has_bias:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))

    def bw(g, f):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
        gx = gk = gb = None
        if f[1]:
            gk = (g2 @ cols.T).reshape(kd.shape)
        if has_bias and f[2]:
            gb = g2.sum(axis=1)
        if f[0]:
            gcols = (kmat.T @ g2).reshape(cin, kh, kw, n, ho, wo)
            gxp = np.zeros((cin, n, hp, wp), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + hs:stride, j:j + ws:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gk, gb) if has_bias else (gx, gk)

    return out, bw


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, kh, kw]``; optional ``bias`` is ``[C_out]``.
    """
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise InvalidShapeError(f"conv2d: bad ranks {x.shape}, {kernel.shape}")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise InvalidShapeError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if stride < 1 or padding < 0:
        raise InvalidShapeError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise InvalidShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (cout,):
        raise InvalidShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    # im2col copies scale with C_in, shifted sums with C_out
    if stride == 1 and cout < cin:
        out, bw = _conv_shifted(x.data, kernel.data, bias, padding, ho, wo, bias is not None)
    else:
        out, bw = _conv_im2col(x.data, kernel.data, bias, stride, padding, ho, wo, bias is not None)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    result = _make(out, "conv2d", parents, bw)
    if single:
        result = reshape(result, result.shape[1:])
    return result


def sinusoidal_embedding(t, dim: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fixed sinusoidal features for integer steps ``t`` -> ``[len(t), dim]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)
