"""Binary weight container (``SPC1``).

All integers are little-endian::

    magic      4 bytes  b"SPC1"
    version    u16      1
    precision  u8       4 (float32) or 8 (float64)
    reserved   u8       0
    count      u32      number of tensor records
    meta_len   u32      byte length of the metadata block
    meta       UTF-8 "key=value" lines, sorted by key, each ending in "\\n"
    records    count x { name_len u16, name UTF-8, rank u8,
                         extents rank x u32, data (prod(extents) x precision bytes) }
    checksum   u64      BLAKE2b-64 of every preceding byte

The metadata always carries ``kind``: ``base``, ``patch``,
``merged-patch``, or ``samples`` for raw sampled images. Writing the same
tensors and metadata always yields the same bytes.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from collections import OrderedDict
from typing import Dict, Iterable, Mapping, Tuple

import numpy as np

from .diffusion import DenoiserParams
from .exceptions import CorruptFileError, InvalidConfigError, NonFiniteError, WrongKindError
from .numeric import Tensor
from .patch import PatchParams

MAGIC = b"SPC1"
VERSION = 1
KINDS = ("base", "patch", "merged-patch", "samples")
_HEADER = struct.Struct("<4sHBBII")


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def encode_container(kind: str, tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] = None) -> bytes:
    if kind not in KINDS:
        raise InvalidConfigError(f"unknown container kind {kind!r}")
    meta = dict(meta or {})
    meta["kind"] = kind
    arrays = [(name, np.asarray(a)) for name, a in tensors.items()]
    dtypes = {a.dtype for _, a in arrays}
    if len(dtypes) > 1 or not arrays:
        raise InvalidConfigError("a container holds one or more tensors of a single precision")
    dtype = dtypes.pop()
    if dtype not in (np.float32, np.float64):
        raise InvalidConfigError(f"unsupported precision {dtype}")
    lines = []
    for k in sorted(meta):
        v = str(meta[k])
        if not k or "=" in k or "\n" in k or "\n" in v:
            raise InvalidConfigError(f"metadata entry {k!r} cannot be stored")
        lines.append(f"{k}={v}\n")
    meta_bytes = "".join(lines).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, dtype.itemsize, 0, len(arrays), len(meta_bytes)))
    buf.write(meta_bytes)
    for name, a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"tensor {name!r} holds non-finite values")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF or a.ndim > 0xFF:
            raise InvalidConfigError(f"tensor {name!r} cannot be stored")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype=dtype.newbyteorder("<")).tobytes())
    body = buf.getvalue()
    return body + _checksum(body)


def decode_container(data: bytes) -> Tuple[str, "OrderedDict[str, np.ndarray]", Dict[str, str]]:
    if len(data) < _HEADER.size + 8:
        raise CorruptFileError("file too short for an SPC1 container")
    body, check = data[:-8], data[-8:]
    magic, version, precision, _, count, meta_len = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFileError(f"unsupported container version {version}")
    if _checksum(body) != check:
        raise CorruptFileError("checksum mismatch")
    if precision not in (4, 8):
        raise CorruptFileError(f"bad precision byte {precision}")
    dtype = np.dtype("<f4" if precision == 4 else "<f8")
    pos = _HEADER.size
    try:
        if len(body) < pos + meta_len:
            raise CorruptFileError("truncated metadata")
        meta_text = body[pos:pos + meta_len].decode("utf-8")
        pos += meta_len
        meta = {}
        for line in meta_text.splitlines():
            k, sep, v = line.partition("=")
            if not sep:
                raise CorruptFileError(f"bad metadata line {line!r}")
            meta[k] = v
        tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = int(np.prod(shape, dtype=np.int64)) * precision
            if pos + nbytes > len(body):
                raise CorruptFileError(f"tensor {name!r} is truncated")
            tensors[name] = np.frombuffer(body, dtype=dtype, count=nbytes // precision, offset=pos
                                          ).reshape(shape).astype(dtype.newbyteorder("="))
            pos += nbytes
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CorruptFileError(f"malformed container: {exc}") from exc
    if pos != len(body):
        raise CorruptFileError("trailing bytes after the last record")
    if meta.get("kind") not in KINDS:
        raise CorruptFileError(f"missing or unknown kind {meta.get('kind')!r}")
    return meta["kind"], tensors, meta


def _write_atomic(path, data: bytes) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_container(path, kinds: Iterable[str] = KINDS):
    with open(path, "rb") as fh:
        kind, tensors, meta = decode_container(fh.read())
    kinds = tuple(kinds)
    if kind not in kinds:
        raise WrongKindError(f"{os.fspath(path)} holds a {kind!r} container, expected {' or '.join(kinds)}")
    return kind, tensors, meta


def save_base(path, base: DenoiserParams, meta: Mapping[str, str] = None) -> None:
    _write_atomic(path, encode_container("base", {k: v.data for k, v in base.named()}, meta))


def load_base(path) -> DenoiserParams:
    return load_base_with_meta(path)[0]


def load_base_with_meta(path) -> Tuple[DenoiserParams, Dict[str, str]]:
    _, tensors, meta = read_container(path, ("base",))
    ref = DenoiserParams.init(0)
    expect = [(k, v.shape) for k, v in ref.named()]
    got = [(k, v.shape) for k, v in tensors.items()]
    if got != expect:
        raise CorruptFileError("stored base does not match the model architecture")
    return DenoiserParams(OrderedDict((k, Tensor(v)) for k, v in tensors.items())), meta


def save_patch(path, patch: PatchParams) -> None:
    kind = "merged-patch" if patch.meta.get("kind") == "merged-patch" else "patch"
    meta = {k: v for k, v in patch.meta.items() if k != "kind"}
    _write_atomic(path, encode_container(kind, {k: v.data for k, v in patch.named()}, meta))


def load_patch(path) -> PatchParams:
    kind, tensors, meta = read_container(path, ("patch", "merged-patch"))
    return PatchParams(OrderedDict((k, Tensor(v)) for k, v in tensors.items()), meta)
