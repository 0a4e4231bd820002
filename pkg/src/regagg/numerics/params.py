"""Named trainable tensors, AdamW, and the RAGG checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"RAGG"  u32 version  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dims,
              prod(dims) x f64 values }

Optimizer state rides along as ordinary entries named ``opt.m/<param>``,
``opt.v/<param>`` and ``opt.step/<param>`` (rank 0); anything else the trainer
needs to persist is stored under ``meta/<key>``.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import ContractError, FormatError
from .tensor import Tensor

MAGIC = b"RAGG"
VERSION = 1


class Parameter(Tensor):
    """A leaf tensor with optimizer moments."""

    __slots__ = ("m", "v", "step", "decay")

    def __init__(self, data, decay: bool = True, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0
        self.decay = decay


class ParameterStore:
    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self.meta: dict[str, np.ndarray] = {}

    def add(self, name: str, data, decay: bool = True) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(data, decay=decay, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def num_values(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def set_trainable(self, predicate) -> None:
        """``requires_grad = predicate(name)`` for every parameter."""
        for name, p in self._params.items():
            p.requires_grad = bool(predicate(name))

    def trainable(self) -> list[str]:
        return [n for n, p in self._params.items() if p.requires_grad]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    # -- serialization -------------------------------------------------------
    def entries(self, with_state: bool = True) -> list[tuple[str, np.ndarray]]:
        out = [(n, p.data) for n, p in self._params.items()]
        if with_state:
            for n, p in self._params.items():
                out.append((f"opt.m/{n}", p.m))
                out.append((f"opt.v/{n}", p.v))
                out.append((f"opt.step/{n}", np.asarray(float(p.step))))
            for k, v in self.meta.items():
                out.append((f"meta/{k}", np.asarray(v, dtype=np.float64)))
        return out

    def to_bytes(self, with_state: bool = True) -> bytes:
        return encode_entries(self.entries(with_state))

    def save(self, path, with_state: bool = True) -> None:
        Path(path).write_bytes(self.to_bytes(with_state))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParameterStore":
        store = cls()
        state: dict[str, np.ndarray] = {}
        for name, arr in decode_entries(blob):
            if name.startswith(("opt.", "meta/")):
                state[name] = arr
            else:
                store._params[name] = Parameter(arr, name=name)
        for name, p in store._params.items():
            if f"opt.m/{name}" in state:
                p.m = state.pop(f"opt.m/{name}")
                p.v = state.pop(f"opt.v/{name}")
                p.step = int(state.pop(f"opt.step/{name}"))
        for key, arr in state.items():
            if key.startswith("meta/"):
                store.meta[key[5:]] = arr
        return store

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return cls.from_bytes(Path(path).read_bytes())

    def load_values_from(self, other: "ParameterStore", strict: bool = True) -> list[str]:
        """Copy values (and optimizer state) for names present in both stores."""
        copied = []
        for name, p in self._params.items():
            if name not in other:
                if strict:
                    raise ContractError(f"checkpoint lacks parameter {name!r}")
                continue
            src = other[name]
            if src.shape != p.shape:
                raise ContractError(f"shape mismatch for {name!r}: {src.shape} vs {p.shape}")
            p.data = src.data.copy()
            p.m = src.m.copy()
            p.v = src.v.copy()
            p.step = src.step
            copied.append(name)
        self.meta.update(other.meta)
        return copied


def encode_entries(entries) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def decode_entries(blob: bytes) -> list[tuple[str, np.ndarray]]:
    view = memoryview(blob)
    pos = 0

    def need(k: int) -> None:
        if pos + k > len(view):
            raise FormatError(f"checkpoint truncated: need {pos + k} bytes, have {len(view)}", pos)

    need(12)
    if bytes(view[:4]) != MAGIC:
        raise FormatError(f"bad checkpoint magic {bytes(view[:4])!r}", 0)
    version, count = struct.unpack_from("<II", view, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 12
    out = []
    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        need(nlen + 1)
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        rank = view[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", view, pos)
        pos += 4 * rank
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        need(nbytes)
        arr = np.frombuffer(view[pos : pos + nbytes], dtype="<f8").astype(np.float64).reshape(dims)
        pos += nbytes
        out.append((name, arr))
    if pos != len(view):
        raise FormatError(f"trailing bytes after {count} entries", pos)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adamw_step(
    store: ParameterStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    clip_norm: float | None = None,
) -> None:
    """One AdamW update over every trainable parameter.

    Decay (``w -= lr * wd * w``) is applied to parameters flagged ``decay``
    before the bias-corrected Adam step; it never touches the moments.
    """
    b1, b2 = betas
    live = [(n, p) for n, p in store.items() if p.requires_grad]
    for name, p in live:
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    scale = 1.0
    if clip_norm is not None:
        total = np.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in live))
        if total > clip_norm:
            scale = clip_norm / total
    for _, p in live:
        g = p.grad if scale == 1.0 else p.grad * scale
        if weight_decay and p.decay:
            p.data = p.data - lr * weight_decay * p.data
        p.step += 1
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * (g * g)
        m_hat = p.m / (1.0 - b1**p.step)
        v_hat = p.v / (1.0 - b2**p.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(
    store: ParameterStore, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8
) -> None:
    """Plain Adam (no decay)."""
    b1, b2 = betas
    for name, p in store.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        p.step += 1
        p.m = b1 * p.m + (1.0 - b1) * g
        p.v = b2 * p.v + (1.0 - b2) * (g * g)
        m_hat = p.m / (1.0 - b1**p.step)
        v_hat = p.v / (1.0 - b2**p.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
