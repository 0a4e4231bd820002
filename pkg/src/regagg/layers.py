"""Parameterised building blocks shared by the backbone and the aggregator.

Layers do not own data: each one holds a reference to a
:class:`~regagg.numerics.ParameterStore` and the names of its entries, so a
whole model serializes as one flat store.
"""

from __future__ import annotations

import math

from .numerics import (
    ParameterStore,
    Tensor,
    add,
    concat,
    conv2d,
    dropout,
    gelu,
    layernorm,
    linear,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    swapaxes,
    transpose,
)
from .errors import ConfigError, ContractError
from .rng import Rng

INIT_STD = 0.02


class Linear:
    """Affine map ``x @ W + b``.

    ``init="normal"`` draws W ~ N(0, 0.02^2) with zero bias (ViT convention);
    ``init="fan_in"`` draws W and b ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), the
    usual default for plain MLP heads.
    """

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, rng: Rng, bias: bool = True,
                 init: str = "normal"):
        r = rng.split(name)
        if init == "normal":
            w, b = r.normal((d_in, d_out), INIT_STD), [0.0] * d_out
        elif init == "fan_in":
            bound = 1.0 / math.sqrt(d_in)
            w, b = r.uniform(-bound, bound, (d_in, d_out)), r.uniform(-bound, bound, d_out)
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.w = store.add(f"{name}.w", w)
        self.b = store.add(f"{name}.b", b, decay=False) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int):
        self.g = store.add(f"{name}.g", [1.0] * d, decay=False)
        self.b = store.add(f"{name}.b", [0.0] * d, decay=False)

    def __call__(self, x: Tensor) -> Tensor:
        return layernorm(x, self.g, self.b)


class TwoLayerMLP:
    """``W2 relu(W1 x + b1) + b2`` with optional dropout on the hidden layer."""

    def __init__(self, store, name, d_in, hidden, d_out, rng, dropout_rate: float = 0.0, init: str = "fan_in"):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, hidden, rng, init=init)
        self.fc2 = Linear(store, f"{name}.fc2", hidden, d_out, rng, init=init)
        self.name = name
        self.dropout_rate = dropout_rate

    def __call__(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        h = relu(self.fc1(x))
        if training and self.dropout_rate > 0:
            h = dropout(h, self.dropout_rate, rng.split(self.name), True)
        return self.fc2(h)


class MultiHeadAttention:
    def __init__(self, store, name, d: int, heads: int, rng: Rng):
        if d % heads:
            raise ConfigError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.d = d
        self.qkv = Linear(store, f"{name}.qkv", d, 3 * d, rng)
        self.proj = Linear(store, f"{name}.proj", d, d, rng)

    def __call__(self, x: Tensor, record: list | None = None) -> Tensor:
        bsz, seq, d = x.shape
        hd = d // self.heads
        qkv = reshape(self.qkv(x), (bsz, seq, 3, self.heads, hd))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))  # [3, B, h, T, hd]
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = softmax(mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(hd)), axis=-1)
        if record is not None:
            record.append(att)
        out = transpose(matmul(att, v), (0, 2, 1, 3))
        return self.proj(reshape(out, (bsz, seq, d)))


class FeedForward:
    def __init__(self, store, name, d: int, ratio: int, rng: Rng):
        self.fc1 = Linear(store, f"{name}.fc1", d, ratio * d, rng)
        self.fc2 = Linear(store, f"{name}.fc2", ratio * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def split_channels(total: int) -> tuple[int, int, int]:
    """Channels for the 1x1 / 3x3 / 5x5 branches; remainder goes to 1x1."""
    base = total // 3
    return total - 2 * base, base, base


class MffAdapter:
    """Multi-scale feature fusion side branch.

    down (affine + ReLU) -> grid reshape -> 1x1 reduce -> {1x1, 3x3, 5x5} ->
    channel concat -> 1x1 restore -> * scale -> up (linear, no bias).
    The class token (last position) gets a zero contribution.
    """

    def __init__(self, store, name, d: int, bottleneck_ratio: float, scale: float, rng: Rng):
        self.bottleneck = max(1, int(round(d * bottleneck_ratio)))
        self.reduced = max(3, self.bottleneck // 2)
        c1, c3, c5 = split_channels(self.reduced)
        db, cr = self.bottleneck, self.reduced
        r = rng.split(name)
        self.down = Linear(store, f"{name}.down", d, db, rng)
        self.k_reduce = store.add(f"{name}.reduce.w", r.split("reduce").normal((cr, db, 1, 1), INIT_STD))
        self.k1 = store.add(f"{name}.b1.w", r.split("b1").normal((c1, cr, 1, 1), INIT_STD))
        self.k3 = store.add(f"{name}.b3.w", r.split("b3").normal((c3, cr, 3, 3), INIT_STD))
        self.k5 = store.add(f"{name}.b5.w", r.split("b5").normal((c5, cr, 5, 5), INIT_STD))
        self.k_restore = store.add(f"{name}.restore.w", r.split("restore").normal((db, cr, 1, 1), INIT_STD))
        self.up = Linear(store, f"{name}.up", db, d, rng, bias=False)
        self.scale = scale

    def __call__(self, x: Tensor, grid: tuple[int, int]) -> Tensor:
        bsz, seq, d = x.shape
        rows, cols = grid
        n = rows * cols
        if seq != n + 1:
            raise ContractError(f"token count {seq} does not match grid {grid} plus class token")
        patches = x[:, :n]
        h = relu(self.down(patches))  # [B, n, db]
        h = reshape(transpose(h, (0, 2, 1)), (bsz, self.bottleneck, rows, cols))
        h = conv2d(h, self.k_reduce)
        h = concat([conv2d(h, self.k1), conv2d(h, self.k3), conv2d(h, self.k5)], axis=1)
        h = conv2d(h, self.k_restore)
        h = mul(h, self.scale)
        h = transpose(reshape(h, (bsz, self.bottleneck, n)), (0, 2, 1))
        h = self.up(h)  # [B, n, d]
        zero_cls = Tensor([[[0.0] * d]] * bsz)
        return concat([h, zero_cls], axis=1)


class TransformerBlock:
    """Pre-norm residual block; optional MFF branch in parallel with the MLP."""

    def __init__(self, store, name, d, heads, rng, mlp_ratio: int = 4, adapter: MffAdapter | None = None):
        self.name = name
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.mlp = FeedForward(store, f"{name}.mlp", d, mlp_ratio, rng)
        self.adapter = adapter

    def __call__(self, x: Tensor, grid=None, record: list | None = None, use_adapter: bool = True) -> Tensor:
        x1 = add(self.attn(self.ln1(x), record), x)
        h = self.ln2(x1)
        branch = self.mlp(h)
        if self.adapter is not None and use_adapter:
            if grid is None:
                raise ContractError("adapter path needs the token grid")
            branch = add(branch, self.adapter(h, grid))
        return add(branch, x1)
