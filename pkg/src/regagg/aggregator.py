"""Register-assisted aggregation of backbone tokens into a global descriptor.

Data flow for one image with n patch tokens and a class token::

    patches --score MLP--> [n, m] --sinkhorn--> plan [n, m]
    patches --reduce MLP--> [n, d_red] --(+R registers)--> encoder --> drop registers
    V = plan^T @ encoded                      [m, d_red]
    g = global MLP(class token)               [d_g]
    descriptor = l2(concat(flatten(l2_rows(V)), l2(g)))

The plan is computed from backbone tokens and is not recomputed after the
encoder.  Descriptor files::

    b"RDSC" u32 version u32 count u32 length
    count x { u16 id_len, id (UTF-8), length x little-endian f32 }
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import TokenBatch
from .errors import ConfigError, ContractError, DegenerateDescriptorError, DimensionError, FormatError
from .layers import INIT_STD, TransformerBlock, TwoLayerMLP
from .numerics import (
    ParameterStore,
    Tensor,
    concat,
    l2_normalize,
    matmul,
    no_grad,
    reshape,
    sinkhorn,
    swapaxes,
)
from .numerics.tensor import broadcast_to
from .rng import Rng


@dataclass
class AggregatorConfig:
    token_dim: int = 64
    clusters: int = 8
    reduced_dim: int = 16
    global_dim: int = 32
    hidden: int = 64
    registers: int = 4
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_mlp_ratio: int = 4
    sinkhorn_iters: int = 3
    sinkhorn_eps: float = 1.0
    dropout_rate: float = 0.3
    dustbin: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("token_dim", "clusters", "reduced_dim", "global_dim", "hidden", "encoder_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.registers < 0:
            raise ConfigError("registers must be >= 0 (0 ablates the register bank)")
        if self.encoder_heads < 1 or self.reduced_dim % self.encoder_heads:
            raise ConfigError(f"reduced_dim {self.reduced_dim} not divisible by encoder_heads {self.encoder_heads}")
        if self.sinkhorn_iters < 1 or self.sinkhorn_eps <= 0:
            raise ConfigError("sinkhorn needs iters >= 1 and eps > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def descriptor_dim(self) -> int:
        return self.clusters * self.reduced_dim + self.global_dim

    @classmethod
    def paper(cls, **overrides) -> "AggregatorConfig":
        base = dict(token_dim=768, clusters=64, reduced_dim=128, global_dim=256, hidden=512,
                    registers=4, encoder_layers=2, encoder_heads=4, dropout_rate=0.3)
        base.update(overrides)
        return cls(**base)


class Aggregator:
    def __init__(self, config: AggregatorConfig, store: ParameterStore, rng: Rng, prefix: str = "agg"):
        config.validate()
        self.config = config
        self.store = store
        self.prefix = prefix
        c = config
        r = rng.split(prefix)
        self.score = TwoLayerMLP(store, f"{prefix}.score", c.token_dim, c.hidden, c.clusters, r, c.dropout_rate)
        self.reduce = TwoLayerMLP(store, f"{prefix}.reduce", c.token_dim, c.hidden, c.reduced_dim, r, c.dropout_rate)
        self.glob = TwoLayerMLP(store, f"{prefix}.global", c.token_dim, c.hidden, c.global_dim, r)
        self.registers = (
            store.add(f"{prefix}.registers", r.split("registers").normal((c.registers, c.reduced_dim), INIT_STD),
                      decay=False)
            if c.registers > 0
            else None
        )
        self.encoder = [
            TransformerBlock(store, f"{prefix}.encoder.{i}", c.reduced_dim, c.encoder_heads, r, c.encoder_mlp_ratio)
            for i in range(c.encoder_layers)
        ]
        self.dustbin = store.add(f"{prefix}.dustbin", [1.0], decay=False) if c.dustbin else None

    # -- stages ---------------------------------------------------------------
    def _check_dim(self, x: Tensor) -> None:
        if x.shape[-1] != self.config.token_dim:
            raise DimensionError(f"aggregator expects token dim {self.config.token_dim}, got {x.shape[-1]}")

    def project_scores(self, patches: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        """Per-token cluster scores ``[B, n, m]``."""
        self._check_dim(patches)
        return self.score(patches, training, rng)

    def assign(self, scores: Tensor) -> Tensor:
        """Transport plan ``[B, n, m]`` with row mass 1/n and column mass 1/m."""
        c = self.config
        if self.dustbin is None:
            return sinkhorn(scores, c.sinkhorn_iters, c.sinkhorn_eps)
        bsz, n, m = scores.shape
        bin_col = reshape(broadcast_to(self.dustbin, (bsz * n,)), (bsz, n, 1))
        extended = concat([scores, bin_col], axis=2)
        mass = np.ones(m + 1)
        mass[m] = max(n - m, 1)
        plan = sinkhorn(extended, c.sinkhorn_iters, c.sinkhorn_eps, np.log(mass / mass.sum()))
        return plan[:, :, :m]

    def reduce_features(self, patches: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        self._check_dim(patches)
        return self.reduce(patches, training, rng)

    def project_global(self, class_token: Tensor) -> Tensor:
        self._check_dim(class_token)
        return self.glob(class_token)

    def encode_with_registers(self, features: Tensor, record: list | None = None, use_registers: bool = True):
        """Run the attention encoder over ``[features; registers]``.

        Returns ``(feature_outputs [B, n, d_red], register_outputs [B, R, d_red] or None)``.
        ``use_registers=False`` runs the same encoder without the bank.
        """
        c = self.config
        bsz, n, d = features.shape
        if d != c.reduced_dim:
            raise ConfigError(f"features have width {d}, registers expect {c.reduced_dim}")
        x = features
        with_bank = self.registers is not None and use_registers
        if with_bank:
            regs = reshape(broadcast_to(self.registers, (bsz, c.registers, d)), (bsz, c.registers, d))
            x = concat([features, regs], axis=1)
        for block in self.encoder:
            x = block(x, record=record)
        if not with_bank:
            return x, None
        return x[:, :n], x[:, n:]

    @staticmethod
    def pool(plan: Tensor, encoded: Tensor) -> Tensor:
        """``V = plan^T @ encoded`` -> ``[B, m, d_red]``."""
        if plan.shape[-2] != encoded.shape[-2]:
            raise ContractError(f"plan rows {plan.shape[-2]} != feature rows {encoded.shape[-2]}")
        return matmul(swapaxes(plan, -1, -2), encoded)

    @staticmethod
    def finalize(clusters: Tensor, g: Tensor) -> Tensor:
        """Intra-normalize clusters, normalize g, flatten, concat, normalize."""
        single = clusters.ndim == 2
        if single:
            clusters = reshape(clusters, (1,) + clusters.shape)
            g = reshape(g, (1,) + g.shape)
        bsz, m, dr = clusters.shape
        dead = (np.abs(clusters.data).reshape(bsz, -1).max(axis=1) == 0) & (np.abs(g.data).max(axis=1) == 0)
        if dead.any():
            raise DegenerateDescriptorError(f"all-zero descriptor input for batch rows {np.flatnonzero(dead).tolist()}")
        v = reshape(l2_normalize(clusters, axis=-1), (bsz, m * dr))
        out = l2_normalize(concat([v, l2_normalize(g, axis=-1)], axis=1), axis=-1)
        return reshape(out, (m * dr + g.shape[-1],)) if single else out

    # -- full pipeline ----------------------------------------------------------
    def describe(
        self,
        tokens: TokenBatch,
        training: bool = False,
        rng: Rng | None = None,
        record: list | None = None,
        register_hook=None,
        use_registers: bool = True,
    ) -> Tensor:
        """Descriptors ``[B, m*d_red + d_g]`` for a token batch.

        ``register_hook`` receives the register outputs after the encoder; it
        exists so tests can tamper with them and confirm they are unused.
        """
        patches = tokens.patches()
        plan = self.assign(self.project_scores(patches, training, rng))
        feats, regs = self.encode_with_registers(self.reduce_features(patches, training, rng), record, use_registers)
        if register_hook is not None:
            register_hook(regs)
        clusters = self.pool(plan, feats)
        return self.finalize(clusters, self.project_global(tokens.class_token()))

    __call__ = describe

    def register_attention_map(self, tokens: TokenBatch) -> np.ndarray:
        """Mean (over layers and heads) attention mass each patch sends to the registers.

        Returns ``[B, n]`` with values in [0, 1]; zeros when there are no registers.
        """
        bsz, n = len(tokens), tokens.n
        if self.registers is None:
            return np.zeros((bsz, n))
        record: list[Tensor] = []
        with no_grad():
            self.encode_with_registers(self.reduce_features(tokens.patches()), record)
        mass = [att.data[:, :, :n, n:].sum(axis=-1).mean(axis=1) for att in record]
        return np.clip(np.mean(mass, axis=0), 0.0, 1.0)

    def feature_map(self, tokens: TokenBatch) -> np.ndarray:
        """Channel mean of the encoded patch features, ``[B, n]``."""
        with no_grad():
            feats, _ = self.encode_with_registers(self.reduce_features(tokens.patches()))
        return feats.data.mean(axis=-1)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (math.sqrt(a @ a) * math.sqrt(b @ b)))


# ---------------------------------------------------------------------------
# descriptor files
# ---------------------------------------------------------------------------

DESC_MAGIC = b"RDSC"
DESC_VERSION = 1


def save_descriptors(path, ids: list[str], values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2 or len(ids) != values.shape[0]:
        raise ContractError(f"{len(ids)} ids for descriptor matrix {values.shape}")
    parts = [DESC_MAGIC, struct.pack("<III", DESC_VERSION, values.shape[0], values.shape[1])]
    for ident, row in zip(ids, values):
        raw = ident.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(row.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_descriptors(path) -> tuple[list[str], np.ndarray]:
    """Return ids and an ``[N, D]`` f64 matrix (values exactly representable in f32)."""
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise FormatError(f"descriptor file truncated: expected at least 16 bytes, got {len(blob)}", len(blob))
    if blob[:4] != DESC_MAGIC:
        raise FormatError(f"bad descriptor magic {blob[:4]!r}", 0)
    version, count, length = struct.unpack_from("<III", blob, 4)
    if version != DESC_VERSION:
        raise FormatError(f"unsupported descriptor file version {version}", 4)
    pos = 16
    ids, rows = [], []
    for _ in range(count):
        if pos + 2 > len(blob):
            raise FormatError(f"descriptor file truncated: expected {pos + 2} bytes, got {len(blob)}", pos)
        (ilen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        end = pos + ilen + 4 * length
        if end > len(blob):
            raise FormatError(f"descriptor file truncated: expected {end} bytes, got {len(blob)}", pos)
        ids.append(blob[pos : pos + ilen].decode("utf-8"))
        pos += ilen
        rows.append(np.frombuffer(blob, dtype="<f4", count=length, offset=pos))
        pos += 4 * length
    if pos != len(blob):
        raise FormatError(f"descriptor file has {len(blob) - pos} trailing bytes", pos)
    matrix = np.stack(rows).astype(np.float64) if rows else np.zeros((0, length))
    return ids, matrix
