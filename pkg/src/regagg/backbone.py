"""Toy ViT backbone with multi-scale feature fusion adapters, plus token I/O.

Token layout everywhere is ``[batch, n + 1, d]`` with the class (global) token
in the last slot.  Token files let tokens computed by an external foundation
model stand in for the toy backbone::

    b"RTOK" u32 version u32 count u32 n u32 d u32 rows u32 cols
    count x { u16 id_len, id (UTF-8), (n+1)*d little-endian f32 }
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .layers import INIT_STD, LayerNorm, Linear, MffAdapter, TransformerBlock
from .numerics import ParameterStore, Tensor, add, concat, reshape
from .numerics.tensor import broadcast_to
from .rng import Rng

FINE_TUNE_MODES = ("full", "frozen", "last_k", "adapter")
_MODE_ALIASES = {
    "last_k_blocks": "last_k",
    "adapter_only": "adapter",
    "global_adapter": "adapter",
}


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    adapter_enabled: bool = True
    adapter_scale: float = 0.2
    bottleneck_ratio: float = 0.5
    fine_tune_mode: str = "full"
    train_last_k: int = 1
    # fixed input standardization, (pixel - mean) / std, applied before patch embedding
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        self.fine_tune_mode = _MODE_ALIASES.get(self.fine_tune_mode, self.fine_tune_mode)
        self.validate()

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0.0 < self.bottleneck_ratio <= 1.0:
            raise ConfigError(f"bottleneck_ratio must be in (0, 1], got {self.bottleneck_ratio}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.fine_tune_mode not in FINE_TUNE_MODES:
            raise ConfigError(f"fine_tune_mode must be one of {FINE_TUNE_MODES}, got {self.fine_tune_mode!r}")
        if self.fine_tune_mode == "adapter" and not self.adapter_enabled:
            raise ConfigError("fine_tune_mode 'adapter' requires adapter_enabled")
        if self.train_last_k < 1:
            raise ConfigError("train_last_k must be >= 1")
        if self.pixel_std <= 0:
            raise ConfigError(f"pixel_std must be > 0, got {self.pixel_std}")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @property
    def n_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @classmethod
    def paper(cls, **overrides) -> "BackboneConfig":
        """ViT-B/14 at 224 px with the adapter settings used for the reported runs."""
        base = dict(image_size=224, patch_size=14, embed_dim=768, depth=12, heads=12,
                    adapter_scale=0.2, bottleneck_ratio=0.5, fine_tune_mode="adapter")
        base.update(overrides)
        return cls(**base)


@dataclass
class TokenBatch:
    tokens: Tensor
    grid: tuple[int, int]
    ids: list[str] | None = field(default=None)

    @property
    def n(self) -> int:
        return self.tokens.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def patches(self) -> Tensor:
        return self.tokens[:, : self.n]

    def class_token(self) -> Tensor:
        return self.tokens[:, self.n]


def images_to_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, n, C*p*p]`` in row-major patch order."""
    bsz, c, h, w = images.shape
    r, q = h // patch, w // patch
    x = images.reshape(bsz, c, r, patch, q, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(bsz, r * q, c * patch * patch)


class Backbone:
    def __init__(self, config: BackboneConfig, store: ParameterStore, rng: Rng, prefix: str = "backbone"):
        config.validate()
        self.config = config
        self.store = store
        self.prefix = prefix
        c = config
        d = c.embed_dim
        r = rng.split(prefix)
        self.patch_embed = Linear(store, f"{prefix}.patch_embed", c.channels * c.patch_size**2, d, r)
        self.cls = store.add(f"{prefix}.cls", r.split("cls").normal((d,), INIT_STD), decay=False)
        self.pos = store.add(f"{prefix}.pos", r.split("pos").normal((c.n_patches + 1, d), INIT_STD), decay=False)
        self.blocks = []
        for i in range(c.depth):
            name = f"{prefix}.blocks.{i}"
            adapter = (
                MffAdapter(store, f"{name}.mff", d, c.bottleneck_ratio, c.adapter_scale, r)
                if c.adapter_enabled
                else None
            )
            self.blocks.append(TransformerBlock(store, name, d, c.heads, r, c.mlp_ratio, adapter))
        self.norm = LayerNorm(store, f"{prefix}.norm", d)

    # -- forward -------------------------------------------------------------
    def patchify(self, images) -> TokenBatch:
        """Patch embeddings + appended class token + positional embeddings."""
        c = self.config
        data = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[1:] != (c.channels, c.image_size, c.image_size):
            raise ConfigError(
                f"expected images [B, {c.channels}, {c.image_size}, {c.image_size}], got {data.shape}"
            )
        bsz = data.shape[0]
        data = (data - c.pixel_mean) / c.pixel_std
        emb = self.patch_embed(Tensor(images_to_patches(data, c.patch_size)))
        cls = reshape(broadcast_to(self.cls, (bsz, c.embed_dim)), (bsz, 1, c.embed_dim))
        tokens = add(concat([emb, cls], axis=1), self.pos)
        return TokenBatch(tokens, c.grid)

    def forward(self, images, record: list | None = None, use_adapter: bool = True) -> TokenBatch:
        batch = self.patchify(images)
        x = batch.tokens
        for block in self.blocks:
            x = block(x, batch.grid, record, use_adapter)
        return TokenBatch(self.norm(x), batch.grid)

    __call__ = forward

    # -- fine-tune gating ----------------------------------------------------
    def is_trainable(self, name: str) -> bool:
        """Whether backbone parameter ``name`` trains under the configured regime."""
        c = self.config
        if not name.startswith(self.prefix + "."):
            return True
        mode = c.fine_tune_mode
        if mode == "full":
            return True
        if mode == "frozen":
            return False
        if mode == "adapter":
            return ".mff." in name
        first = max(0, c.depth - c.train_last_k)
        if name.startswith(f"{self.prefix}.norm."):
            return True
        for i in range(first, c.depth):
            if name.startswith(f"{self.prefix}.blocks.{i}."):
                return True
        return False

    def apply_fine_tune_mode(self) -> None:
        for name, p in self.store.items():
            if name.startswith(self.prefix + "."):
                p.requires_grad = self.is_trainable(name)


# ---------------------------------------------------------------------------
# token files
# ---------------------------------------------------------------------------

TOKEN_MAGIC = b"RTOK"
TOKEN_VERSION = 1


def save_tokens(path, batch: TokenBatch, ids: list[str] | None = None) -> None:
    data = batch.tokens.data
    count, seq, d = data.shape
    ids = ids if ids is not None else (batch.ids or [str(i) for i in range(count)])
    if len(ids) != count:
        raise ContractError(f"{len(ids)} ids for {count} token sets")
    rows, cols = batch.grid
    parts = [TOKEN_MAGIC, struct.pack("<6I", TOKEN_VERSION, count, seq - 1, d, rows, cols)]
    for i, ident in enumerate(ids):
        raw = ident.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(data[i].astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tokens(path) -> TokenBatch:
    blob = Path(path).read_bytes()
    header = 4 + 24
    if len(blob) < header:
        raise FormatError(f"token file truncated: expected at least {header} bytes, got {len(blob)}", len(blob))
    if blob[:4] != TOKEN_MAGIC:
        raise FormatError(f"bad token magic {blob[:4]!r}", 0)
    version, count, n, d, rows, cols = struct.unpack_from("<6I", blob, 4)
    if version != TOKEN_VERSION:
        raise FormatError(f"unsupported token file version {version}", 4)
    if rows * cols != n:
        raise FormatError(f"grid {rows}x{cols} does not match n={n}", 20)
    pos = header
    per = (n + 1) * d * 4
    ids, arrays = [], []
    for _ in range(count):
        if pos + 2 > len(blob):
            raise FormatError(f"token file truncated: expected {pos + 2} bytes, got {len(blob)}", pos)
        (ilen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        end = pos + ilen + per
        if end > len(blob):
            raise FormatError(f"token file truncated: expected {end} bytes, got {len(blob)}", pos)
        ids.append(blob[pos : pos + ilen].decode("utf-8"))
        pos += ilen
        arrays.append(np.frombuffer(blob, dtype="<f4", count=(n + 1) * d, offset=pos).reshape(n + 1, d))
        pos += per
    if pos != len(blob):
        raise FormatError(f"token file has {len(blob) - pos} trailing bytes", pos)
    data = np.stack(arrays).astype(np.float64) if arrays else np.zeros((0, n + 1, d))
    return TokenBatch(Tensor(data), (rows, cols), ids)
