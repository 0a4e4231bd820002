"""Backbone + aggregator sharing one parameter store."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .aggregator import Aggregator, AggregatorConfig
from .backbone import Backbone, BackboneConfig, TokenBatch
from .errors import ConfigError
from .numerics import ParameterStore, Tensor, no_grad
from .rng import Rng


class PlaceModel:
    def __init__(self, backbone: BackboneConfig, aggregator: AggregatorConfig, seed: int = 0):
        if aggregator.token_dim != backbone.embed_dim:
            raise ConfigError(
                f"aggregator token_dim {aggregator.token_dim} != backbone embed_dim {backbone.embed_dim}"
            )
        self.store = ParameterStore()
        rng = Rng(seed).split("init")
        self.backbone = Backbone(backbone, self.store, rng)
        self.aggregator = Aggregator(aggregator, self.store, rng)
        self.backbone.apply_fine_tune_mode()

    @property
    def descriptor_dim(self) -> int:
        return self.aggregator.config.descriptor_dim

    def tokens(self, images) -> TokenBatch:
        return self.backbone(images)

    def forward(self, images, training: bool = False, rng: Rng | None = None, **kw) -> Tensor:
        return self.aggregator.describe(self.backbone(images), training, rng, **kw)

    __call__ = forward

    def describe_images(self, images: np.ndarray, chunk: int = 64) -> np.ndarray:
        """Eval-mode descriptors ``[N, D]`` without recording a graph."""
        out = np.zeros((len(images), self.descriptor_dim))
        with no_grad():
            for start in range(0, len(images), chunk):
                out[start : start + chunk] = self.forward(images[start : start + chunk]).data
        return out

    def describe_tokens(self, tokens: TokenBatch, chunk: int = 64) -> np.ndarray:
        out = np.zeros((len(tokens), self.descriptor_dim))
        data = tokens.tokens.data
        with no_grad():
            for start in range(0, len(tokens), chunk):
                part = TokenBatch(Tensor(data[start : start + chunk]), tokens.grid)
                out[start : start + chunk] = self.aggregator.describe(part).data
        return out

    def save(self, path, with_state: bool = True) -> None:
        self.store.save(path, with_state)

    def load(self, path, strict: bool = True) -> None:
        self.store.load_values_from(ParameterStore.load(Path(path)), strict=strict)
        self.backbone.apply_fine_tune_mode()
