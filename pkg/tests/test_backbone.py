import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import optimizer_step, scramble, tiny_configs
from regagg.backbone import Backbone, BackboneConfig, TokenBatch, images_to_patches, load_tokens, save_tokens
from regagg.errors import ConfigError, ContractError, FormatError
from regagg.layers import MffAdapter, TransformerBlock, split_channels
from regagg.model import PlaceModel
from regagg.numerics import ParameterStore, Tensor, mul, tsum
from regagg.numerics.gradcheck import check_grads
from regagg.rng import Rng


def test_paper_patch_count():
    cfg = BackboneConfig.paper()
    assert cfg.n_patches == (224 // 14) ** 2 == 256
    assert cfg.grid == (16, 16)


def test_toy_patchify_shape(rng):
    cfg = BackboneConfig()
    bb = Backbone(cfg, ParameterStore(), Rng(0))
    batch = bb.patchify(rng.uniform(size=(2, 3, 32, 32)))
    assert batch.grid == (8, 8) and batch.n == 64
    assert batch.tokens.shape == (2, 65, 64)


def test_identical_images_identical_tokens(rng):
    bb = Backbone(BackboneConfig(), ParameterStore(), Rng(0))
    img = rng.uniform(size=(3, 32, 32))
    a, b = bb(np.stack([img, img])).tokens.data
    assert np.array_equal(a, b)


def test_patchify_rejects_wrong_size(rng):
    bb = Backbone(BackboneConfig(), ParameterStore(), Rng(0))
    with pytest.raises(ConfigError, match="expected images"):
        bb.patchify(rng.uniform(size=(1, 3, 28, 28)))


def test_images_to_patches_order():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    p = images_to_patches(img, 2)
    # patch (0, 1) covers rows 0-1, cols 2-3 of both channels
    assert np.array_equal(p[0, 1], [2, 3, 6, 7, 18, 19, 22, 23])


@pytest.mark.parametrize(
    "kw", [dict(image_size=30), dict(heads=5), dict(bottleneck_ratio=0.0), dict(bottleneck_ratio=1.5),
           dict(fine_tune_mode="bogus"), dict(depth=0), dict(pixel_std=0.0)]
)
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        BackboneConfig(**kw)


def test_mode_aliases():
    assert BackboneConfig(fine_tune_mode="adapter_only").fine_tune_mode == "adapter"
    assert BackboneConfig(fine_tune_mode="last_k_blocks").fine_tune_mode == "last_k"


# -- blocks ----------------------------------------------------------------------


def _block(d=16, heads=4, adapter_scale=None, seed=0):
    store = ParameterStore()
    rng = Rng(seed)
    adapter = None if adapter_scale is None else MffAdapter(store, "blk.mff", d, 0.5, adapter_scale, rng)
    return store, TransformerBlock(store, "blk", d, heads, rng, 4, adapter)


def test_zeroed_output_projections_give_identity(rng):
    store, blk = _block()
    for name in ("blk.attn.proj.w", "blk.attn.proj.b", "blk.mlp.fc2.w", "blk.mlp.fc2.b"):
        store[name].data[...] = 0.0
    x = rng.normal(size=(2, 10, 16))
    assert np.array_equal(blk(Tensor(x)).data, x)


def test_attention_rows_stochastic(rng):
    _, blk = _block()
    record = []
    blk(Tensor(rng.normal(size=(3, 10, 16))), record=record)
    (att,) = record
    assert att.shape == (3, 4, 10, 10)
    assert np.max(np.abs(att.data.sum(axis=-1) - 1.0)) <= 1e-12


def test_block_gradcheck(rng):
    store, blk = _block(d=8, heads=2)
    scramble(store)
    x = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
    probe = rng.normal(size=(2, 5, 8))
    params = [x] + [p for _, p in store.items()]
    assert check_grads(lambda: tsum(mul(blk(x), probe)), params) <= 1e-4


def test_zero_scale_adapter_is_bitwise_plain(rng):
    _, blk = _block(adapter_scale=0.0)
    x = Tensor(rng.normal(size=(2, 17, 16)))
    adapted = blk(x, grid=(4, 4)).data
    plain = blk(x, grid=(4, 4), use_adapter=False).data
    assert np.array_equal(adapted, plain)


def test_nonzero_adapter_changes_output(rng):
    store, blk = _block(adapter_scale=0.2)
    store["blk.mff.up.w"].data[...] = Rng(3).normal(store["blk.mff.up.w"].shape, 0.5)
    x = Tensor(rng.normal(size=(1, 17, 16)))
    assert not np.array_equal(blk(x, grid=(4, 4)).data, blk(x, grid=(4, 4), use_adapter=False).data)


def test_adapter_needs_grid(rng):
    _, blk = _block(adapter_scale=0.2)
    with pytest.raises(ContractError):
        blk(Tensor(rng.normal(size=(1, 17, 16))))


def test_adapter_class_token_gets_zero(rng):
    store = ParameterStore()
    mff = MffAdapter(store, "m", 16, 0.5, 0.2, Rng(0))
    out = mff(Tensor(rng.normal(size=(2, 10, 16))), (3, 3)).data
    assert np.array_equal(out[:, -1], np.zeros((2, 16)))
    assert np.any(out[:, :-1] != 0)


def test_paper_adapter_down_dim():
    store = ParameterStore()
    mff = MffAdapter(store, "m", 768, 0.5, 0.2, Rng(0))
    assert mff.bottleneck == 384
    assert store["m.down.w"].shape == (768, 384)
    assert store["m.up.w"].shape == (384, 768)
    assert store["m.b3.w"].shape[-1] == 3 and store["m.b5.w"].shape[-1] == 5


@pytest.mark.parametrize("total, split", [(9, (3, 3, 3)), (10, (4, 3, 3)), (11, (5, 3, 3)), (3, (1, 1, 1))])
def test_channel_split(total, split):
    assert split_channels(total) == split
    assert sum(split) == total


def test_adapter_gradcheck(rng):
    store = ParameterStore()
    mff = MffAdapter(store, "m", 8, 0.5, 0.7, Rng(1))
    scramble(store)
    x = Tensor(rng.normal(size=(2, 10, 8)), requires_grad=True)
    probe = rng.normal(size=(2, 10, 8))
    params = [x] + [p for _, p in store.items()]
    assert check_grads(lambda: tsum(mul(mff(x, (3, 3)), probe)), params) <= 1e-4


@settings(max_examples=15)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([4, 8, 12]), st.sampled_from([0.25, 0.5, 1.0]))
def test_adapted_block_preserves_shape(rows, cols, d, ratio):
    store = ParameterStore()
    rng = Rng(0)
    blk = TransformerBlock(store, "b", d, 2, rng, 2, MffAdapter(store, "b.mff", d, ratio, 0.2, rng))
    x = Tensor(np.ones((1, rows * cols + 1, d)))
    assert blk(x, grid=(rows, cols)).shape == x.shape


def test_toy_forward_finite(rng):
    bb = Backbone(BackboneConfig(), ParameterStore(), Rng(0))
    record = []
    out = bb(rng.uniform(size=(8, 3, 32, 32)), record=record)
    assert out.tokens.shape == (8, 65, 64)
    assert np.isfinite(out.tokens.data).all()
    assert len(record) == 2 and all(np.isfinite(a.data).all() for a in record)


# -- fine-tune gating ----------------------------------------------------------------


def _gating_run(mode, rng, steps=2):
    bb, agg = tiny_configs(backbone=dict(depth=2, fine_tune_mode=mode, train_last_k=1))
    model = PlaceModel(bb, agg, seed=0)
    before = model.store.snapshot()
    images = rng.uniform(size=(8, 3, 16, 16))
    ids = np.repeat(np.arange(4), 2)
    for _ in range(steps):
        optimizer_step(model, images, ids)
    changed = {n for n, v in before.items() if not np.array_equal(v, model.store[n].data)}
    return model, changed


def test_frozen_mode_gating(rng):
    model, changed = _gating_run("frozen", rng)
    assert not any(n.startswith("backbone.") for n in changed)
    assert any(n.startswith("agg.") for n in changed)


def test_adapter_mode_gating(rng):
    model, changed = _gating_run("adapter", rng)
    bb_changed = {n for n in changed if n.startswith("backbone.")}
    assert bb_changed and all(".mff." in n for n in bb_changed)
    assert any(n.startswith("agg.") for n in changed)
    assert set(model.store.trainable()) == {n for n in model.store if not n.startswith("backbone.") or ".mff." in n}


def test_last_k_mode_gating(rng):
    model, changed = _gating_run("last_k", rng)
    assert not any(n.startswith("backbone.blocks.0.") for n in changed)
    assert not any(n.startswith(("backbone.patch_embed", "backbone.pos", "backbone.cls")) for n in changed)
    assert any(n.startswith("backbone.blocks.1.") for n in changed)


def test_full_mode_trains_everything(rng):
    model, _ = _gating_run("full", rng, steps=0)
    assert model.store.trainable() == list(model.store)


# -- token files -----------------------------------------------------------------------


def test_token_round_trip(tmp_path, rng):
    data = rng.normal(size=(3, 17, 8)).astype(np.float32).astype(np.float64)
    path = tmp_path / "t.rtok"
    save_tokens(path, TokenBatch(Tensor(data), (4, 4)), ["a", "bé", "c"])
    back = load_tokens(path)
    assert back.grid == (4, 4) and back.ids == ["a", "bé", "c"]
    assert np.array_equal(back.tokens.data, data)
    assert not back.tokens.requires_grad
    save_tokens(tmp_path / "again.rtok", back)
    assert (tmp_path / "again.rtok").read_bytes() == path.read_bytes()


def test_token_truncated(tmp_path, rng):
    path = tmp_path / "t.rtok"
    save_tokens(path, TokenBatch(Tensor(rng.normal(size=(2, 5, 4))), (2, 2)))
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(FormatError, match=f"expected {len(blob)} bytes, got {len(blob) - 7}"):
        load_tokens(path)


def test_token_bad_magic(tmp_path):
    path = tmp_path / "t.rtok"
    path.write_bytes(b"NOPE" + bytes(24))
    with pytest.raises(FormatError, match="offset 0"):
        load_tokens(path)


def test_token_header_grid(tmp_path):
    # hand-built header: one image, n=256, d=768, grid 16x16
    n, d = 256, 768
    blob = b"RTOK" + struct.pack("<6I", 1, 1, n, d, 16, 16) + struct.pack("<H", 2) + b"x0"
    blob += np.zeros((n + 1) * d, dtype="<f4").tobytes()
    path = tmp_path / "big.rtok"
    path.write_bytes(blob)
    batch = load_tokens(path)
    assert batch.grid == (16, 16) and batch.n == 256 and batch.dim == 768
