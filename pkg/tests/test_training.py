import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_configs
from regagg.datagen import Dataset, DatasetSpec, Record, generate
from regagg.errors import ConfigError, DatasetError, LossError, NumericError
from regagg.model import PlaceModel
from regagg.numerics import ParameterStore, Tensor, adamw_step, l2_normalize
from regagg.numerics.gradcheck import check_grads
from regagg.rng import Rng
from regagg import training
from regagg.training import TrainConfig, mine_pairs, multi_similarity_loss, sample_batch, train

TINY_SPEC = DatasetSpec(n_places=12, views_per_place=4, image_size=16, val_places=3, building_size=(3, 7),
                        distractor_size=(2, 5), shift_jitter=1)
TINY_TRAIN = TrainConfig(places_per_batch=4, images_per_place=2, epochs=2, steps_per_epoch=3, lr=1e-3)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate(TINY_SPEC)


def gram_vectors(gram):
    return np.linalg.cholesky(np.asarray(gram, dtype=float))


def ms_oracle(desc, ids, alpha=2.0, beta=50.0, base=0.5, margin=0.1):
    """Loop implementation of the mined multi-similarity loss."""
    sim = desc @ desc.T
    terms = []
    for i in range(len(ids)):
        pos = [sim[i, j] for j in range(len(ids)) if j != i and ids[j] == ids[i]]
        neg = [sim[i, j] for j in range(len(ids)) if ids[j] != ids[i]]
        hard_neg = max(neg) if neg else -math.inf
        easy_pos = min(pos) if pos else math.inf
        mp = [s for s in pos if s < hard_neg + margin]
        mn = [s for s in neg if s > easy_pos - margin]
        if not mp and not mn:
            continue
        lp = math.log1p(math.fsum(math.exp(-alpha * (s - base)) for s in mp)) / alpha
        ln = math.log1p(math.fsum(math.exp(beta * (s - base)) for s in mn)) / beta
        terms.append(lp + ln)
    return math.fsum(terms) / len(terms) if terms else 0.0


# -- loss ------------------------------------------------------------------------------


def test_ms_single_anchor_value():
    desc = gram_vectors([[1, 0.2, 0.8], [0.2, 1, 0.0], [0.8, 0.0, 1]])
    ids = [0, 0, 1]
    got = multi_similarity_loss(Tensor(desc), ids).item()
    # 0.5 ln(1 + e^0.6) + 0.02 ln(1 + e^15), the second term written as 15 + log1p(e^-15)
    expect = 0.5 * math.log1p(math.exp(0.6)) + 0.02 * (15.0 + math.log1p(math.exp(-15.0)))
    assert got == pytest.approx(expect, rel=1e-12)
    assert expect == pytest.approx(0.8187439814, rel=1e-9)


def test_ms_perfectly_separated_is_zero():
    v = np.array([1.0, 0.0])
    desc = np.stack([v, v, -v, -v])
    loss = multi_similarity_loss(Tensor(desc), [0, 0, 1, 1])
    pos, neg = mine_pairs(desc @ desc.T, np.array([0, 0, 1, 1]), 0.1)
    assert not pos.any() and not neg.any()
    assert loss.item() == 0.0


def test_ms_single_place_rejected():
    with pytest.raises(LossError):
        multi_similarity_loss(Tensor(np.eye(3)), [4, 4, 4])


def test_ms_gradcheck(rng):
    raw = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    ids = [0, 0, 1, 1, 2, 2]
    assert check_grads(lambda: multi_similarity_loss(l2_normalize(raw, axis=1), ids), [raw]) <= 1e-4


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.integers(2, 4), st.integers(2, 3))
def test_ms_matches_oracle_and_is_nonnegative(seed, places, per):
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(places), per)
    desc = rng.normal(size=(len(ids), 4))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    got = multi_similarity_loss(Tensor(desc), ids).item()
    assert got >= 0
    assert got == pytest.approx(ms_oracle(desc, ids), rel=1e-12, abs=1e-15)
    perm = rng.permutation(len(ids))
    assert multi_similarity_loss(Tensor(desc[perm]), ids[perm]).item() == pytest.approx(got, rel=1e-12, abs=1e-15)


def test_mined_sets_respect_labels(rng):
    ids = np.array([0, 0, 1, 1, 2])
    desc = rng.normal(size=(5, 3))
    pos, neg = mine_pairs(desc @ desc.T, ids, 0.1)
    same = ids[:, None] == ids[None, :]
    assert not (pos & ~same).any() and not (neg & same).any()
    assert not (pos & neg).any() and not np.diag(pos).any()


# -- sampler -------------------------------------------------------------------------------


def test_sampler_batch_shape_and_balance():
    ids = np.repeat(np.arange(40), 8)
    cfg = TrainConfig()
    batch = sample_batch(ids, cfg, Rng(0))
    assert len(batch) == 64 == cfg.batch_size
    places, counts = np.unique(ids[batch], return_counts=True)
    assert len(places) == 16 and set(counts) == {4}
    assert len(set(batch.tolist())) == 64


def test_sampler_deterministic():
    ids = np.repeat(np.arange(40), 8)
    a = [sample_batch(ids, TrainConfig(), Rng(3).split(k)) for k in range(3)]
    b = [sample_batch(ids, TrainConfig(), Rng(3).split(k)) for k in range(3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], a[1])


def test_sampler_shortfall_named():
    ids = np.concatenate([np.repeat(np.arange(10), 4), np.repeat(np.arange(10, 20), 3)])
    with pytest.raises(DatasetError, match="short by 6"):
        sample_batch(ids, TrainConfig(), Rng(0))


@pytest.mark.parametrize("kw", [dict(places_per_batch=1), dict(images_per_place=1), dict(lr=0.0)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# -- optimizer determinism --------------------------------------------------------------------


def test_adamw_two_stores_bit_identical():
    blobs = []
    for _ in range(2):
        s = ParameterStore()
        s.add("w", Rng(1).normal((3, 3)))
        s.add("b", np.zeros(3), decay=False)
        for k in range(10):
            for name, p in s.items():
                p.grad = Rng(2).split(name, k).normal(p.shape)
            adamw_step(s, 1e-2, weight_decay=0.05)
        blobs.append(s.to_bytes())
    assert blobs[0] == blobs[1]


# -- training loop ------------------------------------------------------------------------------


def _model(**bb):
    b, a = tiny_configs(backbone=bb)
    return PlaceModel(b, a, seed=0)


def test_train_writes_log_and_checkpoints(tiny_ds, tmp_path):
    model = _model()
    result = train(tiny_ds, model, TINY_TRAIN, out_dir=tmp_path)
    assert result.steps == 6 and len(result.losses) == 6 and len(result.val_recall) == 2
    assert [p.split("/")[-1] for p in result.checkpoints] == ["checkpoint_epoch0.ragg", "checkpoint_epoch1.ragg"]
    lines = (tmp_path / "metrics.log").read_text().splitlines()
    header = [ln for ln in lines if ln.startswith("#")]
    assert "# ms_alpha=2.0" in header and any(ln.startswith("# weight_decay_policy=") for ln in header)
    records = [dict(kv.split("=", 1) for kv in ln.split()) for ln in lines if not ln.startswith("#")]
    steps = [r for r in records if r["kind"] == "step"]
    epochs = [r for r in records if r["kind"] == "epoch"]
    assert len(steps) == 6 and len(epochs) == 2
    assert set(steps[0]) == {"kind", "step", "epoch", "loss", "lr", "recall@1"}
    assert all(0.0 <= float(r["recall@1"]) <= 1.0 for r in epochs)


def test_train_is_resumable(tiny_ds, tmp_path):
    full = _model()
    train(tiny_ds, full, TINY_TRAIN, out_dir=tmp_path / "full")

    part = _model()
    train(tiny_ds, part, TINY_TRAIN, out_dir=tmp_path / "part", max_steps=3)
    resumed = _model()
    resumed.load(tmp_path / "part" / "checkpoint_epoch0.ragg")
    assert int(resumed.store.meta["step"]) == 3
    train(tiny_ds, resumed, TINY_TRAIN, out_dir=tmp_path / "part")

    assert resumed.store.to_bytes() == full.store.to_bytes()
    assert (tmp_path / "part" / "metrics.log").read_bytes() == (tmp_path / "full" / "metrics.log").read_bytes()
    for name in ("checkpoint_epoch0.ragg", "checkpoint_epoch1.ragg"):
        assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_train_frozen_backbone_untouched(tiny_ds):
    model = _model(fine_tune_mode="frozen")
    before = {n: p.data.copy() for n, p in model.store.items() if n.startswith("backbone.")}
    train(tiny_ds, model, replace(TINY_TRAIN, epochs=1), eval_every_epoch=False)
    assert all(np.array_equal(v, model.store[n].data) for n, v in before.items())


def test_train_rejects_overlapping_splits(tiny_ds):
    records = list(tiny_ds.records)
    first_eval = next(i for i, r in enumerate(records) if r.split == "query")
    train_place = next(r.place_id for r in records if r.split == "train")
    r = records[first_eval]
    records[first_eval] = Record(r.id, train_place, r.x, r.y, r.split)
    bad = Dataset(tiny_ds.images, tiny_ds.masks, records)
    with pytest.raises(DatasetError, match="overlap"):
        train(bad, _model(), TINY_TRAIN)


def test_train_aborts_on_nan(tiny_ds, monkeypatch):
    def nan_loss(desc, *args):
        return Tensor._result(np.array(np.nan), (desc,), lambda g: (np.zeros_like(desc.data),), "nan")

    monkeypatch.setattr(training, "multi_similarity_loss", nan_loss)
    with pytest.raises(NumericError, match=r"step 0.*parameter norms: backbone\.patch_embed\.w="):
        train(tiny_ds, _model(), TINY_TRAIN)


def test_loss_decreases_on_tiny_problem(tiny_ds):
    model = _model()
    cfg = replace(TINY_TRAIN, epochs=1, steps_per_epoch=30, lr=3e-3)
    losses = train(tiny_ds, model, cfg, eval_every_epoch=False).losses
    assert np.mean(losses[-5:]) < np.mean(losses[:5])
