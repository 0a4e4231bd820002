"""Place-balanced metric learning with a multi-similarity loss and AdamW.

Every step derives its randomness from ``Rng(seed).split("step", k)``, so a
run resumed from the checkpoint written after step k continues exactly as the
uninterrupted run would.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .errors import ConfigError, DatasetError, LossError, NumericError
from .model import PlaceModel
from .numerics import Tensor, add, adamw_step, backward, exp, log, matmul, mul, swapaxes, tsum
from .retrieval import GeoLabelRule, build_index, recall_at_k
from .rng import Rng

log_ = logging.getLogger(__name__)

DECAY_POLICY = "weight matrices and conv kernels decay; biases, norms, embeddings, registers do not"


@dataclass
class TrainConfig:
    places_per_batch: int = 16
    images_per_place: int = 4
    lr: float = 8e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 4
    steps_per_epoch: int = 30
    ms_alpha: float = 2.0
    ms_beta: float = 50.0
    ms_base: float = 0.5
    miner_margin: float = 0.1
    clip_norm: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if self.places_per_batch < 2:
            raise ConfigError("places_per_batch must be >= 2")
        if self.images_per_place < 2:
            raise ConfigError("images_per_place must be >= 2 (the loss needs positives)")
        if self.lr <= 0 or self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("lr > 0, epochs >= 0 and steps_per_epoch >= 1 required")

    @property
    def batch_size(self) -> int:
        return self.places_per_batch * self.images_per_place


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_batch(place_ids: np.ndarray, config: TrainConfig, rng: Rng) -> np.ndarray:
    """Indices of ``P * images_per_place`` samples from P distinct places, shuffled."""
    place_ids = np.asarray(place_ids)
    places, counts = np.unique(place_ids, return_counts=True)
    usable = places[counts >= config.images_per_place]
    if len(usable) < config.places_per_batch:
        raise DatasetError(
            f"need {config.places_per_batch} places with >= {config.images_per_place} images, "
            f"have {len(usable)} (short by {config.places_per_batch - len(usable)})"
        )
    chosen = usable[rng.choice(len(usable), config.places_per_batch)]
    picks = []
    for p in chosen:
        members = np.flatnonzero(place_ids == p)
        picks.append(members[rng.choice(len(members), config.images_per_place)])
    batch = np.concatenate(picks)
    return batch[rng.permutation(len(batch))]


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

_MASKED = -1e4


def _soft_plus_sum(x: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise ``log(1 + sum_{mask} exp(x))``, stable for large x."""
    shift = np.maximum(0.0, np.where(mask, x.data, -np.inf).max(axis=1))
    z = exp(add(x, np.where(mask, -shift[:, None], _MASKED)))
    return add(log(add(tsum(z, axis=1), np.exp(-shift))), shift)


def mine_pairs(sim: np.ndarray, place_ids: np.ndarray, margin: float):
    """Multi-similarity mining: returns boolean (positive, negative) masks ``[B, B]``."""
    ids = np.asarray(place_ids)
    same = ids[:, None] == ids[None, :]
    pos = same & ~np.eye(len(ids), dtype=bool)
    neg = ~same
    hardest_neg = np.where(neg, sim, -np.inf).max(axis=1)
    hardest_pos = np.where(pos, sim, np.inf).min(axis=1)
    return pos & (sim < hardest_neg[:, None] + margin), neg & (sim > hardest_pos[:, None] - margin)


def multi_similarity_loss(
    descriptors: Tensor,
    place_ids,
    alpha: float = 2.0,
    beta: float = 50.0,
    base: float = 0.5,
    margin: float = 0.1,
) -> Tensor:
    """Mean over anchors with any mined pair of the two soft-plus terms."""
    ids = np.asarray(place_ids)
    if len(np.unique(ids)) < 2:
        raise LossError("multi-similarity loss needs at least two places in the batch")
    sim = matmul(descriptors, swapaxes(descriptors, 0, 1))
    mined_pos, mined_neg = mine_pairs(sim.data, ids, margin)
    active = mined_pos.any(axis=1) | mined_neg.any(axis=1)
    if not active.any():
        return mul(tsum(sim), 0.0)
    rows = np.flatnonzero(active)
    s = sim[rows]
    pos_term = mul(_soft_plus_sum(mul(add(s, -base), -alpha), mined_pos[rows]), 1.0 / alpha)
    neg_term = mul(_soft_plus_sum(mul(add(s, -base), beta), mined_neg[rows]), 1.0 / beta)
    return mul(tsum(add(pos_term, neg_term)), 1.0 / len(rows))


# ---------------------------------------------------------------------------
# evaluation helper
# ---------------------------------------------------------------------------


def evaluate(model: PlaceModel, dataset: Dataset, ks=(1, 5, 10), rule: GeoLabelRule = GeoLabelRule(),
             reference_split: str = "reference", query_split: str = "query"):
    ref = dataset.indices(reference_split)
    qry = dataset.indices(query_split)
    if len(ref) == 0 or len(qry) == 0:
        raise DatasetError(f"dataset has no {reference_split!r}/{query_split!r} views to evaluate")
    desc = model.describe_images(dataset.images[np.concatenate([ref, qry])])
    ids = dataset.ids
    index = build_index([ids[i] for i in ref], desc[: len(ref)], dataset.records)
    return recall_at_k(index, desc[len(ref):], dataset.coords[qry], ks, rule, [ids[i] for i in qry])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    steps: int
    losses: list[float] = field(default_factory=list)
    val_recall: list[float] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    first_epoch: int = 0  # nonzero when resumed


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def format_record(**fields) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())


def log_header(config: TrainConfig, model: PlaceModel) -> list[str]:
    lines = [f"# {k}={_fmt(v)}" for k, v in asdict(config).items()]
    lines.append(f"# weight_decay_policy={DECAY_POLICY}")
    lines.append(f"# fine_tune_mode={model.backbone.config.fine_tune_mode}")
    lines.append(f"# trainable_values={sum(model.store[n].size for n in model.store.trainable())}")
    return lines


def train(
    dataset: Dataset,
    model: PlaceModel,
    config: TrainConfig,
    rule: GeoLabelRule = GeoLabelRule(),
    out_dir=None,
    eval_every_epoch: bool = True,
    max_steps: int | None = None,
) -> TrainResult:
    """Run (or resume) training; resumes when ``model.store.meta`` holds a step count.

    Writes ``metrics.log`` and ``checkpoint_epoch{e}.ragg`` under ``out_dir``
    when given.  ``max_steps`` stops early (used to test resumption).
    """
    train_idx = dataset.indices("train")
    if len(train_idx) == 0:
        raise DatasetError("dataset has no training split")
    train_places = set(dataset.place_ids[train_idx].tolist())
    eval_places = set(dataset.place_ids[dataset.indices("reference", "query")].tolist())
    if train_places & eval_places:
        raise DatasetError(f"places overlap between train and evaluation splits: {sorted(train_places & eval_places)[:5]}")
    place_ids = dataset.place_ids[train_idx]
    store = model.store
    step = int(store.meta.get("step", np.asarray(0.0)))
    total = config.epochs * config.steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    log_path = out / "metrics.log" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if step == 0:
            log_path.write_text("\n".join(log_header(config, model)) + "\n")
    result = TrainResult(step, first_epoch=step // config.steps_per_epoch)
    root = Rng(config.seed)
    clip = config.clip_norm if config.clip_norm > 0 else None
    epoch_losses: list[float] = []

    def emit(line: str) -> None:
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(line + "\n")

    while step < total:
        if max_steps is not None and step >= max_steps:
            break
        epoch = step // config.steps_per_epoch
        rng = root.split("step", step)
        batch = train_idx[sample_batch(place_ids, config, rng.split("batch"))]
        store.zero_grad()
        desc = model(dataset.images[batch], training=True, rng=rng.split("dropout"))
        loss = multi_similarity_loss(desc, dataset.place_ids[batch], config.ms_alpha, config.ms_beta,
                                     config.ms_base, config.miner_margin)
        value = loss.item()
        if not math.isfinite(value):
            norms = {n: float(np.linalg.norm(p.data)) for n, p in store.items()}
            dump = ", ".join(f"{n}={v:.3g}" for n, v in norms.items())
            raise NumericError(f"non-finite loss at step {step}; parameter norms: {dump}")
        backward(loss)
        for name in store.trainable():
            p = store[name]
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        adamw_step(store, config.lr, config.betas, config.adam_eps, config.weight_decay, clip)
        step += 1
        store.meta["step"] = np.asarray(float(step))
        result.losses.append(value)
        epoch_losses.append(value)
        emit(format_record(kind="step", step=step, epoch=epoch, loss=value, lr=config.lr, **{"recall@1": float("nan")}))
        if step % config.steps_per_epoch == 0:
            r1 = float("nan")
            if eval_every_epoch and len(dataset.indices("query")):
                r1 = evaluate(model, dataset, (1,), rule).recall_at[1]
            result.val_recall.append(r1)
            mean_loss = float(np.mean(epoch_losses)) if epoch_losses else float("nan")
            epoch_losses = []
            emit(format_record(kind="epoch", step=step, epoch=epoch, loss=mean_loss, lr=config.lr, **{"recall@1": r1}))
            log_.info("epoch %d step %d loss %.4f recall@1 %.3f", epoch, step, mean_loss, r1)
            if out is not None:
                path = out / f"checkpoint_epoch{epoch}.ragg"
                model.save(path)
                result.checkpoints.append(str(path))
    result.steps = step
    return result
