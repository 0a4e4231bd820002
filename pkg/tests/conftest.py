import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "regagg", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "regagg"))

# filled by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda ln: int(ln.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    from regagg.datagen import DatasetSpec

    return DatasetSpec(n_places=20, views_per_place=6, val_places=4)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    from regagg.datagen import generate

    return generate(small_spec)


@pytest.fixture(scope="session")
def default_dataset():
    from regagg.datagen import DatasetSpec, generate

    return generate(DatasetSpec())


def tiny_configs(backbone=None, **agg):
    """A fast model: 16 px images, one block, small heads."""
    from regagg.aggregator import AggregatorConfig
    from regagg.backbone import BackboneConfig

    bkw = dict(image_size=16, patch_size=4, embed_dim=16, depth=1, heads=2)
    bkw.update(backbone or {})
    kw = dict(token_dim=bkw["embed_dim"], clusters=4, reduced_dim=8, global_dim=8, hidden=16, registers=2,
              encoder_layers=1, encoder_heads=2)
    kw.update(agg)
    return BackboneConfig(**bkw), AggregatorConfig(**kw)


def optimizer_step(model, images, place_ids, lr=1e-2):
    """One loss/backward/AdamW step the way the trainer does it."""
    import numpy as np

    from regagg.numerics import adamw_step, backward
    from regagg.rng import Rng
    from regagg.training import multi_similarity_loss

    model.store.zero_grad()
    loss = multi_similarity_loss(model(images, training=True, rng=Rng(0)), place_ids)
    backward(loss)
    for name in model.store.trainable():
        p = model.store[name]
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adamw_step(model.store, lr, weight_decay=1e-4)
    return loss.item()


def scramble(store, std=0.3, seed=0):
    """Redraw every parameter at a scale where attention is far from uniform.

    At the 0.02 init, query/key gradients sit near 1e-6, below what central
    differences at h=1e-5 resolve, so gradient checks use this instead.
    """
    from regagg.rng import Rng

    r = Rng(seed).split("scramble")
    for i, (name, p) in enumerate(store.items()):
        noise = r.split(i).normal(p.shape, std)
        p.data = 1.0 + noise if name.endswith(".g") else noise


@pytest.fixture(scope="session")
def trained_toy(default_dataset):
    """Default toy model (4 registers, 2 encoder layers) after the default training run.

    Register influence grows over training (1 - cos between the with- and
    without-bank descriptors is ~3e-6 at init, ~2e-4 after 4 epochs), so
    the register tests need the full run, not a short one.
    """
    from regagg.aggregator import AggregatorConfig
    from regagg.backbone import BackboneConfig
    from regagg.model import PlaceModel
    from regagg.training import TrainConfig, train

    model = PlaceModel(BackboneConfig(), AggregatorConfig(), seed=0)
    train(default_dataset, model, TrainConfig(seed=0), eval_every_epoch=False)
    return model
