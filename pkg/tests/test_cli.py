import csv

import numpy as np
import pytest

from regagg.aggregator import load_descriptors, save_descriptors
from regagg.cli import PAPER_CELL, main, max_workers, normalize_map, read_pgm, write_pgm
from regagg.config import RunConfig
from regagg.datagen import load_dataset, patch_mask
from regagg.errors import ConfigError
from regagg.model import PlaceModel

TINY_INI = """\
[backbone]
image_size = 16
patch_size = 4
embed_dim = 16
depth = 1
heads = 2

[aggregator]
clusters = 4
reduced_dim = 8
global_dim = 8
hidden = 16
registers = 2
encoder_layers = 1
encoder_heads = 2

[dataset]
n_places = 12
views_per_place = 4
val_places = 3
building_size = 3, 7
distractor_size = 2, 5
shift_jitter = 1

[train]
places_per_batch = 4
images_per_place = 2
epochs = 2
steps_per_epoch = 3
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """datagen -> train -> index (reference, query) with the tiny config."""
    root = tmp_path_factory.mktemp("cli")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    c = ["--config", str(ini)]
    assert main(["datagen", "--out", str(root / "data")] + c) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "train")] + c) == 0
    ckpt = str(root / "train" / "model.ragg")
    for split in ("reference", "query"):
        assert main(["index", "--checkpoint", ckpt, "--data", str(root / "data"), "--split", split,
                     "--out", str(root / "desc")]) == 0
    return root, c


def test_datagen_defaults(tmp_path, capsys):
    assert main(["datagen", "--out", str(tmp_path / "d")]) == 0
    ds = load_dataset(tmp_path / "d")
    assert len(ds) == 400 and ds.images.shape[1:] == (3, 32, 32)
    assert len(set(ds.place_ids)) == 50
    assert (tmp_path / "d" / "config.ini").exists()
    assert "wrote 400 views of 50 places" in capsys.readouterr().out


def test_datagen_refuses_then_forces(run, capsys):
    root, c = run
    data = root / "data"
    before = {p.name: p.read_bytes() for p in data.iterdir()}
    assert main(["datagen", "--out", str(data)] + c) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["datagen", "--out", str(data), "--force"] + c) == 0
    assert {p.name: p.read_bytes() for p in data.iterdir()} == before


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["datagen"])
    assert exc.value.code == 2


def test_unknown_override_exits_2(tmp_path, capsys):
    assert main(["datagen", "--out", str(tmp_path), "--set", "dataset.bogus=1"]) == 2
    assert "no key 'bogus'" in capsys.readouterr().err


def test_train_outputs(run):
    root, _ = run
    out = root / "train"
    log = (out / "metrics.log").read_text()
    epochs = [ln for ln in log.splitlines() if ln.startswith("kind=epoch")]
    assert len(epochs) == 2 and all("recall@1=" in ln for ln in epochs)
    assert sorted(p.name for p in out.glob("checkpoint_epoch*.ragg")) == ["checkpoint_epoch0.ragg",
                                                                         "checkpoint_epoch1.ragg"]
    cfg = RunConfig.resolve(out / "config.ini")
    assert cfg.backbone.embed_dim == 16 and cfg.train.steps_per_epoch == 3


def test_train_adapter_mode_gates_backbone(run, tmp_path):
    root, c = run
    out = tmp_path / "adapter"
    args = ["train", "--data", str(root / "data"), "--out", str(out), "--set", "backbone.fine_tune_mode=adapter",
            "--set", "train.epochs=1"] + c
    assert main(args) == 0
    cfg = RunConfig.resolve(out / "config.ini")
    init = PlaceModel(cfg.backbone, cfg.aggregator, cfg.train.seed)
    trained = PlaceModel(cfg.backbone, cfg.aggregator, cfg.train.seed)
    trained.load(out / "model.ragg")
    for name in init.store:
        same = np.array_equal(init.store[name].data, trained.store[name].data)
        if name.startswith("backbone.") and ".mff." not in name:
            assert same, name
    assert any(".mff." in n and not np.array_equal(init.store[n].data, trained.store[n].data) for n in init.store)


def test_train_resume_matches_uninterrupted(run, tmp_path, capsys):
    root, c = run
    data = str(root / "data")
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(["train", "--data", data, "--out", str(full)] + c) == 0
    assert main(["train", "--data", data, "--out", str(part), "--set", "train.epochs=1"] + c) == 0
    capsys.readouterr()
    assert main(["train", "--data", data, "--out", str(part), "--resume"] + c) == 0
    out = capsys.readouterr().out
    assert "at step 3" in out and "epoch=1 recall@1=" in out and "epoch=0" not in out
    for name in ("model.ragg", "checkpoint_epoch0.ragg", "checkpoint_epoch1.ragg"):
        assert (part / name).read_bytes() == (full / name).read_bytes(), name
    # the header records the interrupted run's epochs=1 override; the records must match
    body = [[ln for ln in (d / "metrics.log").read_text().splitlines() if not ln.startswith("#")] for d in (part, full)]
    assert body[0] == body[1]


def test_eval_prints_recall_table(run, capsys, tmp_path):
    root, _ = run
    d = root / "desc"
    args = ["eval", "--data", str(root / "data"), "--refs", str(d / "reference.rdsc"),
            "--queries", str(d / "query.rdsc"), "--out", str(tmp_path)]
    assert main(args) == 0
    out = capsys.readouterr().out
    for k in (1, 5, 10):
        assert f"recall@{k}=" in out
    head, values = (tmp_path / "recall.csv").read_text().splitlines()
    assert head == "recall@1,recall@5,recall@10"
    vals = [float(v) for v in values.split(",")]
    assert all(0 <= v <= 1 for v in vals) and vals == sorted(vals)


def test_query_prints_topk(run, capsys):
    root, _ = run
    d = root / "desc"
    qids, _ = load_descriptors(d / "query.rdsc")
    args = ["query", "--data", str(root / "data"), "--refs", str(d / "reference.rdsc"),
            "--queries", str(d / "query.rdsc"), "--id", qids[0], "-k", "3"]
    assert main(args) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == f"query {qids[0]}" and len(lines) == 4
    sims = [float(ln.split("\t")[2]) for ln in lines[1:]]
    assert sims == sorted(sims, reverse=True)


def test_eval_dimension_mismatch_exits_3(run, tmp_path, capsys):
    root, _ = run
    d = root / "desc"
    qids, q = load_descriptors(d / "query.rdsc")
    bad = tmp_path / "bad.rdsc"
    save_descriptors(bad, qids, np.tile(np.eye(5)[0], (len(qids), 1)))
    args = ["eval", "--data", str(root / "data"), "--refs", str(d / "reference.rdsc"), "--queries", str(bad)]
    assert main(args) == 3
    assert "length 5" in capsys.readouterr().err


def test_heatmap_exports(run, tmp_path):
    root, _ = run
    ds = load_dataset(root / "data")
    pick = ds.ids[5]
    args = ["heatmap", "--checkpoint", str(root / "train" / "model.ragg"), "--data", str(root / "data"),
            "--id", pick, "--out", str(tmp_path)]
    assert main(args) == 0
    for name in ("register_attention", "feature_mean"):
        grid = read_pgm(tmp_path / f"{pick}_{name}.pgm")
        assert grid.shape == (4, 4)
        assert grid.min() >= 0.0 and grid.max() <= 1.0
    mask = read_pgm(tmp_path / f"{pick}_distractor_mask.pgm")
    assert np.array_equal(mask.reshape(-1) > 0.5, patch_mask(ds.masks[5], 4))


def test_pgm_round_trip(tmp_path):
    grid = np.arange(6, dtype=float).reshape(2, 3) / 5
    write_pgm(tmp_path / "g.pgm", grid)
    assert (tmp_path / "g.pgm").read_text().startswith("P2\n3 2\n255\n")
    assert np.allclose(read_pgm(tmp_path / "g.pgm"), grid, atol=0.5 / 255)
    assert np.array_equal(normalize_map(np.full(4, 3.0)), np.zeros(4))


def test_ablate_small_grid_and_resume(run, tmp_path, capsys):
    root, c = run
    base = ["ablate", "--data", str(root / "data"), "--out", str(tmp_path), "--layers", "1",
            "--set", "train.epochs=1"] + c
    assert main(base + ["--registers", "1"]) == 0
    assert main(base + ["--registers", "1", "4"]) == 0
    assert "1 grid points done, 1 to run" in capsys.readouterr().out
    with (tmp_path / "ablation.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["registers", "layers", "recall@1", "recall@5", "recall@10", "paper_default"]
    assert [r[:2] for r in rows[1:]] == [["1", "1"], ["4", "1"]]
    for r in rows[1:]:
        vals = [float(v) for v in r[2:5]]
        assert all(0 <= v <= 1 for v in vals) and vals == sorted(vals)
        assert r[5] == str((int(r[0]), int(r[1])) == PAPER_CELL).lower()


def test_run_config_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nlr = 0.01\nepochs = 2\n")
    cfg = RunConfig.resolve(ini, ["train.epochs=3"], seed=9)
    assert cfg.train.lr == 0.01 and cfg.train.epochs == 3
    assert cfg.train.seed == 9 and cfg.dataset.seed == 9
    again = RunConfig.resolve(cfg.save(tmp_path / "out"))
    assert again == cfg


@pytest.mark.parametrize("bad", [["train.nope=1"], ["nosection.x=1"], ["train.epochs"], ["train.lr=fast"]])
def test_run_config_errors(bad):
    with pytest.raises(ConfigError):
        RunConfig.resolve(None, bad)


def test_max_workers(monkeypatch):
    monkeypatch.setenv("REGAGG_THREADS", "1")
    assert max_workers() == 1
    monkeypatch.setenv("REGAGG_THREADS", "lots")
    with pytest.raises(ConfigError):
        max_workers()
