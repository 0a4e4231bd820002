"""``regagg`` command-line entry point.

Commands: datagen, train, index, query, eval, ablate, heatmap.  Every command
writes the resolved ``config.ini`` next to its outputs.  Exit codes: 0 ok,
2 usage/config, 3 data, 4 numeric, 5 contract.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .aggregator import load_descriptors, save_descriptors
from .backbone import TokenBatch, load_tokens
from .config import CONFIG_NAME, RunConfig
from .datagen import generate, load_dataset, patch_mask, save_dataset
from .errors import ConfigError, ContractError, DatasetError, IngestionError, RegAggError
from .model import PlaceModel
from .numerics import Tensor, no_grad
from .retrieval import build_index, query_topk, recall_at_k
from .training import evaluate, train

log = logging.getLogger("regagg")

ABLATE_REGISTERS = (1, 2, 4, 8, 16)
ABLATE_LAYERS = (1, 2, 3)
PAPER_CELL = (4, 2)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _prepare_out(out: Path, force: bool, marker: str) -> None:
    """Refuse to clobber ``out`` if it already holds ``marker`` unless forced."""
    if (out / marker).exists():
        if not force:
            raise ConfigError(f"{out} already contains {marker}; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _run_config(args, config_path=None) -> RunConfig:
    path = args.config if args.config is not None else config_path
    return RunConfig.resolve(path, args.set, args.seed)


def _config_beside(checkpoint) -> Path | None:
    cand = Path(checkpoint).parent / CONFIG_NAME
    return cand if cand.exists() else None


def _load_model(cfg: RunConfig, checkpoint) -> PlaceModel:
    model = PlaceModel(cfg.backbone, cfg.aggregator, cfg.train.seed)
    if checkpoint is not None:
        model.load(checkpoint)
    return model


def _latest_checkpoint(out: Path) -> Path | None:
    found = sorted(out.glob("checkpoint_epoch*.ragg"), key=lambda p: int(p.stem.removeprefix("checkpoint_epoch")))
    return found[-1] if found else None


def max_workers() -> int:
    raw = os.environ.get("REGAGG_THREADS", "")
    try:
        cap = int(raw) if raw else 1
    except ValueError:
        raise ConfigError(f"REGAGG_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, os.cpu_count() or 1))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_datagen(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    _prepare_out(out, args.force, "manifest.jsonl")
    ds = generate(cfg.dataset)
    save_dataset(ds, out)
    cfg.save(out)
    print(f"wrote {len(ds)} views of {cfg.dataset.n_places} places to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    ds = load_dataset(args.data)
    model = PlaceModel(cfg.backbone, cfg.aggregator, cfg.train.seed)
    if args.resume and _latest_checkpoint(out) is not None:
        ckpt = _latest_checkpoint(out)
        model.load(ckpt)
        print(f"resuming from {ckpt} at step {int(model.store.meta['step'])}")
    else:
        _prepare_out(out, args.force, "metrics.log")
    before = {n: model.store[n].data.copy() for n in model.store.names() if not model.store[n].requires_grad}
    result = train(ds, model, cfg.train, cfg.geo, out)
    model.save(out / "model.ragg")
    cfg.save(out)
    changed = [n for n, v in before.items() if not np.array_equal(v, model.store[n].data)]
    if changed:
        raise ContractError(f"frozen parameters changed during training: {changed[:5]}")
    for line in result_lines(result):
        print(line)
    return 0


def result_lines(result) -> list[str]:
    lines = [f"steps={result.steps}"]
    lines += [f"epoch={e} recall@1={r!r}" for e, r in enumerate(result.val_recall, result.first_epoch)]
    return lines


def _describe_split(cfg: RunConfig, model: PlaceModel, data_dir, split: str):
    ds = load_dataset(data_dir)
    idx = ds.indices(split)
    if len(idx) == 0:
        raise DatasetError(f"{data_dir}: no views in split {split!r}")
    return [ds.ids[i] for i in idx], model.describe_images(ds.images[idx], cfg.eval.chunk)


def cmd_index(args) -> int:
    cfg = _run_config(args, _config_beside(args.checkpoint))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = _load_model(cfg, args.checkpoint)
    if args.tokens is not None:
        batch = load_tokens(args.tokens)
        ids = batch.ids
        desc = model.describe_tokens(batch, cfg.eval.chunk)
    else:
        if args.data is None:
            raise ConfigError("index needs --data or --tokens")
        ids, desc = _describe_split(cfg, model, args.data, args.split)
    name = args.name or f"{args.split if args.tokens is None else Path(args.tokens).stem}.rdsc"
    save_descriptors(out / name, ids, desc)
    cfg.save(out)
    print(f"wrote {len(ids)} descriptors of length {desc.shape[1]} to {out / name}")
    return 0


def _index_from_files(data_dir, refs_path):
    ds = load_dataset(data_dir)
    ids, matrix = load_descriptors(refs_path)
    return ds, build_index(ids, _renorm(matrix), ds.records)


def _renorm(matrix: np.ndarray) -> np.ndarray:
    # descriptors are stored as f32; restore unit norm lost to rounding
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        bad = int(np.sum(np.abs(norms - 1.0) > 1e-5))
        raise IngestionError(f"{bad} stored descriptors are not unit-norm")
    return matrix / norms


def cmd_query(args) -> int:
    cfg = _run_config(args)
    _, index = _index_from_files(args.data, args.refs)
    qids, qmat = load_descriptors(args.queries)
    if qmat.shape[1] != index.dim:
        raise IngestionError(f"query descriptors have length {qmat.shape[1]}, references {index.dim}")
    qmat = _renorm(qmat)
    wanted = args.id or qids
    pos = {q: i for i, q in enumerate(qids)}
    k = args.k or cfg.eval.top_k
    for qid in wanted:
        if qid not in pos:
            raise IngestionError(f"query id {qid!r} not in {args.queries}")
        top = query_topk(index, qmat[pos[qid]], k)
        note = " (k clamped to index size)" if top.clamped else ""
        print(f"query {qid}{note}")
        for rank, (rid, sim) in enumerate(zip(top.ids, top.similarities), 1):
            print(f"  {rank}\t{rid}\t{sim:.6f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    ds, index = _index_from_files(args.data, args.refs)
    qids, qmat = load_descriptors(args.queries)
    if qmat.shape[1] != index.dim:
        raise IngestionError(f"query descriptors have length {qmat.shape[1]}, references {index.dim}")
    by_id = {r.id: r for r in ds.records}
    missing = [q for q in qids if q not in by_id]
    if missing:
        raise IngestionError(f"{len(missing)} query ids not in manifest: {missing[:5]}")
    coords = np.array([[by_id[q].x, by_id[q].y] for q in qids])
    report = recall_at_k(index, _renorm(qmat), coords, cfg.eval.ks, cfg.geo, qids, keep_per_query=cfg.eval.top_k)
    for line in report.lines():
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "recall.csv").write_text(report.table())
        (out / "report.txt").write_text("\n".join(report.lines()) + "\n")
        cfg.save(out)
    return 0


# -- ablation ------------------------------------------------------------------


def _ablate_cell(payload):
    cfg, data_dir, registers, layers = payload
    ds = load_dataset(data_dir)
    agg = dataclasses.replace(cfg.aggregator, registers=registers, encoder_layers=layers)
    model = PlaceModel(cfg.backbone, agg, cfg.train.seed)
    train(ds, model, cfg.train, cfg.geo, eval_every_epoch=False)
    report = evaluate(model, ds, cfg.eval.ks, cfg.geo, cfg.eval.reference_split, cfg.eval.query_split)
    return registers, layers, report.recall_at


def ablation_header(ks) -> list[str]:
    return ["registers", "layers"] + [f"recall@{k}" for k in ks] + ["paper_default"]


def read_ablation(path: Path, ks) -> dict[tuple[int, int], list[str]]:
    if not path.exists():
        return {}
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ablation_header(ks):
        raise DatasetError(f"{path}: header does not match the current eval ks; remove it or use --force")
    return {(int(r[0]), int(r[1])): r for r in rows[1:] if len(r) == len(rows[0])}


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    if args.force and out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out)
    ks = cfg.eval.ks
    table = out / "ablation.csv"
    done = read_ablation(table, ks)
    regs = tuple(args.registers) if args.registers else ABLATE_REGISTERS
    layers = tuple(args.layers) if args.layers else ABLATE_LAYERS
    todo = [(cfg, args.data, r, n) for r in regs for n in layers if (r, n) not in done]
    if todo:
        print(f"{len(done)} grid points done, {len(todo)} to run")

    def record(cell) -> None:
        r, n, recall = cell
        done[(r, n)] = [str(r), str(n)] + [f"{recall[k]:.6f}" for k in ks] + [str((r, n) == PAPER_CELL).lower()]
        write_ablation(table, ks, done)
        print(f"registers={r} layers={n} " + " ".join(f"recall@{k}={recall[k]:.4f}" for k in ks))

    workers = min(max_workers(), len(todo)) if todo else 1
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for cell in pool.map(_ablate_cell, todo):
                record(cell)
    else:
        for item in todo:
            record(_ablate_cell(item))
    write_ablation(table, ks, done)
    print(table.read_text(), end="")
    return 0


def write_ablation(path: Path, ks, done) -> None:
    tmp = path.with_suffix(".tmp")
    with tmp.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ablation_header(ks))
        for key in sorted(done):
            writer.writerow(done[key])
    tmp.replace(path)


# -- heatmaps ------------------------------------------------------------------


def normalize_map(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def write_pgm(path, grid: np.ndarray) -> None:
    """Plain (P2) graymap, maxval 255, from values in [0, 1]."""
    rows, cols = grid.shape
    pix = np.rint(np.clip(grid, 0.0, 1.0) * 255).astype(int)
    body = "\n".join(" ".join(str(v) for v in row) for row in pix)
    Path(path).write_text(f"P2\n{cols} {rows}\n255\n{body}\n", encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise DatasetError(f"{path}: not a plain PGM")
    cols, rows, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:], dtype=float).reshape(rows, cols) / maxval


def heatmaps(model: PlaceModel, tokens) -> dict[str, np.ndarray]:
    """Normalized ``[rows, cols]`` register-attention and feature maps for one image."""
    rows, cols = tokens.grid
    reg = model.aggregator.register_attention_map(tokens)[0]
    feat = model.aggregator.feature_map(tokens)[0]
    return {
        "register_attention": normalize_map(reg).reshape(rows, cols),
        "feature_mean": normalize_map(feat).reshape(rows, cols),
    }


def cmd_heatmap(args) -> int:
    cfg = _run_config(args, _config_beside(args.checkpoint))
    model = _load_model(cfg, args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = None
    if args.tokens is not None:
        batch = load_tokens(args.tokens)
        ids = batch.ids or []
        pick = args.id if args.id is not None else ids[0]
        if pick not in ids:
            raise IngestionError(f"id {pick!r} not in {args.tokens}")
        i = ids.index(pick)
        tokens = TokenBatch(Tensor(batch.tokens.data[i : i + 1]), batch.grid, [pick])
    else:
        if args.data is None:
            raise ConfigError("heatmap needs --data or --tokens")
        ds = load_dataset(args.data)
        ids = ds.ids
        pick = args.id if args.id is not None else ids[0]
        if pick not in ids:
            raise IngestionError(f"id {pick!r} not in {args.data}")
        i = ids.index(pick)
        with no_grad():
            tokens = model.tokens(ds.images[i : i + 1])
        mask = patch_mask(ds.masks[i], cfg.backbone.patch_size).reshape(tokens.grid)
    maps = heatmaps(model, tokens)
    for name, grid in maps.items():
        write_pgm(out / f"{pick}_{name}.pgm", grid)
    if mask is not None:
        write_pgm(out / f"{pick}_distractor_mask.pgm", mask.astype(np.float64))
    cfg.save(out)
    print(f"wrote heatmaps for {pick} ({tokens.grid[0]}x{tokens.grid[1]}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="overrides train.seed and dataset.seed")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="regagg", description="Register-assisted aggregation for place recognition")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", parents=[common], help="train backbone + aggregator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", parents=[common], help="write descriptors for a split or a token file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--tokens", help="precomputed token file (RTOK) instead of images")
    p.add_argument("--split", default="reference")
    p.add_argument("--name", help="output file name (default <split>.rdsc)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", parents=[common], help="print top-k references for queries")
    p.add_argument("--data", required=True, help="dataset directory (for the manifest)")
    p.add_argument("--refs", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--id", action="append", help="query id (repeatable; default all)")
    p.add_argument("-k", type=int)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common], help="recall@k of query descriptors against references")
    p.add_argument("--data", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="registers x encoder-layers sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--registers", type=int, nargs="+")
    p.add_argument("--layers", type=int, nargs="+")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("heatmap", parents=[common], help="export register-attention and feature maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--tokens")
    p.add_argument("--id")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except RegAggError as exc:
        print(f"regagg {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
