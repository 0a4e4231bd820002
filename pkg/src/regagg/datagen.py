"""Deterministic synthetic place-recognition corpus.

Each place is a fixed skyline of coloured rectangles ("buildings") standing
on the horizon over a sky/road background.  Views of a place re-sample
everything that should not identify it: background tint, a crop shift, a
brightness change, pixel noise and wide, low rectangles in the road band
("vehicles") whose pixels are recorded in a per-view mask.  Images are
rounded to float32 so a dataset reloaded from disk is bit-identical to the
generated one.

Places sit on a square grid with spacing well over twice the negative radius;
views scatter inside a disk of diameter below the positive radius, so
same-place pairs are always positives and cross-place pairs always negatives.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, FormatError
from .rng import Rng

SPLITS = ("train", "val", "reference", "query")


@dataclass
class DatasetSpec:
    n_places: int = 50
    views_per_place: int = 8
    image_size: int = 32
    channels: int = 3
    buildings: tuple[int, int] = (4, 7)
    building_size: tuple[int, int] = (5, 14)
    distractor_fraction: float = 0.2
    distractor_size: tuple[int, int] = (4, 10)
    shift_jitter: int = 3
    brightness_jitter: float = 0.15
    background_jitter: float = 0.1
    noise_std: float = 0.03
    val_places: int = 10
    place_spacing: float = 60.0
    positive_radius: float = 10.0
    negative_radius: float = 25.0
    seed: int = 0

    def __post_init__(self):
        self.buildings = tuple(self.buildings)
        self.building_size = tuple(self.building_size)
        self.distractor_size = tuple(self.distractor_size)
        self.validate()

    def validate(self) -> None:
        if self.n_places < 2:
            raise ConfigError("need at least 2 places")
        if self.views_per_place < 2:
            raise ConfigError("need at least 2 views per place")
        for name in ("shift_jitter", "brightness_jitter", "background_jitter", "noise_std", "distractor_fraction"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.distractor_fraction >= 1:
            raise ConfigError("distractor_fraction must be < 1")
        if not 0 <= self.val_places < self.n_places:
            raise ConfigError("val_places must leave at least one training place")
        if self.positive_radius >= self.negative_radius:
            raise ConfigError("positive_radius must be < negative_radius")

    @property
    def view_radius(self) -> float:
        # pairwise spread < 2 * view_radius < positive_radius
        return 0.49 * self.positive_radius

    def check_separable(self) -> None:
        if self.place_spacing - 2 * self.view_radius <= self.negative_radius:
            raise DatasetError(
                f"place spacing {self.place_spacing} cannot keep different places beyond "
                f"{self.negative_radius} with view scatter {self.view_radius:.2f}"
            )


@dataclass
class Record:
    id: str
    place_id: int
    x: float
    y: float
    split: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    masks: np.ndarray  # [N, H, W] uint8, 1 = distractor pixel
    records: list[Record]
    spec: DatasetSpec | None = None

    def __len__(self) -> int:
        return len(self.records)

    def indices(self, *splits: str) -> np.ndarray:
        return np.array([i for i, r in enumerate(self.records) if r.split in splits], dtype=np.intp)

    @property
    def place_ids(self) -> np.ndarray:
        return np.array([r.place_id for r in self.records])

    @property
    def coords(self) -> np.ndarray:
        return np.array([[r.x, r.y] for r in self.records])

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


HORIZON = 0.6  # fraction of the canvas height above the road


def _horizon(size: int) -> int:
    return int(round(HORIZON * size))


def static_layout(spec: DatasetSpec, place: int) -> dict:
    """Buildings for a place; a pure function of (seed, place).

    Buildings stand on the horizon of the jitter canvas: ``(y, x, h, w)``
    rectangles with per-building colours.
    """
    rng = Rng(spec.seed).split("place", place, "layout")
    canvas = spec.image_size + 2 * spec.shift_jitter
    ground = _horizon(canvas)
    lo, hi = spec.building_size
    k = int(rng.integers(spec.buildings[0], spec.buildings[1] + 1))
    rects = []
    for _ in range(k):
        h = int(rng.integers(lo, min(hi, ground) + 1))
        w = int(rng.integers(lo, hi + 1))
        x = int(rng.integers(0, canvas - w + 1))
        rects.append((ground - h, x, h, w))
    colors = rng.uniform(0.0, 1.0, (k, spec.channels))
    return {"rects": rects, "colors": colors}


def _vehicle(rng: Rng, size: int, size_range: tuple[int, int]) -> tuple[int, int, int, int]:
    """A wide, low rectangle in the road band of a view."""
    lo, hi = size_range
    h = int(rng.integers(lo, max(lo, (lo + hi) // 2) + 1))
    w = int(rng.integers(min(lo + 2, hi), hi + 1))
    top = max(0, _horizon(size) - h // 2)
    y = int(rng.integers(top, max(top, size - h) + 1))
    x = int(rng.integers(0, size - w + 1))
    return y, x, h, w


def render_view(spec: DatasetSpec, place: int, view: int, distractors: bool = True, jitter: bool = True):
    """Return ``(image [C, H, W], mask [H, W] uint8)`` for one view."""
    layout = static_layout(spec, place)
    rng = Rng(spec.seed).split("place", place, "view", view)
    s, c, jit = spec.image_size, spec.channels, spec.shift_jitter
    canvas = s + 2 * jit

    # sky above the horizon, road below; tint varies per view
    sky = np.array([0.55, 0.7, 0.9][:c] + [0.7] * max(0, c - 3))
    road = np.array([0.35, 0.33, 0.3][:c] + [0.3] * max(0, c - 3))
    tint = rng.uniform(-spec.background_jitter, spec.background_jitter, 2 * c)
    if jitter:
        sky, road = sky + tint[:c], road + tint[c:]
    ground = _horizon(canvas)
    img = np.empty((canvas, canvas, c))
    img[:ground] = sky * np.linspace(1.0, 0.85, ground)[:, None, None]
    img[ground:] = road
    for (y, x, h, w), color in zip(layout["rects"], layout["colors"]):
        img[y : y + h, x : x + w] = color

    shift = rng.integers(-jit, jit + 1, 2)
    dy, dx = (int(v) for v in shift) if jitter else (0, 0)
    y0, x0 = jit + dy, jit + dx
    view_img = img[y0 : y0 + s, x0 : x0 + s].copy()

    mask = np.zeros((s, s), dtype=np.uint8)
    if distractors and spec.distractor_fraction > 0:
        target = spec.distractor_fraction
        for _ in range(64):
            covered = mask.mean()
            if covered >= target:
                break
            y, x, h, w = _vehicle(rng, s, spec.distractor_size)
            color = rng.uniform(0.0, 1.0, c)
            trial = mask.copy()
            trial[y : y + h, x : x + w] = 1
            # accept a vehicle only if it brings coverage closer to the target
            if abs(trial.mean() - target) > abs(covered - target):
                break
            view_img[y : y + h, x : x + w] = color
            mask = trial

    if jitter:
        gain = 1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
        bias = rng.uniform(-spec.brightness_jitter, spec.brightness_jitter) * 0.5
        view_img = view_img * gain + bias
        if spec.noise_std > 0:
            view_img = view_img + rng.normal(view_img.shape, spec.noise_std)
    return np.clip(view_img, 0.0, 1.0).transpose(2, 0, 1), mask


def place_center(spec: DatasetSpec, place: int) -> tuple[float, float]:
    side = math.ceil(math.sqrt(spec.n_places))
    return (place % side) * spec.place_spacing, (place // side) * spec.place_spacing


def generate(spec: DatasetSpec) -> Dataset:
    spec.validate()
    spec.check_separable()
    n = spec.n_places * spec.views_per_place
    images = np.zeros((n, spec.channels, spec.image_size, spec.image_size))
    masks = np.zeros((n, spec.image_size, spec.image_size), dtype=np.uint8)
    order = Rng(spec.seed).split("val-split").permutation(spec.n_places)
    val = set(int(p) for p in order[: spec.val_places])
    records = []
    half = spec.views_per_place // 2
    for place in range(spec.n_places):
        cx, cy = place_center(spec, place)
        for view in range(spec.views_per_place):
            i = place * spec.views_per_place + view
            images[i], masks[i] = render_view(spec, place, view)
            r = Rng(spec.seed).split("place", place, "coord", view)
            angle = r.uniform(0, 2 * math.pi)
            radius = spec.view_radius * math.sqrt(r.uniform(0, 1))
            if place in val:
                split = "reference" if view < half else "query"
            else:
                split = "train"
            records.append(
                Record(f"p{place:04d}_v{view:02d}", place, cx + radius * math.cos(angle),
                       cy + radius * math.sin(angle), split)
            )
    return Dataset(images.astype(np.float32).astype(np.float64), masks, records, spec)


def patch_mask(mask: np.ndarray, patch: int) -> np.ndarray:
    """Flag patches whose distractor coverage is strictly above 50%; row-major ``[n]``."""
    h, w = mask.shape
    cover = mask.reshape(h // patch, patch, w // patch, patch).astype(np.float64).mean(axis=(1, 3))
    return (cover > 0.5).reshape(-1)


# ---------------------------------------------------------------------------
# on-disk layout: images.rimg, masks.rmsk, manifest.jsonl
# ---------------------------------------------------------------------------

IMG_MAGIC = b"RIMG"
MASK_MAGIC = b"RMSK"
RAW_VERSION = 1


def _write_raw(path, magic: bytes, ids: list[str], arrays: np.ndarray, dtype: str) -> None:
    count = arrays.shape[0]
    shape = arrays.shape[1:]
    if len(shape) == 2:
        shape = (1,) + shape
    parts = [magic, struct.pack("<5I", RAW_VERSION, count, *shape)]
    for ident, arr in zip(ids, arrays):
        raw = ident.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(parts))


def _read_raw(path, magic: bytes, dtype: str):
    blob = Path(path).read_bytes()
    if len(blob) < 24:
        raise FormatError(f"{path}: truncated header ({len(blob)} bytes)", len(blob))
    if blob[:4] != magic:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}", 0)
    version, count, c, h, w = struct.unpack_from("<5I", blob, 4)
    if version != RAW_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    itemsize = np.dtype(dtype).itemsize
    per = c * h * w * itemsize
    pos = 24
    ids, arrays = [], []
    for _ in range(count):
        if pos + 2 > len(blob):
            raise FormatError(f"{path}: truncated, expected {pos + 2} bytes, got {len(blob)}", pos)
        (ilen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        if pos + ilen + per > len(blob):
            raise FormatError(f"{path}: truncated, expected {pos + ilen + per} bytes, got {len(blob)}", pos)
        ids.append(blob[pos : pos + ilen].decode("utf-8"))
        pos += ilen
        arrays.append(np.frombuffer(blob, dtype=dtype, count=c * h * w, offset=pos).reshape(c, h, w))
        pos += per
    return ids, (np.stack(arrays) if arrays else np.zeros((0, c, h, w), dtype=dtype))


def write_manifest(path, records: list[Record]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")


def read_manifest(path) -> list[Record]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = Record(str(obj["id"]), int(obj["place_id"]), float(obj["x"]), float(obj["y"]), str(obj["split"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
        if rec.split not in SPLITS:
            raise DatasetError(f"{path}:{lineno}: unknown split {rec.split!r}")
        records.append(rec)
    return records


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = ds.ids
    _write_raw(out / "images.rimg", IMG_MAGIC, ids, ds.images, "<f4")
    _write_raw(out / "masks.rmsk", MASK_MAGIC, ids, ds.masks, "u1")
    write_manifest(out / "manifest.jsonl", ds.records)


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "manifest.jsonl").exists():
        raise DatasetError(f"no dataset at {root} (manifest.jsonl missing)")
    records = read_manifest(root / "manifest.jsonl")
    img_ids, images = _read_raw(root / "images.rimg", IMG_MAGIC, "<f4")
    if img_ids != [r.id for r in records]:
        raise DatasetError(f"{root}: image ids do not match the manifest")
    masks = np.zeros((len(records),) + images.shape[2:], dtype=np.uint8)
    if (root / "masks.rmsk").exists():
        mask_ids, raw = _read_raw(root / "masks.rmsk", MASK_MAGIC, "u1")
        if mask_ids != img_ids:
            raise DatasetError(f"{root}: mask ids do not match the manifest")
        masks = raw[:, 0].copy()
    return Dataset(images.astype(np.float64), masks, records)
