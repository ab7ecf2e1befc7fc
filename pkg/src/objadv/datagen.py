"""Seeded synthetic traffic-like scenes and their on-disk dataset format.

A dataset directory holds::

    manifest.json       generation seed, spec, hashes, one entry per item
    images/000000.png   lossless RGB images
    annotations.jsonl   one record per image: {"file": ..., "objects": [{class_id, cx, cy, w, h}, ...]}

Boxes are absolute pixels, (cx, cy, w, h), origin at the top-left corner.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image as PILImage

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_OVERLAP_IOU = 0.3
MAX_PLACEMENT_ATTEMPTS = 200


class GenerationError(RuntimeError):
    """The scene spec cannot be realised (objects do not fit)."""


class DatasetError(RuntimeError):
    """Base class for dataset persistence and loading failures."""


class PersistenceError(DatasetError):
    pass


class MissingFileError(DatasetError):
    pass


class CorruptAnnotationError(DatasetError):
    pass


class HashMismatchError(DatasetError):
    pass


@dataclass(frozen=True)
class Archetype:
    """Visual template for one object class."""

    name: str
    shape: str  # "rect" | "ellipse"
    color: tuple[int, int, int]
    aspect: tuple[float, float]  # range of w / h


DEFAULT_PALETTE: tuple[Archetype, ...] = (
    Archetype("car", "rect", (210, 40, 40), (1.5, 2.2)),
    Archetype("cyclist", "ellipse", (40, 190, 70), (0.8, 1.25)),
    Archetype("pedestrian", "rect", (50, 80, 220), (0.35, 0.6)),
)


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 96
    min_objects: int = 1
    max_objects: int = 3
    class_palette: tuple[Archetype, ...] = DEFAULT_PALETTE
    min_size: int = 14
    max_size: int = 34
    background: str = "gradient"

    @property
    def num_classes(self) -> int:
        return len(self.class_palette)

    def validate(self) -> None:
        if self.max_objects < 0 or self.min_objects < 0 or self.min_objects > self.max_objects:
            raise ValueError(f"bad object count range [{self.min_objects}, {self.max_objects}]")
        if not self.class_palette:
            raise ValueError("class_palette must hold at least one archetype")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError(f"bad object size range [{self.min_size}, {self.max_size}]")
        if self.max_size > self.image_size:
            raise ValueError("objects larger than the image")
        if self.background not in ("flat", "gradient", "noise"):
            raise ValueError(f"unknown background mode {self.background!r}")
        for arch in self.class_palette:
            if arch.shape not in ("rect", "ellipse"):
                raise ValueError(f"unknown shape {arch.shape!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_palette"] = [asdict(a) for a in self.class_palette]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "class_palette" in d:
            d["class_palette"] = tuple(
                Archetype(a["name"], a["shape"], tuple(a["color"]), tuple(a["aspect"]))
                for a in d["class_palette"]
            )
        return cls(**d)

    def hash(self) -> str:
        return _sha256(json.dumps(self.to_dict(), sort_keys=True).encode())


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    box: tuple[float, float, float, float]  # cx, cy, w, h


@dataclass(frozen=True)
class GroundTruthSet:
    items: tuple[GroundTruth, ...] = ()

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[GroundTruth]:
        return iter(self.items)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([g.box for g in self.items], dtype=np.float64).reshape(-1, 4)

    @property
    def classes(self) -> np.ndarray:
        return np.array([g.class_id for g in self.items], dtype=np.int64)

    def to_records(self) -> list[dict]:
        return [
            {"class_id": g.class_id, "cx": g.box[0], "cy": g.box[1], "w": g.box[2], "h": g.box[3]}
            for g in self.items
        ]

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "GroundTruthSet":
        return cls(tuple(
            GroundTruth(int(r["class_id"]), (float(r["cx"]), float(r["cy"]), float(r["w"]), float(r["h"])))
            for r in records
        ))


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def _shape_mask(shape: str, x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    if shape == "rect":
        return (xs >= x0) & (xs < x0 + w) & (ys >= y0) & (ys < y0 + h)
    # Ellipse inscribed in the cell rectangle, tested at pixel centres.
    cx, cy = x0 + w / 2.0, y0 + h / 2.0
    return ((xs + 0.5 - cx) / (w / 2.0)) ** 2 + ((ys + 0.5 - cy) / (h / 2.0)) ** 2 <= 1.0


def _mask_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, float(x1 - x0), float(y1 - y0))


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    base = rng.uniform(60, 150, size=3)
    img = np.broadcast_to(base, (n, n, 3)).astype(np.float64)
    if spec.background == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:n, 0:n] / (n - 1) - 0.5
        ramp = np.cos(theta) * xs + np.sin(theta) * ys
        img = img + rng.uniform(20, 60) * ramp[..., None]
    elif spec.background == "noise":
        img = img + rng.normal(0.0, 12.0, size=(n, n, 3))
    return img


def _draw(spec: SceneSpec, seed: int):
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.image_size
    img = _background(spec, rng)
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[tuple[int, int, int, int]] = []
    objects: list[tuple[int, np.ndarray]] = []
    for _ in range(count):
        cls_id = int(rng.integers(spec.num_classes))
        arch = spec.class_palette[cls_id]
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            long_side = int(rng.integers(spec.min_size, spec.max_size + 1))
            aspect = rng.uniform(*arch.aspect)
            if aspect >= 1:
                w, h = long_side, max(2, int(round(long_side / aspect)))
            else:
                w, h = max(2, int(round(long_side * aspect))), long_side
            x0 = int(rng.integers(0, n - w + 1))
            y0 = int(rng.integers(0, n - h + 1))
            rect = (x0, y0, x0 + w, y0 + h)
            if all(_box_iou(rect, other) <= MAX_OVERLAP_IOU for other in placed):
                break
        else:
            raise GenerationError(
                f"could not place object {len(placed) + 1}/{count} within "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts (seed {seed})"
            )
        placed.append(rect)
        mask = _shape_mask(arch.shape, x0, y0, w, h, n)
        color = np.clip(np.array(arch.color) + rng.integers(-20, 21, size=3), 0, 255)
        img[mask] = color
        objects.append((cls_id, mask))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, objects


def generate_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, GroundTruthSet]:
    """Render one scene; returns a uint8 HxWx3 image and its tight ground-truth boxes."""
    image, objects = _draw(spec, seed)
    gt = GroundTruthSet(tuple(GroundTruth(c, _mask_box(m)) for c, m in objects))
    return image, gt


def scene_masks(spec: SceneSpec, seed: int) -> list[tuple[int, np.ndarray]]:
    """Per-object (class_id, boolean mask) pairs exactly as rasterised by ``generate_scene``."""
    return _draw(spec, seed)[1]


@dataclass
class DatasetManifest:
    root: Path
    split: str
    seed: int
    spec_hash: str
    items: list[dict] = field(default_factory=list)
    annotations_sha256: str = ""

    @property
    def count(self) -> int:
        return len(self.items)


@dataclass
class Dataset:
    """In-memory dataset: uint8 images and their ground truth, in manifest order."""

    images: list[np.ndarray]
    targets: list[GroundTruthSet]
    spec: SceneSpec | None = None
    manifest: DatasetManifest | None = None

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[tuple[np.ndarray, GroundTruthSet]]:
        return iter(zip(self.images, self.targets))

    def __getitem__(self, idx: int) -> tuple[np.ndarray, GroundTruthSet]:
        return self.images[idx], self.targets[idx]

    @property
    def image_size(self) -> int:
        return self.images[0].shape[0] if self.images else (self.spec.image_size if self.spec else 0)

    def subset(self, limit: int | None) -> "Dataset":
        if limit is None:
            return self
        return Dataset(self.images[:limit], self.targets[:limit], self.spec, self.manifest)

    def stacked(self) -> np.ndarray:
        return np.ascontiguousarray(np.stack(self.images), dtype=np.float64)


def make_dataset(spec: SceneSpec, n_items: int, seed: int) -> Dataset:
    """Generate a dataset in memory without touching disk."""
    scenes = [generate_scene(spec, seed + i) for i in range(n_items)]
    return Dataset([s[0] for s in scenes], [s[1] for s in scenes], spec)


def generate_dataset(spec: SceneSpec, n_items: int, seed: int, out_path, split: str = "train") -> DatasetManifest:
    root = Path(out_path)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        lines = []
        items = []
        for i in range(n_items):
            image, gt = generate_scene(spec, seed + i)
            name = f"images/{i:06d}.png"
            PILImage.fromarray(image, mode="RGB").save(root / name, optimize=False)
            lines.append(json.dumps({"file": name, "objects": gt.to_records()}, sort_keys=True))
            items.append({"file": name, "seed": seed + i, "sha256": _sha256(image.tobytes())})
        ann = "".join(line + "\n" for line in lines).encode()
        (root / "annotations.jsonl").write_bytes(ann)
        manifest = DatasetManifest(root, split, seed, spec.hash(), items, _sha256(ann))
        doc = {
            "format_version": FORMAT_VERSION,
            "split": split,
            "seed": seed,
            "count": n_items,
            "spec": spec.to_dict(),
            "spec_hash": manifest.spec_hash,
            "annotations_sha256": manifest.annotations_sha256,
            "items": items,
        }
        (root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    except OSError as exc:
        raise PersistenceError(f"cannot write dataset to {root}: {exc}") from exc
    logger.info("wrote %d items to %s", n_items, root)
    return manifest


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"manifest not found: {mpath}")
    try:
        doc = json.loads(mpath.read_text())
        spec = SceneSpec.from_dict(doc["spec"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptAnnotationError(f"unreadable manifest {mpath}: {exc}") from exc
    if spec.hash() != doc["spec_hash"]:
        raise HashMismatchError(f"spec hash mismatch in {mpath}")

    apath = root / "annotations.jsonl"
    if not apath.exists():
        raise MissingFileError(f"annotations not found: {apath}")
    raw = apath.read_bytes()
    if _sha256(raw) != doc["annotations_sha256"]:
        raise HashMismatchError(f"annotations hash mismatch: {apath}")
    try:
        records = [json.loads(line) for line in raw.decode().splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise CorruptAnnotationError(f"corrupt annotation line in {apath}: {exc}") from exc
    if len(records) != doc["count"] or len(doc["items"]) != doc["count"]:
        raise CorruptAnnotationError(
            f"manifest lists {doc['count']} items but found {len(records)} annotations"
        )

    images, targets = [], []
    for idx, (item, rec) in enumerate(zip(doc["items"], records)):
        if rec.get("file") != item["file"]:
            raise CorruptAnnotationError(f"item {idx}: annotation file {rec.get('file')!r} != {item['file']!r}")
        ipath = root / item["file"]
        if not ipath.exists():
            raise MissingFileError(f"item {idx}: image file missing: {item['file']}")
        image = np.asarray(PILImage.open(ipath).convert("RGB"), dtype=np.uint8)
        if _sha256(image.tobytes()) != item["sha256"]:
            raise HashMismatchError(f"item {idx}: pixel hash mismatch for {item['file']}")
        try:
            gt = GroundTruthSet.from_records(rec["objects"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptAnnotationError(f"item {idx}: bad object record: {exc}") from exc
        images.append(image)
        targets.append(gt)

    manifest = DatasetManifest(root, doc["split"], doc["seed"], doc["spec_hash"], doc["items"],
                               doc["annotations_sha256"])
    return Dataset(images, targets, spec, manifest)
