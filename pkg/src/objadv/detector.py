"""Tiny single-stage grid detector.

The network is a stack of stride-2 convolutions (SiLU activations, so input
gradients are smooth) ending in an S x S feature map, followed by a 1x1 head that
emits ``A * (5 + C)`` channels per cell: objectness logit, (tx, ty, tw, th) and C
class logits for each anchor.

Parameters are a plain ordered dict of float64 tensors so the same forward pass
serves training, attacks and gradient checks.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import box_iou
from .datagen import GroundTruthSet

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_VERSION = 1
MAX_LOG_SIZE = 4.0  # tw/th clamp before exp()


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 96
    grid_size: int = 6
    anchors: tuple[tuple[float, float], ...] = ((26.0, 14.0), (14.0, 26.0))
    num_classes: int = 3
    channels: tuple[int, ...] = (16, 32, 32, 64)
    kernels: tuple[int, ...] = (3, 3, 5, 5)
    lambda_noobj: float = 0.5

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def num_boxes(self) -> int:
        return self.grid_size * self.grid_size * self.num_anchors

    @property
    def stride(self) -> int:
        return self.input_size // self.grid_size

    @property
    def outputs_per_anchor(self) -> int:
        return 5 + self.num_classes

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not self.anchors or any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ValueError("anchor priors must be positive")
        if not 0.0 <= self.lambda_noobj <= 1.0:
            raise ValueError("lambda_noobj must lie in [0, 1]")
        if not self.channels:
            raise ValueError("the trunk needs at least one layer")
        if len(self.kernels) != len(self.channels) or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ValueError("need one odd kernel size per trunk layer")
        if self.grid_size * 2 ** len(self.channels) != self.input_size:
            raise ValueError(
                f"input_size {self.input_size} != grid_size {self.grid_size} * 2^{len(self.channels)}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchors"] = [list(a) for a in self.anchors]
        d["channels"] = list(self.channels)
        d["kernels"] = list(self.kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "anchors" in d:
            d["anchors"] = tuple(tuple(float(v) for v in a) for a in d["anchors"])
        for key in ("channels", "kernels"):
            if key in d:
                d[key] = tuple(int(c) for c in d[key])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class DetectorModel:
    config: DetectorConfig
    params: "OrderedDict[str, torch.Tensor]"


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    confidence: float


@dataclass
class TargetAssignment:
    """Per-anchor indicators for one image, indexed [row, col, anchor]."""

    obj: np.ndarray
    noobj: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    matches: list[tuple[int, int, int, int]] = field(default_factory=list)  # (gt index, row, col, anchor)
    dropped: int = 0

    @property
    def num_objects(self) -> int:
        return int(self.obj.sum())


def param_count(config: DetectorConfig) -> int:
    total, cin = 0, 3
    for cout, k in zip(config.channels, config.kernels):
        total += (cin * k * k + 1) * cout
        cin = cout
    return total + (cin + 1) * config.num_anchors * config.outputs_per_anchor


def init_params(config: DetectorConfig, seed: int) -> "OrderedDict[str, torch.Tensor]":
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases; objectness bias starts at -4."""
    config.validate()
    gen = torch.Generator().manual_seed(seed)
    params: OrderedDict[str, torch.Tensor] = OrderedDict()
    cin = 3
    for i, (cout, k) in enumerate(zip(config.channels, config.kernels)):
        bound = 1.0 / np.sqrt(cin * k * k)
        params[f"conv{i}.weight"] = (torch.rand(cout, cin, k, k, generator=gen, dtype=DTYPE) * 2 - 1) * bound
        params[f"conv{i}.bias"] = torch.zeros(cout, dtype=DTYPE)
        cin = cout
    nout = config.num_anchors * config.outputs_per_anchor
    bound = 1.0 / np.sqrt(cin)
    params["head.weight"] = (torch.rand(nout, cin, 1, 1, generator=gen, dtype=DTYPE) * 2 - 1) * bound
    bias = torch.zeros(config.num_anchors, config.outputs_per_anchor, dtype=DTYPE)
    bias[:, 0] = -4.0
    params["head.bias"] = bias.reshape(-1)
    return params


def as_image_tensor(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image.to(DTYPE)
    return torch.as_tensor(np.asarray(image), dtype=DTYPE)


def forward(params, image, config: DetectorConfig) -> torch.Tensor:
    """Raw predictions for an HxWx3 image (or NxHxWx3 batch) in [0, 255] pixel units.

    Returns a tensor shaped (S, S, A, 5 + C), or (N, S, S, A, 5 + C) for a batch.
    The result is differentiable with respect to ``image`` when it requires grad.
    """
    x = as_image_tensor(image)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected HxWx3 or NxHxWx3 image, got shape {tuple(x.shape)}")
    if x.shape[1] != config.input_size or x.shape[2] != config.input_size:
        raise ValueError(f"image is {x.shape[1]}x{x.shape[2]}, detector expects {config.input_size}")
    h = (x / 255.0).permute(0, 3, 1, 2).contiguous()
    for i, k in enumerate(config.kernels):
        h = F.silu(F.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=2, padding=k // 2))
    out = F.conv2d(h, params["head.weight"], params["head.bias"])
    n, _, s, _ = out.shape
    out = out.reshape(n, config.num_anchors, config.outputs_per_anchor, s, s).permute(0, 3, 4, 1, 2)
    return out[0] if single else out


def decode_boxes(raw: torch.Tensor, config: DetectorConfig) -> torch.Tensor:
    """Pixel-space (cx, cy, w, h) for every anchor of a raw grid (any leading batch dims)."""
    s = config.grid_size
    stride = float(config.stride)
    idx = torch.arange(s, dtype=raw.dtype)
    col = idx.view(1, s, 1)
    row = idx.view(s, 1, 1)
    anchors = torch.as_tensor(config.anchors, dtype=raw.dtype)
    cx = (col + torch.sigmoid(raw[..., 1])) * stride
    cy = (row + torch.sigmoid(raw[..., 2])) * stride
    w = anchors[:, 0] * torch.exp(raw[..., 3].clamp(max=MAX_LOG_SIZE))
    h = anchors[:, 1] * torch.exp(raw[..., 4].clamp(max=MAX_LOG_SIZE))
    return torch.stack((cx, cy, w, h), dim=-1)


def _shape_iou(w1, h1, w2, h2) -> float:
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def assign_targets(gt: GroundTruthSet, config: DetectorConfig) -> TargetAssignment:
    """Match each object to the best-shaped anchor of the cell holding its centre.

    A later object landing on an already-taken (cell, anchor) slot is dropped and
    counted in ``dropped``.
    """
    s, a = config.grid_size, config.num_anchors
    obj = np.zeros((s, s, a), dtype=bool)
    boxes = np.zeros((s, s, a, 4), dtype=np.float64)
    classes = np.full((s, s, a), -1, dtype=np.int64)
    matches = []
    dropped = 0
    for gi, g in enumerate(gt):
        cx, cy, w, h = g.box
        if w <= 0 or h <= 0 or cx - w / 2 < 0 or cy - h / 2 < 0 or cx + w / 2 > config.input_size \
                or cy + h / 2 > config.input_size:
            raise ValueError(f"ground-truth box {gi} is out of bounds: {g.box}")
        col = min(int(cx // config.stride), s - 1)
        row = min(int(cy // config.stride), s - 1)
        ious = [_shape_iou(w, h, aw, ah) for aw, ah in config.anchors]
        best = int(np.argmax(ious))
        if obj[row, col, best]:
            dropped += 1
            logger.debug("object %d collides at cell (%d, %d) anchor %d; dropped", gi, row, col, best)
            continue
        obj[row, col, best] = True
        boxes[row, col, best] = g.box
        classes[row, col, best] = g.class_id
        matches.append((gi, row, col, best))
    return TargetAssignment(obj, ~obj, boxes, classes, matches, dropped)


def decode(raw: torch.Tensor, config: DetectorConfig, conf_threshold: float) -> list[Detection]:
    """Detections of one image with confidence = sigmoid(obj) * max class probability >= threshold."""
    with torch.no_grad():
        raw = raw.detach().to(DTYPE)
        boxes = decode_boxes(raw, config).reshape(-1, 4)
        obj = torch.sigmoid(raw[..., 0]).reshape(-1)
        cls_prob = torch.sigmoid(raw[..., 5:]).reshape(-1, config.num_classes)
        best_prob, best_cls = cls_prob.max(dim=-1)
        conf = obj * best_prob
        size = float(config.input_size)
        x0 = (boxes[:, 0] - boxes[:, 2] / 2).clamp(0, size)
        y0 = (boxes[:, 1] - boxes[:, 3] / 2).clamp(0, size)
        x1 = (boxes[:, 0] + boxes[:, 2] / 2).clamp(0, size)
        y1 = (boxes[:, 1] + boxes[:, 3] / 2).clamp(0, size)
    dets = []
    for k in torch.nonzero(conf >= conf_threshold).flatten().tolist():
        w, h = float(x1[k] - x0[k]), float(y1[k] - y0[k])
        if w <= 0 or h <= 0:
            continue
        box = (float(x0[k]) + w / 2, float(y0[k]) + h / 2, w, h)
        dets.append(Detection(box, int(best_cls[k]), min(max(float(conf[k]), 0.0), 1.0)))
    return dets


def nms(dets: Sequence[Detection], iou_threshold: float = 0.45) -> list[Detection]:
    """Greedy per-class non-maximum suppression, output sorted by confidence (descending)."""
    kept: list[Detection] = []
    for cls_id in sorted({d.class_id for d in dets}):
        pool = sorted((d for d in dets if d.class_id == cls_id), key=lambda d: -d.confidence)
        if not pool:
            continue
        boxes = torch.tensor([d.box for d in pool], dtype=DTYPE)
        alive = torch.ones(len(pool), dtype=torch.bool)
        for i in range(len(pool)):
            if not alive[i]:
                continue
            kept.append(pool[i])
            overlaps = box_iou(boxes[i], boxes[i + 1:])
            alive[i + 1:] &= overlaps <= iou_threshold
    kept.sort(key=lambda d: -d.confidence)
    return kept


def detect(model: DetectorModel, image, conf_threshold: float = 0.005, iou_threshold: float = 0.45):
    with torch.no_grad():
        raw = forward(model.params, image, model.config)
    return nms(decode(raw, model.config, conf_threshold), iou_threshold)


def save_checkpoint(path, config: DetectorConfig, params, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": config.to_dict(),
            "config_hash": config.hash(),
            "params": OrderedDict((k, v.detach().clone()) for k, v in params.items()),
            "meta": meta or {},
        },
        path,
    )


def load_checkpoint(path, expected_config: DetectorConfig | None = None):
    """Returns (config, params, meta); refuses files whose embedded hash does not match."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for truncated files
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('format_version')}")
    config = DetectorConfig.from_dict(blob["config"])
    if config.hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: embedded config hash does not match its config")
    if expected_config is not None and expected_config.hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint was trained with a different detector config")
    params = OrderedDict(blob["params"])
    expected = init_params(config, 0)
    if list(expected) != list(params) or any(expected[k].shape != params[k].shape for k in expected):
        raise CheckpointError(f"{path}: parameter shapes do not match the config")
    return config, params, blob["meta"]
