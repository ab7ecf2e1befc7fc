"""Detection task losses (objectness, localization, classification) and input gradients.

Reductions: losses are summed over the K predicted boxes of an image and averaged
over the batch. Every function accepts either a single raw grid (S, S, A, 5+C) with
one ``TargetAssignment`` or a batch (N, S, S, A, 5+C) with a list of them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .boxes import box_iou, iou  # noqa: F401  (re-exported)
from .datagen import GroundTruthSet
from .detector import DTYPE, DetectorConfig, DetectorModel, TargetAssignment, assign_targets, decode_boxes, forward

PROB_CLAMP = 1e-7


class LossSelector(str, enum.Enum):
    OBJ = "obj"
    LOC = "loc"
    CLS = "cls"
    TOTAL = "total"


@dataclass
class LossBreakdown:
    l_obj: torch.Tensor
    l_loc: torch.Tensor
    l_cls: torch.Tensor
    l_total: torch.Tensor
    obj_part: torch.Tensor
    noobj_part: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in vars(self).items()}


def _ciou_terms(pred: torch.Tensor, gt: torch.Tensor, alpha: torch.Tensor | None = None) -> torch.Tensor:
    overlap = box_iou(pred, gt)
    rho2 = (pred[..., 0] - gt[..., 0]) ** 2 + (pred[..., 1] - gt[..., 1]) ** 2
    ex0 = torch.minimum(pred[..., 0] - pred[..., 2] / 2, gt[..., 0] - gt[..., 2] / 2)
    ey0 = torch.minimum(pred[..., 1] - pred[..., 3] / 2, gt[..., 1] - gt[..., 3] / 2)
    ex1 = torch.maximum(pred[..., 0] + pred[..., 2] / 2, gt[..., 0] + gt[..., 2] / 2)
    ey1 = torch.maximum(pred[..., 1] + pred[..., 3] / 2, gt[..., 1] + gt[..., 3] / 2)
    c2 = (ex1 - ex0) ** 2 + (ey1 - ey0) ** 2
    v = (4 / math.pi**2) * (torch.atan(gt[..., 2] / gt[..., 3]) - torch.atan(pred[..., 2] / pred[..., 3])) ** 2
    if alpha is None:
        alpha = ciou_alpha(overlap, v)
    return 1 - overlap + rho2 / c2 + alpha * v


def ciou_alpha(overlap: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Trade-off weight ``v / ((1 - IoU) + v)``, detached from the graph."""
    with torch.no_grad():
        denom = (1 - overlap) + v
        return torch.where(v > 0, v / torch.where(denom > 0, denom, torch.ones_like(denom)), torch.zeros_like(v))


def ciou_loss(pred, gt, alpha: torch.Tensor | None = None):
    """CIoU loss ``1 - IoU + rho^2 / c^2 + alpha * v`` for (cx, cy, w, h) boxes.

    Tensors of shape (..., 4) give an elementwise tensor result (alpha carries no
    gradient, and may be supplied to hold it fixed); plain sequences give a float.
    """
    if isinstance(pred, torch.Tensor):
        return _ciou_terms(pred, gt, alpha)
    p = torch.as_tensor(pred, dtype=DTYPE)
    g = torch.as_tensor(gt, dtype=DTYPE)
    if (p[2:] <= 0).any() or (g[2:] <= 0).any():
        raise ValueError("ciou_loss needs boxes with positive width and height")
    return float(_ciou_terms(p, g))


def _bce(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = prob.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(target * torch.log(p) + (1 - target) * torch.log(1 - p))


@dataclass
class _Targets:
    obj: torch.Tensor  # (N, S, S, A) float
    noobj: torch.Tensor
    boxes: torch.Tensor  # (N, S, S, A, 4)
    onehot: torch.Tensor  # (N, S, S, A, C)


def _batch(raw: torch.Tensor, asg) -> tuple[torch.Tensor, _Targets]:
    if isinstance(asg, TargetAssignment):
        asg = [asg]
        raw = raw.unsqueeze(0)
    if raw.shape[0] != len(asg):
        raise ValueError(f"{raw.shape[0]} predictions but {len(asg)} assignments")
    c = raw.shape[-1] - 5
    classes = torch.as_tensor(np.stack([a.classes for a in asg]))
    onehot = torch.zeros(*classes.shape, c, dtype=raw.dtype)
    onehot.scatter_(-1, classes.clamp(min=0).unsqueeze(-1), 1.0)
    targets = _Targets(
        obj=torch.as_tensor(np.stack([a.obj for a in asg]), dtype=raw.dtype),
        noobj=torch.as_tensor(np.stack([a.noobj for a in asg]), dtype=raw.dtype),
        boxes=torch.as_tensor(np.stack([a.boxes for a in asg]), dtype=raw.dtype),
        onehot=onehot,
    )
    return raw, targets


def _reduce(per_image: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return per_image.mean()
    if reduction == "sum":
        return per_image.sum()
    if reduction == "none":
        return per_image
    raise ValueError(f"unknown reduction {reduction!r}")


def _objectness_parts(raw, t: _Targets) -> tuple[torch.Tensor, torch.Tensor]:
    prob = torch.sigmoid(raw[..., 0])
    obj_part = (t.obj * _bce(prob, torch.ones_like(prob))).sum(dim=(1, 2, 3))
    noobj_part = (t.noobj * _bce(prob, torch.zeros_like(prob))).sum(dim=(1, 2, 3))
    return obj_part, noobj_part


def _localization(raw, t: _Targets, config: DetectorConfig) -> torch.Tensor:
    pred = decode_boxes(raw, config)
    mask = t.obj.bool()
    # Unmatched anchors get a dummy target so the CIoU stays finite; they are masked out.
    safe_gt = torch.where(mask.unsqueeze(-1), t.boxes, pred.detach())
    per_box = torch.where(mask, ciou_loss(pred, safe_gt), torch.zeros_like(t.obj))
    return per_box.sum(dim=(1, 2, 3))


def _classification(raw, t: _Targets) -> torch.Tensor:
    prob = torch.sigmoid(raw[..., 5:])
    return (t.obj.unsqueeze(-1) * _bce(prob, t.onehot)).sum(dim=(1, 2, 3, 4))


def objectness_loss(raw, asg, lambda_noobj: float, reduction: str = "mean") -> torch.Tensor:
    raw, t = _batch(raw, asg)
    obj_part, noobj_part = _objectness_parts(raw, t)
    return _reduce(obj_part + lambda_noobj * noobj_part, reduction)


def localization_loss(raw, asg, config: DetectorConfig, reduction: str = "mean") -> torch.Tensor:
    raw, t = _batch(raw, asg)
    return _reduce(_localization(raw, t, config), reduction)


def classification_loss(raw, asg, reduction: str = "mean") -> torch.Tensor:
    raw, t = _batch(raw, asg)
    return _reduce(_classification(raw, t), reduction)


def total_loss(raw, asg, config: DetectorConfig, reduction: str = "mean") -> LossBreakdown:
    raw, t = _batch(raw, asg)
    obj_part, noobj_part = _objectness_parts(raw, t)
    l_obj = obj_part + config.lambda_noobj * noobj_part
    l_loc = _localization(raw, t, config)
    l_cls = _classification(raw, t)
    return LossBreakdown(
        l_obj=_reduce(l_obj, reduction),
        l_loc=_reduce(l_loc, reduction),
        l_cls=_reduce(l_cls, reduction),
        l_total=_reduce(l_obj + l_loc + l_cls, reduction),
        obj_part=_reduce(obj_part, reduction),
        noobj_part=_reduce(noobj_part, reduction),
    )


def selected_loss(raw, asg, config: DetectorConfig, selector: LossSelector, reduction: str = "mean") -> torch.Tensor:
    selector = LossSelector(selector)
    if selector is LossSelector.OBJ:
        return objectness_loss(raw, asg, config.lambda_noobj, reduction)
    if selector is LossSelector.LOC:
        return localization_loss(raw, asg, config, reduction)
    if selector is LossSelector.CLS:
        return classification_loss(raw, asg, reduction)
    return total_loss(raw, asg, config, reduction).l_total


def is_degenerate(selector: LossSelector, asg: TargetAssignment) -> bool:
    """LOC and CLS losses are identically zero on scenes without matched objects."""
    return LossSelector(selector) in (LossSelector.LOC, LossSelector.CLS) and asg.num_objects == 0


def batch_input_gradient(model: DetectorModel, images: torch.Tensor, assignments: Sequence[TargetAssignment],
                         selector: LossSelector) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    """Per-image input gradients of the selected loss for an (N, H, W, 3) batch.

    Returns (gradients, per-image loss values, degenerate flags). Losses are summed
    over the batch before differentiation so each image receives exactly the
    gradient of its own loss.
    """
    x = images.detach().to(DTYPE).clone().requires_grad_(True)
    raw = forward(model.params, x, model.config)
    per_image = selected_loss(raw, list(assignments), model.config, selector, reduction="none")
    (grad,) = torch.autograd.grad(per_image.sum(), x)
    degenerate = np.array([is_degenerate(selector, a) for a in assignments], dtype=bool)
    if degenerate.any():
        grad[torch.as_tensor(degenerate)] = 0.0
    degenerate |= (grad.reshape(len(assignments), -1) == 0).all(dim=1).numpy()
    return grad, per_image.detach(), degenerate


def input_gradient(model: DetectorModel, image, gt: GroundTruthSet, selector: LossSelector) -> tuple[np.ndarray, bool]:
    """Exact gradient of the selected loss w.r.t. the pixels of one image, in [0, 255] units.

    Returns ``(gradient, degenerate)``; the flag is set (and the gradient zero) when the
    selected loss cannot depend on the image, e.g. LOC/CLS on an empty scene.
    """
    asg = assign_targets(gt, model.config)
    x = torch.as_tensor(np.asarray(image), dtype=DTYPE).unsqueeze(0)
    grad, _, degenerate = batch_input_gradient(model, x, [asg], selector)
    return grad[0].numpy(), bool(degenerate[0])
