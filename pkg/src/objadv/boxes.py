"""Box geometry shared by the detector, losses and evaluation. Boxes are (cx, cy, w, h)."""

from __future__ import annotations

import torch


def cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def xyxy_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0), dim=-1)


def box_iou(b1: torch.Tensor, b2: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of broadcastable (..., 4) box tensors."""
    a = cxcywh_to_xyxy(b1)
    b = cxcywh_to_xyxy(b2)
    iw = (torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    union = b1[..., 2] * b1[..., 3] + b2[..., 2] * b2[..., 3] - inter
    return inter / union


def iou(b1, b2) -> float:
    """IoU of two (cx, cy, w, h) boxes with positive extents."""
    t1 = torch.as_tensor(b1, dtype=torch.float64)
    t2 = torch.as_tensor(b2, dtype=torch.float64)
    if (t1[2:] <= 0).any() or (t2[2:] <= 0).any():
        raise ValueError("iou needs boxes with positive width and height")
    return float(box_iou(t1, t2))
