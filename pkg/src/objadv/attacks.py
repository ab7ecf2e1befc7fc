"""L-infinity bounded FGSM / PGD attacks sourced from a chosen task loss.

All images are in [0, 255] pixel units and the budget ``epsilon`` uses the same
units. Adversarial images stay continuous (no quantisation).
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .arrayio import write_array
from .datagen import Dataset, GroundTruthSet
from .detector import DTYPE, DetectorModel, TargetAssignment, assign_targets, forward
from .losses import LossSelector, batch_input_gradient, selected_loss

logger = logging.getLogger(__name__)


class AttackMethod(str, enum.Enum):
    FGSM = "FGSM"
    PGD = "PGD"


@dataclass(frozen=True)
class AttackSpec:
    selector: LossSelector
    method: AttackMethod
    epsilon: float
    step_size: float
    iterations: int = 1
    random_init: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "selector", LossSelector(self.selector))
        object.__setattr__(self, "method", AttackMethod(self.method))
        if not 0 <= self.epsilon <= 255:
            raise ValueError(f"epsilon must lie in [0, 255], got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.method is AttackMethod.FGSM:
            if self.iterations != 1 or self.step_size != self.epsilon:
                raise ValueError("FGSM takes exactly one step of size epsilon")
        elif self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @classmethod
    def fgsm(cls, selector, epsilon: float, random_init: bool = False, seed: int = 0) -> "AttackSpec":
        return cls(selector, AttackMethod.FGSM, epsilon, epsilon, 1, random_init, seed)

    @classmethod
    def pgd(cls, selector, epsilon: float, step_size: float = 1.0, iterations: int = 10,
            random_init: bool = False, seed: int = 0) -> "AttackSpec":
        return cls(selector, AttackMethod.PGD, epsilon, step_size, iterations, random_init, seed)

    @property
    def label(self) -> str:
        method = "FGSM" if self.method is AttackMethod.FGSM else f"PGD-{self.iterations}"
        return f"{method}/{self.selector.value}/eps={self.epsilon:g}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selector"] = self.selector.value
        d["method"] = self.method.value
        return d


@dataclass
class AdversarialExample:
    image: np.ndarray
    source_id: int
    spec: AttackSpec
    loss: float
    linf: float
    degenerate: bool = False


def project(x_adv, x_clean, epsilon: float):
    """Clamp into the epsilon ball around ``x_clean`` and then into [0, 255]."""
    if isinstance(x_adv, torch.Tensor):
        if x_adv.shape != x_clean.shape:
            raise ValueError(f"shape mismatch {tuple(x_adv.shape)} vs {tuple(x_clean.shape)}")
        out = torch.minimum(torch.maximum(x_adv, x_clean - epsilon), x_clean + epsilon)
        return out.clamp(0.0, 255.0)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if x_adv.shape != x_clean.shape:
        raise ValueError(f"shape mismatch {x_adv.shape} vs {x_clean.shape}")
    return np.clip(np.minimum(np.maximum(x_adv, x_clean - epsilon), x_clean + epsilon), 0.0, 255.0)


def _uniform_init(shape, epsilon: float, seeds: Sequence[int]) -> torch.Tensor:
    noise = []
    for s in seeds:
        gen = torch.Generator().manual_seed(int(s))
        noise.append((torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * epsilon)
    return torch.stack(noise)


def perturb(model: DetectorModel, images: torch.Tensor, assignments: Sequence[TargetAssignment],
            spec: AttackSpec, image_ids: Sequence[int] | None = None) -> tuple[torch.Tensor, np.ndarray]:
    """Attack an (N, H, W, 3) batch; returns (adversarial batch, degenerate flags).

    Random initialisation draws per-image noise seeded by ``spec.seed + image_id`` so
    results do not depend on how images are batched. Degenerate images (nothing for
    the selected loss to push on) are returned unchanged.
    """
    clean = images.detach().to(DTYPE)
    n = clean.shape[0]
    degenerate = np.zeros(n, dtype=bool)
    if spec.epsilon == 0:
        return clean.clone(), degenerate
    ids = list(range(n)) if image_ids is None else list(image_ids)
    x = clean.clone()
    if spec.random_init:
        x = project(x + _uniform_init(clean.shape[1:], spec.epsilon, [spec.seed + i for i in ids]), clean, spec.epsilon)
    for step in range(spec.iterations):
        grad, _, flags = batch_input_gradient(model, x, assignments, spec.selector)
        if step == 0:
            degenerate = flags
        x = project(x + spec.step_size * torch.sign(grad), clean, spec.epsilon)
    if degenerate.any():
        x[torch.as_tensor(degenerate)] = clean[torch.as_tensor(degenerate)]
    return x.detach(), degenerate


def _examples(model, clean, adv, assignments, spec, ids, degenerate) -> list[AdversarialExample]:
    with torch.no_grad():
        losses = selected_loss(forward(model.params, adv, model.config), list(assignments), model.config,
                               spec.selector, reduction="none")
    linf = (adv - clean).abs().reshape(len(ids), -1).amax(dim=1)
    return [
        AdversarialExample(adv[i].numpy(), ids[i], spec, float(losses[i]), float(linf[i]), bool(degenerate[i]))
        for i in range(len(ids))
    ]


def _single(model: DetectorModel, image, gt: GroundTruthSet, spec: AttackSpec, source_id: int) -> AdversarialExample:
    asg = assign_targets(gt, model.config)
    clean = torch.as_tensor(np.asarray(image), dtype=DTYPE).unsqueeze(0)
    adv, degenerate = perturb(model, clean, [asg], spec, [source_id])
    if degenerate[0]:
        logger.warning("degenerate %s attack on image %d: returning the clean image", spec.selector.value, source_id)
    return _examples(model, clean, adv, [asg], spec, [source_id], degenerate)[0]


def fgsm(model: DetectorModel, image, gt: GroundTruthSet, spec: AttackSpec, source_id: int = 0) -> AdversarialExample:
    if spec.method is not AttackMethod.FGSM:
        raise ValueError("fgsm() needs an FGSM spec")
    return _single(model, image, gt, spec, source_id)


def pgd(model: DetectorModel, image, gt: GroundTruthSet, spec: AttackSpec, source_id: int = 0) -> AdversarialExample:
    if spec.method is not AttackMethod.PGD:
        raise ValueError("pgd() needs a PGD spec")
    return _single(model, image, gt, spec, source_id)


def attack_batch(model: DetectorModel, dataset: Dataset, spec: AttackSpec, limit: int | None = None,
                 out_dir=None, batch_size: int = 32) -> tuple[list[AdversarialExample], dict]:
    """Attack the first ``limit`` images of a dataset, in order.

    When ``out_dir`` is given, each adversarial image is written as
    ``adv_<index>.f32`` (see ``arrayio``) and the summary as ``summary.json``.
    """
    n = len(dataset) if limit is None else min(limit, len(dataset))
    results: list[AdversarialExample] = []
    for start in range(0, n, batch_size):
        ids = list(range(start, min(start + batch_size, n)))
        clean = torch.as_tensor(np.stack([dataset.images[i] for i in ids]), dtype=DTYPE)
        asg = [assign_targets(dataset.targets[i], model.config) for i in ids]
        adv, degenerate = perturb(model, clean, asg, spec, ids)
        results.extend(_examples(model, clean, adv, asg, spec, ids, degenerate))
    summary = {
        "spec": spec.to_dict(),
        "count": n,
        "mean_loss": float(np.mean([r.loss for r in results])) if results else 0.0,
        "mean_linf": float(np.mean([r.linf for r in results])) if results else 0.0,
        "max_linf": float(max((r.linf for r in results), default=0.0)),
        "degenerate": int(sum(r.degenerate for r in results)),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in results:
            write_array(out / f"adv_{r.source_id:06d}.f32", r.image)
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return results, summary
