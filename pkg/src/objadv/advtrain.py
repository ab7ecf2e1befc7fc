"""Standard and adversarial training of the grid detector.

Adversarial variants craft single-step FGSM examples (uniform random start in the
epsilon ball, then one signed step of size epsilon) against the current
parameters and minimise ``L(clean) + L(adversarial)`` on every step:

    STD  clean images only
    ALL  adversary from the total loss
    LOC / CLS / OBJ  adversary from one task loss
    MTD  per image, the loc- or cls-sourced adversary with the larger total loss
    OA   per image, the obj-, loc- or cls-sourced adversary with the largest total loss
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attacks import AttackSpec, perturb
from .datagen import Dataset
from .detector import (
    DTYPE,
    DetectorConfig,
    DetectorModel,
    TargetAssignment,
    assign_targets,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .losses import LossSelector, total_loss

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, partial: dict | None = None):
        super().__init__(message)
        self.partial = partial or {}


class TrainingVariant(str, enum.Enum):
    STD = "STD"
    ALL = "ALL"
    MTD = "MTD"
    LOC = "LOC"
    CLS = "CLS"
    OBJ = "OBJ"
    OA = "OA"


# Candidate sources per variant, in tie-breaking order.
SOURCES: dict[TrainingVariant, tuple[LossSelector, ...]] = {
    TrainingVariant.ALL: (LossSelector.TOTAL,),
    TrainingVariant.MTD: (LossSelector.LOC, LossSelector.CLS),
    TrainingVariant.LOC: (LossSelector.LOC,),
    TrainingVariant.CLS: (LossSelector.CLS,),
    TrainingVariant.OBJ: (LossSelector.OBJ,),
    TrainingVariant.OA: (LossSelector.OBJ, LossSelector.LOC, LossSelector.CLS),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    epsilon: float = 4.0
    variant: TrainingVariant = TrainingVariant.STD
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", TrainingVariant(self.variant))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class TrainedModel(DetectorModel):
    variant: TrainingVariant = TrainingVariant.STD
    seed: int = 0
    train_config: TrainConfig | None = None
    history: list[dict] = field(default_factory=list)
    selection_log: list[dict] = field(default_factory=list)
    clean_map: float | None = None

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    @property
    def selection_violations(self) -> int:
        """Selections whose total loss is below some alternative candidate's."""
        return sum(
            1 for rec in self.selection_log
            if any(v > rec["candidates"][rec["chosen"]] for v in rec["candidates"].values())
        )

    def save(self, path) -> None:
        meta = {
            "variant": self.variant.value,
            "seed": self.seed,
            "train_config": self.train_config.to_dict() if self.train_config else None,
            "history": self.history,
            "clean_map": self.clean_map,
        }
        save_checkpoint(path, self.config, self.params, meta)

    @classmethod
    def load(cls, path, expected_config: DetectorConfig | None = None) -> "TrainedModel":
        config, params, meta = load_checkpoint(path, expected_config)
        tc = meta.get("train_config")
        return cls(
            config=config,
            params=params,
            variant=TrainingVariant(meta.get("variant", "STD")),
            seed=meta.get("seed", 0),
            train_config=TrainConfig(**tc) if tc else None,
            history=meta.get("history", []),
            clean_map=meta.get("clean_map"),
        )


def _step_seed(base: int, step: int) -> int:
    # Distinct random-start noise per optimisation step; image ids are added on top.
    return int.from_bytes(hashlib.sha256(f"{base}:{step}".encode()).digest()[:4], "little")


def craft_training_adversary(model: DetectorModel, images: torch.Tensor, assignments: Sequence[TargetAssignment],
                             variant: TrainingVariant, epsilon: float, seed: int,
                             image_ids: Sequence[int] | None = None):
    """Build the adversarial batch for one training step.

    Returns ``(adversarial images, chosen source per image, candidate total losses)``
    where the last item maps each candidate source to a per-image loss array.
    """
    variant = TrainingVariant(variant)
    if variant is TrainingVariant.STD:
        raise ValueError("STD training uses no adversary")
    sources = SOURCES[variant]
    candidates = []
    for sel in sources:
        spec = AttackSpec.fgsm(sel, epsilon, random_init=True, seed=seed)
        adv, _ = perturb(model, images, assignments, spec, image_ids)
        candidates.append(adv)
    if len(sources) == 1:
        with torch.no_grad():
            loss = total_loss(forward(model.params, candidates[0], model.config), list(assignments), model.config,
                              reduction="none").l_total.numpy()
        return candidates[0], [sources[0].value] * len(assignments), {sources[0].value: loss}
    with torch.no_grad():
        losses = np.stack([
            total_loss(forward(model.params, c, model.config), list(assignments), model.config,
                       reduction="none").l_total.numpy()
            for c in candidates
        ])
    choice = np.argmax(losses, axis=0)  # first maximum wins: fixed tie order
    stacked = torch.stack(candidates)
    adv = stacked[torch.as_tensor(choice), torch.arange(len(assignments))]
    return adv, [sources[c].value for c in choice], {s.value: losses[i] for i, s in enumerate(sources)}


def _check_finite(value: torch.Tensor, epoch: int, batch: int, parts: dict) -> None:
    if not math.isfinite(float(value.detach())):
        raise TrainingError(f"non-finite loss at epoch {epoch} batch {batch}: {parts}")


def _train(dataset: Dataset, config: TrainConfig, detector_config: DetectorConfig, loss_weight: float = 1.0,
           log_path=None) -> TrainedModel:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    detector_config.validate()
    params = init_params(detector_config, config.seed)
    for p in params.values():
        p.requires_grad_(True)
    opt = torch.optim.Adam(list(params.values()), lr=config.learning_rate)
    gen = torch.Generator().manual_seed(config.seed + 1)
    images = torch.as_tensor(dataset.stacked(), dtype=DTYPE)
    assignments = [assign_targets(gt, detector_config) for gt in dataset.targets]
    adversarial = config.variant is not TrainingVariant.STD
    history, selection_log = [], []
    step = 0
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            order = torch.randperm(len(dataset), generator=gen).tolist()
            sums = {"step_loss": 0.0, "l_obj": 0.0, "l_loc": 0.0, "l_cls": 0.0, "l_total": 0.0, "adv_total": 0.0}
            counts = {s.value: 0 for s in SOURCES.get(config.variant, ())}
            n_batches = 0
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start:start + config.batch_size]
                x = images[idx]
                asg = [assignments[i] for i in idx]
                clean = total_loss(forward(params, x, detector_config), asg, detector_config)
                loss = clean.l_total
                parts = clean.as_floats()
                if adversarial:
                    frozen = DetectorModel(detector_config, {k: v.detach() for k, v in params.items()})
                    x_adv, chosen, cand = craft_training_adversary(
                        frozen, x, asg, config.variant, config.epsilon, _step_seed(config.seed, step), idx)
                    adv = total_loss(forward(params, x_adv, detector_config), asg, detector_config)
                    loss = loss + adv.l_total
                    parts["adv_total"] = float(adv.l_total.detach())
                    for j, c in enumerate(chosen):
                        counts[c] += 1
                        selection_log.append({
                            "epoch": epoch, "step": step, "image": idx[j], "chosen": c,
                            "candidates": {k: float(v[j]) for k, v in cand.items()},
                        })
                else:
                    loss = loss_weight * loss
                _check_finite(loss, epoch, b, parts)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
                n_batches += 1
                sums["step_loss"] += float(loss.detach())
                for k in ("l_obj", "l_loc", "l_cls", "l_total", "adv_total"):
                    sums[k] += parts.get(k, 0.0)
            record = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}, "selection": counts}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            logger.info("epoch %d/%d %s total %.4f", epoch + 1, config.epochs, config.variant.value,
                        record["l_total"])
    finally:
        if log_fh:
            log_fh.close()
    final = {k: v.detach().clone() for k, v in params.items()}
    return TrainedModel(
        config=detector_config,
        params=type(params)(final),
        variant=config.variant,
        seed=config.seed,
        train_config=config,
        history=history,
        selection_log=selection_log,
    )


def train_standard(dataset: Dataset, config: TrainConfig, detector_config: DetectorConfig | None = None,
                   loss_weight: float = 1.0, log_path=None) -> TrainedModel:
    """Minimise the total detection loss on clean images."""
    config = replace(config, variant=TrainingVariant.STD)
    return _train(dataset, config, detector_config or DetectorConfig(), loss_weight, log_path)


def adversarial_train(dataset: Dataset, config: TrainConfig, detector_config: DetectorConfig | None = None,
                      log_path=None) -> TrainedModel:
    if config.variant is TrainingVariant.STD:
        raise ValueError("adversarial_train needs a non-STD variant")
    return _train(dataset, config, detector_config or DetectorConfig(), log_path=log_path)


def train_variant(dataset: Dataset, config: TrainConfig, detector_config: DetectorConfig | None = None,
                  log_path=None) -> TrainedModel:
    if config.variant is TrainingVariant.STD:
        return train_standard(dataset, config, detector_config, log_path=log_path)
    return adversarial_train(dataset, config, detector_config, log_path=log_path)


def train_all_variants(dataset: Dataset, config_base: TrainConfig, detector_config: DetectorConfig | None = None,
                       out_dir=None, variants: Sequence[TrainingVariant] = tuple(TrainingVariant),
                       val_dataset: Dataset | None = None) -> dict[TrainingVariant, TrainedModel]:
    """Train every variant with the same seed and schedule; checkpoints go to ``out_dir``.

    On failure a ``TrainingError`` carries the models finished so far in ``partial``.
    """
    from .evalreport import evaluate

    models: dict[TrainingVariant, TrainedModel] = {}
    for variant in variants:
        variant = TrainingVariant(variant)
        cfg = replace(config_base, variant=variant)
        try:
            log_path = Path(out_dir) / f"train_{variant.value}.jsonl" if out_dir else None
            if log_path:
                log_path.parent.mkdir(parents=True, exist_ok=True)
            model = train_variant(dataset, cfg, detector_config, log_path=log_path)
        except Exception as exc:
            raise TrainingError(f"variant {variant.value} failed: {exc}", partial=models) from exc
        if val_dataset is not None:
            model.clean_map = evaluate(model, val_dataset).mAP
        if out_dir:
            model.save(Path(out_dir) / f"{variant.value}.pt")
        models[variant] = model
    return models
