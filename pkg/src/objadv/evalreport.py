"""mAP@0.5 evaluation, attack-degradation / defense tables and gradient-domain statistics."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .arrayio import write_array
from .attacks import AttackMethod, AttackSpec, perturb
from .boxes import box_iou
from .datagen import Dataset, GroundTruthSet
from .detector import DTYPE, Detection, DetectorModel, assign_targets, decode, forward, nms
from .losses import LossSelector, batch_input_gradient

logger = logging.getLogger(__name__)

PRE_NMS_THRESHOLD = 0.005
NMS_IOU = 0.45
FP_CONFIDENCE = 0.5

SOURCE_COLUMNS = {
    LossSelector.LOC: "A_loc",
    LossSelector.CLS: "A_cls",
    LossSelector.TOTAL: "A_obj+loc+cls",
    LossSelector.OBJ: "A_obj",
}


class EvaluationError(RuntimeError):
    pass


def match_detections(dets: Sequence[Detection], gt: GroundTruthSet, iou_threshold: float = 0.5) -> list[bool]:
    """True-positive flag for each detection of one image.

    Detections are visited by descending confidence; each claims the unmatched
    same-class ground truth it overlaps most, if that IoU reaches the threshold.
    """
    flags = [False] * len(dets)
    if not dets or not len(gt):
        return flags
    gt_boxes = torch.as_tensor(gt.boxes, dtype=DTYPE)
    gt_cls = gt.classes
    used = np.zeros(len(gt), dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    for i in order:
        d = dets[i]
        cand = np.nonzero((gt_cls == d.class_id) & ~used)[0]
        if cand.size == 0:
            continue
        ious = box_iou(torch.as_tensor(d.box, dtype=DTYPE), gt_boxes[cand]).numpy()
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            used[cand[best]] = True
            flags[i] = True
    return flags


def _all_point_ap(tp: np.ndarray, n_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _ap_from_flags(dets, flags, gts, class_id) -> float | None:
    n_gt = sum(int((g.classes == class_id).sum()) for g in gts)
    if n_gt == 0:
        return None
    scored = [
        (d.confidence, f)
        for img_dets, img_flags in zip(dets, flags)
        for d, f in zip(img_dets, img_flags)
        if d.class_id == class_id
    ]
    scored.sort(key=lambda t: -t[0])
    tp = np.array([f for _, f in scored], dtype=bool)
    return _all_point_ap(tp, n_gt)


def average_precision(detections: Sequence[Sequence[Detection]], gts: Sequence[GroundTruthSet], class_id: int,
                      iou_threshold: float = 0.5) -> float | None:
    """All-point interpolated AP of one class; ``None`` when the class has no ground truth.

    ``detections[i]`` holds the detections of image ``i``.
    """
    if len(detections) != len(gts):
        raise ValueError("need one detection list per image")
    flags = [match_detections(d, g, iou_threshold) for d, g in zip(detections, gts)]
    return _ap_from_flags(detections, flags, gts, class_id)


@dataclass
class EvalResult:
    mAP: float
    per_class_ap: dict[int, float | None]
    n_detections: int
    n_ground_truth: int
    fp_count: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mAP": self.mAP,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "n_detections": self.n_detections,
            "n_ground_truth": self.n_ground_truth,
            "fp_count": self.fp_count,
            "notes": self.notes,
        }


def summarize(detections: Sequence[Sequence[Detection]], gts: Sequence[GroundTruthSet], num_classes: int,
              iou_threshold: float = 0.5) -> EvalResult:
    flags = [match_detections(d, g, iou_threshold) for d, g in zip(detections, gts)]
    aps: dict[int, float | None] = {}
    notes = []
    for c in range(num_classes):
        aps[c] = _ap_from_flags(detections, flags, gts, c)
        if aps[c] is None:
            notes.append(f"class {c} has no ground truth; excluded from mAP")
    defined = [v for v in aps.values() if v is not None]
    fp = sum(
        1 for img_dets, img_flags in zip(detections, flags)
        for d, f in zip(img_dets, img_flags) if d.confidence >= FP_CONFIDENCE and not f
    )
    return EvalResult(
        mAP=float(np.mean(defined)) if defined else 0.0,
        per_class_ap=aps,
        n_detections=sum(len(d) for d in detections),
        n_ground_truth=sum(len(g) for g in gts),
        fp_count=fp,
        notes=notes,
    )


def _check_compatible(model: DetectorModel, dataset: Dataset) -> None:
    if len(dataset) and dataset.image_size != model.config.input_size:
        raise EvaluationError(
            f"dataset images are {dataset.image_size}px but the detector expects {model.config.input_size}px")
    for i, gt in enumerate(dataset.targets):
        if len(gt) and gt.classes.max() >= model.config.num_classes:
            raise EvaluationError(f"image {i} has class ids beyond the detector's {model.config.num_classes} classes")


def predict(model: DetectorModel, dataset: Dataset, attack_spec: AttackSpec | None = None,
            batch_size: int = 32) -> list[list[Detection]]:
    """Per-image post-NMS detections, optionally on white-box adversarial versions."""
    out: list[list[Detection]] = []
    for start in range(0, len(dataset), batch_size):
        ids = list(range(start, min(start + batch_size, len(dataset))))
        x = torch.as_tensor(np.stack([dataset.images[i] for i in ids]), dtype=DTYPE)
        if attack_spec is not None:
            asg = [assign_targets(dataset.targets[i], model.config) for i in ids]
            x, _ = perturb(model, x, asg, attack_spec, ids)
        with torch.no_grad():
            raw = forward(model.params, x, model.config)
        out.extend(nms(decode(r, model.config, PRE_NMS_THRESHOLD), NMS_IOU) for r in raw)
    return out


def evaluate(model: DetectorModel, dataset: Dataset, attack_spec: AttackSpec | None = None) -> EvalResult:
    _check_compatible(model, dataset)
    dets = predict(model, dataset, attack_spec)
    return summarize(dets, dataset.targets, model.config.num_classes)


def _method_label(spec: AttackSpec) -> str:
    return "FGSM" if spec.method is AttackMethod.FGSM else f"PGD-{spec.iterations}"


def make_spec(method: str, selector, epsilon: float, pgd_step: float = 1.0, pgd_iters: int = 10) -> AttackSpec:
    if AttackMethod(method) is AttackMethod.FGSM:
        return AttackSpec.fgsm(selector, epsilon)
    return AttackSpec.pgd(selector, epsilon, step_size=pgd_step, iterations=pgd_iters)


def _write_table(out_dir, stem: str, header: list[str], rows: list[list]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header, *rows])
    (out / f"{stem}.csv").write_text(buf.getvalue())
    fmt = lambda v: f"{v:.2f}" if isinstance(v, float) else str(v)  # noqa: E731
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    md += ["| " + " | ".join(fmt(v) for v in r) + " |" for r in rows]
    (out / f"{stem}.md").write_text("\n".join(md) + "\n")


@dataclass
class DegradationTable:
    """mAP change (attacked - clean) in mAP points (x100)."""

    clean_map: float
    cells: dict[tuple[str, float, str], float]
    attacked_map: dict[tuple[str, float, str], float]
    fp_counts: dict[tuple[str, float, str], int] = field(default_factory=dict)
    clean_fp: int = 0

    def cell(self, method: str, epsilon: float, source) -> float:
        return self.cells[(method, float(epsilon), LossSelector(source).value)]

    def rows(self) -> list[list]:
        methods = list(dict.fromkeys(k[0] for k in self.cells))
        eps = sorted({k[1] for k in self.cells})
        sources = [s.value for s in SOURCE_COLUMNS if any(k[2] == s.value for k in self.cells)]
        return [[m, e] + [self.cells[(m, e, s)] for s in sources] for m in methods for e in eps]

    def header(self) -> list[str]:
        sources = [s for s in SOURCE_COLUMNS if any(k[2] == s.value for k in self.cells)]
        return ["method", "epsilon"] + [SOURCE_COLUMNS[s] for s in sources]

    def save(self, out_dir) -> None:
        _write_table(out_dir, "degradation", self.header(), self.rows())
        doc = {
            "clean_map": self.clean_map,
            "clean_fp": self.clean_fp,
            "cells": [{"method": m, "epsilon": e, "source": s, "delta_map": v, "attacked_map": self.attacked_map[(m, e, s)],
                       "fp_count": self.fp_counts.get((m, e, s))}
                      for (m, e, s), v in self.cells.items()],
        }
        (Path(out_dir) / "degradation.json").write_text(json.dumps(doc, indent=2))


def degradation_sweep(model: DetectorModel, dataset: Dataset, methods: Sequence[str] = ("FGSM", "PGD"),
                      sources: Sequence[LossSelector] = tuple(SOURCE_COLUMNS),
                      eps_grid: Sequence[float] = (2, 4, 6, 8), out_dir=None, pgd_step: float = 1.0,
                      pgd_iters: int = 10) -> DegradationTable:
    if not methods or not sources or not eps_grid:
        raise ValueError("degradation grid must be non-empty")
    clean = evaluate(model, dataset)
    cells, attacked, fps = {}, {}, {}
    for method in methods:
        for eps in eps_grid:
            for src in sources:
                spec = make_spec(method, src, eps, pgd_step, pgd_iters)
                key = (_method_label(spec), float(eps), LossSelector(src).value)
                try:
                    res = evaluate(model, dataset, spec)
                except Exception as exc:
                    raise EvaluationError(f"sweep cell {key} failed: {exc}") from exc
                attacked[key] = res.mAP * 100
                cells[key] = (res.mAP - clean.mAP) * 100
                fps[key] = res.fp_count
                logger.info("%s: mAP %.2f (delta %.2f)", spec.label, attacked[key], cells[key])
    table = DegradationTable(clean.mAP * 100, cells, attacked, fps, clean.fp_count)
    if out_dir is not None:
        table.save(out_dir)
    return table


@dataclass
class DefenseTable:
    """mAP (x100) of each model, clean and under each named attack."""

    rows: dict[str, dict[str, float]]

    def columns(self) -> list[str]:
        return list(next(iter(self.rows.values())).keys()) if self.rows else []

    def save(self, out_dir) -> None:
        cols = self.columns()
        _write_table(out_dir, "defense", ["model", *cols], [[m, *[r[c] for c in cols]] for m, r in self.rows.items()])


def default_defense_attacks(epsilon: float = 4.0) -> dict[str, AttackSpec]:
    return {
        "A_obj": AttackSpec.pgd(LossSelector.OBJ, epsilon),
        "A_obj+loc+cls": AttackSpec.pgd(LossSelector.TOTAL, epsilon),
    }


def compare_defenses(models: Mapping[str, DetectorModel], dataset: Dataset,
                     attack_specs: Mapping[str, AttackSpec] | None = None, out_dir=None,
                     require_multiple: bool = True) -> DefenseTable:
    """White-box evaluation of every model under every attack (each attack targets the model evaluated)."""
    if require_multiple and len(models) < 2:
        raise ValueError("compare_defenses needs at least two models")
    attack_specs = attack_specs if attack_specs is not None else default_defense_attacks()
    rows = {}
    for name, model in models.items():
        label = getattr(name, "value", name)
        row = {"clean": evaluate(model, dataset).mAP * 100}
        for aname, spec in attack_specs.items():
            row[aname] = evaluate(model, dataset, spec).mAP * 100
        rows[f"M_{label}"] = row
    table = DefenseTable(rows)
    if out_dir is not None:
        table.save(out_dir)
    return table


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def sign_direction(grad) -> np.ndarray:
    """Flattened, unit-normalised sign of a gradient (zero vector if the gradient vanishes)."""
    s = np.sign(np.asarray(grad, dtype=np.float64)).ravel()
    n = np.linalg.norm(s)
    return s / n if n > 0 else s


TASKS = (LossSelector.OBJ, LossSelector.LOC, LossSelector.CLS)
PAIRS = (("obj", "loc"), ("obj", "cls"), ("loc", "cls"))


@dataclass
class GradientDomainReport:
    records: list[dict]
    vectors: np.ndarray  # (rows, pixels)
    labels: list[tuple[int, str]]
    excluded: int

    @property
    def included(self) -> list[dict]:
        return [r for r in self.records if not r["excluded"]]

    @property
    def alignment_fraction(self) -> float:
        """Share of images where the objectness direction is closer to both others than they are to each other."""
        rec = self.included
        if not rec:
            return 0.0
        return float(np.mean([min(r["obj_loc"], r["obj_cls"]) > r["loc_cls"] for r in rec]))

    def aggregate(self) -> dict[str, dict[str, float]]:
        rec = self.included
        out = {}
        for a, b in PAIRS:
            vals = np.array([r[f"{a}_{b}"] for r in rec]) if rec else np.zeros(0)
            out[f"{a}_{b}"] = {
                "mean": float(vals.mean()) if vals.size else 0.0,
                "median": float(np.median(vals)) if vals.size else 0.0,
                "min": float(vals.min()) if vals.size else 0.0,
                "max": float(vals.max()) if vals.size else 0.0,
            }
        return out

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        header = ["image", "obj_loc", "obj_cls", "loc_cls", "obj_closest", "excluded"]
        rows = [[r["image"], r["obj_loc"], r["obj_cls"], r["loc_cls"],
                 int(min(r["obj_loc"], r["obj_cls"]) > r["loc_cls"]), int(r["excluded"])] for r in self.records]
        _write_table(out, "gradients", header, rows)
        write_array(out / "gradient_vectors.f32", self.vectors)
        with open(out / "gradient_vectors_labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "image", "task"])
            w.writerows([[i, img, task] for i, (img, task) in enumerate(self.labels)])
        summary = {"alignment_fraction": self.alignment_fraction, "excluded": self.excluded,
                   "n_images": len(self.records), "cosines": self.aggregate()}
        (out / "gradients_summary.json").write_text(json.dumps(summary, indent=2))


def gradient_domain_analysis(model: DetectorModel, dataset: Dataset, n_images: int, out_dir=None,
                             batch_size: int = 32) -> GradientDomainReport:
    """Pairwise cosines between the obj / loc / cls sign-gradient directions of each image."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    n = min(n_images, len(dataset))
    records, vectors, labels = [], [], []
    excluded = 0
    for start in range(0, n, batch_size):
        ids = list(range(start, min(start + batch_size, n)))
        x = torch.as_tensor(np.stack([dataset.images[i] for i in ids]), dtype=DTYPE)
        asg = [assign_targets(dataset.targets[i], model.config) for i in ids]
        dirs, flags = {}, np.zeros(len(ids), dtype=bool)
        for task in TASKS:
            grad, _, degenerate = batch_input_gradient(model, x, asg, task)
            dirs[task.value] = [sign_direction(g.numpy()) for g in grad]
            flags |= degenerate
        for j, img in enumerate(ids):
            rec = {"image": img, "excluded": bool(flags[j])}
            for a, b in PAIRS:
                rec[f"{a}_{b}"] = cosine(dirs[a][j], dirs[b][j])
            records.append(rec)
            excluded += int(flags[j])
            for task in TASKS:
                vectors.append(dirs[task.value][j])
                labels.append((img, task.value))
    report = GradientDomainReport(records, np.array(vectors, dtype=np.float64), labels, excluded)
    if out_dir is not None:
        report.save(out_dir)
    return report
