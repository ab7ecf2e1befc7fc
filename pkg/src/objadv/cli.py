"""Command-line entry point: ``objadv <command> --config exp.json --out DIR``.

The experiment config is a JSON object with the sections below; every key is
optional and unknown keys are rejected. Flags only override config keys.

    {
      "seed": 0,
      "out": "runs/exp",
      "dataset": {"scene": {...SceneSpec...}, "n_train": 200, "n_test": 100,
                  "train_seed": 1, "test_seed": 100000, "path": null},
      "detector": {...DetectorConfig...},
      "training": {"epochs": 20, "batch_size": 8, "learning_rate": 0.001, "epsilon": 4, "variant": "STD"},
      "attack": {"method": "PGD", "selector": "obj", "epsilon": 4, "step_size": 1, "iterations": 10,
                 "random_init": false, "methods": ["FGSM", "PGD"],
                 "sources": ["loc", "cls", "total", "obj"], "eps_grid": [2, 4, 6, 8]},
      "analysis": {"n_images": 50}
    }

When ``dataset.path`` (or ``--data``) names a ``gen-data`` output directory the
``train`` and ``test`` splits are loaded from it; otherwise they are generated in
memory from the scene spec and seeds.
"""

from __future__ import annotations

import argparse
import copy
import errno
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .advtrain import TrainConfig, TrainedModel, TrainingVariant, train_all_variants, train_variant
from .attacks import AttackMethod, AttackSpec, attack_batch
from .datagen import Dataset, SceneSpec, generate_dataset, load_dataset, make_dataset
from .detector import DetectorConfig
from .evalreport import compare_defenses, default_defense_attacks, degradation_sweep, evaluate, gradient_domain_analysis
from .losses import LossSelector

logger = logging.getLogger("objadv")

DEFAULTS = {
    "seed": 0,
    "out": "runs/exp",
    "dataset": {"scene": {}, "n_train": 200, "n_test": 100, "train_seed": 1, "test_seed": 100_000, "path": None},
    "detector": {},
    "training": {"epochs": 20, "batch_size": 8, "learning_rate": 1e-3, "epsilon": 4.0, "variant": "STD"},
    "attack": {
        "method": "PGD", "selector": "obj", "epsilon": 4.0, "step_size": 1.0, "iterations": 10, "random_init": False,
        "methods": ["FGSM", "PGD"], "sources": ["loc", "cls", "total", "obj"], "eps_grid": [2, 4, 6, 8],
    },
    "analysis": {"n_images": 50},
}
OPEN_SECTIONS = {"scene": {f.name for f in fields(SceneSpec)}, "detector": {f.name for f in fields(DetectorConfig)}}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        allowed = OPEN_SECTIONS.get(where.rsplit(".", 1)[-1])
        if allowed is not None:
            if key not in allowed:
                raise ConfigError(f"unknown key {where}.{key}")
            out[key] = value
        elif key not in base:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where + '.' if where else ''}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}.{key}" if where else key)
        else:
            out[key] = value
    return out


def resolve_config(raw: dict | None = None, seed: int | None = None, out: str | None = None,
                   data: str | None = None) -> dict:
    """Defaults, then the config file, then flags; every section is validated."""
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw or {}, "")
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    if data is not None:
        cfg["dataset"]["path"] = data
    try:
        scene_spec(cfg).validate()
        detector_config(cfg).validate()
        train_config(cfg)
        attack_spec(cfg)
        for m in cfg["attack"]["methods"]:
            AttackMethod(m)
        for s in cfg["attack"]["sources"]:
            LossSelector(s)
        if not cfg["attack"]["eps_grid"]:
            raise ValueError("attack.eps_grid must be non-empty")
        if cfg["analysis"]["n_images"] < 1:
            raise ValueError("analysis.n_images must be >= 1")
        if cfg["dataset"]["n_train"] < 0 or cfg["dataset"]["n_test"] < 0:
            raise ValueError("dataset sizes must be >= 0")
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


def scene_spec(cfg: dict) -> SceneSpec:
    return SceneSpec.from_dict(cfg["dataset"]["scene"])


def detector_config(cfg: dict) -> DetectorConfig:
    return DetectorConfig.from_dict(cfg["detector"])


def train_config(cfg: dict, variant: str | None = None) -> TrainConfig:
    t = dict(cfg["training"])
    if variant is not None:
        t["variant"] = variant
    return TrainConfig(seed=cfg["seed"], **t)


def attack_spec(cfg: dict) -> AttackSpec:
    a = cfg["attack"]
    if AttackMethod(a["method"]) is AttackMethod.FGSM:
        return AttackSpec.fgsm(a["selector"], a["epsilon"], a["random_init"], cfg["seed"])
    return AttackSpec.pgd(a["selector"], a["epsilon"], a["step_size"], a["iterations"], a["random_init"], cfg["seed"])


def load_split(cfg: dict, split: str, limit: int | None) -> Dataset:
    d = cfg["dataset"]
    if d["path"]:
        data = load_dataset(Path(d["path"]) / split)
        return data.subset(limit)
    n = d[f"n_{split}"] if limit is None else min(limit, d[f"n_{split}"])
    return make_dataset(scene_spec(cfg), n, d[f"{split}_seed"])


def load_model(cfg: dict, path) -> TrainedModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(errno.ENOENT, "checkpoint not found", str(path))
    return TrainedModel.load(path, detector_config(cfg))


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(cfg: dict, args) -> dict:
    out = Path(cfg["out"])
    spec = scene_spec(cfg)
    d = cfg["dataset"]
    result = {}
    for split in ("train", "test"):
        n = d[f"n_{split}"] if args.limit is None else min(args.limit, d[f"n_{split}"])
        manifest = generate_dataset(spec, n, d[f"{split}_seed"], out / split, split)
        result[split] = {"count": manifest.count, "manifest": str(out / split / "manifest.json")}
    return result


def cmd_train(cfg: dict, args) -> dict:
    out = Path(cfg["out"])
    train = load_split(cfg, "train", args.limit)
    det = detector_config(cfg)
    if args.variant.lower() == "all":
        val = load_split(cfg, "test", args.limit)
        models = train_all_variants(train, train_config(cfg), det, out_dir=out, val_dataset=val)
        return {v.value: {"checkpoint": str(out / f"{v.value}.pt"), "clean_map": m.clean_map} for v, m in models.items()}
    variant = TrainingVariant(args.variant.upper())
    model = train_variant(train, train_config(cfg, variant.value), det, log_path=out / f"train_{variant.value}.jsonl")
    model.clean_map = evaluate(model, load_split(cfg, "test", args.limit)).mAP
    model.save(out / f"{variant.value}.pt")
    return {variant.value: {"checkpoint": str(out / f"{variant.value}.pt"), "clean_map": model.clean_map,
                            "final_loss": model.history[-1]["l_total"]}}


def cmd_attack(cfg: dict, args) -> dict:
    model = load_model(cfg, args.checkpoint)
    _, summary = attack_batch(model, load_split(cfg, "test", args.limit), attack_spec(cfg), out_dir=cfg["out"])
    return summary


def cmd_eval(cfg: dict, args) -> dict:
    model = load_model(cfg, args.checkpoint)
    spec = attack_spec(cfg) if args.attack else None
    result = evaluate(model, load_split(cfg, "test", args.limit), spec).to_dict()
    result["attack"] = spec.to_dict() if spec else None
    _write_json(Path(cfg["out"]) / "eval.json", result)
    return result


def cmd_sweep(cfg: dict, args) -> dict:
    model = load_model(cfg, args.checkpoint)
    a = cfg["attack"]
    table = degradation_sweep(model, load_split(cfg, "test", args.limit), a["methods"],
                              [LossSelector(s) for s in a["sources"]], a["eps_grid"], cfg["out"],
                              a["step_size"], a["iterations"])
    return {"clean_map": table.clean_map, "cells": len(table.cells), "table": str(Path(cfg["out"]) / "degradation.csv")}


def cmd_compare(cfg: dict, args) -> dict:
    root = Path(args.checkpoint_dir)
    if not root.is_dir():
        raise FileNotFoundError(errno.ENOENT, "checkpoint directory not found", str(root))
    models = {v.value: load_model(cfg, root / f"{v.value}.pt") for v in TrainingVariant if (root / f"{v.value}.pt").exists()}
    a = cfg["attack"]
    attacks = {name: AttackSpec.pgd(s.selector, s.epsilon, a["step_size"], a["iterations"])
               for name, s in default_defense_attacks(a["epsilon"]).items()}
    table = compare_defenses(models, load_split(cfg, "test", args.limit), attacks, cfg["out"])
    return {"models": list(table.rows), "table": str(Path(cfg["out"]) / "defense.csv")}


def cmd_analyze(cfg: dict, args) -> dict:
    model = load_model(cfg, args.checkpoint)
    report = gradient_domain_analysis(model, load_split(cfg, "test", args.limit), cfg["analysis"]["n_images"],
                                      cfg["out"])
    return {"alignment_fraction": report.alignment_fraction, "excluded": report.excluded,
            "cosines": report.aggregate()}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON file")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--limit", type=int, help="cap dataset sizes, e.g. for CI runs")
    common.add_argument("--data", help="directory written by gen-data (overrides dataset.path)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="objadv", description="Task-oriented attacks and defenses on a toy detector.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/test splits")
    p = sub.add_parser("train", parents=[common], help="train one variant, or all of them")
    p.add_argument("--variant", default="STD", help="STD, ALL, MTD, LOC, CLS, OBJ, OA or 'all'")
    for name, text in (("attack", "write adversarial test images"), ("eval", "clean or attacked mAP"),
                       ("sweep", "degradation table over methods, sources and budgets"),
                       ("analyze", "gradient-direction cosine statistics")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", required=True)
        if name == "eval":
            p.add_argument("--attack", action="store_true", help="evaluate under the configured attack")
    p = sub.add_parser("compare", parents=[common], help="defense table over a directory of checkpoints")
    p.add_argument("--checkpoint-dir", required=True)
    return parser


def _fail(kind: str, exc: BaseException, code: int) -> int:
    doc = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    path = getattr(exc, "filename", None)
    if path:
        doc["path"] = str(path)
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        raw = None
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                raw = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if args.limit is not None and args.limit < 0:
            raise ConfigError("--limit must be >= 0")
        cfg = resolve_config(raw, args.seed, args.out, args.data)
    except ConfigError as exc:
        return _fail("config", exc, 2)

    logger.info("command %s seed %d", args.command, cfg["seed"])
    logger.info("resolved config %s", json.dumps(cfg, sort_keys=True))
    try:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"config.{args.command}.json", cfg)
        result = COMMANDS[args.command](cfg, args)
    except Exception as exc:  # reported as JSON for callers
        logger.debug("command failed", exc_info=True)
        return _fail("runtime", exc, 1)
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
