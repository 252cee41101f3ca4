"""Command-line entry point: ``synthcas <command> --config run.json``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.  Errors
are printed to stderr as a single JSON object.  ``SYNTHCAS_WORKERS`` sets
the number of torch threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import torch

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
WORKERS_ENV = "SYNTHCAS_WORKERS"

_dataset = {
    "oneOf": [
        {"type": "object", "additionalProperties": False, "required": ["path"],
         "properties": {"path": {"type": "string"}, "resolution": {"type": "integer", "minimum": 1}}},
        {"type": "object", "additionalProperties": False, "required": ["toy"],
         "properties": {"toy": {
             "type": "object", "additionalProperties": False, "required": ["n_per_class"],
             "properties": {
                 "n_per_class": {"oneOf": [{"type": "integer", "minimum": 1},
                                           {"type": "array", "items": {"type": "integer", "minimum": 1}}]},
                 "num_classes": {"type": "integer", "minimum": 2},
                 "resolution": {"type": "integer", "minimum": 4},
                 "seed": {"type": "integer"},
                 "class_offset": {"type": "integer", "minimum": 0},
             }}}},
    ]
}


def _obj(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


_int, _num = {"type": "integer", "minimum": 1}, {"type": "number", "exclusiveMinimum": 0}
_train = _obj({"epochs": _int, "batch_size": _int, "lr": _num, "weight_decay": {"type": "number", "minimum": 0},
               "clip_norm": _num, "uncond_prob": {"type": "number", "minimum": 0, "maximum": 1},
               "seed": {"type": "integer"}, "loss_weighting": {"enum": ["eps", "edm"]}})
_pair = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
        "dataset_name": {"type": "string"},
        "out": {"type": "string"},
        "seed": {"type": "integer"},
        "workers": _int,
        "source": _dataset,
        "train": _dataset,
        "test": _dataset,
        "pretrain": _train,
        "backbone": {"type": "string"},
        "synthetic": {"type": "string"},
        "generate": _obj({"n": _int, "factor": _int}),
        "pipeline": _obj({
            "stage1": _train, "stage3": _train,
            "hpo_trials": _int, "eval_size": _int,
            "is_bounds": _pair, "ugs_bounds": _pair,
            "default_IS": _int, "default_UGS": {"type": "number", "minimum": 0},
            "factors": {"type": "array", "items": _int, "minItems": 1},
            "n_startup": _int, "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "n_candidates": _int, "reduction_factor": {"type": "integer", "minimum": 2},
            "diffusion": _obj({"T": _int, "beta_start": _num, "beta_end": _num, "base_width": _int,
                               "levels": _int, "cond_dim": _int, "resolution": _int, "data_std": _num,
                               "sample_batch": _int}),
            "classifier": _obj({"base_width": _int, "blocks_per_stage": _int}),
            "policy": _obj({"epochs": _int, "lr": _num, "label_smoothing": {"type": "number", "minimum": 0,
                                                                            "exclusiveMaximum": 1},
                            "batch_size": _int, "plateau_patience": _int, "plateau_factor": _num,
                            "early_stopping_patience": _int,
                            "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                            "augmentations": {"type": "array", "maxItems": 0}}),
        }),
    },
}

REQUIRED = {
    "pretrain": ["source"],
    "adapt": ["train", "test"],
    "generate": [],
    "evaluate": ["test", "synthetic"],
    "sweep": ["train", "test"],
    "report": [],
}


class ConfigError(Exception):
    pass


def load_config(path, command: str, overrides: dict) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    missing = [k for k in REQUIRED[command] if k not in cfg]
    if missing:
        raise ConfigError(f"{command} needs config keys: {', '.join(missing)}")
    for key in ("source", "train", "test"):
        spec = cfg.get(key, {})
        if "path" in spec and not Path(spec["path"]).is_dir():
            raise ConfigError(f"{key}: no dataset directory at {spec['path']}")
    if "synthetic" in cfg and not Path(cfg["synthetic"]).is_dir():
        raise ConfigError(f"synthetic: no dataset directory at {cfg['synthetic']}")
    if command == "pretrain" and "train" in cfg and cfg["train"] == cfg["source"]:
        raise ConfigError("source and target datasets are identical")
    try:
        pipeline_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pipeline: {exc}") from None
    return cfg


# ---------------------------------------------------------------------------
# Config -> objects
# ---------------------------------------------------------------------------

def load_data(spec: dict, split: str):
    from .data import load_dataset, make_toy_dataset

    if "path" in spec:
        return load_dataset(spec["path"], resolution=spec.get("resolution"))
    toy = dict(spec["toy"])
    return make_toy_dataset(toy.pop("n_per_class"), split=split, **toy)


def pipeline_config(cfg: dict):
    from .pipeline import PipelineConfig

    d = json.loads(json.dumps(cfg.get("pipeline", {})))
    seed = cfg.get("seed", 0)
    for key in ("stage1", "stage3"):
        d.setdefault(key, {})
        d[key].setdefault("seed", seed)
    base = PipelineConfig()
    for key in ("stage1", "stage3", "diffusion", "classifier", "policy"):
        d[key] = {**dataclasses.asdict(getattr(base, key)), **d.get(key, {})}
    return PipelineConfig.from_dict({"name": cfg.get("name", "run"),
                                     "dataset_name": cfg.get("dataset_name", "dataset"),
                                     "seed": seed, **d})


def _paths(cfg: dict) -> tuple[Path, Path, Path]:
    out = Path(cfg.get("out", "."))
    backbone = Path(cfg.get("backbone", out / "backbone"))
    run_dir = out / "runs" / cfg.get("name", "run")
    return out, backbone, run_dir


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg: dict, resume: bool) -> dict:
    from .diffusion import TrainConfig
    from .pipeline import BACKBONE_META, pretrain_backbone

    _, backbone, _ = _paths(cfg)
    source = load_data(cfg["source"], "train")
    if "train" in cfg and load_data(cfg["train"], "train").fingerprint() == source.fingerprint():
        raise ValueError("source and target datasets are identical")
    meta = backbone / BACKBONE_META
    if resume and meta.is_file():
        return {"backbone": str(backbone), "fingerprint": json.loads(meta.read_text())["fingerprint"],
                "resumed": True}
    pc = pipeline_config(cfg)
    train = TrainConfig(**{**dataclasses.asdict(TrainConfig(epochs=300, lr=2e-3, seed=pc.seed)),
                           **cfg.get("pretrain", {})})
    pretrain_backbone(source, pc.diffusion, train, backbone)
    return {"backbone": str(backbone), "fingerprint": json.loads(meta.read_text())["fingerprint"]}


def cmd_adapt(cfg: dict, resume: bool, sweep: bool = True) -> dict:
    from .pipeline import run_pipeline

    _, backbone, run_dir = _paths(cfg)
    report = run_pipeline(pipeline_config(cfg), load_data(cfg["train"], "train"),
                          load_data(cfg["test"], "test"), backbone, run_dir, resume=resume, sweep=sweep)
    out = {"run_dir": str(run_dir),
           "stages": [{"stage": s.stage, "cas": s.cas, "seconds": s.seconds,
                       "forward_evals": s.forward_evals, "IS": s.params.IS, "UGS": s.params.UGS,
                       "epoch": s.params.epoch} for s in report.stages]}
    if report.sweep:
        out["sweep"] = {r.label: r.accuracy for r in report.sweep}
    return out


def cmd_sweep(cfg: dict, resume: bool) -> dict:
    _, _, run_dir = _paths(cfg)
    if not (run_dir / "stage4" / "DONE").is_file():
        raise RuntimeError(f"{run_dir}: stage 4 has not completed; run adapt first")
    return cmd_adapt(cfg, resume=True, sweep=True)


def cmd_generate(cfg: dict, resume: bool) -> dict:
    from .data import save_synthetic_dataset, scale_distribution, stratified_counts
    from .evaluation import measure_generation_time
    from .pipeline import AdaptationPipeline

    out, backbone, run_dir = _paths(cfg)
    pc = pipeline_config(cfg)
    train = load_data(cfg["train"], "train") if "train" in cfg else None
    test = load_data(cfg["test"], "test") if "test" in cfg else train
    if train is None:
        raise ValueError("generate needs the training dataset for class names and counts")
    sampler, params = AdaptationPipeline(pc, train, test, backbone, run_dir).final_sampler()
    gen = cfg.get("generate", {})
    if "n" in gen:
        counts = stratified_counts(gen["n"], train.class_distribution())
    else:
        counts = scale_distribution(train.class_distribution(), gen.get("factor", 1))
    timing = measure_generation_time(lambda c: sampler.sample(counts, params, c), int(counts.sum()))
    dest = out / "generated" / pc.name
    save_synthetic_dataset(timing.dataset, dest, overwrite=True)
    return {"dataset": str(dest), "images": len(timing.dataset), "seconds": timing.seconds,
            "forward_evals": timing.forward_evals}


def cmd_evaluate(cfg: dict, resume: bool) -> dict:
    from .data import load_dataset
    from .evaluation import compute_cas, train_classifier

    pc = pipeline_config(cfg)
    synthetic = load_dataset(cfg["synthetic"])
    test = load_data(cfg["test"], "test")
    clf = train_classifier(dataclasses.replace(pc.classifier, num_classes=synthetic.num_classes),
                           pc.policy, synthetic, seed=pc.seed)
    return {"cas": compute_cas(clf, test), "epochs_run": clf.epochs_run}


def cmd_report(cfg: dict, resume: bool) -> dict:
    from .reporting import build_report

    _, _, run_dir = _paths(cfg)
    return {k: str(v) for k, v in build_report(run_dir).items()}


COMMANDS = {"pretrain": cmd_pretrain, "adapt": cmd_adapt, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "sweep": cmd_sweep, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthcas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--resume", action="store_true", help="reuse completed stages")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.command, {"seed": args.seed, "out": args.out})
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    workers = os.environ.get(WORKERS_ENV, cfg.get("workers"))
    if workers is not None:
        try:
            torch.set_num_threads(max(1, int(workers)))
        except ValueError:
            return _fail(EXIT_CONFIG, "config", f"{WORKERS_ENV} must be an integer")
    try:
        result = COMMANDS[args.command](cfg, args.resume)
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        logging.getLogger(__name__).debug("command failed", exc_info=True)
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))
    print(json.dumps(result, indent=1))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
