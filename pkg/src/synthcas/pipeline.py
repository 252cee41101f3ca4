"""Four-stage adaptation pipeline and scaled synthetic dataset generation.

Stages:

1. Class-Encoder transfer learning against a frozen pre-trained denoiser.
2. TPE/Hyperband search over (IS, UGS, Class-Encoder epoch).
3. Denoiser fine-tuning with the chosen Class-Encoder frozen.
4. A second search over (IS, UGS, denoiser epoch) in a shrunken space.

Every stage writes its artifacts under ``<run_dir>/stage<k>/`` and finishes
with a ``DONE`` marker; :func:`run_pipeline` skips stages whose marker
exists, so an interrupted run resumes where it stopped.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .data import LabeledDataset, save_synthetic_dataset, scale_distribution, stratified_counts
from .diffusion import (
    DEFAULT_IS, DEFAULT_UGS, STAGE1_PRESET, STAGE3_PRESET, Checkpoint, ClassEncoder,
    ConditionalSampler, Denoiser, SamplerParams, TrainConfig, build_schedule, load_checkpoint,
    state_hash, train_component,
)
from .evaluation import (
    CASReport, ClassifierConfig, GenerationTiming, TrainingPolicy, compute_cas,
    measure_generation_time, scaling_sweep_eval, train_classifier,
)
from .hpo import HyperbandPruner, SearchSpace, Study, TrialPruned, sampler_space
from .importance import ImportanceReport, fanova_importance, write_importance_csv

log = logging.getLogger(__name__)

DONE = "DONE"
STAGE_HEADER = ["Dataset", "Stage", "CAS", "Generation Time (s)", "Forward Evals",
                "IS", "UGS", "Epoch"]


class StageOrderError(RuntimeError):
    """A stage was started before the stage it depends on finished."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    base_width: int = 32
    levels: int = 3
    cond_dim: int = 64
    resolution: int = 32
    data_std: float = 0.5
    sample_batch: int = 128

    def schedule(self):
        return build_schedule(self.T, self.beta_start, self.beta_end)

    def make_denoiser(self) -> Denoiser:
        return Denoiser(3, self.base_width, self.levels, self.cond_dim, self.resolution,
                        self.schedule(), self.data_std)


@dataclass(frozen=True)
class PipelineConfig:
    name: str = "run"
    dataset_name: str = "dataset"
    seed: int = 0
    stage1: TrainConfig = STAGE1_PRESET
    stage3: TrainConfig = STAGE3_PRESET
    hpo_trials: int = 50
    eval_size: int = 4000
    is_bounds: tuple[int, int] = (5, 50)
    ugs_bounds: tuple[float, float] = (0.0, 7.5)
    default_IS: int = DEFAULT_IS
    default_UGS: float = DEFAULT_UGS
    factors: tuple[int, ...] = tuple(range(1, 11))
    n_startup: int = 10
    gamma: float = 0.25
    n_candidates: int = 24
    reduction_factor: int = 3
    diffusion: DiffusionConfig = DiffusionConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    policy: TrainingPolicy = TrainingPolicy()

    def __post_init__(self):
        if self.hpo_trials < 1:
            raise ValueError("hpo_trials must be >= 1")
        if self.eval_size < 1:
            raise ValueError("eval_size must be >= 1")
        if any(k < 1 for k in self.factors):
            raise ValueError("scaling factors must be >= 1")
        if not 1 <= self.is_bounds[0] <= self.is_bounds[1]:
            raise ValueError(f"bad IS bounds {self.is_bounds}")
        if not 0 <= self.ugs_bounds[0] <= self.ugs_bounds[1]:
            raise ValueError(f"bad UGS bounds {self.ugs_bounds}")

    def stage2_space(self) -> SearchSpace:
        return sampler_space(self.is_bounds, self.ugs_bounds, (1, self.stage1.epochs))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        nested = {"stage1": TrainConfig, "stage3": TrainConfig, "diffusion": DiffusionConfig,
                  "classifier": ClassifierConfig, "policy": TrainingPolicy}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                if "augmentations" in sub:
                    sub["augmentations"] = tuple(sub["augmentations"])
                d[key] = typ(**sub)
        for key in ("is_bounds", "ugs_bounds", "factors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# Registry and results
# ---------------------------------------------------------------------------

@dataclass
class CheckpointRegistry:
    """(component, epoch) -> checkpoint path, with a provenance log."""

    paths: dict[tuple[str, int], str] = field(default_factory=dict)
    provenance: list[str] = field(default_factory=list)

    def register(self, component: str, epoch: int, path) -> None:
        self.paths[(component, int(epoch))] = str(path)
        self.provenance.append(f"{component}@{epoch} <- {path}")

    def resolve(self, component: str, epoch: int) -> str:
        try:
            return self.paths[(component, int(epoch))]
        except KeyError:
            raise KeyError(f"no {component} checkpoint for epoch {epoch}") from None

    def epochs(self, component: str) -> list[int]:
        return sorted(e for c, e in self.paths if c == component)

    def __len__(self):
        return len(self.paths)

    def save(self, path) -> None:
        data = {"paths": [[c, e, p] for (c, e), p in sorted(self.paths.items())],
                "provenance": self.provenance}
        Path(path).write_text(json.dumps(data, indent=1))

    @classmethod
    def load(cls, path) -> "CheckpointRegistry":
        data = json.loads(Path(path).read_text())
        return cls({(c, int(e)): p for c, e, p in data["paths"]}, list(data["provenance"]))


@dataclass
class StageResult:
    stage: int
    params: SamplerParams
    cas: float
    seconds: float
    forward_evals: int
    checkpoint: str = ""
    n_trials: int = 0
    n_pruned: int = 0
    n_failed: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["params"] = dataclasses.asdict(self.params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageResult":
        d = dict(d)
        d["params"] = SamplerParams(**d["params"])
        return cls(**d)


@dataclass
class PipelineReport:
    dataset: str
    stages: list[StageResult]
    sweep: list[CASReport] = field(default_factory=list)
    importance: list[ImportanceReport] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

BACKBONE_DENOISER = "denoiser.npz"
BACKBONE_ENCODER = "source_encoder.npz"
BACKBONE_META = "backbone.json"


def pretrain_backbone(source: LabeledDataset, diffusion: DiffusionConfig, config: TrainConfig,
                      out_dir) -> Path:
    """Jointly train denoiser and a source Class-Encoder; the stand-in for a pre-trained model."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    denoiser = diffusion.make_denoiser()
    enc = ClassEncoder(source.num_classes, diffusion.cond_dim)
    _, history = train_component("all", config, source, denoiser, enc, diffusion.schedule())
    Checkpoint.capture("denoiser", config.epochs, denoiser, config.fingerprint()).save(out_dir / BACKBONE_DENOISER)
    Checkpoint.capture("class_encoder", config.epochs, enc, config.fingerprint()).save(out_dir / BACKBONE_ENCODER)
    meta = {
        "diffusion": dataclasses.asdict(diffusion),
        "train": dataclasses.asdict(config),
        "source_fingerprint": source.fingerprint(),
        "source": source.meta.get("source", ""),
        "fingerprint": state_hash(denoiser),
        "final_loss": history[-1]["loss"],
    }
    (out_dir / BACKBONE_META).write_text(json.dumps(meta, indent=1))
    return out_dir


def load_backbone(backbone_dir) -> tuple[Denoiser, torch.Tensor, DiffusionConfig, dict]:
    """Return ``(denoiser, null_embedding, diffusion_config, metadata)``."""
    backbone_dir = Path(backbone_dir)
    meta_path = backbone_dir / BACKBONE_META
    if not meta_path.is_file():
        raise FileNotFoundError(f"no pre-trained backbone at {backbone_dir}")
    meta = json.loads(meta_path.read_text())
    diffusion = DiffusionConfig(**meta["diffusion"])
    denoiser = diffusion.make_denoiser()
    load_checkpoint(backbone_dir / BACKBONE_DENOISER).apply(denoiser)
    src = load_checkpoint(backbone_dir / BACKBONE_ENCODER)
    null = torch.from_numpy(src.params["null"].copy())
    return denoiser, null, diffusion, meta


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def shrink_search_space(step2_best: SamplerParams, original: SearchSpace, n_epochs: int = 10) -> SearchSpace:
    """Stage-4 bounds: IS in [IS_low, IS*], UGS in [UGS_low, 2 UGS*], epoch in [1, n_epochs]."""
    is_p, ugs_p = original["IS"], original["UGS"]
    assert is_p.low <= step2_best.IS <= is_p.high, "stage-2 IS outside its search space"
    assert ugs_p.low <= step2_best.UGS <= ugs_p.high, "stage-2 UGS outside its search space"
    return sampler_space((is_p.low, step2_best.IS), (ugs_p.low, 2.0 * step2_best.UGS), (1, n_epochs))


def generate_scaled_datasets(sampler: ConditionalSampler, best: SamplerParams, real_dist,
                             factors: Sequence[int], seed: int | None = None):
    """One synthetic dataset per factor ``k`` with per-class counts ``k * real_dist``.

    Returns ``(datasets, timings)``.
    """
    if not factors:
        raise ValueError("factors must be non-empty")
    datasets, timings = [], []
    for k in factors:
        counts = scale_distribution(real_dist, k)
        params = dataclasses.replace(best, seed=(best.seed if seed is None else seed) + int(k))
        timing = measure_generation_time(lambda c: sampler.sample(counts, params, c), int(counts.sum()))
        timing.dataset.meta["factor"] = str(k)
        datasets.append(timing.dataset)
        timings.append(timing)
    return datasets, timings


def _write_stage_report(path: Path, dataset: str, result: StageResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STAGE_HEADER)
        p = result.params
        w.writerow([dataset, f"After {result.stage}.", f"{result.cas:.6f}", f"{result.seconds:.6f}",
                    result.forward_evals, p.IS, repr(float(p.UGS)), p.epoch])


def _mark_done(stage_dir: Path, payload: dict) -> None:
    (stage_dir / "result.json").write_text(json.dumps(payload, indent=1))
    (stage_dir / DONE).write_text("ok\n")


def _is_done(stage_dir: Path) -> bool:
    return (stage_dir / DONE).is_file()


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

class AdaptationPipeline:
    """Stateful driver for one run directory."""

    def __init__(self, cfg: PipelineConfig, real_train: LabeledDataset, real_test: LabeledDataset,
                 backbone_dir, run_dir):
        if real_train.provenance != "real" or real_test.provenance != "real":
            raise ValueError("pipeline inputs must be real datasets")
        if real_train.class_names != real_test.class_names:
            raise ValueError("train and test class lists differ")
        self.cfg = cfg
        self.real_train = real_train
        self.real_test = real_test
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.denoiser, self.null, self.diffusion, self.backbone_meta = load_backbone(backbone_dir)
        self.schedule = self.diffusion.schedule()
        self.backbone_hash = state_hash(self.denoiser)
        self.classifier_cfg = dataclasses.replace(cfg.classifier, num_classes=real_train.num_classes)
        self.C = real_train.num_classes

    # -- model plumbing ------------------------------------------------------

    def stage_dir(self, k: int) -> Path:
        return self.run_dir / f"stage{k}"

    def _new_encoder(self) -> ClassEncoder:
        torch.manual_seed(self.cfg.seed)
        enc = ClassEncoder(self.C, self.diffusion.cond_dim)
        with torch.no_grad():
            enc.null.copy_(self.null)
        return enc

    def _encoder_at(self, registry: CheckpointRegistry, epoch: int) -> ClassEncoder:
        enc = ClassEncoder(self.C, self.diffusion.cond_dim)
        load_checkpoint(registry.resolve("class_encoder", epoch)).apply(enc)
        return enc

    def _denoiser_at(self, registry: CheckpointRegistry | None, epoch: int | None) -> Denoiser:
        den = self.diffusion.make_denoiser()
        if registry is None:
            den.load_state_dict(self.denoiser.state_dict())
        else:
            load_checkpoint(registry.resolve("denoiser", epoch)).apply(den)
        return den

    def _sampler(self, denoiser, encoder, checkpoint: str) -> ConditionalSampler:
        return ConditionalSampler(denoiser, encoder, self.schedule, list(self.real_train.class_names),
                                  self.real_train.resolution, self.diffusion.sample_batch, checkpoint)

    def _require(self, k: int) -> dict:
        d = self.stage_dir(k)
        if not _is_done(d):
            raise StageOrderError(f"stage {k} has not completed in {self.run_dir}")
        return json.loads((d / "result.json").read_text())

    # -- evaluation ------------------------------------------------------------

    def evaluate(self, sampler: ConditionalSampler, params: SamplerParams, stage: int,
                 on_epoch=None) -> tuple[float, GenerationTiming]:
        counts = stratified_counts(self.cfg.eval_size, num_classes=self.C)
        timing = measure_generation_time(lambda c: sampler.sample(counts, params, c), self.cfg.eval_size)
        clf = train_classifier(self.classifier_cfg, self.cfg.policy, timing.dataset,
                               seed=params.seed, on_epoch=on_epoch)
        return compute_cas(clf, self.real_test), timing

    def _stage_eval(self, k: int, sampler, params: SamplerParams, checkpoint: str, **counts) -> StageResult:
        fresh = dataclasses.replace(params, seed=self.cfg.seed + 100_000 * k)
        cas, timing = self.evaluate(sampler, fresh, k)
        result = StageResult(k, params, cas, timing.seconds, timing.forward_evals, checkpoint, **counts)
        _write_stage_report(self.stage_dir(k) / "report.csv", self.cfg.dataset_name, result)
        log.info("stage %d: CAS=%.4f time=%.1fs evals=%d params=%s", k, cas, timing.seconds,
                 timing.forward_evals, params)
        return result

    # -- stages ----------------------------------------------------------------

    def stage1_transfer_learning(self) -> tuple[CheckpointRegistry, StageResult]:
        d = _fresh_dir(self.stage_dir(1))
        enc = self._new_encoder()
        den = self._denoiser_at(None, None)
        ckpt_dir = d / "checkpoints"
        checkpoints, history = train_component("class_encoder", self.cfg.stage1, self.real_train,
                                               den, enc, self.schedule, checkpoint_dir=ckpt_dir)
        if state_hash(den) != self.backbone_hash:
            raise RuntimeError("frozen backbone changed during Class-Encoder training")
        registry = CheckpointRegistry()
        for ck in checkpoints:
            registry.register("class_encoder", ck.epoch, ckpt_dir / f"class_encoder_epoch{ck.epoch:03d}.npz")
        registry.save(d / "registry.json")
        last = registry.epochs("class_encoder")[-1]
        params = SamplerParams(min(self.cfg.default_IS, self.schedule.T), self.cfg.default_UGS, last,
                               self.cfg.seed)
        result = self._stage_eval(1, self._sampler(den, enc, f"class_encoder@{last}"), params,
                                  f"class_encoder@{last}")
        _mark_done(d, {"result": result.to_dict(), "history": history,
                       "backbone_hash": self.backbone_hash})
        return registry, result

    def run_hpo_stage(self, stage: int, space: SearchSpace, make_sampler, budget: int) -> tuple[Study, SamplerParams, dict]:
        """Search ``space`` for the sampler parameters maximising CAS.

        ``make_sampler(epoch)`` builds the sampler for a checkpoint epoch.
        Returns the study, the best parameters and trial-state counts.
        """
        d = self.stage_dir(stage)
        pruner = HyperbandPruner(1, self.cfg.policy.epochs, self.cfg.reduction_factor)
        study = Study(space, seed=self.cfg.seed + stage, pruner=pruner, n_startup=self.cfg.n_startup,
                      gamma=self.cfg.gamma, n_candidates=self.cfg.n_candidates,
                      journal=d / "journal.jsonl", name=f"stage{stage}")

        def objective(trial, study):
            p = trial.params
            params = SamplerParams(int(p["IS"]), float(p["UGS"]), int(p["epoch"]), self.cfg.seed + trial.number)

            def on_epoch(epoch, val_acc):
                study.report(trial, epoch, val_acc)
                if study.should_prune(trial):
                    raise TrialPruned()

            cas, _ = self.evaluate(make_sampler(params.epoch), params, stage, on_epoch=on_epoch)
            log.info("stage %d trial %d: %s -> CAS %.4f", stage, trial.number, p, cas)
            return cas

        study.optimize(objective, budget)
        best = study.best_trial
        best_params = SamplerParams(int(best.params["IS"]), float(best.params["UGS"]),
                                    int(best.params["epoch"]), self.cfg.seed + best.number)
        counts = dict(
            n_trials=len(study.trials),
            n_pruned=sum(t.state == "pruned" for t in study.trials),
            n_failed=sum(t.state == "failed" for t in study.trials),
        )
        return study, best_params, counts

    def _importance(self, study: Study, stage: int) -> ImportanceReport | None:
        try:
            rep = fanova_importance(study, stage=f"stage{stage}", seed=self.cfg.seed)
        except ValueError as exc:
            # too few complete trials: keep the file so the run stays reportable
            log.warning("stage %d importance skipped: %s", stage, exc)
            write_importance_csv([], self.stage_dir(stage) / "importance.csv")
            return None
        write_importance_csv([rep], self.stage_dir(stage) / "importance.csv")
        return rep

    def stage2(self, registry1: CheckpointRegistry) -> StageResult:
        self._require(1)
        d = _fresh_dir(self.stage_dir(2))
        den = self._denoiser_at(None, None)
        encoders = {}

        def make_sampler(epoch):
            if epoch not in encoders:
                encoders[epoch] = self._encoder_at(registry1, epoch)
            return self._sampler(den, encoders[epoch], f"class_encoder@{epoch}")

        study, best, counts = self.run_hpo_stage(2, self.cfg.stage2_space(), make_sampler, self.cfg.hpo_trials)
        result = self._stage_eval(2, make_sampler(best.epoch), best, f"class_encoder@{best.epoch}", **counts)
        self._importance(study, 2)
        _mark_done(d, {"result": result.to_dict(), "best_so_far": study.best_so_far()})
        return result

    def stage3_finetune(self, registry1: CheckpointRegistry, best2: StageResult) -> tuple[CheckpointRegistry, StageResult]:
        self._require(2)
        d = _fresh_dir(self.stage_dir(3))
        enc = self._encoder_at(registry1, best2.params.epoch)
        enc_hash = state_hash(enc)
        den = self._denoiser_at(None, None)
        ckpt_dir = d / "checkpoints"
        checkpoints, history = train_component("denoiser", self.cfg.stage3, self.real_train,
                                                den, enc, self.schedule, checkpoint_dir=ckpt_dir)
        if state_hash(enc) != enc_hash:
            raise RuntimeError("frozen Class-Encoder changed during fine-tuning")
        registry = CheckpointRegistry()
        for ck in checkpoints:
            registry.register("denoiser", ck.epoch, ckpt_dir / f"denoiser_epoch{ck.epoch:03d}.npz")
        registry.register("class_encoder", best2.params.epoch, registry1.resolve("class_encoder", best2.params.epoch))
        registry.save(d / "registry.json")
        last = registry.epochs("denoiser")[-1]
        params = dataclasses.replace(best2.params, epoch=last)
        result = self._stage_eval(3, self._sampler(den, enc, f"denoiser@{last}"), params, f"denoiser@{last}")
        _mark_done(d, {"result": result.to_dict(), "history": history, "class_encoder_hash": enc_hash})
        return registry, result

    def stage4(self, registry3: CheckpointRegistry, best2: StageResult) -> StageResult:
        self._require(3)
        d = _fresh_dir(self.stage_dir(4))
        enc = self._encoder_at(registry3, best2.params.epoch)
        space = shrink_search_space(best2.params, self.cfg.stage2_space(), self.cfg.stage3.epochs)
        denoisers = {}

        def make_sampler(epoch):
            if epoch not in denoisers:
                denoisers[epoch] = self._denoiser_at(registry3, epoch)
            return self._sampler(denoisers[epoch], enc, f"denoiser@{epoch}")

        study, best, counts = self.run_hpo_stage(4, space, make_sampler, self.cfg.hpo_trials)
        result = self._stage_eval(4, make_sampler(best.epoch), best, f"denoiser@{best.epoch}", **counts)
        self._importance(study, 4)
        _mark_done(d, {"result": result.to_dict(), "best_so_far": study.best_so_far(),
                       "space": space.to_dicts()})
        return result

    def final_sampler(self) -> tuple[ConditionalSampler, SamplerParams]:
        """The adapted sampler and its stage-4 parameters, rebuilt from disk."""
        r2 = StageResult.from_dict(self._require(2)["result"])
        r4 = StageResult.from_dict(self._require(4)["result"])
        registry3 = CheckpointRegistry.load(self.stage_dir(3) / "registry.json")
        enc = self._encoder_at(registry3, r2.params.epoch)
        sampler = self._sampler(self._denoiser_at(registry3, r4.params.epoch), enc,
                                f"denoiser@{r4.params.epoch}")
        return sampler, r4.params

    def final_sweep(self) -> list[CASReport]:
        sampler, best4 = self.final_sampler()
        d = _fresh_dir(self.run_dir / "final")
        datasets, timings = generate_scaled_datasets(sampler, best4,
                                                     self.real_train.class_distribution(),
                                                     self.cfg.factors, seed=self.cfg.seed + 200_000)
        for k, ds in zip(self.cfg.factors, datasets):
            save_synthetic_dataset(ds, d / f"x{k}")
        reports = scaling_sweep_eval(datasets, self.cfg.factors, self.real_train, self.real_test,
                                     self.classifier_cfg, self.cfg.policy, seed=self.cfg.seed,
                                     dataset_name=self.cfg.dataset_name, timings=timings)
        from .reporting import write_table2
        write_table2(d / "table2.csv", reports, self.cfg.factors)
        _mark_done(d, {"sweep": [dataclasses.asdict(r) for r in reports]})
        return reports

    # -- driver ----------------------------------------------------------------

    def run(self, resume: bool = True, sweep: bool = True) -> PipelineReport:
        (self.run_dir / "config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1))
        if not resume:
            for k in (1, 2, 3, 4):
                shutil.rmtree(self.stage_dir(k), ignore_errors=True)
            shutil.rmtree(self.run_dir / "final", ignore_errors=True)

        def loaded(k):
            return StageResult.from_dict(self._require(k)["result"])

        if _is_done(self.stage_dir(1)):
            registry1, r1 = CheckpointRegistry.load(self.stage_dir(1) / "registry.json"), loaded(1)
        else:
            registry1, r1 = self.stage1_transfer_learning()
        r2 = loaded(2) if _is_done(self.stage_dir(2)) else self.stage2(registry1)
        if _is_done(self.stage_dir(3)):
            registry3, r3 = CheckpointRegistry.load(self.stage_dir(3) / "registry.json"), loaded(3)
        else:
            registry3, r3 = self.stage3_finetune(registry1, r2)
        r4 = loaded(4) if _is_done(self.stage_dir(4)) else self.stage4(registry3, r2)
        stages = [r1, r2, r3, r4]
        from .reporting import read_importance_reports, write_table1
        write_table1(self.run_dir / "table1.csv", self.cfg.dataset_name, stages)
        report = PipelineReport(self.cfg.dataset_name, stages, importance=read_importance_reports(self.run_dir))
        if sweep and self.cfg.factors:
            final = self.run_dir / "final"
            if _is_done(final):
                report.sweep = [CASReport(**r) for r in json.loads((final / "result.json").read_text())["sweep"]]
            else:
                report.sweep = self.final_sweep()
        return report


def run_pipeline(cfg: PipelineConfig, real_train: LabeledDataset, real_test: LabeledDataset,
                 backbone_dir, run_dir, resume: bool = True, sweep: bool = True) -> PipelineReport:
    return AdaptationPipeline(cfg, real_train, real_test, backbone_dir, run_dir).run(resume, sweep)
