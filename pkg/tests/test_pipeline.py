import json

import numpy as np
import pytest

from synthcas.data import load_dataset, make_toy_dataset
from synthcas.diffusion import ClassEncoder, ConditionalSampler, SamplerParams, build_schedule, state_hash
from synthcas.hpo import sampler_space
from synthcas.pipeline import (
    AdaptationPipeline, CheckpointRegistry, PipelineConfig, StageOrderError, StageResult,
    generate_scaled_datasets, load_backbone, run_pipeline, shrink_search_space,
)
from synthcas.reporting import read_table1, read_table2

from conftest import TINY_DIFFUSION, tiny_config


# -- search-space shrinking ------------------------------------------------------------

def _bounds(space):
    return {p.name: (p.low, p.high) for p in space.params}


def test_shrink_rule():
    space = shrink_search_space(SamplerParams(IS=30, UGS=3.0, epoch=7), sampler_space())
    assert _bounds(space) == {"IS": (5, 30), "UGS": (0.0, 6.0), "epoch": (1, 10)}


def test_shrink_boundaries():
    assert _bounds(shrink_search_space(SamplerParams(IS=5, UGS=1.0), sampler_space()))["IS"] == (5, 5)
    assert _bounds(shrink_search_space(SamplerParams(IS=9, UGS=0.0), sampler_space()))["UGS"] == (0.0, 0.0)


def test_shrink_is_subset():
    original = sampler_space()
    rng = np.random.default_rng(0)
    for _ in range(50):
        best = SamplerParams(IS=int(rng.integers(5, 51)), UGS=float(rng.uniform(0, 7.5)))
        b = _bounds(shrink_search_space(best, original))
        assert original["IS"].low <= b["IS"][0] <= b["IS"][1] <= original["IS"].high
        assert b["UGS"][0] == original["UGS"].low and b["UGS"][1] <= 2 * original["UGS"].high


def test_shrink_rejects_out_of_space():
    with pytest.raises(AssertionError):
        shrink_search_space(SamplerParams(IS=60, UGS=1.0), sampler_space())


# -- registry and results -------------------------------------------------------------

def test_registry_round_trip(tmp_path):
    reg = CheckpointRegistry()
    reg.register("class_encoder", 2, tmp_path / "a.npz")
    reg.register("denoiser", 1, tmp_path / "b.npz")
    reg.save(tmp_path / "r.json")
    back = CheckpointRegistry.load(tmp_path / "r.json")
    assert back.paths == reg.paths and back.provenance == reg.provenance
    assert back.epochs("class_encoder") == [2]
    with pytest.raises(KeyError):
        back.resolve("denoiser", 5)


def test_stage_result_round_trip():
    r = StageResult(2, SamplerParams(IS=12, UGS=1.5, epoch=3, seed=7), 0.5, 1.25, 240, "x", 15, 4, 1)
    assert StageResult.from_dict(json.loads(json.dumps(r.to_dict()))) == r


def test_config_round_trip():
    cfg = tiny_config()
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ValueError):
        tiny_config(factors=(0,))


# -- scaled datasets ------------------------------------------------------------------

def _tiny_sampler(backbone):
    den, null, diff, _ = load_backbone(backbone)
    enc = ClassEncoder(2, diff.cond_dim)
    return ConditionalSampler(den, enc, diff.schedule(), ["a", "b"], output_resolution=8)


def test_scaled_counts(tiny_backbone):
    sampler = _tiny_sampler(tiny_backbone)
    datasets, timings = generate_scaled_datasets(sampler, SamplerParams(IS=2, UGS=1.0), [3, 7], [1, 3])
    assert [d.class_distribution().tolist() for d in datasets] == [[3, 7], [9, 21]]
    assert [t.forward_evals for t in timings] == [2 * 2 * 10, 2 * 2 * 30]
    assert datasets[0].meta["factor"] == "1"
    with pytest.raises(ValueError):
        generate_scaled_datasets(sampler, SamplerParams(IS=2), [3, 7], [])


def test_scaled_factor_ten_size(tiny_backbone):
    sampler = _tiny_sampler(tiny_backbone)
    (ds,), _ = generate_scaled_datasets(sampler, SamplerParams(IS=1, UGS=0.0), [4, 6], [10])
    assert len(ds) == 100


# -- stages ----------------------------------------------------------------------------

def test_pipeline_rejects_non_real_inputs(tiny_backbone, tiny_data, tmp_path):
    train, test = tiny_data
    fake = train.subset(np.arange(len(train)))
    fake.provenance = "synthetic"
    with pytest.raises(ValueError):
        AdaptationPipeline(tiny_config(), fake, test, tiny_backbone, tmp_path)


def test_stage_order_enforced(tiny_backbone, tiny_data, tmp_path):
    train, test = tiny_data
    pipe = AdaptationPipeline(tiny_config(), train, test, tiny_backbone, tmp_path / "run")
    with pytest.raises(StageOrderError):
        pipe.stage2(CheckpointRegistry())
    with pytest.raises(StageOrderError):
        pipe.stage3_finetune(CheckpointRegistry(), None)


def test_stage1_freezes_backbone(tiny_backbone, tiny_data, tmp_path):
    train, test = tiny_data
    pipe = AdaptationPipeline(tiny_config(), train, test, tiny_backbone, tmp_path / "run")
    registry, result = pipe.stage1_transfer_learning()
    assert registry.epochs("class_encoder") == [1, 2]
    assert result.params.IS == 50 and result.params.UGS == 7.5 and result.params.epoch == 2
    meta = json.loads((tmp_path / "run" / "stage1" / "result.json").read_text())
    assert meta["backbone_hash"] == state_hash(load_backbone(tiny_backbone)[0])
    assert 0 <= result.cas <= 1


@pytest.fixture(scope="module")
def tiny_run(tiny_backbone, tiny_data, tmp_path_factory):
    train, test = tiny_data
    run_dir = tmp_path_factory.mktemp("run") / "runs" / "tiny"
    cfg = tiny_config(diffusion=TINY_DIFFUSION, default_IS=6)
    report = run_pipeline(cfg, train, test, tiny_backbone, run_dir)
    return cfg, report, run_dir


def test_run_layout(tiny_run):
    cfg, report, run_dir = tiny_run
    for k in (1, 2, 3, 4):
        d = run_dir / f"stage{k}"
        assert (d / "DONE").is_file() and (d / "report.csv").is_file() and (d / "result.json").is_file()
    for k in (2, 4):
        assert (run_dir / f"stage{k}" / "journal.jsonl").is_file()
        assert (run_dir / f"stage{k}" / "importance.csv").is_file()
    assert len(list((run_dir / "stage1" / "checkpoints").glob("*.npz"))) == 2
    assert len(list((run_dir / "stage3" / "checkpoints").glob("*.npz"))) == 2
    assert (run_dir / "final" / "x1" / "manifest").is_file()
    assert read_table2(run_dir / "final" / "table2.csv")["toy"].keys() == {"Real", "x1", "x2"}


def test_run_report_rows(tiny_run):
    cfg, report, run_dir = tiny_run
    assert [s.stage for s in report.stages] == [1, 2, 3, 4]
    assert all(0 <= s.cas <= 1 for s in report.stages)
    table = read_table1(run_dir / "table1.csv")["toy"]
    assert table["CAS After 4."] == pytest.approx(report.stages[3].cas, abs=1e-6)
    assert [r.label for r in report.sweep] == ["Real", "x1", "x2"]


def test_stage3_keeps_encoder_and_uses_stage2_epoch(tiny_run):
    cfg, report, run_dir = tiny_run
    stage2 = report.stages[1]
    reg3 = CheckpointRegistry.load(run_dir / "stage3" / "registry.json")
    reg1 = CheckpointRegistry.load(run_dir / "stage1" / "registry.json")
    assert reg3.resolve("class_encoder", stage2.params.epoch) == reg1.resolve("class_encoder", stage2.params.epoch)
    assert reg3.epochs("denoiser") == [1, 2]


def test_stage4_space_within_shrunk_bounds(tiny_run):
    cfg, report, run_dir = tiny_run
    s2, s4 = report.stages[1].params, report.stages[3].params
    assert cfg.is_bounds[0] <= s4.IS <= s2.IS
    assert 0 <= s4.UGS <= 2 * s2.UGS + 1e-12
    assert 1 <= s4.epoch <= cfg.stage3.epochs


def test_synthetic_manifests_record_params(tiny_run):
    cfg, report, run_dir = tiny_run
    ds = load_dataset(run_dir / "final" / "x2")
    s4 = report.stages[3].params
    assert ds.provenance == "synthetic" and ds.meta["IS"] == str(s4.IS)
    assert ds.class_distribution().tolist() == [24, 16, 20]


def test_resume_skips_completed(tiny_run, tiny_backbone, tiny_data):
    cfg, report, run_dir = tiny_run
    train, test = tiny_data
    stamp = (run_dir / "stage2" / "DONE").stat().st_mtime_ns
    again = run_pipeline(cfg, train, test, tiny_backbone, run_dir, resume=True)
    assert (run_dir / "stage2" / "DONE").stat().st_mtime_ns == stamp
    assert [s.to_dict() for s in again.stages] == [s.to_dict() for s in report.stages]


def test_interrupted_then_resumed_equals_uninterrupted(tiny_run, tiny_backbone, tiny_data, tmp_path):
    cfg, report, run_dir = tiny_run
    train, test = tiny_data
    resumed_dir = tmp_path / "resumed"
    pipe = AdaptationPipeline(cfg, train, test, tiny_backbone, resumed_dir)
    reg1, _ = pipe.stage1_transfer_learning()
    pipe.stage2(reg1)  # "crash" after stage 2
    again = run_pipeline(cfg, train, test, tiny_backbone, resumed_dir, resume=True)
    strip = lambda rs: [(s.stage, s.params, s.cas, s.forward_evals) for s in rs]
    assert strip(again.stages) == strip(report.stages)
    assert [(r.label, r.accuracy) for r in again.sweep] == [(r.label, r.accuracy) for r in report.sweep]
