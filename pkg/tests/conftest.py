import warnings

import pytest
import torch

from synthcas.data import make_toy_dataset
from synthcas.diffusion import TrainConfig
from synthcas.evaluation import ClassifierConfig, TrainingPolicy
from synthcas.pipeline import DiffusionConfig, PipelineConfig, pretrain_backbone

warnings.filterwarnings("ignore", message=".*GroupNorm.*")
torch.set_num_threads(1)

TINY_DIFFUSION = DiffusionConfig(base_width=4, levels=2, cond_dim=8, resolution=8, sample_batch=64)


def tiny_config(**kw) -> PipelineConfig:
    base = dict(
        name="tiny", dataset_name="toy", seed=0,
        stage1=TrainConfig(epochs=2, batch_size=8, lr=1e-2),
        stage3=TrainConfig(epochs=2, batch_size=8, lr=1e-3),
        hpo_trials=3, eval_size=30, is_bounds=(2, 6), factors=(1, 2),
        diffusion=TINY_DIFFUSION,
        classifier=ClassifierConfig(base_width=4, blocks_per_stage=1),
        policy=TrainingPolicy(epochs=2, batch_size=16),
    )
    base.update(kw)
    return PipelineConfig(**base)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def tiny_backbone(tmp_path_factory):
    source = make_toy_dataset(6, num_classes=2, resolution=16, class_offset=3)
    return pretrain_backbone(source, TINY_DIFFUSION, TrainConfig(epochs=1, batch_size=8, lr=1e-3),
                             tmp_path_factory.mktemp("backbone"))


@pytest.fixture(scope="session")
def tiny_data():
    train = make_toy_dataset([12, 8, 10], num_classes=3, resolution=16, seed=1)
    test = make_toy_dataset(4, num_classes=3, resolution=16, seed=1, split="test")
    return train, test
