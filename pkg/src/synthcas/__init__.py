"""Adapt a class-conditional diffusion model to a labelled dataset and score it by CAS."""

from .data import LabeledDataset, load_dataset, make_toy_dataset, stratified_counts, write_dataset
from .diffusion import (
    ClassEncoder, ConditionalSampler, Denoiser, ForwardCounter, SamplerParams, TrainConfig,
    build_schedule, ddim_sample, denoise_loss, guided_epsilon, sample_batch, train_component,
)
from .evaluation import (
    ClassifierConfig, TrainingPolicy, accuracy, compute_cas, measure_generation_time, resnet20,
    scaling_sweep_eval, train_classifier,
)
from .hpo import HyperbandPruner, Param, SearchSpace, Study, TrialPruned, sampler_space
from .importance import ImportanceReport, fanova_from_data, fanova_importance
from .pipeline import (
    AdaptationPipeline, DiffusionConfig, PipelineConfig, load_backbone, pretrain_backbone, run_pipeline,
)
from .reporting import build_report

__version__ = "0.1.0"
