"""Denoising-diffusion anomaly detection.

A compact research implementation: a noise-prediction UNet trained on
nominal images, conditioned DDIM reconstruction that pulls partially
noised inputs back toward themselves, pixel- and feature-space distance
maps fused into anomaly heatmaps, and AUROC/PRO evaluation — plus a
synthetic-texture harness so the whole chain runs on a single desk
machine.
"""

from ddad.data import (
    Dataset,
    DatasetItem,
    SynthSpec,
    load_dataset,
    synth_dataset,
    write_mvtec_layout,
)
from ddad.denoiser import (
    DenoiserConfig,
    TrainConfig,
    build_denoiser,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_step,
)
from ddad.features import (
    DomainAdaptConfig,
    ToyFeatureExtractor,
    TorchvisionResNetExtractor,
    adaptation_loss,
    build_extractor,
    domain_adapt,
    extract,
    load_extractor,
    save_extractor,
    similarity_loss,
)
from ddad.metrics import (
    EvaluationReport,
    auroc,
    evaluate,
    image_auroc,
    pixel_auroc,
    pro,
)
from ddad.pipeline import (
    MetricConfig,
    PipelineConfig,
    ScheduleSpec,
    ablate,
    benchmark_config,
    config_hash,
    format_ablation,
    load_config,
    run_pipeline,
    save_config,
)
from ddad.reconstruct import ReconstructionConfig, reconstruct
from ddad.schedule import VarianceSchedule, build_schedule, perturb, perturb_batch
from ddad.scoring import (
    AnomalyHeatmap,
    ScoreConfig,
    combine,
    combine_dataset,
    feature_distance,
    pixel_distance,
    score_dataset,
    score_image,
    smooth,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalyHeatmap",
    "Dataset",
    "DatasetItem",
    "DenoiserConfig",
    "DomainAdaptConfig",
    "EvaluationReport",
    "MetricConfig",
    "PipelineConfig",
    "ReconstructionConfig",
    "ScheduleSpec",
    "ScoreConfig",
    "SynthSpec",
    "TorchvisionResNetExtractor",
    "ToyFeatureExtractor",
    "TrainConfig",
    "VarianceSchedule",
    "ablate",
    "adaptation_loss",
    "auroc",
    "benchmark_config",
    "build_denoiser",
    "build_extractor",
    "build_schedule",
    "combine",
    "combine_dataset",
    "config_hash",
    "domain_adapt",
    "evaluate",
    "extract",
    "feature_distance",
    "fit",
    "format_ablation",
    "image_auroc",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "load_extractor",
    "perturb",
    "perturb_batch",
    "pixel_auroc",
    "pixel_distance",
    "pro",
    "reconstruct",
    "run_pipeline",
    "save_checkpoint",
    "save_config",
    "save_extractor",
    "score_dataset",
    "score_image",
    "similarity_loss",
    "smooth",
    "synth_dataset",
    "train_step",
    "write_mvtec_layout",
]
