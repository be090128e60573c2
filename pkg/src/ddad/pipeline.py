"""Experiment orchestration.

A PipelineConfig gathers every sub-config, serializes to a single YAML file,
and hashes canonically so runs are identifiable and replayable. Stage
execution (train / finetune / detect / eval) writes into a timestamped run
directory: checkpoints, per-image heatmaps (raw array + colormapped PNG +
JSON sidecar), reconstructions, report.json, and a manifest that records the
config hash and seeds needed for exact replay.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .data import Dataset, SynthSpec, load_dataset, synth_dataset
from .denoiser import (
    DenoiserConfig,
    TrainConfig,
    build_denoiser,
    fit,
    load_checkpoint,
    save_checkpoint,
)
from .features import (
    DomainAdaptConfig,
    build_extractor,
    domain_adapt,
    load_extractor,
    save_extractor,
    state_hash,
)
from .metrics import EvaluationReport, evaluate, image_auroc, pixel_auroc
from .reconstruct import ReconstructionConfig
from .schedule import build_schedule
from .scoring import (
    ScoreConfig,
    distance_maps,
    feature_distance,
    heatmaps_from_distances,
)

STAGES = ("train", "finetune", "detect", "eval")
DATA_ROOT_ENV = "DDAD_DATA_ROOT"


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "linear"
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        return build_schedule(self.kind, self.num_steps, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class MetricConfig:
    fpr_limit: float = 0.3
    compute_pro: bool = True


@dataclass
class PipelineConfig:
    category: str = "synth-stripes"
    data_root: str | None = None  # None: DDAD_DATA_ROOT, then the synth section
    resolution: int = 64
    seed: int = 0
    denoiser_ckpt: str | None = None  # pre-existing artifacts for later stages
    extractor_ckpt: str | None = None
    backbone: str = "toy-cnn"
    synth: SynthSpec | None = field(default_factory=SynthSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    arch: DenoiserConfig = field(default_factory=lambda: DenoiserConfig(input_resolution=64))
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: DomainAdaptConfig = field(default_factory=DomainAdaptConfig)
    recon: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)


_SECTIONS = {
    "synth": SynthSpec,
    "schedule": ScheduleSpec,
    "arch": DenoiserConfig,
    "train": TrainConfig,
    "adapt": DomainAdaptConfig,
    "recon": ReconstructionConfig,
    "score": ScoreConfig,
    "metrics": MetricConfig,
}
_SCALARS = (
    "category",
    "data_root",
    "resolution",
    "seed",
    "denoiser_ckpt",
    "extractor_ckpt",
    "backbone",
)


def config_to_dict(cfg: PipelineConfig) -> dict:
    # JSON round-trip normalizes tuples to lists so YAML stays plain
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_from_dict(d: dict) -> PipelineConfig:
    unknown = set(d) - set(_SECTIONS) - set(_SCALARS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {k: d[k] for k in _SCALARS if k in d}
    for name, cls in _SECTIONS.items():
        if name not in d:
            continue
        section = d[name]
        if section is None:
            kwargs[name] = None
            continue
        valid = {f.name for f in dataclasses.fields(cls)}
        bad = set(section) - valid
        if bad:
            raise ValueError(f"unknown keys in config section {name!r}: {sorted(bad)}")
        kwargs[name] = cls(**section)
    return PipelineConfig(**kwargs)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def load_config(path) -> PipelineConfig:
    d = yaml.safe_load(Path(path).read_text())
    if not isinstance(d, dict):
        raise ValueError(f"config file {path} does not hold a mapping")
    return config_from_dict(d)


def config_hash(cfg: PipelineConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


# ---------------------------------------------------------------------------
# run directories and artifacts


def new_run_dir(out_root="runs") -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out_root)
    run = base / stamp
    i = 1
    while run.exists():
        run = base / f"{stamp}-{i}"
        i += 1
    for sub in ("checkpoints", "heatmaps", "reconstructions"):
        (run / sub).mkdir(parents=True)
    return run


def _ensure_run_layout(run: Path) -> None:
    for sub in ("checkpoints", "heatmaps", "reconstructions"):
        (run / sub).mkdir(parents=True, exist_ok=True)


def _load_manifest(run: Path, cfg: PipelineConfig) -> dict:
    """Manifest for the run, created or refreshed for the current config.

    The top-level config always mirrors the latest call (verbs may layer
    flags onto a continued run); each stage entry additionally records the
    config hash it actually ran under, so the provenance of every artifact
    stays exact.
    """
    path = run / "manifest.json"
    if path.is_file():
        manifest = json.loads(path.read_text())
        manifest["config"] = config_to_dict(cfg)
        manifest["config_hash"] = config_hash(cfg)
        manifest["seed"] = cfg.seed
        return manifest
    return {
        "created": datetime.now(timezone.utc).isoformat(),
        "config": config_to_dict(cfg),
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "stages_completed": [],
        "artifacts": {},
    }


def _write_manifest(run: Path, manifest: dict) -> None:
    (run / "manifest.json").write_text(json.dumps(manifest, indent=2))


# hand-rolled sequential colormap (dark violet to bright yellow), so heatmap
# PNGs need no plotting dependency
_LUT_STOPS = np.array(
    [[0, 0, 4], [87, 16, 110], [188, 55, 84], [249, 142, 9], [252, 255, 164]],
    dtype=np.float64,
)


def colormap(x: np.ndarray) -> np.ndarray:
    """Normalized [0,1] array to uint8 RGB [H,W,3]."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    pos = np.linspace(0.0, 1.0, len(_LUT_STOPS))
    chans = [np.interp(x, pos, _LUT_STOPS[:, c]) for c in range(3)]
    return np.round(np.stack(chans, axis=-1)).astype(np.uint8)


def save_heatmap_png(path, heat: np.ndarray, vmax: float) -> None:
    scale = vmax if vmax > 0 else 1.0
    Image.fromarray(colormap(heat / scale)).save(path)


def save_image_png(path, img: np.ndarray) -> None:
    """[-1,1] float [3,H,W] to an 8-bit PNG."""
    arr = np.clip((img + 1.0) / 2.0, 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)).save(path)


# ---------------------------------------------------------------------------
# stage execution


def resolve_dataset(cfg: PipelineConfig) -> Dataset:
    root = cfg.data_root or os.environ.get(DATA_ROOT_ENV)
    if root:
        return load_dataset(root, cfg.category, cfg.resolution)
    if cfg.synth is not None:
        if cfg.synth.resolution != cfg.resolution:
            raise ValueError(
                f"synth resolution {cfg.synth.resolution} != pipeline resolution {cfg.resolution}"
            )
        return synth_dataset(cfg.synth, cfg.seed)
    raise ValueError(
        f"no data source: set data_root, the {DATA_ROOT_ENV} environment variable, "
        "or a synth section"
    )


def _test_items(dataset: Dataset) -> list:
    return dataset.split("test_good") + dataset.split("test_defect")


def _validate_stages(cfg: PipelineConfig, stages, run_dir) -> list:
    stages = list(stages)
    if not stages:
        raise ValueError("no stages requested")
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ValueError(f"unknown stages {bad}; valid: {STAGES}")
    stages = [s for s in STAGES if s in stages]

    def in_run(rel: str) -> bool:
        return run_dir is not None and (Path(run_dir) / rel).exists()

    have_denoiser = (
        "train" in stages or cfg.denoiser_ckpt is not None or in_run("checkpoints/denoiser.pt")
    )
    for stage in ("finetune", "detect"):
        if stage in stages and not have_denoiser:
            raise ValueError(
                f"{stage} needs a trained denoiser: include the train stage, set "
                "denoiser_ckpt, or reuse a run directory holding one"
            )
    if cfg.denoiser_ckpt and not Path(cfg.denoiser_ckpt).is_file():
        raise FileNotFoundError(f"denoiser checkpoint not found: {cfg.denoiser_ckpt}")
    if cfg.extractor_ckpt and not Path(cfg.extractor_ckpt).is_file():
        raise FileNotFoundError(f"extractor checkpoint not found: {cfg.extractor_ckpt}")
    if "eval" in stages and "detect" not in stages:
        have_maps = run_dir is not None and any(Path(run_dir).glob("heatmaps/*.npy"))
        if not have_maps:
            raise ValueError(
                "eval needs heatmaps: include the detect stage or reuse a run "
                "directory holding them"
            )
    return stages


def run_pipeline(
    cfg: PipelineConfig, stages, out_root="runs", run_dir=None, log=None
):
    """Execute the requested stages; returns (report or None, run directory).

    Dependencies are checked before any work starts. Later stages prefer
    artifacts produced in the same run directory, then fall back to the
    checkpoint paths named in the config.
    """
    say = log or (lambda msg: None)
    stages = _validate_stages(cfg, stages, run_dir)
    h = config_hash(cfg)
    run = Path(run_dir) if run_dir is not None else new_run_dir(out_root)
    _ensure_run_layout(run)
    manifest = _load_manifest(run, cfg)
    save_config(cfg, run / "config.yaml")

    dataset = resolve_dataset(cfg)
    schedule = cfg.schedule.build()
    denoiser_path = run / "checkpoints" / "denoiser.pt"
    extractor_path = run / "checkpoints" / "extractor.pt"

    def denoiser_source():
        if denoiser_path.is_file():
            return denoiser_path
        return cfg.denoiser_ckpt

    report = None
    for stage in stages:
        say(f"stage {stage}")
        if stage == "train":
            images = dataset.images("train_good")
            model = build_denoiser(cfg.arch, schedule.num_steps, seed=cfg.train.seed)
            losses = fit(model, images, schedule, cfg.train, log=log)
            save_checkpoint(model, schedule, denoiser_path)
            manifest["artifacts"]["denoiser_ckpt"] = str(denoiser_path)
            manifest["train"] = {
                "config_hash": h,
                "steps": len(losses),
                "final_loss": losses[-1],
                "num_images": int(images.shape[0]),
            }
        elif stage == "finetune":
            model, _ = load_checkpoint(denoiser_source(), schedule=schedule)
            torch.manual_seed(cfg.seed)
            fe = build_extractor(cfg.backbone)
            twin_hash = state_hash(fe)
            images = dataset.images("train_good")
            losses = domain_adapt(fe, model, schedule, images, cfg.adapt, cfg.recon, log=log)
            save_extractor(fe, extractor_path, twin_hash=twin_hash)
            manifest["artifacts"]["extractor_ckpt"] = str(extractor_path)
            manifest["finetune"] = {
                "config_hash": h,
                "steps": len(losses),
                "final_loss": losses[-1],
            }
        elif stage == "detect":
            model, _ = load_checkpoint(denoiser_source(), schedule=schedule)
            fe = None
            if cfg.score.mode != "pixel_only":
                if extractor_path.is_file():
                    fe = load_extractor(extractor_path)
                elif cfg.extractor_ckpt:
                    fe = load_extractor(cfg.extractor_ckpt)
                else:
                    warnings.warn(
                        "no adapted extractor available; scoring with a freshly "
                        "initialized one",
                        RuntimeWarning,
                    )
                    torch.manual_seed(cfg.seed)
                    fe = build_extractor(cfg.backbone)
            items = _test_items(dataset)
            if not items:
                raise ValueError("dataset has no test items to score")
            images = torch.from_numpy(np.stack([it.image for it in items]))
            dp, df, recons = distance_maps(
                model, fe, images, cfg.recon, cfg.score, schedule, return_recons=True
            )
            heatmaps = heatmaps_from_distances(dp, df, cfg.score)
            vmax = max(hm.image_score for hm in heatmaps)
            for i, (it, hm) in enumerate(zip(items, heatmaps)):
                stem = f"{i:04d}_{it.defect_type}"
                np.save(run / "heatmaps" / f"{stem}.npy", hm.map)
                save_heatmap_png(run / "heatmaps" / f"{stem}.png", hm.map, vmax)
                sidecar = {
                    "image_score": hm.image_score,
                    "config_hash": h,
                    "label": int(it.split == "test_defect"),
                    "defect_type": it.defect_type,
                    "provenance": hm.provenance,
                }
                (run / "heatmaps" / f"{stem}.json").write_text(json.dumps(sidecar, indent=2))
                save_image_png(run / "reconstructions" / f"{stem}.png", recons[i].numpy())
            manifest["artifacts"]["heatmaps_dir"] = str(run / "heatmaps")
            manifest["detect"] = {
                "config_hash": h,
                "num_images": len(items),
                "mode": cfg.score.mode,
            }
        else:  # eval
            items = _test_items(dataset)
            map_files = sorted((run / "heatmaps").glob("*.npy"))
            if len(map_files) != len(items):
                raise ValueError(
                    f"{len(map_files)} heatmaps but {len(items)} test items; "
                    "re-run detect with the same data configuration"
                )
            heatmaps = [np.load(p) for p in map_files]
            masks = [it.mask for it in items]
            labels = [int(it.split == "test_defect") for it in items]
            scores = [float(m.max()) for m in heatmaps]
            ids = [p.stem for p in map_files]
            report = evaluate(
                heatmaps,
                masks,
                labels,
                scores,
                ids=ids,
                fpr_limit=cfg.metrics.fpr_limit,
                compute_pro=cfg.metrics.compute_pro,
                config_hash=h,
            )
            (run / "report.json").write_text(report.to_json())
            manifest["artifacts"]["report"] = str(run / "report.json")
            say(report.table())
        if stage not in manifest["stages_completed"]:
            manifest["stages_completed"].append(stage)
        _write_manifest(run, manifest)
    return report, run


# ---------------------------------------------------------------------------
# ablations


def _feature_stack(recons, images, fe, scfg: ScoreConfig):
    parts = []
    with torch.no_grad():
        for start in range(0, images.shape[0], scfg.batch_size):
            end = start + scfg.batch_size
            parts.append(feature_distance(recons[start:end], images[start:end], fe, scfg))
    return torch.cat(parts)


def _variant_metrics(heatmaps, masks, labels) -> dict:
    scores = np.array([hm.image_score for hm in heatmaps])
    stack = [hm.map for hm in heatmaps]
    return {
        "image_auroc": image_auroc(scores, labels),
        "pixel_auroc": pixel_auroc(stack, masks),
    }


def ablate(cfg: PipelineConfig, out_root="runs", run_dir=None, log=None) -> dict:
    """Score the test set under the ablation variants and compare.

    Variants: pixel-only with and without conditioning, feature-only with the
    adapted and the unadapted extractor, and the combined map. Reconstruction
    runs only twice (conditioned and unconditioned); every variant reuses
    those cached reconstructions.
    """
    say = log or (lambda msg: None)
    run = Path(run_dir) if run_dir is not None else new_run_dir(out_root)
    _ensure_run_layout(run)

    denoiser_src = (
        run / "checkpoints" / "denoiser.pt"
        if (run / "checkpoints" / "denoiser.pt").is_file()
        else cfg.denoiser_ckpt
    )
    extractor_src = (
        run / "checkpoints" / "extractor.pt"
        if (run / "checkpoints" / "extractor.pt").is_file()
        else cfg.extractor_ckpt
    )
    if denoiser_src is None:
        raise ValueError("ablate needs a trained denoiser checkpoint")
    if extractor_src is None:
        raise ValueError("ablate needs an adapted extractor checkpoint")

    dataset = resolve_dataset(cfg)
    schedule = cfg.schedule.build()
    model, _ = load_checkpoint(denoiser_src, schedule=schedule)
    fe_adapted = load_extractor(extractor_src)
    # the unadapted baseline re-creates the pre-finetune initialization
    torch.manual_seed(cfg.seed)
    fe_plain = build_extractor(cfg.backbone)

    items = _test_items(dataset)
    images = torch.from_numpy(np.stack([it.image for it in items]))
    masks = [it.mask for it in items]
    labels = [int(it.split == "test_defect") for it in items]

    say(f"ablate: scoring {len(items)} images, conditioned pass (w={cfg.recon.w})")
    scfg = replace(cfg.score, mode="combined")
    dp_c, df_adapted, recons = distance_maps(
        model, fe_adapted, images, cfg.recon, scfg, schedule, return_recons=True
    )
    df_plain = _feature_stack(recons, images, fe_plain, scfg)
    say("ablate: unconditioned pass (w=0)")
    dp_u, _ = distance_maps(
        model, None, images, replace(cfg.recon, w=0.0),
        replace(cfg.score, mode="pixel_only"), schedule,
    )

    variants = {
        "pixel_conditioned": heatmaps_from_distances(
            dp_c, None, replace(cfg.score, mode="pixel_only")
        ),
        "pixel_unconditioned": heatmaps_from_distances(
            dp_u, None, replace(cfg.score, mode="pixel_only")
        ),
        "feature_adapted": heatmaps_from_distances(
            None, df_adapted, replace(cfg.score, mode="feature_only")
        ),
        "feature_pretrained": heatmaps_from_distances(
            None, df_plain, replace(cfg.score, mode="feature_only")
        ),
        "combined": heatmaps_from_distances(dp_c, df_adapted, scfg),
    }
    table = {name: _variant_metrics(hms, masks, labels) for name, hms in variants.items()}
    comparisons = {
        "conditioning": table["pixel_conditioned"]["image_auroc"]
        - table["pixel_unconditioned"]["image_auroc"],
        "adaptation": table["feature_adapted"]["image_auroc"]
        - table["feature_pretrained"]["image_auroc"],
        "combination": table["combined"]["image_auroc"]
        - max(
            table["pixel_conditioned"]["image_auroc"],
            table["feature_adapted"]["image_auroc"],
        ),
    }
    result = {
        "table": table,
        "comparisons": comparisons,
        "config_hash": config_hash(cfg),
        "w": cfg.recon.w,
    }
    (run / "ablation.json").write_text(json.dumps(result, indent=2))
    say(format_ablation(result))
    return result


def benchmark_config(seed: int = 0) -> PipelineConfig:
    """Desk-scale synthetic benchmark: stripes with patch defects at 64x64.

    Sized so the full chain (train, finetune, detect, eval) finishes in a
    few minutes per seed on one CPU core while still separating nominal
    from defective images cleanly.
    """
    return PipelineConfig(
        category="synth-stripes",
        resolution=64,
        seed=seed,
        synth=SynthSpec(
            n_train=200,
            n_test=50,
            pattern="stripes",
            defect_types=("patch",),
            resolution=64,
        ),
        schedule=ScheduleSpec(),
        arch=DenoiserConfig(
            input_resolution=64,
            base_channels=16,
            channel_mults=(1, 2, 2),
            res_blocks=1,
            attention_layers=1,
            groups=8,
        ),
        train=TrainConfig(
            learning_rate=3e-4,
            weight_decay=0.05,
            batch_size=16,
            epochs=30,
            seed=seed,
        ),
        adapt=DomainAdaptConfig(
            lambda_dl=0.1,
            learning_rate=1e-3,
            epochs=8,
            batch_size=8,
            w_finetune=3.0,
            layer_set=(1, 2, 3),
            seed=seed,
        ),
        recon=ReconstructionConfig(
            w=3.0,
            t_start=250,
            n_steps=10,
            sigma_mode=0.0,
            seed=seed,
        ),
        score=ScoreConfig(
            v=1.0,
            layer_set=(1, 2, 3),
            sigma_g=4.0,
            norm_scope="eval_set",
            patch_window=3,
            mode="combined",
            batch_size=16,
        ),
    )


def format_ablation(result: dict) -> str:
    lines = [f"{'variant':22s} {'image AUROC':>12s} {'pixel AUROC':>12s}"]
    for name, m in result["table"].items():
        lines.append(f"{name:22s} {m['image_auroc']:12.4f} {m['pixel_auroc']:12.4f}")
    lines.append("")
    for name, delta in result["comparisons"].items():
        lines.append(f"delta[{name}] = {delta:+.4f}")
    return "\n".join(lines)
