"""Anomaly scoring.

Turns a reconstruction/input pair into a per-pixel anomaly heatmap: an L1
pixel distance, a multi-layer cosine feature distance, their calibrated sum
(the pixel term is rescaled so both share the same upper bound over the
normalization scope), and a final Gaussian smoothing. The image-level score
is the maximum pixel of the smoothed map.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .features import cosine_distance_map, extract, patch_aggregate
from .reconstruct import ReconstructionConfig, reconstruct

PROVENANCES = ("pixel_only", "feature_only", "combined")
NORM_SCOPES = ("eval_set", "per_image")


@dataclass(frozen=True)
class ScoreConfig:
    v: float = 1.0  # weight of the pixel term relative to the feature term
    layer_set: tuple = (2, 3)
    sigma_g: float = 4.0  # 0 disables smoothing
    norm_scope: str = "eval_set"
    patch_window: int = 3
    mode: str = "combined"
    batch_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "layer_set", tuple(self.layer_set))
        if self.v < 0:
            raise ValueError(f"v must be >= 0, got {self.v}")
        if self.sigma_g < 0:
            raise ValueError(f"sigma_g must be >= 0, got {self.sigma_g}")
        if self.norm_scope not in NORM_SCOPES:
            raise ValueError(f"norm_scope must be one of {NORM_SCOPES}, got {self.norm_scope!r}")
        if self.mode not in PROVENANCES:
            raise ValueError(f"mode must be one of {PROVENANCES}, got {self.mode!r}")
        if not self.layer_set:
            raise ValueError("layer_set must not be empty")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class AnomalyHeatmap:
    map: np.ndarray  # float32 [H,W], finite, >= 0
    image_score: float  # max over map
    provenance: str

    @classmethod
    def from_map(cls, m, provenance: str) -> "AnomalyHeatmap":
        if provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {provenance!r}")
        arr = np.asarray(m, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"heatmap must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("heatmap contains non-finite values")
        if arr.min() < 0:
            raise ValueError("heatmap contains negative values")
        return cls(map=arr, image_score=float(arr.max()), provenance=provenance)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


def pixel_distance(x0: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-pixel channel-mean |x0 - y|, shape [B,H,W]."""
    x0, y = _as_batch(x0), _as_batch(y)
    if x0.shape != y.shape:
        raise ValueError(f"shapes differ: {tuple(x0.shape)} vs {tuple(y.shape)}")
    return (x0 - y).abs().mean(dim=1)


def layer_distance_maps(x0, y, fe, cfg: ScoreConfig) -> dict:
    """Per-layer cosine distance on the feature grid (before any upsampling)."""
    feats_x0 = extract(fe, x0, cfg.layer_set)
    feats_y = extract(fe, y, cfg.layer_set)
    out = {}
    for j in sorted(cfg.layer_set):
        a = patch_aggregate(feats_x0[j], cfg.patch_window)
        b = patch_aggregate(feats_y[j], cfg.patch_window)
        out[j] = cosine_distance_map(a, b)
    return out


def feature_distance(x0, y, fe, cfg: ScoreConfig) -> torch.Tensor:
    """Summed per-layer cosine distances, upsampled to input resolution [B,H,W]."""
    x0, y = _as_batch(x0), _as_batch(y)
    size = x0.shape[-2:]
    total = None
    for j, d in layer_distance_maps(x0, y, fe, cfg).items():
        if d.shape[-2:] != size:
            d = F.interpolate(
                d.unsqueeze(1), size=size, mode="bilinear", align_corners=False
            ).squeeze(1)
        total = d if total is None else total + d
    return total.clamp_min(0.0)


def combine(dp: torch.Tensor, df: torch.Tensor, cfg: ScoreConfig, norm_stats: dict) -> torch.Tensor:
    """(v * maxDf / maxDp) * Dp + Df; the scaled pixel term then tops out at v * maxDf."""
    max_dp, max_df = float(norm_stats["maxDp"]), float(norm_stats["maxDf"])
    if max_dp == 0.0:
        warnings.warn(
            "pixel distances are identically zero over the normalization scope; "
            "dropping the pixel term",
            RuntimeWarning,
        )
        return df.clone()
    return (cfg.v * max_df / max_dp) * dp + df


def _check_calibration(cfg: ScoreConfig, max_dp: float, max_df: float) -> None:
    # post-condition of the combination: the rescaled pixel maximum must land
    # on v * maxDf (scalar arithmetic, so this is ulp-level)
    if max_dp == 0.0:
        return
    scaled = (cfg.v * max_df / max_dp) * max_dp
    target = cfg.v * max_df
    if abs(scaled - target) > 1e-9 * max(1.0, abs(target)):
        raise AssertionError(
            f"calibration identity violated: {scaled!r} vs {target!r}"
        )


def combine_dataset(dp: torch.Tensor, df: torch.Tensor, cfg: ScoreConfig) -> torch.Tensor:
    """Combine stacks [N,H,W] under the configured normalization scope."""
    if dp.shape != df.shape:
        raise ValueError(f"stack shapes differ: {tuple(dp.shape)} vs {tuple(df.shape)}")
    if cfg.norm_scope == "eval_set":
        stats = {"maxDp": float(dp.max()), "maxDf": float(df.max())}
        _check_calibration(cfg, stats["maxDp"], stats["maxDf"])
        return combine(dp, df, cfg, stats)
    out = torch.empty_like(df)
    for i in range(dp.shape[0]):
        stats = {"maxDp": float(dp[i].max()), "maxDf": float(df[i].max())}
        _check_calibration(cfg, stats["maxDp"], stats["maxDf"])
        out[i] = combine(dp[i], df[i], cfg, stats)
    return out


def smooth(m: torch.Tensor, sigma_g: float) -> torch.Tensor:
    """Gaussian blur over the spatial axes, kernel truncated at 4 sigma,
    reflect padding. Filters in float64 so constant maps survive bit-exact."""
    if sigma_g < 0:
        raise ValueError(f"sigma_g must be >= 0, got {sigma_g}")
    if sigma_g == 0:
        return m
    arr = m.detach().cpu().numpy().astype(np.float64)
    sigma = (0,) * (arr.ndim - 2) + (sigma_g, sigma_g)
    out = gaussian_filter(arr, sigma=sigma, mode="reflect", truncate=4.0)
    return torch.from_numpy(out).to(m.dtype)


def distance_maps(
    model, fe, images, rcfg: ReconstructionConfig, scfg: ScoreConfig, schedule,
    return_recons: bool = False,
):
    """First scoring pass: reconstruct each batch toward itself and collect
    raw distance stacks. Batch b reconstructs with seed rcfg.seed + b, so
    results depend on batch_size; keep it fixed when comparing runs."""
    images = _as_batch(images)
    need_df = scfg.mode != "pixel_only"
    if need_df and fe is None:
        raise ValueError(f"mode {scfg.mode!r} needs a feature extractor")
    dp_parts, df_parts, recon_parts = [], [], []
    with torch.no_grad():
        for bi, start in enumerate(range(0, images.shape[0], scfg.batch_size)):
            batch = images[start : start + scfg.batch_size]
            x0 = reconstruct(model, batch, batch, replace(rcfg, seed=rcfg.seed + bi), schedule)
            if scfg.mode != "feature_only":
                dp_parts.append(pixel_distance(x0, batch))
            if need_df:
                df_parts.append(feature_distance(x0, batch, fe, scfg))
            if return_recons:
                recon_parts.append(x0)
    dp = torch.cat(dp_parts) if dp_parts else None
    df = torch.cat(df_parts) if df_parts else None
    if return_recons:
        return dp, df, torch.cat(recon_parts)
    return dp, df


def heatmaps_from_distances(dp, df, scfg: ScoreConfig) -> list:
    """Second scoring pass: combine (per the configured mode), smooth, wrap."""
    if scfg.mode == "pixel_only":
        final = dp
    elif scfg.mode == "feature_only":
        final = df
    else:
        final = combine_dataset(dp, df, scfg)
    final = smooth(final, scfg.sigma_g).clamp_min(0.0)
    return [AnomalyHeatmap.from_map(final[i].numpy(), scfg.mode) for i in range(final.shape[0])]


def score_dataset(model, fe, images, rcfg, scfg: ScoreConfig, schedule) -> list:
    """Heatmaps for a whole evaluation set (two passes when the combination
    is normalized over the set)."""
    dp, df = distance_maps(model, fe, images, rcfg, scfg, schedule)
    return heatmaps_from_distances(dp, df, scfg)


def score_image(x, model, fe, rcfg, scfg: ScoreConfig, schedule) -> AnomalyHeatmap:
    return score_dataset(model, fe, _as_batch(x), rcfg, scfg, schedule)[0]
