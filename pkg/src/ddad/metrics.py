"""Detection and localization metrics.

Image-level and pixel-level AUROC plus the per-region overlap score (PRO).
Everything here is plain numpy on heatmaps/masks; nothing depends on how the
heatmaps were produced.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

# cross-shaped structuring element: edge-adjacency only
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


def auroc(pos_scores, neg_scores) -> float:
    """Area under the ROC curve for two score samples.

    Rank-based Mann-Whitney form: equivalent to trapezoidal integration over
    all unique thresholds, with tied positive/negative pairs counted 1/2.
    """
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc needs at least one score in each class")
    both = np.concatenate([pos, neg])
    if not np.isfinite(both).all():
        raise ValueError("auroc scores must be finite")
    ranks = rankdata(both, method="average")
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def image_auroc(scores, labels) -> float:
    """AUROC of per-image scores against binary labels (1 = anomalous)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    return auroc(scores[labels == 1], scores[labels == 0])


def pixel_auroc(heatmaps, masks, per_image: bool = False) -> float:
    """Localization AUROC over pixels.

    Default pools every pixel of every image into one ranking. With
    per_image=True, returns the mean of per-image AUROCs instead, skipping
    images whose mask has only one class (a defect-free image has no positive
    pixels to rank).
    """
    if len(heatmaps) != len(masks):
        raise ValueError("heatmaps and masks must pair up")
    if len(heatmaps) == 0:
        raise ValueError("no heatmaps given")
    for hm, m in zip(heatmaps, masks):
        if hm.shape != m.shape:
            raise ValueError(f"heatmap shape {hm.shape} != mask shape {m.shape}")
    if per_image:
        vals = []
        for hm, m in zip(heatmaps, masks):
            m = m.astype(bool)
            if m.any() and not m.all():
                vals.append(auroc(hm[m], hm[~m]))
        if not vals:
            raise ValueError("no image has both anomalous and normal pixels")
        return float(np.mean(vals))
    heat = np.concatenate([np.asarray(h, dtype=np.float64).ravel() for h in heatmaps])
    lab = np.concatenate([np.asarray(m).astype(bool).ravel() for m in masks])
    return auroc(heat[lab], heat[~lab])


def connected_components(mask) -> tuple[np.ndarray, int]:
    """Label 4-connected regions of a binary mask. Returns (labels, count)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    labels, n = ndimage.label(mask.astype(bool), structure=FOUR_CONNECTED)
    return labels, int(n)


def _count_ge(sorted_asc: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """#elements >= each threshold, given an ascending-sorted value array."""
    return sorted_asc.size - np.searchsorted(sorted_asc, thresholds, side="left")


def pro_curve(heatmaps, masks, thresholds):
    """Mean per-region overlap and FPR at each threshold (descending).

    For every 4-connected ground-truth region, overlap = fraction of its
    pixels scored >= threshold; regions are averaged with equal weight
    regardless of size. FPR pools all defect-free pixels across the set.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    region_vals = []
    normal_vals = []
    for hm, m in zip(heatmaps, masks):
        hm = np.asarray(hm, dtype=np.float64)
        m = np.asarray(m).astype(bool)
        if hm.shape != m.shape:
            raise ValueError(f"heatmap shape {hm.shape} != mask shape {m.shape}")
        labels, n = connected_components(m)
        for r in range(1, n + 1):
            region_vals.append(np.sort(hm[labels == r]))
        normal_vals.append(hm[~m])
    if not region_vals:
        raise ValueError("PRO undefined: no anomalous region in any mask")
    normal = np.sort(np.concatenate(normal_vals))
    if normal.size == 0:
        raise ValueError("PRO undefined: no defect-free pixels for the FPR")

    overlap_sum = np.zeros_like(thresholds)
    for vals in region_vals:
        overlap_sum += _count_ge(vals, thresholds) / vals.size
    pros = overlap_sum / len(region_vals)
    fprs = _count_ge(normal, thresholds) / normal.size
    return fprs, pros


def _staircase_area(fprs, pros, limit: float) -> float:
    """Integrate the (FPR, PRO) points as a right-continuous staircase.

    Points must come from a descending threshold sweep, so both coordinates
    are non-decreasing. Between observed points the curve holds its last
    value; equal-FPR points collapse to the best PRO seen there.
    """
    f = np.r_[0.0, np.asarray(fprs, dtype=np.float64)]
    p = np.r_[0.0, np.asarray(pros, dtype=np.float64)]
    # collapse duplicate fpr values, keeping the last (largest) pro
    keep_f, keep_p = [], []
    for fi, pi in zip(f, p):
        if keep_f and fi == keep_f[-1]:
            keep_p[-1] = max(keep_p[-1], pi)
        else:
            keep_f.append(fi)
            keep_p.append(pi)
    area = 0.0
    for i in range(len(keep_f)):
        lo = keep_f[i]
        hi = keep_f[i + 1] if i + 1 < len(keep_f) else float("inf")
        lo, hi = min(lo, limit), min(hi, limit)
        area += keep_p[i] * (hi - lo)
    return area


def pro(
    heatmaps,
    masks,
    fpr_limit: float = 0.3,
    thresholds: str = "auto",
    num_bins: int = 500,
    max_exact: int = 4096,
) -> float:
    """Per-region overlap score, integrated over FPR up to fpr_limit and
    normalized to [0, 1].

    thresholds: "exact" sweeps every unique heatmap value; "binned" sweeps
    num_bins equal-width levels (cheap approximation for large images);
    "auto" picks exact below max_exact unique values.
    """
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must be in (0, 1], got {fpr_limit}")
    if len(heatmaps) != len(masks):
        raise ValueError("heatmaps and masks must pair up")
    allvals = np.concatenate([np.asarray(h, dtype=np.float64).ravel() for h in heatmaps])
    if not np.isfinite(allvals).all():
        raise ValueError("heatmap values must be finite")
    uniq = np.unique(allvals)
    if thresholds == "auto":
        thresholds = "exact" if uniq.size <= max_exact else "binned"
    if thresholds == "exact":
        levels = uniq[::-1]
    elif thresholds == "binned":
        lo, hi = float(uniq[0]), float(uniq[-1])
        if lo == hi:
            levels = np.array([lo])
        else:
            levels = np.linspace(hi, lo, num_bins)
    else:
        raise ValueError(f"unknown threshold mode {thresholds!r}")
    fprs, pros = pro_curve(heatmaps, masks, levels)
    return _staircase_area(fprs, pros, fpr_limit) / fpr_limit


@dataclass
class EvaluationReport:
    """Bundle of detection/localization metrics for one evaluation run."""

    image_auroc: float
    pixel_auroc: float
    pro_score: float | None
    fpr_limit: float
    num_images: int
    per_image: list = field(default_factory=list)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def has_nan(self) -> bool:
        vals = [self.image_auroc, self.pixel_auroc]
        if self.pro_score is not None:
            vals.append(self.pro_score)
        return any(not np.isfinite(v) for v in vals)

    def table(self) -> str:
        rows = [
            ("image AUROC", self.image_auroc),
            ("pixel AUROC", self.pixel_auroc),
        ]
        if self.pro_score is not None:
            rows.append((f"PRO@{self.fpr_limit:g}", self.pro_score))
        width = max(len(k) for k, _ in rows)
        lines = [f"{k:<{width}}  {v:.4f}" for k, v in rows]
        lines.append(f"{'images':<{width}}  {self.num_images}")
        return "\n".join(lines)


def evaluate(
    heatmaps,
    masks,
    labels,
    image_scores,
    ids=None,
    fpr_limit: float = 0.3,
    compute_pro: bool = True,
    config_hash: str = "",
) -> EvaluationReport:
    """Compute the full metric bundle from per-image heatmaps and scores."""
    labels = np.asarray(labels).astype(int)
    image_scores = np.asarray(image_scores, dtype=np.float64)
    report = EvaluationReport(
        image_auroc=image_auroc(image_scores, labels),
        pixel_auroc=pixel_auroc(heatmaps, masks),
        pro_score=pro(heatmaps, masks, fpr_limit=fpr_limit) if compute_pro else None,
        fpr_limit=fpr_limit,
        num_images=len(heatmaps),
        config_hash=config_hash,
    )
    ids = ids if ids is not None else list(range(len(heatmaps)))
    for i, (sid, score, lab) in enumerate(zip(ids, image_scores, labels)):
        report.per_image.append(
            {"id": str(sid), "score": float(score), "label": int(lab)}
        )
    return report
