"""Feature extraction and domain adaptation of the extractor.

A multi-scale CNN supplies feature maps for the scoring stage. Because a
generic backbone reacts to the reconstructions' slight statistical drift,
the extractor is fine-tuned so that a conditioned reconstruction and its
target look alike in feature space, while a frozen twin of the original
network anchors the weights and prevents collapse.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from .reconstruct import ReconstructionConfig, reconstruct

CHECKPOINT_VERSION = 1


@dataclass
class DomainAdaptConfig:
    lambda_dl: float = 0.1
    learning_rate: float = 1e-4
    epochs: int = 2
    batch_size: int = 8  # per half: each step pairs batch_size inputs with batch_size targets
    w_finetune: float = 3.0
    layer_set: tuple = (1, 2, 3)
    seed: int = 0

    def __post_init__(self):
        self.layer_set = tuple(self.layer_set)
        if self.lambda_dl < 0:
            raise ValueError(f"lambda_dl must be >= 0, got {self.lambda_dl}")
        if not self.layer_set:
            raise ValueError("layer_set must not be empty")


class ToyFeatureExtractor(nn.Module):
    """Three conv blocks at cumulative strides 2, 4, 8.

    Small enough to train on a desk-scale corpus; the block index doubles as
    the layer id (1-based, matching how score layers are named).
    """

    max_layer = 3
    native_resolution = None  # operates at the input's own resolution

    def __init__(self, in_channels: int = 3, widths: tuple = (16, 32, 64)):
        super().__init__()
        if len(widths) != 3:
            raise ValueError(f"expected 3 block widths, got {widths}")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        blocks = []
        cin = in_channels
        for width in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(cin, width, 3, stride=2, padding=1),
                    nn.GroupNorm(min(4, width), width),
                    nn.SiLU(),
                    nn.Conv2d(width, width, 3, padding=1),
                    nn.GroupNorm(min(4, width), width),
                    nn.SiLU(),
                )
            )
            cin = width
        self.blocks = nn.ModuleList(blocks)

    def forward_features(self, img: torch.Tensor) -> dict:
        feats = {}
        h = img
        for j, block in enumerate(self.blocks, start=1):
            h = block(h)
            feats[j] = h
        return feats


class TorchvisionResNetExtractor(nn.Module):
    """Residual backbone adapter; layer j is the output of stage j (1..4).

    Weights are random unless weights_path points at a local state dict
    (this environment has no download access, so pretrained weights are an
    external input).
    """

    max_layer = 4
    native_resolution = 224

    def __init__(self, arch: str = "wide_resnet101_2", weights_path=None):
        super().__init__()
        try:
            import torchvision.models as tvm
        except ImportError as exc:  # pragma: no cover
            raise RuntimeError(
                "torchvision is required for residual backbones; install the "
                "'backbones' extra"
            ) from exc
        self.arch = arch
        net = getattr(tvm, arch)(weights=None)
        if weights_path is not None:
            net.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward_features(self, img: torch.Tensor) -> dict:
        h = self.stem(img)
        feats = {}
        for j, stage in enumerate(self.stages, start=1):
            h = stage(h)
            feats[j] = h
        return feats


def build_extractor(backbone: str = "toy-cnn", **kwargs) -> nn.Module:
    if backbone == "toy-cnn":
        return ToyFeatureExtractor(**kwargs)
    if backbone == "wide_resnet101_2":
        return TorchvisionResNetExtractor(arch=backbone, **kwargs)
    raise ValueError(f"unknown backbone {backbone!r}")


def extract(fe: nn.Module, img: torch.Tensor, layers) -> dict:
    """Feature maps for the requested layer ids, keyed by id.

    Input is resized to the extractor's native resolution when it declares
    one; spatial sizes are strictly decreasing in the layer id.
    """
    layers = tuple(layers)
    if not layers:
        raise ValueError("no layers requested")
    bad = [j for j in layers if not 1 <= j <= fe.max_layer]
    if bad:
        raise ValueError(f"layer ids {bad} outside [1, {fe.max_layer}]")
    single = img.dim() == 3
    if single:
        img = img.unsqueeze(0)
    native = fe.native_resolution
    if native is not None and img.shape[-2:] != (native, native):
        img = F.interpolate(img, size=(native, native), mode="bilinear", align_corners=False)
    feats = fe.forward_features(img)
    return {j: feats[j] for j in layers}


def patch_aggregate(fmap: torch.Tensor, window: int = 3) -> torch.Tensor:
    """Average each position with its (window x window) neighborhood,
    reflect-padded so the spatial shape is preserved."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return fmap
    single = fmap.dim() == 3
    if single:
        fmap = fmap.unsqueeze(0)
    pad = window // 2
    if pad >= min(fmap.shape[-2:]):
        raise ValueError(
            f"window {window} too large for {fmap.shape[-2]}x{fmap.shape[-1]} map"
        )
    out = F.avg_pool2d(F.pad(fmap, (pad,) * 4, mode="reflect"), window, stride=1)
    return out.squeeze(0) if single else out


def cosine_distance_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-position 1 - cos over the channel dimension, shape [B,H,W].

    An all-zero feature vector has no direction; the clamped denominator
    makes its cosine 0, so the distance saturates at 1.
    """
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return 1.0 - F.cosine_similarity(a, b, dim=1, eps=1e-8)


def similarity_loss(feats_a: dict, feats_b: dict) -> torch.Tensor:
    """Sum over layers of the mean cosine distance between feature stacks."""
    if set(feats_a) != set(feats_b):
        raise ValueError(f"layer sets differ: {sorted(feats_a)} vs {sorted(feats_b)}")
    if not feats_a:
        raise ValueError("empty feature stacks")
    total = None
    for j in sorted(feats_a):
        term = cosine_distance_map(feats_a[j], feats_b[j]).mean()
        total = term if total is None else total + term
    return total


def capture_twin(fe: nn.Module) -> nn.Module:
    """Frozen copy of the extractor: eval mode, no gradients, never updated."""
    twin = copy.deepcopy(fe)
    twin.eval()
    for p in twin.parameters():
        p.requires_grad_(False)
    return twin


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def similarity_term(fe, x0, y, layers) -> torch.Tensor:
    """Reconstruction/target agreement under the live extractor."""
    return similarity_loss(extract(fe, x0, layers), extract(fe, y, layers))


def distillation_term(fe, twin, x0, y, layers) -> torch.Tensor:
    """Drift of the live extractor from its frozen twin, on both inputs."""
    with torch.no_grad():
        twin_y = extract(twin, y, layers)
        twin_x0 = extract(twin, x0, layers)
    live_y = extract(fe, y, layers)
    live_x0 = extract(fe, x0, layers)
    return similarity_loss(live_y, twin_y) + similarity_loss(live_x0, twin_x0)


def adaptation_loss(fe, twin, x0, y, layers, lambda_dl: float) -> torch.Tensor:
    """Similarity pull plus the twin-anchored distillation penalty."""
    loss = similarity_term(fe, x0, y, layers)
    if lambda_dl > 0:
        loss = loss + lambda_dl * distillation_term(fe, twin, x0, y, layers)
    return loss


class DomainAdapter:
    """Owns the frozen twin and the optimizer for extractor fine-tuning."""

    def __init__(self, extractor: nn.Module, cfg: DomainAdaptConfig, optimizer=None):
        self.extractor = extractor
        self.cfg = cfg
        self.twin = capture_twin(extractor)
        self.twin_hash = state_hash(self.twin)
        self.optimizer = optimizer or torch.optim.AdamW(
            extractor.parameters(), lr=cfg.learning_rate
        )

    def step(self, x0: torch.Tensor, y: torch.Tensor) -> float:
        loss = adaptation_loss(
            self.extractor, self.twin, x0, y, self.cfg.layer_set, self.cfg.lambda_dl
        )
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())


def domain_adapt(
    extractor: nn.Module,
    model,
    schedule,
    train_images: torch.Tensor,
    cfg: DomainAdaptConfig,
    recon: ReconstructionConfig,
    log=None,
) -> list:
    """Fine-tune the extractor against conditioned reconstructions.

    Each step draws two disjoint mini-batches from the nominal training
    images: inputs are reconstructed toward the *other* batch (the targets)
    with w = w_finetune, then the extractor is stepped so reconstruction and
    target agree in feature space. Returns the per-step loss sequence.
    """
    if len(train_images) < 2 * cfg.batch_size:
        raise ValueError(
            f"need at least {2 * cfg.batch_size} images, got {len(train_images)}"
        )
    adapter = DomainAdapter(extractor, cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    losses = []
    step_idx = 0
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(train_images), generator=g)
        for start in range(0, len(perm) - 2 * cfg.batch_size + 1, 2 * cfg.batch_size):
            idx_in = perm[start : start + cfg.batch_size]
            idx_tg = perm[start + cfg.batch_size : start + 2 * cfg.batch_size]
            x_in = train_images[idx_in]
            y_tg = train_images[idx_tg]
            step_recon = replace(recon, w=cfg.w_finetune, seed=recon.seed + step_idx)
            x0 = reconstruct(model, x_in, y_tg, step_recon, schedule)
            losses.append(adapter.step(x0, y_tg))
            step_idx += 1
        if log is not None:
            log(f"adapt epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.4f}")
    return losses


def save_extractor(fe: nn.Module, path, twin_hash: str = "") -> None:
    if isinstance(fe, ToyFeatureExtractor):
        backbone, config = "toy-cnn", {"in_channels": fe.in_channels, "widths": fe.widths}
    elif isinstance(fe, TorchvisionResNetExtractor):
        backbone, config = fe.arch, {}
    else:
        raise ValueError(f"cannot serialize extractor of type {type(fe).__name__}")
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "kind": "extractor",
            "backbone": backbone,
            "config": config,
            "state_dict": fe.state_dict(),
            "twin_hash": twin_hash,
        },
        path,
    )


def load_extractor(path) -> nn.Module:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise RuntimeError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    for key in ("format_version", "kind", "backbone", "config", "state_dict"):
        if key not in payload:
            raise RuntimeError(f"checkpoint {path} missing field {key!r}")
    if payload["kind"] != "extractor":
        raise RuntimeError(f"checkpoint {path} is a {payload['kind']!r}, not an extractor")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise RuntimeError(f"checkpoint format {payload['format_version']} not supported")
    if payload["backbone"] == "toy-cnn":
        fe = ToyFeatureExtractor(**payload["config"])
    else:
        fe = TorchvisionResNetExtractor(arch=payload["backbone"], **payload["config"])
    fe.load_state_dict(payload["state_dict"])
    return fe
