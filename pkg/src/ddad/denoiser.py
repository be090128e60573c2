"""Noise-prediction network, training objective, and checkpoint IO.

The model eats a noised image x_t plus its timestep and predicts the noise
that was mixed in. Test doubles with the same predict_noise interface let the
sampler and scorer be exercised without any training.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .schedule import VarianceSchedule, perturb_batch, schedule_from_config

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    """Size knobs for the UNet.

    attention_layers counts self-attention sites from the lowest resolution
    up: 1 = bottleneck only, 2 = bottleneck plus the deepest encoder/decoder
    level, and so on up to 1 + len(channel_mults).
    """

    input_resolution: int = 64
    in_channels: int = 3
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    res_blocks: int = 2
    attention_layers: int = 2
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        if self.input_resolution < 4:
            raise ValueError(f"input_resolution too small: {self.input_resolution}")
        factor = 2 ** (len(self.channel_mults) - 1)
        if self.input_resolution % factor:
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by {factor}"
            )
        if self.res_blocks < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("base_channels, in_channels, res_blocks must be positive")
        if not 0 <= self.attention_layers <= 1 + len(self.channel_mults):
            raise ValueError(
                f"attention_layers must be in [0, {1 + len(self.channel_mults)}]"
            )


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 0.05
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of the (1-based) timestep, shape [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _group_norm(channels: int, groups: int) -> nn.GroupNorm:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return nn.GroupNorm(g, channels)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = _group_norm(cin, groups)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = _group_norm(cout, groups)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = _group_norm(channels, groups)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(dim=1)
        # single-head attention over the h*w positions
        attn = F.scaled_dot_product_attention(
            q.transpose(1, 2), k.transpose(1, 2), v.transpose(1, 2)
        )
        out = self.proj(attn.transpose(1, 2).reshape(b, c, h, w))
        return x + out


class UNet(nn.Module):
    """Noise-prediction UNet bound to one schedule length."""

    def __init__(self, cfg: DenoiserConfig, num_timesteps: int):
        super().__init__()
        if num_timesteps < 1:
            raise ValueError(f"num_timesteps must be >= 1, got {num_timesteps}")
        self.cfg = cfg
        self.num_timesteps = num_timesteps

        chs = [cfg.base_channels * m for m in cfg.channel_mults]
        levels = len(chs)
        time_dim = cfg.base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )

        # attention sites, bottleneck first then deepest levels
        self.mid_attention = cfg.attention_layers >= 1
        n_level_sites = max(0, cfg.attention_layers - 1)
        attn_levels = set(range(levels - 1, levels - 1 - n_level_sites, -1))

        self.stem = nn.Conv2d(cfg.in_channels, chs[0], 3, padding=1)
        skip_chs = [chs[0]]

        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = chs[0]
        for level, out_ch in enumerate(chs):
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(ResidualBlock(ch, out_ch, time_dim, cfg.groups))
                ch = out_ch
                skip_chs.append(ch)
            self.down_blocks.append(blocks)
            self.down_attns.append(
                AttentionBlock(ch, cfg.groups) if level in attn_levels else nn.Identity()
            )
            if level < levels - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_chs.append(ch)

        self.mid_block1 = ResidualBlock(ch, ch, time_dim, cfg.groups)
        self.mid_attn = AttentionBlock(ch, cfg.groups) if self.mid_attention else nn.Identity()
        self.mid_block2 = ResidualBlock(ch, ch, time_dim, cfg.groups)

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(levels)):
            out_ch = chs[level]
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks + 1):
                blocks.append(
                    ResidualBlock(ch + skip_chs.pop(), out_ch, time_dim, cfg.groups)
                )
                ch = out_ch
            self.up_blocks.append(blocks)
            self.up_attns.append(
                AttentionBlock(ch, cfg.groups) if level in attn_levels else nn.Identity()
            )
            if level > 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.out_norm = _group_norm(ch, cfg.groups)
        self.out_conv = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, x, t):
        emb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels))
        h = self.stem(x)
        skips = [h]
        for level, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block(h, emb)
                skips.append(h)
            h = self.down_attns[level](h)
            if level < len(self.down_blocks) - 1:
                h = self.downsamples[level](h)
                skips.append(h)
        h = self.mid_block1(h, emb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, emb)
        for i, blocks in enumerate(self.up_blocks):
            for block in blocks:
                h = block(torch.cat([h, skips.pop()], dim=1), emb)
            h = self.up_attns[i](h)
            if i < len(self.up_blocks) - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)
        return self.out_conv(F.silu(self.out_norm(h)))

    def predict_noise(self, x_t: torch.Tensor, t) -> torch.Tensor:
        t = _check_inputs(self, x_t, t, resolution=self.cfg.input_resolution,
                          channels=self.cfg.in_channels)
        return self.forward(x_t, t)


def _check_inputs(model, x_t, t, resolution=None, channels=None):
    """Shared predict_noise validation; returns t as a [B] int tensor."""
    if x_t.dim() != 4:
        raise ValueError(f"expected [B,C,H,W] input, got shape {tuple(x_t.shape)}")
    if channels is not None and x_t.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {x_t.shape[1]}")
    if resolution is not None and (x_t.shape[2] != resolution or x_t.shape[3] != resolution):
        raise ValueError(
            f"expected {resolution}x{resolution} input, got {x_t.shape[2]}x{x_t.shape[3]}"
        )
    if isinstance(t, int):
        t = torch.full((x_t.shape[0],), t, dtype=torch.long)
    if bool((t < 1).any()) or bool((t > model.num_timesteps).any()):
        raise ValueError(f"timestep outside [1, {model.num_timesteps}]")
    return t


class TinyDenoiser(nn.Module):
    """Very small trainable model (<1k parameters) for numeric checks."""

    def __init__(self, num_timesteps: int, in_channels: int = 3, hidden: int = 8,
                 dtype=torch.float32):
        super().__init__()
        self.num_timesteps = num_timesteps
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1, dtype=dtype)
        self.time_proj = nn.Linear(1, hidden, dtype=dtype)
        self.conv2 = nn.Conv2d(hidden, in_channels, 3, padding=1, dtype=dtype)

    def forward(self, x, t):
        tfeat = self.time_proj(t[:, None].to(x.dtype) / self.num_timesteps)
        h = F.silu(self.conv1(x) + tfeat[:, :, None, None])
        return self.conv2(h)

    def predict_noise(self, x_t, t):
        t = _check_inputs(self, x_t, t)
        return self.forward(x_t, t)


class OracleDenoiser:
    """Test double that knows the clean image.

    Algebraically inverts the closed-form perturbation, so it returns exactly
    the noise that produced x_t (up to float roundoff) at any timestep, even
    for states met mid-trajectory.
    """

    def __init__(self, clean: torch.Tensor, schedule: VarianceSchedule):
        self.clean = clean if clean.dim() == 4 else clean.unsqueeze(0)
        self.schedule = schedule
        self.num_timesteps = schedule.num_steps

    def predict_noise(self, x_t, t):
        t = _check_inputs(self, x_t, t)
        abar = self.schedule.alpha_bars[t.long() - 1]
        shape = (x_t.shape[0], 1, 1, 1)
        signal = abar.sqrt().reshape(shape).to(x_t.dtype)
        noise = (1.0 - abar).sqrt().reshape(shape).to(x_t.dtype)
        clean = self.clean.expand_as(x_t)
        return (x_t - signal * clean) / noise


class StoredNoiseDenoiser:
    """Test double that returns a pinned noise tensor verbatim."""

    def __init__(self, noise: torch.Tensor, num_timesteps: int):
        self.noise = noise if noise.dim() == 4 else noise.unsqueeze(0)
        self.num_timesteps = num_timesteps

    def predict_noise(self, x_t, t):
        _check_inputs(self, x_t, t)
        if self.noise.shape[0] == x_t.shape[0]:
            return self.noise
        return self.noise.expand_as(x_t)


class ZeroDenoiser:
    """Test double that always predicts zero noise."""

    def __init__(self, num_timesteps: int):
        self.num_timesteps = num_timesteps

    def predict_noise(self, x_t, t):
        _check_inputs(self, x_t, t)
        return torch.zeros_like(x_t)


def build_denoiser(cfg: DenoiserConfig, num_timesteps: int, seed: int | None = None) -> UNet:
    """Construct a UNet; with seed given, initialization is reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return UNet(cfg, num_timesteps)


def train_step(
    model,
    optimizer,
    batch: torch.Tensor,
    schedule: VarianceSchedule,
    generator: torch.Generator,
    noise: torch.Tensor | None = None,
    timesteps=None,
) -> float:
    """One noise-prediction step: sample t and eps, noise the batch, regress.

    Returns the scalar loss before the optimizer step. noise/timesteps
    default to fresh draws from the generator; tests may pin them.
    """
    if batch.dim() != 4:
        raise ValueError(f"expected [B,C,H,W] batch, got shape {tuple(batch.shape)}")
    b = batch.shape[0]
    if timesteps is None:
        t = torch.randint(1, schedule.num_steps + 1, (b,), generator=generator)
    else:
        t = torch.as_tensor(timesteps, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(b)
    if noise is None:
        noise = torch.randn(batch.shape, generator=generator, dtype=batch.dtype)
    if noise.shape != batch.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != batch shape {tuple(batch.shape)}")

    x_t = perturb_batch(batch, t, noise, schedule)
    pred = model.predict_noise(x_t, t)
    loss = F.mse_loss(pred, noise)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite training loss at timesteps {t.tolist()}")
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def fit(
    model: nn.Module,
    images: torch.Tensor,
    schedule: VarianceSchedule,
    cfg: TrainConfig,
    optimizer=None,
    log=None,
) -> list:
    """Full training loop over an image tensor [N,C,H,W]; returns the loss
    sequence (one entry per step)."""
    if len(images) == 0:
        raise ValueError("empty training set")
    g = torch.Generator().manual_seed(cfg.seed)
    opt = optimizer or torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    losses = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(len(images), generator=g)
        for start in range(0, len(images), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            losses.append(train_step(model, opt, images[idx], schedule, g))
        if log is not None:
            recent = losses[-max(1, len(images) // cfg.batch_size):]
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {sum(recent) / len(recent):.4f}")
    return losses


def save_checkpoint(model: UNet, schedule: VarianceSchedule, path) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "denoiser",
        "architecture": asdict(model.cfg),
        "schedule": schedule.config(),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path, schedule: VarianceSchedule | None = None):
    """Load a denoiser checkpoint -> (model, schedule).

    Passing a runtime schedule asserts it matches the one the model was
    trained under; a mismatch is a hard error.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise RuntimeError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    for key in ("format_version", "kind", "architecture", "schedule", "state_dict"):
        if key not in payload:
            raise RuntimeError(f"checkpoint {path} missing field {key!r}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise RuntimeError(
            f"checkpoint format {payload['format_version']} not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if payload["kind"] != "denoiser":
        raise RuntimeError(f"checkpoint {path} is a {payload['kind']!r}, not a denoiser")
    ckpt_schedule = schedule_from_config(payload["schedule"])
    if schedule is not None and schedule.config() != payload["schedule"]:
        raise ValueError(
            f"schedule mismatch: runtime {schedule.config()} vs checkpoint {payload['schedule']}"
        )
    model = UNet(DenoiserConfig(**payload["architecture"]), ckpt_schedule.num_steps)
    model.load_state_dict(payload["state_dict"])
    return model, ckpt_schedule
