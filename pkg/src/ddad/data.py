"""Dataset ingestion and synthetic defect generation.

Images live as float32 [3,H,W] arrays in [-1,1]; the [0,255] PNG range
exists only at the file boundary. Training splits hold nominal images only,
defect test items carry exact binary ground-truth masks, and nothing here
augments: a loaded image is the resized original and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import binary_dilation

SPLITS = ("train_good", "test_good", "test_defect")
PATTERNS = ("stripes", "checker", "blobs")
DEFECT_TYPES = ("patch", "color_spot", "scratch")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class DatasetItem:
    image: np.ndarray  # float32 [3,H,W] in [-1,1]
    split: str
    defect_type: str  # "good" for nominal items
    mask: np.ndarray  # uint8 [H,W] in {0,1}; all-zero for good items
    path: str | None = None


@dataclass
class Dataset:
    items: list
    resolution: int
    category: str

    def __post_init__(self):
        paths = {s: set() for s in SPLITS}
        for it in self.items:
            if it.split not in SPLITS:
                raise ValueError(f"unknown split {it.split!r}")
            if it.image.shape != (3, self.resolution, self.resolution):
                raise ValueError(
                    f"image shape {it.image.shape} != (3, {self.resolution}, {self.resolution})"
                )
            if it.mask.shape != (self.resolution, self.resolution):
                raise ValueError(f"mask shape {it.mask.shape} does not match resolution")
            if it.split in ("train_good", "test_good"):
                if it.defect_type != "good" or it.mask.any():
                    raise ValueError(f"{it.split} items must be defect-free with empty masks")
            else:
                if not it.mask.any():
                    raise ValueError(
                        f"test_defect item {it.path or '<tensor>'} has an empty mask"
                    )
            if it.path is not None:
                paths[it.split].add(it.path)
        leaked = paths["train_good"] & (paths["test_good"] | paths["test_defect"])
        if leaked:
            raise ValueError(f"files appear in both train and test splits: {sorted(leaked)}")

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [it for it in self.items if it.split == name]

    def images(self, name: str) -> torch.Tensor:
        items = self.split(name)
        if not items:
            return torch.empty(0, 3, self.resolution, self.resolution)
        return torch.from_numpy(np.stack([it.image for it in items]))

    def masks(self, name: str) -> np.ndarray:
        items = self.split(name)
        return np.stack([it.mask for it in items]) if items else np.zeros((0,), np.uint8)


def _center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if size > min(h, w):
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top, left = (h - size) // 2, (w - size) // 2
    return arr[..., top : top + size, left : left + size]


def load_image(path, resolution: int, crop: int | None = None) -> np.ndarray:
    """PNG/JPG file to float32 [3,res,res] in [-1,1]; grayscale inputs are
    replicated across channels."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, SyntaxError) as exc:
        raise RuntimeError(f"unreadable image file {path}: {exc}") from exc
    arr = arr.transpose(2, 0, 1) / 255.0 * 2.0 - 1.0
    return _center_crop(arr, crop) if crop else arr


def load_mask(path, resolution: int, crop: int | None = None) -> np.ndarray:
    """Ground-truth mask to uint8 {0,1}: nearest-neighbor resize, then
    binarize at half intensity."""
    try:
        with Image.open(path) as im:
            im = im.convert("L").resize((resolution, resolution), Image.NEAREST)
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise RuntimeError(f"unreadable mask file {path}: {exc}") from exc
    arr = (arr > 127).astype(np.uint8)
    return _center_crop(arr, crop) if crop else arr


def _image_files(folder: Path) -> list:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(root, category: str, resolution: int, crop: int | None = None) -> Dataset:
    """Read a category laid out as <root>/<category>/{train/good, test/<type>,
    ground_truth/<type>} into memory."""
    cat = Path(root) / category
    train_dir = cat / "train" / "good"
    if not train_dir.is_dir():
        raise FileNotFoundError(f"missing training directory {train_dir}")
    out_res = crop or resolution
    items = []
    for p in _image_files(train_dir):
        items.append(
            DatasetItem(
                image=load_image(p, resolution, crop),
                split="train_good",
                defect_type="good",
                mask=np.zeros((out_res, out_res), np.uint8),
                path=str(p),
            )
        )
    if not items:
        raise FileNotFoundError(f"no training images under {train_dir}")
    test_dir = cat / "test"
    if test_dir.is_dir():
        for type_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
            dtype = type_dir.name
            for p in _image_files(type_dir):
                if dtype == "good":
                    items.append(
                        DatasetItem(
                            image=load_image(p, resolution, crop),
                            split="test_good",
                            defect_type="good",
                            mask=np.zeros((out_res, out_res), np.uint8),
                            path=str(p),
                        )
                    )
                else:
                    mask_path = cat / "ground_truth" / dtype / f"{p.stem}_mask.png"
                    if not mask_path.is_file():
                        raise FileNotFoundError(
                            f"defect image {p} has no ground-truth mask at {mask_path}"
                        )
                    items.append(
                        DatasetItem(
                            image=load_image(p, resolution, crop),
                            split="test_defect",
                            defect_type=dtype,
                            mask=load_mask(mask_path, resolution, crop),
                            path=str(p),
                        )
                    )
    return Dataset(items=items, resolution=out_res, category=category)


# ---------------------------------------------------------------------------
# synthetic textures


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 200
    n_test: int = 50  # per test class
    pattern: str = "stripes"
    defect_types: tuple = ("patch",)
    resolution: int = 64

    def __post_init__(self):
        object.__setattr__(self, "defect_types", tuple(self.defect_types))
        if self.resolution not in (32, 64):
            raise ValueError(f"resolution must be 32 or 64, got {self.resolution}")
        if self.n_train < 16:
            raise ValueError(f"n_train must be >= 16, got {self.n_train}")
        if self.n_test < 1:
            raise ValueError(f"n_test must be >= 1, got {self.n_test}")
        if self.pattern not in PATTERNS:
            raise ValueError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        bad = [d for d in self.defect_types if d not in DEFECT_TYPES]
        if bad or not self.defect_types:
            raise ValueError(f"defect_types must be a nonempty subset of {DEFECT_TYPES}")


def _colorize(rng: np.random.Generator, field2d: np.ndarray) -> np.ndarray:
    # per-image color jitter: channelwise gain in [0.5,0.9], tint in [-0.1,0.1]
    gains = rng.uniform(0.5, 0.9, size=3).astype(np.float32)
    tints = rng.uniform(-0.1, 0.1, size=3).astype(np.float32)
    return gains[:, None, None] * field2d[None] + tints[:, None, None]


def nominal_image(rng: np.random.Generator, pattern: str, resolution: int) -> np.ndarray:
    """One defect-free texture with per-image phase/orientation/color jitter,
    float32 [3,res,res] strictly inside [-1,1]."""
    xs = np.linspace(0.0, 1.0, resolution, dtype=np.float32)
    yy, xx = np.meshgrid(xs, xs, indexing="ij")
    if pattern == "stripes":
        freq = rng.uniform(3.0, 5.0)
        theta = 0.3 + rng.uniform(-0.15, 0.15)
        phase = rng.uniform(0.0, 2 * np.pi)
        s = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    elif pattern == "checker":
        fx = rng.uniform(2.0, 4.0)
        fy = rng.uniform(2.0, 4.0)
        px = rng.uniform(0.0, 2 * np.pi)
        py = rng.uniform(0.0, 2 * np.pi)
        s = np.sin(2 * np.pi * fx * xx + px) * np.sin(2 * np.pi * fy * yy + py)
    else:  # blobs: low-frequency random Fourier mixture
        s = np.zeros_like(xx)
        amps = rng.uniform(0.4, 1.0, size=4)
        for a in amps:
            u, v = rng.uniform(-3.0, 3.0, size=2)
            phi = rng.uniform(0.0, 2 * np.pi)
            s = s + a * np.sin(2 * np.pi * (u * xx + v * yy) + phi)
        s = s / amps.sum()
    return _colorize(rng, s.astype(np.float32))


def apply_defect(rng: np.random.Generator, image: np.ndarray, defect_type: str, pattern: str):
    """Perturb a nominal image inside a localized region.

    Returns (defect_image, mask); pixels outside the mask are untouched and
    the mask area lands in [1%, 10%] of the image (resampled until it does).
    """
    if defect_type not in DEFECT_TYPES:
        raise ValueError(f"unknown defect type {defect_type!r}")
    res = image.shape[-1]
    for _ in range(100):
        mask = np.zeros((res, res), np.uint8)
        out = image.copy()
        if defect_type == "patch":
            # block of the same texture family at an independent phase, plus a tint
            h = int(round(rng.uniform(0.12, 0.28) * res))
            w = int(round(rng.uniform(0.12, 0.28) * res))
            h, w = max(2, h), max(2, w)
            top = int(rng.integers(1, res - h))
            left = int(rng.integers(1, res - w))
            other = nominal_image(rng, pattern, res)
            tint = rng.uniform(0.2, 0.4) * (1 if rng.random() < 0.5 else -1)
            block = other[:, top : top + h, left : left + w] + tint
            out[:, top : top + h, left : left + w] = block
            mask[top : top + h, left : left + w] = 1
        elif defect_type == "color_spot":
            radius = rng.uniform(0.07, 0.16) * res
            cy = rng.uniform(radius + 1, res - radius - 1)
            cx = rng.uniform(radius + 1, res - radius - 1)
            yy, xx = np.mgrid[0:res, 0:res]
            disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
            shift = rng.uniform(0.4, 0.8, size=3) * rng.choice([-1.0, 1.0], size=3)
            out[:, disk] += shift[:, None].astype(np.float32)
            mask[disk] = 1
        else:  # scratch: thin dark or bright line segment
            length = rng.uniform(0.65, 0.95) * res
            angle = rng.uniform(0.0, np.pi)
            cy, cx = rng.uniform(0.3 * res, 0.7 * res, size=2)
            dy, dx = np.sin(angle), np.cos(angle)
            ts = np.linspace(-length / 2, length / 2, 4 * res)
            ys = np.clip(np.round(cy + ts * dy), 0, res - 1).astype(int)
            xs_ = np.clip(np.round(cx + ts * dx), 0, res - 1).astype(int)
            line = np.zeros((res, res), bool)
            line[ys, xs_] = True
            thickness = int(rng.integers(2, 4))
            line = binary_dilation(line, structure=np.ones((thickness, thickness), bool))
            level = rng.choice([-0.95, 0.95])
            out[:, line] = level
            mask[line] = 1
        frac = mask.mean()
        if 0.01 <= frac <= 0.10:
            np.clip(out, -1.0, 1.0, out=out)
            return out.astype(np.float32), mask
    raise RuntimeError(f"could not satisfy defect area bounds for {defect_type!r}")


def synth_dataset(spec: SynthSpec, seed: int = 0) -> Dataset:
    """Seed-deterministic procedural dataset in the standard split layout."""
    rng = np.random.default_rng(seed)
    res = spec.resolution
    items = []
    for _ in range(spec.n_train):
        items.append(
            DatasetItem(
                image=nominal_image(rng, spec.pattern, res),
                split="train_good",
                defect_type="good",
                mask=np.zeros((res, res), np.uint8),
            )
        )
    for _ in range(spec.n_test):
        items.append(
            DatasetItem(
                image=nominal_image(rng, spec.pattern, res),
                split="test_good",
                defect_type="good",
                mask=np.zeros((res, res), np.uint8),
            )
        )
    kinds = sorted(spec.defect_types)
    for i in range(spec.n_test):
        dtype = kinds[i % len(kinds)]
        base = nominal_image(rng, spec.pattern, res)
        img, mask = apply_defect(rng, base, dtype, spec.pattern)
        items.append(
            DatasetItem(image=img, split="test_defect", defect_type=dtype, mask=mask)
        )
    return Dataset(items=items, resolution=res, category=f"synth-{spec.pattern}")


def _to_png_array(image: np.ndarray) -> np.ndarray:
    arr = np.clip((image + 1.0) / 2.0, 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_mvtec_layout(ds: Dataset, root, category: str | None = None) -> Path:
    """Persist a dataset as the on-disk tree load_dataset() reads."""
    category = category or ds.category
    cat = Path(root) / category
    counters = {}
    for it in ds.items:
        dtype = it.defect_type
        if it.split == "train_good":
            folder = cat / "train" / "good"
        elif it.split == "test_good":
            folder = cat / "test" / "good"
        else:
            folder = cat / "test" / dtype
        folder.mkdir(parents=True, exist_ok=True)
        idx = counters.get(folder, 0)
        counters[folder] = idx + 1
        name = f"{idx:03d}"
        Image.fromarray(_to_png_array(it.image)).save(folder / f"{name}.png")
        if it.split == "test_defect":
            gt = cat / "ground_truth" / dtype
            gt.mkdir(parents=True, exist_ok=True)
            Image.fromarray((it.mask * 255).astype(np.uint8)).save(gt / f"{name}_mask.png")
    return cat
