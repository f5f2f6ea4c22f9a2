"""Dataset scanning, paired loading, augmentation and pyramid construction.

Supported layouts (files are matched by filename stem):

``vcip``
    ``root/<split>/nir/<stem>.<ext>`` and ``root/<split>/rgb/<stem>.<ext>``
    with ``<split>`` in ``train`` / ``test``.
``epfl``
    ``root/<category>/<stem>_nir.<ext>`` and ``root/<category>/<stem>_rgb.<ext>``.
    Every ``test_every``-th pair in sorted order goes to the test split.
``manifest``
    ``root`` is a text file with one ``nir_path,rgb_path,split`` record per
    line; relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
SPLITS = ("train", "test")
LUMA = (0.299, 0.587, 0.114)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    nir: Path
    rgb: Path
    split: str

    @property
    def stem(self) -> str:
        return self.nir.stem[:-4] if self.nir.stem.endswith("_nir") else self.nir.stem


@dataclass
class DatasetIndex:
    entries: List[Entry]
    checksum: str = ""

    def __post_init__(self) -> None:
        if not self.checksum:
            self.checksum = manifest_checksum(self.entries)

    def split(self, name: str) -> "DatasetIndex":
        return DatasetIndex([e for e in self.entries if e.split == name])

    def counts(self) -> Dict[str, int]:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}

    def __len__(self) -> int:
        return len(self.entries)


def manifest_checksum(entries: Sequence[Entry]) -> str:
    h = hashlib.sha256()
    for e in entries:
        h.update(f"{e.nir.as_posix()},{e.rgb.as_posix()},{e.split}\n".encode())
    return h.hexdigest()


def _images(directory: Path) -> Dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_EXTS}


def _pair_up(nirs: Dict[str, Path], rgbs: Dict[str, Path], split: str,
             orphans: List[str]) -> List[Entry]:
    orphans += [str(nirs[s]) for s in sorted(set(nirs) - set(rgbs))]
    orphans += [str(rgbs[s]) for s in sorted(set(rgbs) - set(nirs))]
    return [Entry(nirs[s], rgbs[s], split) for s in sorted(set(nirs) & set(rgbs))]


def _scan_vcip(root: Path, orphans: List[str]) -> List[Entry]:
    entries = []
    for split in SPLITS:
        entries += _pair_up(_images(root / split / "nir"), _images(root / split / "rgb"),
                            split, orphans)
    return entries


def _scan_epfl(root: Path, orphans: List[str], test_every: int) -> List[Entry]:
    nirs: Dict[str, Path] = {}
    rgbs: Dict[str, Path] = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.suffix.lower() not in IMAGE_EXTS:
            continue
        key = p.relative_to(root).with_suffix("").as_posix()
        if key.endswith("_nir"):
            nirs[key[:-4]] = p
        elif key.endswith("_rgb"):
            rgbs[key[:-4]] = p
    pairs = _pair_up(nirs, rgbs, "train", orphans)
    return [replace(e, split="test") if test_every and (i + 1) % test_every == 0 else e
            for i, e in enumerate(pairs)]


def _scan_manifest(path: Path, orphans: List[str]) -> List[Entry]:
    entries = []
    base = path.parent
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 or parts[2] not in SPLITS:
            raise DatasetError(f"{path}:{lineno}: expected 'nir_path,rgb_path,split', got {line!r}")
        nir, rgb = (Path(p) if Path(p).is_absolute() else base / p for p in parts[:2])
        missing = [str(p) for p in (nir, rgb) if not p.is_file()]
        if missing:
            orphans += missing
            continue
        entries.append(Entry(nir, rgb, parts[2]))
    return sorted(entries, key=lambda e: (e.split, e.nir.as_posix()))


def scan_dataset(root: Path, layout: str = "vcip", test_every: int = 10) -> DatasetIndex:
    """Build a sorted, checksummed index of NIR/RGB pairs.

    Raises :class:`DatasetError` when the root is missing, no pairs are
    found, or any NIR/RGB file lacks its counterpart (all orphans listed).
    """
    root = Path(root)
    if not root.exists():
        raise DatasetError(f"dataset root {root} does not exist")
    orphans: List[str] = []
    if layout == "vcip":
        entries = _scan_vcip(root, orphans)
    elif layout == "epfl":
        entries = _scan_epfl(root, orphans, test_every)
    elif layout == "manifest":
        entries = _scan_manifest(root, orphans)
    else:
        raise DatasetError(f"unknown layout {layout!r}; expected vcip, epfl or manifest")
    if orphans:
        raise DatasetError("files without a counterpart: " + ", ".join(orphans))
    if not entries:
        raise DatasetError(f"no pairs found under {root}")
    return DatasetIndex(entries)


# ---------------------------------------------------------------------------
# pixel conversions

def rgb_to_gray(rgb):
    """BT.601 luma of a [0, 1] image; the channel axis is third from the end."""
    if rgb.shape[-3] != 3:
        raise ValueError(f"expected 3 channels on axis -3, got shape {tuple(rgb.shape)}")
    if rgb.min() < 0 or rgb.max() > 1:
        raise ValueError("rgb_to_gray expects values in [0, 1]")
    r, g, b = rgb[..., 0:1, :, :], rgb[..., 1:2, :, :], rgb[..., 2:3, :, :]
    return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b


def normalize(img):
    return img * 2 - 1


def denormalize(img):
    return (img + 1) / 2


def load_image(path: Path, channels: int, dtype=np.float32) -> torch.Tensor:
    """Read an 8-bit image as a (C, H, W) tensor in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=dtype) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def save_image(img: torch.Tensor, path: Path) -> None:
    """Write a (C, H, W) tensor in [-1, 1] as an 8-bit PNG."""
    arr = denormalize(img.detach().cpu().double()).clamp(0, 1).numpy()
    arr = np.round(arr * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0]).save(path)
    else:
        Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0))).save(path)


@dataclass
class SamplePair:
    """One aligned sample, every tensor (C, H, W) in [-1, 1]."""

    nir: torch.Tensor
    rgb: torch.Tensor
    gray: torch.Tensor

    @classmethod
    def from_unit(cls, nir01: torch.Tensor, rgb01: torch.Tensor) -> "SamplePair":
        if nir01.shape[1:] != rgb01.shape[1:]:
            raise DatasetError(
                f"NIR {tuple(nir01.shape[1:])} and RGB {tuple(rgb01.shape[1:])} sizes differ")
        return cls(normalize(nir01), normalize(rgb01), normalize(rgb_to_gray(rgb01)))


def load_pair(entry: Entry) -> SamplePair:
    nir, rgb = load_image(entry.nir, 1), load_image(entry.rgb, 3)
    if nir.shape[1:] != rgb.shape[1:]:
        raise DatasetError(f"{entry.nir} and {entry.rgb} have different sizes")
    return SamplePair.from_unit(nir, rgb)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentConfig:
    crop_size: int = 256
    scale_range: Tuple[float, float] = (1.0, 1.5)
    mirror_p: float = 0.5
    contrast_range: Tuple[float, float] = (0.8, 1.2)
    shared_contrast: bool = True


@dataclass(frozen=True)
class AugmentDraw:
    scale: float
    top: float
    left: float
    mirror: bool
    contrast_nir: float
    contrast_rgb: float


def draw_augment(rng: np.random.Generator, cfg: AugmentConfig) -> AugmentDraw:
    scale = rng.uniform(*cfg.scale_range)
    top, left = rng.uniform(), rng.uniform()
    mirror = bool(rng.uniform() < cfg.mirror_p)
    c_nir = rng.uniform(*cfg.contrast_range)
    c_rgb = c_nir if cfg.shared_contrast else rng.uniform(*cfg.contrast_range)
    return AugmentDraw(scale, top, left, mirror, c_nir, c_rgb)


def _contrast(img: torch.Tensor, factor: float) -> torch.Tensor:
    if factor == 1.0:
        return img
    mean = img.mean()
    return (mean + factor * (img - mean)).clamp(-1, 1)


def apply_augment(pair: SamplePair, draw: AugmentDraw, crop_size: int) -> SamplePair:
    h, w = pair.nir.shape[1:]
    sh, sw = (h, w) if draw.scale == 1.0 else (round(h * draw.scale), round(w * draw.scale))
    if sh < crop_size or sw < crop_size:
        raise DatasetError(f"image {h}x{w} scaled to {sh}x{sw} is smaller than crop {crop_size}")
    # one geometric path for all three modalities keeps them pixel-aligned
    stacked = torch.cat([pair.nir, pair.rgb, pair.gray], dim=0)
    if (sh, sw) != (h, w):
        stacked = F.interpolate(stacked[None], size=(sh, sw), mode="bilinear",
                                align_corners=False)[0]
    top = int(draw.top * (sh - crop_size + 1)) if sh > crop_size else 0
    left = int(draw.left * (sw - crop_size + 1)) if sw > crop_size else 0
    stacked = stacked[:, top:top + crop_size, left:left + crop_size]
    if draw.mirror:
        stacked = stacked.flip(-1)
    nir = _contrast(stacked[:1], draw.contrast_nir)
    rgb = _contrast(stacked[1:4], draw.contrast_rgb)
    gray = stacked[4:]
    if draw.contrast_rgb != 1.0:
        gray = normalize(rgb_to_gray(denormalize(rgb).clamp(0, 1)))
    return SamplePair(nir.contiguous(), rgb.contiguous(), gray.contiguous())


def augment(pair: SamplePair, rng: np.random.Generator, cfg: AugmentConfig) -> SamplePair:
    """Scale, crop, mirror and contrast-jitter with one shared geometric draw."""
    return apply_augment(pair, draw_augment(rng, cfg), cfg.crop_size)


# ---------------------------------------------------------------------------
# pyramids and batching

def build_pyramid(img: torch.Tensor, stages: int) -> List[torch.Tensor]:
    """Coarse-to-fine pyramid by repeated 2x2 area averaging; last level is ``img``."""
    factor = 2 ** (stages - 1)
    if img.shape[-2] % factor or img.shape[-1] % factor:
        raise ValueError(
            f"spatial dims {tuple(img.shape[-2:])} are not divisible by {factor}")
    levels = [img]
    for _ in range(stages - 1):
        levels.append(F.avg_pool2d(levels[-1], 2))
    return levels[::-1]


@dataclass
class Batch:
    nir: torch.Tensor
    rgb: torch.Tensor
    gray: torch.Tensor


class PairedImages:
    """In-memory dataset of loaded sample pairs with deterministic augmentation.

    Augmentation randomness for a sample depends only on ``(seed, epoch,
    position in epoch)``, so resuming mid-epoch replays the same draws.
    """

    def __init__(self, pairs: Sequence[SamplePair], augment_cfg: Optional[AugmentConfig] = None):
        if not pairs:
            raise DatasetError("no pairs")
        self.pairs = list(pairs)
        self.augment_cfg = augment_cfg

    @classmethod
    def from_index(cls, index: DatasetIndex, split: str = "train",
                   augment_cfg: Optional[AugmentConfig] = None) -> "PairedImages":
        entries = [e for e in index.entries if e.split == split]
        if not entries:
            raise DatasetError(f"no {split} pairs in index")
        return cls([load_pair(e) for e in entries], augment_cfg)

    def __len__(self) -> int:
        return len(self.pairs)

    def get(self, i: int, seed: int, epoch: int, slot: int, stream: int = 0) -> SamplePair:
        pair = self.pairs[i]
        if self.augment_cfg is None:
            return pair
        rng = np.random.default_rng([seed, epoch, slot, stream, 0xA06])
        return augment(pair, rng, self.augment_cfg)


def num_batches(n: int, batch_size: int, drop_last: bool = True) -> int:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    return n // batch_size if drop_last else math.ceil(n / batch_size)


def epoch_order(n: int, seed: int, epoch: int, stream: int = 0) -> np.ndarray:
    return np.random.default_rng([seed, epoch, stream]).permutation(n)


def batch_iterator(data: PairedImages, batch_size: int, seed: int, epoch: int = 0,
                   mode: str = "paired", drop_last: bool = True,
                   start: int = 0) -> Iterator[Batch]:
    """Yield the batches of one epoch, beginning at batch index ``start``.

    ``paired`` keeps NIR/RGB/gray of one sample together. ``unpaired`` draws
    the NIR stream and the RGB/gray stream from independent shuffles.
    """
    if mode not in ("paired", "unpaired"):
        raise ValueError(f"unknown mode {mode!r}")
    n = len(data)
    total = num_batches(n, batch_size, drop_last)
    order_a = epoch_order(n, seed, epoch, 0)
    order_b = order_a if mode == "paired" else epoch_order(n, seed, epoch, 1)
    for b in range(start, total):
        slots = range(b * batch_size, min((b + 1) * batch_size, n))
        if mode == "paired":
            samples = [data.get(int(order_a[k]), seed, epoch, k) for k in slots]
            nir_samples = gray_samples = samples
        else:
            nir_samples = [data.get(int(order_a[k]), seed, epoch, k, 0) for k in slots]
            gray_samples = [data.get(int(order_b[k]), seed, epoch, k, 1) for k in slots]
        yield Batch(
            nir=torch.stack([p.nir for p in nir_samples]),
            rgb=torch.stack([p.rgb for p in gray_samples]),
            gray=torch.stack([p.gray for p in gray_samples]),
        )
