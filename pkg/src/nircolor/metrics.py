"""Evaluation metrics: PSNR, SSIM, angular error, and report aggregation.

All functions take (C, H, W) arrays in [0, 1]. A learned perceptual metric
can be plugged into :func:`evaluate` as any callable taking two such arrays
and returning a float.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Union

import numpy as np
import torch

from .data import IMAGE_EXTS, DatasetIndex, load_image
from .losses import SSIM_WINDOW, ssim_map, ssim_window_size

PSNR_CAP = 100.0
AE_MIN_NORM = 1e-6
CSV_COLUMNS = ("stem", "psnr", "ssim", "ae", "perceptual")

PerceptualMetric = Callable[[np.ndarray, np.ndarray], float]


class EvaluationError(ValueError):
    pass


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target) -> float:
    """PSNR in dB for [0, 1] images; identical images give ``PSNR_CAP``."""
    pred, target = _pair(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def ssim(pred, target) -> float:
    """Mean SSIM (Gaussian window 11, sigma 1.5, L=1), averaged over channels."""
    pred, target = _pair(pred, target)
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    h, w = pred.shape[-2:]
    if ssim_window_size(h, w) < SSIM_WINDOW:
        warnings.warn(f"{h}x{w} image is smaller than the SSIM window; "
                      f"using {ssim_window_size(h, w)}x{ssim_window_size(h, w)}")
    x = torch.from_numpy(pred)[None]
    y = torch.from_numpy(target)[None]
    return float(ssim_map(x, y, data_range=1.0).mean())


def angular_error(pred, target) -> float:
    """Mean per-pixel angle in degrees between RGB vectors (channel axis 0).

    Pixels where either vector is (near) zero contribute 0 degrees.
    """
    pred, target = _pair(pred, target)
    dot = np.sum(pred * target, axis=0)
    pn, tn = np.linalg.norm(pred, axis=0), np.linalg.norm(target, axis=0)
    valid = (pn >= AE_MIN_NORM) & (tn >= AE_MIN_NORM)
    cos = np.ones_like(dot)
    cos[valid] = np.clip(dot[valid] / (pn[valid] * tn[valid]), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


@dataclass
class ImageMetrics:
    stem: str
    psnr: float
    ssim: float
    ae: float
    perceptual: Optional[float] = None


@dataclass
class MetricReport:
    records: List[ImageMetrics]
    manifest_checksum: str = ""
    config: Dict[str, object] = field(default_factory=dict)

    @property
    def aggregates(self) -> Dict[str, float]:
        out = {}
        for key in ("psnr", "ssim", "ae", "perceptual"):
            values = [getattr(r, key) for r in self.records if getattr(r, key) is not None]
            if values:
                out[key] = float(np.mean(values))
        return out

    def summary(self) -> str:
        agg = self.aggregates
        line = f"PSNR {agg['psnr']:.2f} SSIM {agg['ssim']:.4f} AE {agg['ae']:.2f}"
        if "perceptual" in agg:
            line += f" PERCEPTUAL {agg['perceptual']:.4f}"
        return line

    def write_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.records:
                writer.writerow([r.stem, f"{r.psnr:.6f}", f"{r.ssim:.6f}", f"{r.ae:.6f}",
                                 "" if r.perceptual is None else f"{r.perceptual:.6f}"])
            agg = self.aggregates
            writer.writerow(["mean"] + [
                f"{agg[k]:.6f}" if k in agg else "" for k in CSV_COLUMNS[1:]])

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "aggregates": self.aggregates,
            "manifest_checksum": self.manifest_checksum,
            "config": self.config,
        }

    def write_json(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _stems(directory: Path) -> Dict[str, Path]:
    if not directory.is_dir():
        raise EvaluationError(f"{directory} is not a directory")
    return {p.stem: p for p in sorted(directory.iterdir())
            if p.is_file() and p.suffix.lower() in IMAGE_EXTS}


def evaluate(pred_dir: Path, target: Union[Path, DatasetIndex, Mapping[str, Path]],
             perceptual: Optional[PerceptualMetric] = None,
             config: Optional[dict] = None) -> MetricReport:
    """Score every prediction in ``pred_dir`` against its same-stem target.

    ``target`` is a directory of RGB images, a dataset index (its test-split
    RGB files are used), or an explicit stem -> path mapping.
    """
    preds = _stems(Path(pred_dir))
    if isinstance(target, DatasetIndex):
        targets = {e.stem: e.rgb for e in target.entries if e.split == "test"}
    elif isinstance(target, Mapping):
        targets = {k: Path(v) for k, v in target.items()}
    else:
        targets = _stems(Path(target))
    if not preds:
        raise EvaluationError(f"no images in {pred_dir}")
    unmatched = sorted(set(preds) ^ set(targets))
    if unmatched:
        raise EvaluationError("unmatched stems: " + ", ".join(unmatched))
    digest = hashlib.sha256()
    records = []
    for stem in sorted(preds):
        p = load_image(preds[stem], 3, np.float64).numpy()
        t = load_image(targets[stem], 3, np.float64).numpy()
        if p.shape != t.shape:
            raise EvaluationError(f"{stem}: prediction {p.shape} vs target {t.shape}")
        digest.update(f"{stem},{targets[stem].name}\n".encode())
        records.append(ImageMetrics(
            stem, psnr(p, t), ssim(p, t), angular_error(p, t),
            None if perceptual is None else float(perceptual(p, t))))
    return MetricReport(records, digest.hexdigest(), dict(config or {}))
