"""Objective terms for translation, colorization pre-training and fine-tuning.

Every composite objective returns a :class:`LossReport`: the generator-side
``total`` (a differentiable scalar equal to the weighted sum of ``terms``)
plus the discriminator-side losses in ``disc``. Discriminator losses are
always computed on detached generator outputs, so their gradients never reach
generator parameters.

Generators are any callables returning a coarse-to-fine list of predictions
(:class:`nircolor.networks.MPFNet` or a stand-in); discriminators are any
callables returning a logit map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import torch
import torch.nn.functional as F

Generator = Callable[[torch.Tensor], List[torch.Tensor]]
Discriminator = Callable[[torch.Tensor], torch.Tensor]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossWeights:
    """Loss weights.

    ``lambda_cyc`` / ``lambda_idt`` weight the cycle and identity terms of the
    translation loss; ``lambda_tran`` / ``lambda_feat`` weight the translation
    loss and the feature-level GAN term in the fine-tuning objective.
    ``alpha`` is the SSIM share of the mixed SSIM+L1 loss.
    """

    lambda_cyc: float = 1.0
    lambda_idt: float = 1.0
    lambda_tran: float = 1.0
    lambda_feat: float = 1.0
    alpha: float = 0.84

    def __post_init__(self) -> None:
        for name in ("lambda_cyc", "lambda_idt", "lambda_tran", "lambda_feat"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class LossReport:
    total: torch.Tensor
    terms: Dict[str, torch.Tensor]
    weights: Dict[str, float]
    disc: Dict[str, torch.Tensor] = field(default_factory=dict)
    details: Dict[str, float] = field(default_factory=dict)

    def weighted_sum(self) -> float:
        return sum(self.weights[k] * v.item() for k, v in self.terms.items())

    def disc_total(self) -> torch.Tensor:
        return sum(self.disc.values())

    def to_record(self) -> Dict[str, float]:
        """Flat key -> float view for logging."""
        rec = {"total": self.total.item()}
        rec.update({k: v.item() for k, v in self.terms.items()})
        rec.update(self.details)
        rec.update({f"disc/{k}": v.item() for k, v in self.disc.items()})
        return rec

    def check_finite(self) -> None:
        for name, value in [("total", self.total), *self.terms.items(),
                            *[(f"disc/{k}", v) for k, v in self.disc.items()]]:
            if not torch.isfinite(value).all():
                raise FloatingPointError(f"loss component {name!r} is not finite")


def _report(terms: Dict[str, torch.Tensor], weights: Dict[str, float],
            disc: Optional[Dict[str, torch.Tensor]] = None) -> LossReport:
    total = sum(weights[k] * v for k, v in terms.items())
    return LossReport(total=total, terms=terms, weights=weights, disc=disc or {})


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# SSIM

def ssim_window_size(height: int, width: int, window: int = SSIM_WINDOW) -> int:
    """Largest odd window no larger than ``window`` and ``min(height, width)``."""
    size = min(window, height, width)
    return size if size % 2 else size - 1


def gaussian_window(size: int, sigma: float = SSIM_SIGMA,
                    dtype: torch.dtype = torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(x: torch.Tensor, y: torch.Tensor, data_range: float = 2.0,
             window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
             padding: str = "valid") -> torch.Tensor:
    """Per-pixel SSIM, channels treated independently.

    ``padding="valid"`` keeps only windows that fit inside the image (the
    usual metric convention). ``"reflect"`` mirrors the borders first so every
    pixel is a window centre; the loss uses it so edges are supervised.
    """
    _same_shape(x, y, "ssim")
    if padding not in ("valid", "reflect"):
        raise ValueError(f"unknown SSIM padding {padding!r}")
    c = x.shape[1]
    size = ssim_window_size(x.shape[2], x.shape[3], window)
    if size < 1:
        raise ValueError("images too small for SSIM")
    if padding == "reflect" and size > 1:
        pad = (size // 2,) * 4
        x, y = F.pad(x, pad, mode="reflect"), F.pad(y, pad, mode="reflect")
    kernel = gaussian_window(size, sigma, x.dtype).to(x.device).expand(c, 1, size, size)

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, kernel, groups=c)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    var_x = blur(x * x) - mu_x ** 2
    var_y = blur(y * y) - mu_y ** 2
    cov = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(x: torch.Tensor, y: torch.Tensor, data_range: float = 2.0,
         padding: str = "reflect") -> torch.Tensor:
    """Mean SSIM as used by the loss (border-reflected by default)."""
    return ssim_map(x, y, data_range, padding=padding).mean()


def constant_ssim(mu_x: float, mu_y: float, data_range: float = 2.0) -> float:
    """Closed-form SSIM of two constant images (both variances zero)."""
    c1 = (SSIM_K1 * data_range) ** 2
    return (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)


# ---------------------------------------------------------------------------
# elementary terms

def mix_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 0.84) -> torch.Tensor:
    """``alpha * (1 - SSIM) + (1 - alpha) * L1`` for images in [-1, 1]."""
    _same_shape(pred, target, "mix_loss")
    l1 = (pred - target).abs().mean()
    if alpha == 0:
        return l1
    return alpha * (1 - ssim(pred, target, data_range=2.0)) + (1 - alpha) * l1


def lsgan_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((d_real - 1) ** 2).mean() + 0.5 * (d_fake ** 2).mean()


def lsgan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return ((d_fake - 1) ** 2).mean()


def cycle_loss(x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    _same_shape(x, x_rec, "cycle_loss")
    return (x - x_rec).abs().mean()


def identity_loss(x: torch.Tensor, g_x: torch.Tensor) -> torch.Tensor:
    _same_shape(x, g_x, "identity_loss")
    return (x - g_x).abs().mean()


def _finest(g: Generator, x: torch.Tensor) -> torch.Tensor:
    return g(x)[-1]


def _check_channels(x: torch.Tensor, channels: int, what: str) -> None:
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"{what} must be a (B, {channels}, H, W) batch, got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# composite objectives

def translation_objective(x_n: torch.Tensor, x_g: torch.Tensor,
                          g_n2g: Generator, g_g2n: Generator,
                          d_n: Discriminator, d_g: Discriminator,
                          w: LossWeights = LossWeights(),
                          fake_g: Optional[torch.Tensor] = None) -> LossReport:
    """CycleGAN-style NIR <-> grayscale objective on the finest outputs.

    ``fake_g`` may pass in an already computed ``g_n2g(x_n)`` finest output.
    """
    _check_channels(x_n, 1, "NIR batch")
    _check_channels(x_g, 1, "grayscale batch")
    if fake_g is None:
        fake_g = _finest(g_n2g, x_n)
    fake_n = _finest(g_g2n, x_g)
    terms = {
        "adv_n2g": lsgan_g_loss(d_g(fake_g)),
        "adv_g2n": lsgan_g_loss(d_n(fake_n)),
        "cyc_n": cycle_loss(x_n, _finest(g_g2n, fake_g)),
        "cyc_g": cycle_loss(x_g, _finest(g_n2g, fake_n)),
        "idt_n": identity_loss(x_n, _finest(g_g2n, x_n)),
        "idt_g": identity_loss(x_g, _finest(g_n2g, x_g)),
    }
    weights = {"adv_n2g": 1.0, "adv_g2n": 1.0,
               "cyc_n": w.lambda_cyc, "cyc_g": w.lambda_cyc,
               "idt_n": w.lambda_idt, "idt_g": w.lambda_idt}
    disc = {
        "d_g": lsgan_d_loss(d_g(x_g), d_g(fake_g.detach())),
        "d_n": lsgan_d_loss(d_n(x_n), d_n(fake_n.detach())),
    }
    return _report(terms, weights, disc)


def _pyramid_objective(x: torch.Tensor, targets: Sequence[torch.Tensor],
                       f_g: Generator, alpha: float) -> LossReport:
    preds = f_g(x)
    if len(preds) != len(targets):
        raise ValueError(
            f"ground-truth pyramid has {len(targets)} levels, generator emits {len(preds)}")
    terms = {f"mix_s{s}": mix_loss(p, t, alpha)
             for s, (p, t) in enumerate(zip(preds, targets), start=1)}
    return _report(terms, {k: 1.0 for k in terms})


def pretrain_objective(x_g: torch.Tensor, y_g_pyramid: Sequence[torch.Tensor],
                       f_g: Generator, alpha: float = 0.84) -> LossReport:
    """Sum over scales of ``mix_loss(Y_G^s, F_G^s(x_g))``."""
    return _pyramid_objective(x_g, y_g_pyramid, f_g, alpha)


def finetune_pixel_objective(x_n2g: torch.Tensor, y_n_pyramid: Sequence[torch.Tensor],
                             f_g: Generator, alpha: float = 0.84) -> LossReport:
    """Sum over scales of ``mix_loss(Y_N^s, F_G^s(x_n2g))`` for translated inputs."""
    return _pyramid_objective(x_n2g, y_n_pyramid, f_g, alpha)


def feature_gan_objective(x_n: torch.Tensor, x_g: torch.Tensor, g_n2g: Generator,
                          f_g: Generator, d_feat: Discriminator,
                          x_n2g: Optional[torch.Tensor] = None) -> LossReport:
    """Least-squares GAN aligning ``F_G(G_N2G(x_n))`` with ``F_G(x_g)`` (finest scale)."""
    _check_channels(x_n, 1, "NIR batch")
    _check_channels(x_g, 1, "grayscale batch")
    if x_n2g is None:
        x_n2g = _finest(g_n2g, x_n)
    fake = _finest(f_g, x_n2g)
    with torch.no_grad():
        real = _finest(f_g, x_g)
    terms = {"adv_feat": lsgan_g_loss(d_feat(fake))}
    disc = {"d_feat": lsgan_d_loss(d_feat(real), d_feat(fake.detach()))}
    return _report(terms, {"adv_feat": 1.0}, disc)


@dataclass
class FinetuneBatch:
    x_n: torch.Tensor
    x_g: torch.Tensor
    y_pyramid: List[torch.Tensor]


def total_objective(batch: FinetuneBatch, g_n2g: Generator, g_g2n: Generator,
                    f_g: Generator, d_n: Discriminator, d_g: Discriminator,
                    d_feat: Discriminator, w: LossWeights = LossWeights()) -> LossReport:
    """Fine-tuning objective ``L_pf + lambda_tran * L_tran + lambda_feat * L_feat``.

    ``batch.x_n`` is the NIR input, ``batch.x_g`` a grayscale target-domain
    batch and ``batch.y_pyramid`` the RGB ground truth of ``x_n`` per scale.
    """
    x_n2g = _finest(g_n2g, batch.x_n)
    pf = finetune_pixel_objective(x_n2g, batch.y_pyramid, f_g, w.alpha)
    tran = translation_objective(batch.x_n, batch.x_g, g_n2g, g_g2n, d_n, d_g, w, fake_g=x_n2g)
    feat = feature_gan_objective(batch.x_n, batch.x_g, g_n2g, f_g, d_feat, x_n2g=x_n2g)
    parts = {"pf": pf, "tran": tran, "feat": feat}
    for name, rep in parts.items():
        if not torch.isfinite(rep.total):
            raise FloatingPointError(f"loss component {name!r} is not finite")
    report = _report({k: r.total for k, r in parts.items()},
                     {"pf": 1.0, "tran": w.lambda_tran, "feat": w.lambda_feat},
                     {**tran.disc, **feat.disc})
    report.details = {f"{name}/{k}": v.item()
                      for name, rep in parts.items() for k, v in rep.terms.items()}
    return report

