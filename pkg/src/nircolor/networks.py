"""Generators and discriminators built from :mod:`nircolor.nnblocks`.

``MPFNet`` is the multi-scale progressive generator: ``S`` stages run coarse
to fine, each a stem conv, a U-shaped feature embedding block (FEB) and an
SCCM head. Features leaving one stage's SCCM are upsampled and injected into
the next stage's FEB. The same backbone serves the NIR<->grayscale
translators (1-channel output) and the grayscale colorizer (3-channel output).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .nnblocks import (
    LRELU_SLOPE,
    SCCM,
    Bottleneck,
    DecoderBlock,
    EncoderBlock,
    check_feature_map,
    upsample2x,
)


@dataclass(frozen=True)
class GeneratorSpec:
    stages: int = 3
    in_channels: int = 1
    out_channels: int = 3
    base_width: int = 64
    feb_depth: int = 3
    max_width: int = 256
    reduction: int = 8

    def __post_init__(self) -> None:
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.feb_depth < 1:
            raise ValueError("feb_depth must be >= 1")
        if self.in_channels not in (1, 3) or self.out_channels not in (1, 3):
            raise ValueError("in_channels and out_channels must be 1 or 3")
        if self.base_width < 1 or self.max_width < self.base_width:
            raise ValueError("need 1 <= base_width <= max_width")

    @property
    def divisor(self) -> int:
        """Input H and W must be multiples of this."""
        return 2 ** (self.stages - 1 + self.feb_depth)

    def widths(self) -> List[int]:
        return [min(self.base_width * 2 ** level, self.max_width)
                for level in range(self.feb_depth + 1)]


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 3
    width: int = 64
    num_downsamples: int = 3

    def __post_init__(self) -> None:
        if self.num_downsamples < 1:
            raise ValueError("num_downsamples must be >= 1")
        if self.in_channels < 1 or self.width < 1:
            raise ValueError("in_channels and width must be positive")


def init_weights(net: nn.Module, std: float = 0.02) -> nn.Module:
    """N(0, std) conv weights with zero bias; norm affine terms at (1, 0)."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return net


def _check_divisible(x: torch.Tensor, divisor: int) -> None:
    for name, size in (("height", x.shape[2]), ("width", x.shape[3])):
        if size % divisor:
            raise ValueError(f"input {name} {size} is not divisible by {divisor}")


class FEB(nn.Module):
    """Feature embedding block: a U-Net over ``depth`` levels.

    Widths double per level (capped at ``max_width``); the bottleneck is a
    plain 3x3 conv. When ``inject`` is set, features from the coarser stage
    are fused at the entry as ``x + conv1x1(cat(x, injected))``.
    """

    def __init__(self, base_width: int = 64, depth: int = 3, max_width: int = 256,
                 reduction: int = 8, inject: bool = False) -> None:
        super().__init__()
        self.depth = depth
        widths = [min(base_width * 2 ** i, max_width) for i in range(depth + 1)]
        self.fuse = nn.Conv2d(2 * base_width, base_width, 1) if inject else None
        self.encoders = nn.ModuleList(
            EncoderBlock(widths[i], widths[i + 1], reduction) for i in range(depth))
        self.bottleneck = Bottleneck(widths[depth])
        self.decoders = nn.ModuleList(
            DecoderBlock(widths[i + 1], widths[i], widths[i], reduction)
            for i in reversed(range(depth)))

    def forward(self, x: torch.Tensor, injected: Optional[torch.Tensor] = None) -> torch.Tensor:
        _check_divisible(x, 2 ** self.depth)
        if injected is not None:
            if self.fuse is None:
                raise ValueError("this FEB was built without an injection path")
            if injected.shape != x.shape:
                raise ValueError(
                    f"injected features {tuple(injected.shape)} do not match {tuple(x.shape)}")
            x = x + self.fuse(torch.cat([x, injected], dim=1))
        skips = []
        for enc in self.encoders:
            skips.append(x)
            x = enc(x)
        x = self.bottleneck(x)
        for dec in self.decoders:
            x = dec(x, skips.pop())
        return x


def downsample(img: torch.Tensor, times: int) -> torch.Tensor:
    for _ in range(times):
        img = F.avg_pool2d(img, 2)
    return img


class MPFNet(nn.Module):
    """Multi-scale progressive feature embedding generator.

    ``forward`` returns ``spec.stages`` predictions ordered coarse to fine;
    prediction ``s`` (1-based) has spatial size ``input / 2**(S - s)``.
    """

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()) -> None:
        super().__init__()
        self.spec = spec
        w = spec.base_width
        self.stems = nn.ModuleList(
            nn.Conv2d(spec.in_channels, w, 3, padding=1) for _ in range(spec.stages))
        self.febs = nn.ModuleList(
            FEB(w, spec.feb_depth, spec.max_width, spec.reduction, inject=s > 0)
            for s in range(spec.stages))
        self.heads = nn.ModuleList(
            SCCM(w, spec.out_channels, features=s < spec.stages - 1) for s in range(spec.stages))
        init_weights(self)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        check_feature_map(x)
        spec = self.spec
        if x.shape[1] != spec.in_channels:
            raise ValueError(f"expected {spec.in_channels} input channels, got {x.shape[1]}")
        _check_divisible(x, spec.divisor)
        for name, size in (("height", x.shape[2]), ("width", x.shape[3])):
            if size < 2 * spec.divisor:
                # the deepest instance norm needs more than one pixel
                raise ValueError(f"input {name} {size} must be at least {2 * spec.divisor}")
        preds = []
        carried = None
        for s in range(spec.stages):
            img = downsample(x, spec.stages - 1 - s)
            f = self.stems[s](img)
            f = self.febs[s](f, None if carried is None else upsample2x(carried))
            pred, carried = self.heads[s](f, img)
            if not torch.isfinite(pred).all():
                raise FloatingPointError(f"non-finite activations at stage {s + 1}")
            preds.append(pred)
        return preds


class PatchDiscriminator(nn.Module):
    """PatchGAN discriminator returning a raw logit map (no sigmoid).

    ``num_downsamples`` stride-2 4x4 convs are followed by one stride-1 4x4
    conv block and a stride-1 4x4 conv to a single channel; 256x256 inputs
    with 3 downsamples give a 30x30 map.
    """

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()) -> None:
        super().__init__()
        self.spec = spec
        w = spec.width
        layers: List[nn.Module] = [
            nn.Conv2d(spec.in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(LRELU_SLOPE),
        ]
        mult = 1
        for i in range(1, spec.num_downsamples + 1):
            prev, mult = mult, min(2 ** i, 8)
            stride = 2 if i < spec.num_downsamples else 1
            layers += [
                nn.Conv2d(w * prev, w * mult, 4, stride=stride, padding=1),
                nn.InstanceNorm2d(w * mult, affine=True),
                nn.LeakyReLU(LRELU_SLOPE),
            ]
        layers.append(nn.Conv2d(w * mult, 1, 4, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        init_weights(self)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() != 4 or img.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected (B, {self.spec.in_channels}, H, W) input, got {tuple(img.shape)}")
        return self.model(img)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# checkpoint archive: header.json (human readable) + params.pt (state dict)

CHECKPOINT_FORMAT = "nircolor-network"
CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class SpecMismatchError(ValueError):
    pass


def _kind(net: nn.Module) -> str:
    if isinstance(net, MPFNet):
        return "generator"
    if isinstance(net, PatchDiscriminator):
        return "discriminator"
    raise TypeError(f"unsupported network type {type(net).__name__}")


def write_archive(path: Path, members: dict[str, bytes]) -> None:
    """Write a zip archive with fixed timestamps so identical content gives identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in members.items():
            zf.writestr(zipfile.ZipInfo(name, date_time=_ZIP_DATE), data)
    tmp.replace(path)


def tensor_bytes(obj: Any) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def save_network(net: nn.Module, path: Path, config: Optional[dict] = None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": _kind(net),
        "spec": asdict(net.spec),
        "parameters": count_parameters(net),
        "config": config or {},
    }
    write_archive(path, {
        "header.json": json.dumps(header, indent=2, sort_keys=True, default=str).encode(),
        "params.pt": tensor_bytes(net.state_dict()),
    })


def read_header(path: Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a network checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header


def spec_diff(expected: dict, found: dict) -> List[str]:
    keys = sorted(set(expected) | set(found))
    return [f"{k}: expected {expected.get(k)!r}, checkpoint has {found.get(k)!r}"
            for k in keys if expected.get(k) != found.get(k)]


def load_network(net: nn.Module, path: Path) -> nn.Module:
    """Load parameters into ``net``; the stored spec must match ``net.spec`` field by field."""
    header = read_header(path)
    if header["kind"] != _kind(net):
        raise SpecMismatchError(f"{path} holds a {header['kind']}, not a {_kind(net)}")
    diff = spec_diff(asdict(net.spec), header["spec"])
    if diff:
        raise SpecMismatchError(f"spec mismatch for {path}:\n  " + "\n  ".join(diff))
    with zipfile.ZipFile(path) as zf:
        state = torch.load(io.BytesIO(zf.read("params.pt")), weights_only=True)
    net.load_state_dict(state)
    return net


def build_from_checkpoint(path: Path) -> nn.Module:
    header = read_header(path)
    if header["kind"] == "generator":
        net: nn.Module = MPFNet(GeneratorSpec(**header["spec"]))
    else:
        net = PatchDiscriminator(DiscriminatorSpec(**header["spec"]))
    return load_network(net, path)
