"""Three-stage training: translation, colorization pre-training, fine-tuning.

Each stage alternates a generator step (Adam over every generator of the
stage) with a discriminator step. Gradients of the generator objective are
accumulated only into generator parameters and vice versa, so the two halves
of a step never touch each other's weights.

Checkpoints land in ``out_dir``: one ``<net>.ckpt`` archive per network plus
``state.ckpt`` (step counters and optimizer moments) and ``log.csv``.
Cadence checkpoints go to ``out_dir/steps/<step>/``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import warnings
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .data import (
    IMAGE_EXTS,
    Batch,
    PairedImages,
    batch_iterator,
    build_pyramid,
    load_image,
    normalize,
    num_batches,
    save_image,
)
from .losses import (
    FinetuneBatch,
    LossReport,
    LossWeights,
    pretrain_objective,
    total_objective,
    translation_objective,
)
from .networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    MPFNet,
    PatchDiscriminator,
    load_network,
    save_network,
    tensor_bytes,
    write_archive,
)

log = logging.getLogger(__name__)

STAGES = ("translation", "pretrain", "finetune")
DEFAULT_EPOCHS = {"translation": 400, "pretrain": 250, "finetune": 100}
NET_NAMES = ("g_n2g", "g_g2n", "f_g", "d_n", "d_g", "d_feat")
STAGE_NETS = {
    "translation": (("g_n2g", "g_g2n"), ("d_n", "d_g")),
    "pretrain": (("f_g",), ()),
    "finetune": (("g_n2g", "g_g2n", "f_g"), ("d_n", "d_g", "d_feat")),
}
STATE_FORMAT = "nircolor-train-state"


class TrainingDiverged(RuntimeError):
    def __init__(self, stage: str, step: int, record: Dict[str, float], reason: str):
        super().__init__(f"{stage} diverged at step {step}: {reason}; last losses {record}")
        self.stage, self.step, self.record = stage, step, record


class MissingCheckpointError(FileNotFoundError):
    pass


def set_deterministic(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


@dataclass
class StageConfig:
    stage: str
    epochs: Optional[int] = None
    learning_rate: float = 1e-4
    batch_size: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0
    max_steps: Optional[int] = None
    betas: Tuple[float, float] = (0.5, 0.999)
    drop_last: bool = True

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.stage]
        if self.epochs < 0 or self.batch_size < 1 or not 0 <= self.learning_rate < math.inf:
            raise ValueError("epochs >= 0, batch_size >= 1 and a finite learning_rate >= 0 "
                             "required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class Networks:
    """All six networks of the system; stages use the subset they need."""

    g_n2g: MPFNet
    g_g2n: MPFNet
    f_g: MPFNet
    d_n: PatchDiscriminator
    d_g: PatchDiscriminator
    d_feat: PatchDiscriminator

    @classmethod
    def build(cls, gen: GeneratorSpec = GeneratorSpec(),
              disc: DiscriminatorSpec = DiscriminatorSpec(), seed: int = 0) -> "Networks":
        """Construct every network from one seed, in a fixed order.

        ``gen`` provides the shared backbone hyperparameters; channel counts
        are set per role.
        """
        torch.manual_seed(seed)
        mono = GeneratorSpec(gen.stages, 1, 1, gen.base_width, gen.feb_depth,
                             gen.max_width, gen.reduction)
        color = GeneratorSpec(gen.stages, 1, 3, gen.base_width, gen.feb_depth,
                              gen.max_width, gen.reduction)
        return cls(
            g_n2g=MPFNet(mono),
            g_g2n=MPFNet(mono),
            f_g=MPFNet(color),
            d_n=PatchDiscriminator(DiscriminatorSpec(1, disc.width, disc.num_downsamples)),
            d_g=PatchDiscriminator(DiscriminatorSpec(1, disc.width, disc.num_downsamples)),
            d_feat=PatchDiscriminator(DiscriminatorSpec(3, disc.width, disc.num_downsamples)),
        )

    def __getitem__(self, name: str) -> nn.Module:
        return getattr(self, name)

    def save(self, directory: Path, names: Sequence[str] = NET_NAMES,
             config: Optional[dict] = None) -> None:
        for name in names:
            save_network(self[name], Path(directory) / f"{name}.ckpt", config)

    def load(self, directory: Path, names: Sequence[str]) -> None:
        for name in names:
            path = Path(directory) / f"{name}.ckpt"
            if not path.is_file():
                raise MissingCheckpointError(f"missing checkpoint {path}")
            load_network(self[name], path)


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_total: float = math.inf


@dataclass
class TrainResult:
    history: List[Dict[str, float]]
    state: TrainState
    out_dir: Optional[Path]


def parameter_checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class StageTrainer:
    """Runs one training stage over a :class:`PairedImages` dataset."""

    def __init__(self, cfg: StageConfig, nets: Networks, data: PairedImages,
                 out_dir: Optional[Path] = None, config_echo: Optional[dict] = None) -> None:
        self.cfg = cfg
        self.nets = nets
        self.data = data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.config_echo = {"stage": cfg.to_dict(), **(config_echo or {})}
        self.gen_names, self.disc_names = STAGE_NETS[cfg.stage]
        self.opts = {
            name: torch.optim.Adam(nets[name].parameters(), lr=cfg.learning_rate, betas=cfg.betas)
            for name in self.gen_names + self.disc_names
        }
        self.state = TrainState()
        self.history: List[Dict[str, float]] = []
        self.steps_per_epoch = num_batches(len(data), cfg.batch_size, cfg.drop_last)
        if self.steps_per_epoch == 0:
            raise ValueError(
                f"batch size {cfg.batch_size} exceeds the {len(data)} available samples")

    # -- objectives -------------------------------------------------------

    def objective(self, batch: Batch) -> LossReport:
        nets, w = self.nets, self.cfg.weights
        if self.cfg.stage == "translation":
            return translation_objective(batch.nir, batch.gray, nets.g_n2g, nets.g_g2n,
                                         nets.d_n, nets.d_g, w)
        pyramid = build_pyramid(batch.rgb, nets.f_g.spec.stages)
        if self.cfg.stage == "pretrain":
            return pretrain_objective(batch.gray, pyramid, nets.f_g, w.alpha)
        return total_objective(FinetuneBatch(batch.nir, batch.gray, pyramid),
                               nets.g_n2g, nets.g_g2n, nets.f_g,
                               nets.d_n, nets.d_g, nets.d_feat, w)

    def _params(self, names: Sequence[str]) -> List[torch.Tensor]:
        return [p for n in names for p in self.nets[n].parameters()]

    def generator_step(self, report: LossReport) -> None:
        for n in self.gen_names:
            self.opts[n].zero_grad(set_to_none=True)
        report.total.backward(inputs=self._params(self.gen_names))
        for n in self.gen_names:
            self.opts[n].step()

    def discriminator_step(self, report: LossReport) -> None:
        if not self.disc_names:
            return
        for n in self.disc_names:
            self.opts[n].zero_grad(set_to_none=True)
        report.disc_total().backward(inputs=self._params(self.disc_names))
        for n in self.disc_names:
            self.opts[n].step()

    def train_step(self, batch: Batch) -> Dict[str, float]:
        try:
            report = self.objective(batch)
            report.check_finite()
        except FloatingPointError as exc:
            last = self.history[-1] if self.history else {}
            raise TrainingDiverged(self.cfg.stage, self.state.step, last, str(exc)) from exc
        self.generator_step(report)
        self.discriminator_step(report)
        return report.to_record()

    # -- loop -------------------------------------------------------------

    @property
    def total_steps(self) -> int:
        total = self.cfg.epochs * self.steps_per_epoch
        if self.cfg.max_steps is not None:
            total = min(total, self.cfg.max_steps)
        return total

    def run(self) -> TrainResult:
        cfg = self.cfg
        mode = "unpaired" if cfg.stage == "translation" else "paired"
        while self.state.step < self.total_steps:
            epoch, start = divmod(self.state.step, self.steps_per_epoch)
            for batch in batch_iterator(self.data, cfg.batch_size, cfg.seed, epoch, mode,
                                        cfg.drop_last, start=start):
                record = self.train_step(batch)
                self.state.step += 1
                self.state.epoch = self.state.step // self.steps_per_epoch
                self.state.best_total = min(self.state.best_total, record["total"])
                record = {"step": self.state.step, "epoch": epoch, **record}
                self.history.append(record)
                self._log(record)
                if cfg.checkpoint_every and self.state.step % cfg.checkpoint_every == 0:
                    self.save(self.out_dir / "steps" / f"{self.state.step:06d}"
                              if self.out_dir else None)
                if self.state.step >= self.total_steps:
                    break
        self.save(self.out_dir)
        return TrainResult(self.history, self.state, self.out_dir)

    def _log(self, record: Dict[str, float]) -> None:
        if self.state.step % 50 == 0 or self.state.step == 1:
            log.info("%s step %d: total %.4f", self.cfg.stage, self.state.step, record["total"])
        if self.out_dir is None:
            return
        path = self.out_dir / "log.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not path.exists()
        with path.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(record))
            if new:
                writer.writeheader()
            writer.writerow(record)

    # -- persistence ------------------------------------------------------

    def save(self, directory: Optional[Path]) -> None:
        if directory is None:
            return
        directory = Path(directory)
        names = self.gen_names + self.disc_names
        self.nets.save(directory, names, self.config_echo)
        header = {"format": STATE_FORMAT, "stage": self.cfg.stage,
                  "state": asdict(self.state), "config": self.config_echo}
        write_archive(directory / "state.ckpt", {
            "header.json": json.dumps(header, indent=2, sort_keys=True, default=str).encode(),
            "optim.pt": tensor_bytes({n: self.opts[n].state_dict() for n in names}),
            "rng.pt": tensor_bytes(torch.get_rng_state()),
        })
        (directory / "config.json").write_text(
            json.dumps(self.config_echo, indent=2, sort_keys=True, default=str))

    def resume(self, directory: Path) -> None:
        """Restore networks, optimizer moments and counters saved by :meth:`save`."""
        directory = Path(directory)
        self.nets.load(directory, self.gen_names + self.disc_names)
        with zipfile.ZipFile(directory / "state.ckpt") as zf:
            header = json.loads(zf.read("header.json"))
            optim = torch.load(io.BytesIO(zf.read("optim.pt")), weights_only=True)
            rng = torch.load(io.BytesIO(zf.read("rng.pt")), weights_only=True)
        if header.get("format") != STATE_FORMAT or header.get("stage") != self.cfg.stage:
            raise ValueError(f"{directory} does not hold a {self.cfg.stage} training state")
        for name, sd in optim.items():
            self.opts[name].load_state_dict(sd)
        torch.set_rng_state(rng)
        self.state = TrainState(**header["state"])


# ---------------------------------------------------------------------------
# stage entry points

def train_translation(data: PairedImages, nets: Networks, cfg: StageConfig,
                      out_dir: Optional[Path] = None, resume: Optional[Path] = None,
                      config_echo: Optional[dict] = None) -> TrainResult:
    """Stage 1: CycleGAN-style NIR <-> grayscale translation on unpaired streams."""
    if cfg.stage != "translation":
        raise ValueError("train_translation needs a translation StageConfig")
    trainer = StageTrainer(cfg, nets, data, out_dir, config_echo)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run()


def pretrain_colorization(data: PairedImages, nets: Networks, cfg: StageConfig,
                          out_dir: Optional[Path] = None, resume: Optional[Path] = None,
                          config_echo: Optional[dict] = None) -> TrainResult:
    """Stage 2: train the colorizer on grayscale -> RGB with the multi-scale mixed loss."""
    if cfg.stage != "pretrain":
        raise ValueError("pretrain_colorization needs a pretrain StageConfig")
    trainer = StageTrainer(cfg, nets, data, out_dir, config_echo)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run()


def finetune(data: PairedImages, nets: Networks, cfg: StageConfig,
             out_dir: Optional[Path] = None, translation_dir: Optional[Path] = None,
             pretrain_dir: Optional[Path] = None, allow_random_init: bool = False,
             resume: Optional[Path] = None, config_echo: Optional[dict] = None) -> TrainResult:
    """Stage 3: joint fine-tuning of all generators and discriminators.

    Loads the translation networks (generators and both image discriminators)
    from ``translation_dir`` and the colorizer from ``pretrain_dir``. Without
    them it refuses to run unless ``allow_random_init`` is set.
    """
    if cfg.stage != "finetune":
        raise ValueError("finetune needs a finetune StageConfig")
    if resume is None:
        sources = {"translation": (translation_dir, ("g_n2g", "g_g2n", "d_n", "d_g")),
                   "pretrain": (pretrain_dir, ("f_g",))}
        for stage, (directory, names) in sources.items():
            if directory is not None:
                nets.load(directory, names)
            elif not allow_random_init:
                raise MissingCheckpointError(
                    f"fine-tuning needs the {stage} checkpoint ({', '.join(names)}); "
                    "pass allow_random_init=True to start from random weights")
    trainer = StageTrainer(cfg, nets, data, out_dir, config_echo)
    if resume is not None:
        trainer.resume(resume)
    return trainer.run()


# ---------------------------------------------------------------------------
# inference

def _pad_to(x: torch.Tensor, divisor: int) -> Tuple[torch.Tensor, int, int]:
    """Pad bottom/right up to a multiple of ``divisor`` and at least ``2 * divisor``."""
    h, w = x.shape[-2:]
    ph = max(-(-h // divisor), 2) * divisor - h
    pw = max(-(-w // divisor), 2) * divisor - w
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return x, h, w


@torch.no_grad()
def infer(nir: torch.Tensor, g_n2g: Optional[MPFNet], f_g: MPFNet) -> torch.Tensor:
    """Colorize a (B, 1, H, W) NIR batch in [-1, 1]; returns (B, 3, H, W) in (-1, 1).

    Inputs whose size is not a multiple of the generators' divisor are
    reflect-padded and the prediction is cropped back. With ``g_n2g`` set to
    None the input goes straight to the colorizer.
    """
    divisor = max(f_g.spec.divisor, g_n2g.spec.divisor if g_n2g is not None else 1)
    x, h, w = _pad_to(nir, divisor)
    if g_n2g is not None:
        x = g_n2g(x)[-1]
    return f_g(x)[-1][..., :h, :w]


def infer_directory(input_dir: Path, output_dir: Path, g_n2g: Optional[MPFNet],
                    f_g: MPFNet) -> Tuple[List[Path], List[str]]:
    """Colorize every image in ``input_dir``; unreadable files are skipped with a warning.

    Returns the written paths and the names of skipped files.
    """
    written, failed = [], []
    for path in sorted(Path(input_dir).iterdir()):
        if not path.is_file() or path.suffix.lower() not in IMAGE_EXTS:
            continue
        try:
            nir = normalize(load_image(path, 1))
        except Exception as exc:  # PIL raises a zoo of error types for corrupt files
            warnings.warn(f"skipping unreadable image {path.name}: {exc}")
            failed.append(path.name)
            continue
        rgb = infer(nir[None], g_n2g, f_g)[0]
        out = Path(output_dir) / f"{path.stem}.png"
        save_image(rgb, out)
        written.append(out)
    return written, failed
