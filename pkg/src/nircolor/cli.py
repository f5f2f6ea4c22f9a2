"""Command-line entry point.

    nircolor train {translation,pretrain,finetune} --config run.yaml [--epochs N] [--set key=value ...]
    nircolor infer --checkpoint-dir DIR --input-dir DIR --output-dir DIR
    nircolor eval --pred-dir DIR --target-dir DIR --report report.csv
    nircolor inspect-checkpoint PATH

Config files are YAML mappings using flat dotted keys (``train.epochs: 5``)
or the equivalent nesting. Exit codes: 0 success, 2 usage or config error,
3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, get_args, get_type_hints

import yaml

from .data import AugmentConfig, DatasetError, PairedImages, scan_dataset
from .losses import LossWeights
from .metrics import EvaluationError, evaluate
from .networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    SpecMismatchError,
    build_from_checkpoint,
    read_header,
)
from .training import (
    STAGES,
    MissingCheckpointError,
    Networks,
    StageConfig,
    StageTrainer,
    TrainingDiverged,
    finetune,
    infer_directory,
    set_deterministic,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3
OUTPUT_ROOT_ENV = "NIRCOLOR_OUTPUT_ROOT"

log = logging.getLogger("nircolor")


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    root: str = ""
    layout: str = "vcip"
    test_every: int = 10
    augment: bool = True
    crop_size: int = 256
    scale_min: float = 1.0
    scale_max: float = 1.5
    mirror_p: float = 0.5
    contrast_min: float = 0.8
    contrast_max: float = 1.2
    shared_contrast: bool = True

    def augment_config(self) -> Optional[AugmentConfig]:
        if not self.augment:
            return None
        return AugmentConfig(self.crop_size, (self.scale_min, self.scale_max), self.mirror_p,
                             (self.contrast_min, self.contrast_max), self.shared_contrast)


@dataclass
class GeneratorSection:
    stages: int = 3
    base_width: int = 64
    feb_depth: int = 3
    max_width: int = 256
    reduction: int = 8


@dataclass
class DiscriminatorSection:
    width: int = 64
    num_downsamples: int = 3


@dataclass
class TrainSection:
    epochs: Optional[int] = None
    learning_rate: float = 1e-4
    batch_size: int = 10
    max_steps: Optional[int] = None
    checkpoint_every: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    drop_last: bool = True
    lambda_cyc: float = 1.0
    lambda_idt: float = 1.0
    lambda_tran: float = 1.0
    lambda_feat: float = 1.0
    alpha: float = 0.84
    allow_random_init: bool = False


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    discriminator: DiscriminatorSection = field(default_factory=DiscriminatorSection)
    train: TrainSection = field(default_factory=TrainSection)
    output_dir: str = "runs"
    seed: int = 0
    deterministic: bool = True

    # -- flat dotted-key (de)serialization --------------------------------

    def to_flat(self) -> Dict[str, Any]:
        flat: Dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in fields(value):
                    flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                flat[f.name] = value
        return flat

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "RunConfig":
        cfg = cls()
        cfg.update(flat)
        return cfg

    def update(self, flat: Dict[str, Any]) -> None:
        known = self.to_flat()
        unknown = sorted(k for k in flat if k not in known)
        if unknown:
            raise ConfigError("unknown config key(s): " + ", ".join(unknown))
        for key, value in flat.items():
            owner: Any = self
            *path, name = key.split(".")
            for part in path:
                owner = getattr(owner, part)
            hint = get_type_hints(type(owner))[name]
            setattr(owner, name, _coerce(key, value, hint))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_flat(), sort_keys=True)

    # -- typed views ------------------------------------------------------

    def generator_spec(self) -> GeneratorSpec:
        g = self.generator
        return GeneratorSpec(g.stages, 1, 3, g.base_width, g.feb_depth, g.max_width, g.reduction)

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(3, self.discriminator.width, self.discriminator.num_downsamples)

    def stage_config(self, stage: str) -> StageConfig:
        t = self.train
        weights = LossWeights(t.lambda_cyc, t.lambda_idt, t.lambda_tran, t.lambda_feat, t.alpha)
        return StageConfig(stage, t.epochs, t.learning_rate, t.batch_size, self.seed, weights,
                           t.checkpoint_every, t.max_steps, (t.beta1, t.beta2), t.drop_last)


def _coerce(key: str, value: Any, hint: Any) -> Any:
    args = get_args(hint)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    ok = isinstance(value, base) and not (base is not bool and isinstance(value, bool))
    if base is float and not isinstance(value, bool):
        # YAML 1.1 reads "1e-4" as a string
        try:
            return float(value)
        except (TypeError, ValueError):
            pass
    if not ok:
        raise ConfigError(f"{key}: expected {base.__name__}, got {value!r}")
    return value


def _flatten(tree: Any, prefix: str = "") -> Dict[str, Any]:
    if not isinstance(tree, dict):
        raise ConfigError("config file must contain a mapping")
    out: Dict[str, Any] = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: Optional[Path], overrides: Sequence[str] = ()) -> RunConfig:
    flat: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            flat = _flatten(yaml.safe_load(path.read_text()) or {})
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    if OUTPUT_ROOT_ENV in os.environ:
        flat["output_dir"] = os.environ[OUTPUT_ROOT_ENV]
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        flat[key.strip()] = yaml.safe_load(raw)
    return RunConfig.from_flat(flat)


# ---------------------------------------------------------------------------
# commands

def _common_overrides(args: argparse.Namespace) -> List[str]:
    extra = list(getattr(args, "set", None) or [])
    if getattr(args, "epochs", None) is not None:
        extra.append(f"train.epochs={args.epochs}")
    if getattr(args, "max_steps", None) is not None:
        extra.append(f"train.max_steps={args.max_steps}")
    if args.seed is not None:
        extra.append(f"seed={args.seed}")
    if args.deterministic is not None:
        extra.append(f"deterministic={str(args.deterministic).lower()}")
    if getattr(args, "output_dir", None) is not None and args.command == "train":
        extra.append(f"output_dir={args.output_dir}")
    return extra


def cmd_train(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config, _common_overrides(args))
        index = scan_dataset(Path(cfg.data.root), cfg.data.layout, cfg.data.test_every)
        stage_cfg = cfg.stage_config(args.stage)
        data = PairedImages.from_index(index, "train", cfg.data.augment_config())
    except (ConfigError, DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    set_deterministic(cfg.seed, cfg.deterministic)
    root = Path(cfg.output_dir)
    out = root / args.stage
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    echo = {"run": cfg.to_flat(), "manifest_checksum": index.checksum}
    nets = Networks.build(cfg.generator_spec(), cfg.discriminator_spec(), cfg.seed)
    log.info("%s: %d training pairs, %s", args.stage, len(data), index.counts())
    try:
        if args.stage == "finetune":
            have = {s: (root / s).is_dir() for s in ("translation", "pretrain")}
            result = finetune(
                data, nets, stage_cfg, out,
                translation_dir=root / "translation" if have["translation"] else None,
                pretrain_dir=root / "pretrain" if have["pretrain"] else None,
                allow_random_init=cfg.train.allow_random_init,
                resume=args.resume, config_echo=echo)
        else:
            trainer = StageTrainer(stage_cfg, nets, data, out, echo)
            if args.resume is not None:
                trainer.resume(args.resume)
            result = trainer.run()
    except (MissingCheckpointError, SpecMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    last = result.history[-1]["total"] if result.history else float("nan")
    print(f"{args.stage}: {result.state.step} steps, final total {last:.4f}, checkpoints in {out}")
    return EXIT_OK


def _find_checkpoint(root: Path, name: str, stages: Sequence[str]) -> Optional[Path]:
    for candidate in [root / f"{name}.ckpt"] + [root / s / f"{name}.ckpt" for s in stages]:
        if candidate.is_file():
            return candidate
    return None


def cmd_infer(args: argparse.Namespace) -> int:
    set_deterministic(args.seed or 0, args.deterministic is not False)
    ckpt = Path(args.checkpoint_dir)
    input_dir = Path(args.input_dir)
    if not ckpt.is_dir() or not input_dir.is_dir():
        print(f"error: {ckpt if not ckpt.is_dir() else input_dir} is not a directory",
              file=sys.stderr)
        return EXIT_USAGE
    f_path = _find_checkpoint(ckpt, "f_g", ("finetune", "pretrain"))
    if f_path is None:
        print(f"error: no f_g.ckpt under {ckpt}", file=sys.stderr)
        return EXIT_USAGE
    g_path = _find_checkpoint(ckpt, "g_n2g", ("finetune", "translation"))
    f_g = build_from_checkpoint(f_path).eval()
    g_n2g = build_from_checkpoint(g_path).eval() if g_path is not None else None
    if g_n2g is None:
        log.warning("no g_n2g.ckpt found; feeding inputs directly to the colorizer")
    written, failed = infer_directory(input_dir, Path(args.output_dir), g_n2g, f_g)
    if not written and not failed:
        print(f"error: no images in {input_dir}", file=sys.stderr)
        return EXIT_USAGE
    echo = {"f_g": str(f_path), "g_n2g": None if g_path is None else str(g_path),
            "input_dir": str(input_dir), "written": len(written), "skipped": failed}
    (Path(args.output_dir) / "infer_config.json").write_text(json.dumps(echo, indent=2))
    print(f"infer: wrote {len(written)} image(s), skipped {len(failed)}"
          + (f" ({', '.join(failed)})" if failed else ""))
    return EXIT_OK if written else EXIT_USAGE


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        report = evaluate(Path(args.pred_dir), Path(args.target_dir),
                          config={"pred_dir": str(args.pred_dir),
                                  "target_dir": str(args.target_dir)})
    except EvaluationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    report_path = Path(args.report)
    report.write_csv(report_path)
    report.write_json(report_path.with_suffix(".json"))
    print(report.summary())
    return EXIT_OK


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        header = read_header(Path(args.path))
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(json.dumps(header, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nircolor", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
        p.add_argument("--no-deterministic", dest="deterministic", action="store_false")

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--resume", type=Path, help="directory written by an earlier run of this stage")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="colorize a directory of NIR images")
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--target-dir", required=True)
    p.add_argument("--report", required=True, help="CSV path; a .json twin is written alongside")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint header")
    p.add_argument("path")
    common(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
