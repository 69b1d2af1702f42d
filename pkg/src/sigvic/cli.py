"""Command line front end: ``sigvic <subcommand> [--key value ...]``.

Every option may also come from a flat ``key = value`` config file given with
``--config``.  Flags override the file, the file overrides built-in defaults,
and unknown keys are rejected before any work starts.  Outputs land under
``--out-dir`` together with a ``manifest.csv`` (``path,bytes,crc32``).

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

from __future__ import annotations

import argparse
import csv
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import torch

from . import bd, data, evaluation, training
from .codec import SigVIC, compress, decompress, load_model, save_model
from .config import CodecConfig, LambdaSpec
from .errors import ConfigurationError, DecodeError, DomainError

DEFAULT_GRID = "0.0016,0.003,0.0075,0.015,0.045"


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"not a comma-separated list of numbers: {text!r}") from None


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    kind: Callable[[Any], Any]
    default: Any
    help: str


_TC = training.TrainConfig()
_CC = CodecConfig()

# the one schema both the config-file validation and --help are built from
KEYS: dict[str, Key] = {
    "model": Key(str, None, "model archive (.npz); output path for train"),
    "out_dir": Key(str, ".", "directory receiving every output and manifest.csv"),
    "seed": Key(int, 0, "random seed"),
    "in": Key(str, None, "input file"),
    "out": Key(str, None, "output file name (relative to out_dir)"),
    "lambda": Key(float, None, "rate-distortion tradeoff"),
    "lambdas": Key(_float_list, DEFAULT_GRID, "comma-separated lambda grid"),
    "dataset_dir": Key(str, None, "training images (PNG/PPM); default: generated desk corpus"),
    "test_dir": Key(str, None, "evaluation images; default: generated desk corpus"),
    "metric": Key(str, "mse", "training distortion: mse or msssim"),
    "quality": Key(str, "psnr", "evaluation quality axis: psnr or msssim"),
    "anchor": Key(str, None, "anchor RD curve CSV (label,bpp,quality)"),
    "test": Key(str, None, "test RD curve CSV (label,bpp,quality)"),
    "reference": Key(_flag, False, "print the bundled published BD table instead"),
    "N": Key(int, _CC.N, "channel count"),
    "K": Key(int, _CC.K, "shallow channels"),
    "stages": Key(int, _CC.stages, "stride-2 stages"),
    "sffm_width": Key(int, _CC.sffm_width, "SFFM internal width"),
    "reduction": Key(int, _CC.reduction, "RCAB reduction ratio"),
    "batch_size": Key(int, _TC.batch_size, "training batch size"),
    "crop": Key(int, _TC.crop, "training crop size"),
    "iters": Key(int, _TC.iters, "training iterations"),
    "lr": Key(float, _TC.lr, "initial learning rate"),
    "lr_final": Key(float, _TC.lr_final, "learning rate for the final fraction"),
    "lr_drop_frac": Key(float, _TC.lr_drop_frac, "fraction of iterations at lr_final"),
    "calibrate_frac": Key(float, _TC.calibrate_frac, "fraction of iterations before Top-K calibration"),
    "clip_norm": Key(float, _TC.clip_norm, "gradient clipping norm"),
    "log_every": Key(int, _TC.log_every, "log flush interval"),
    "checkpoint_every": Key(int, _TC.checkpoint_every, "checkpoint interval (0 = off)"),
}

_ARCH = ("N", "K", "stages", "sffm_width", "reduction")
_TRAIN = ("batch_size", "crop", "iters", "lr", "lr_final", "lr_drop_frac", "calibrate_frac",
          "clip_norm", "log_every", "checkpoint_every")

SUBCOMMANDS: dict[str, tuple[str, tuple[str, ...]]] = {
    "train": ("train a model", ("model", "out_dir", "seed", "dataset_dir", "metric") + _ARCH + _TRAIN),
    "calibrate": ("re-select the Top-K shallow channels", ("model", "out_dir", "seed", "dataset_dir", "out")),
    "compress": ("image -> bitstream", ("model", "out_dir", "seed", "lambda", "in", "out")),
    "decompress": ("bitstream -> PNG", ("model", "out_dir", "seed", "in", "out")),
    "eval": ("RD sweep over a test set", ("model", "out_dir", "seed", "test_dir", "lambdas", "quality")),
    "bdrate": ("Bjontegaard deltas of two RD CSVs", ("out_dir", "seed", "anchor", "test", "reference")),
    "dump-maps": ("scale-factor and bit-allocation heatmaps", ("model", "out_dir", "seed", "in", "lambda", "lambdas")),
    "ablate": ("train and compare ablation schemes A/B/C",
               ("out_dir", "seed", "dataset_dir", "test_dir", "lambdas", "metric") + _ARCH + _TRAIN),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sigvic", description="Spatial-importance guided variable-rate image codec")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (desc, keys) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc)
        p.add_argument("--config", help="flat key = value file; flags override it")
        for key in keys:
            k = KEYS[key]
            default = k.default if not isinstance(k.default, list) else ",".join(map(str, k.default))
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                           help=f"{k.help} (default: {default})")
    return parser


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve(command: str, args: argparse.Namespace) -> dict[str, Any]:
    """Merge defaults, config file and flags for ``command``; validate every key."""
    allowed = SUBCOMMANDS[command][1]
    merged: dict[str, Any] = {k: KEYS[k].default for k in allowed}
    if args.config:
        try:
            from_file = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        unknown = sorted(set(from_file) - set(allowed))
        if unknown:
            raise UsageError(f"unknown key(s) for {command}: {', '.join(unknown)}")
        merged.update(from_file)
    merged.update({k: getattr(args, k) for k in allowed if getattr(args, k) is not None})
    out = {}
    for key, value in merged.items():
        if value is None or (key == "lambdas" and isinstance(value, list)):
            out[key] = value
            continue
        try:
            out[key] = KEYS[key].kind(value)
        except (TypeError, ValueError):
            raise UsageError(f"invalid value for {key}: {value!r}") from None
    return out


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


class Outputs:
    """Tracks files written under ``out_dir`` and maintains the manifest."""

    def __init__(self, out_dir: str | Path):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def path(self, name: str | Path) -> Path:
        p = Path(name)
        return p if p.is_absolute() else self.root / p

    def add(self, *paths: Path) -> None:
        self.written.extend(Path(p) for p in paths)

    def write_manifest(self) -> Path:
        manifest = self.root / "manifest.csv"
        rows: dict[str, tuple[int, str]] = {}
        if manifest.exists():
            with open(manifest, newline="") as fh:
                for row in csv.DictReader(fh):
                    rows[row["path"]] = (int(row["bytes"]), row["crc32"])
        for p in self.written:
            blob = p.read_bytes()
            try:
                key = str(p.resolve().relative_to(self.root.resolve()))
            except ValueError:
                key = str(p.resolve())
            rows[key] = (len(blob), f"{zlib.crc32(blob):08x}")
        with open(manifest, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "bytes", "crc32"])
            for key in sorted(rows):
                w.writerow([key, *rows[key]])
        return manifest


def _corpus(cfg: dict, outputs: Outputs, key: str) -> Path:
    """``cfg[key]`` or, when unset, the matching half of a generated desk corpus."""
    if cfg.get(key):
        return Path(cfg[key])
    train_dir, test_dir = data.make_desk_corpus(outputs.root / "desk_corpus", seed=0)
    return train_dir if key == "dataset_dir" else test_dir


def _load_images(directory: Path) -> list[torch.Tensor]:
    paths = data.list_images(directory)
    if not paths:
        raise FileNotFoundError(f"no PNG/PPM images in {directory}")
    return [data.read_image(p) for p in paths]


def _model(cfg: dict) -> SigVIC:
    _require(cfg, "model")
    return load_model(cfg["model"])


def _check_lambda(model: SigVIC, lam: float) -> None:
    try:
        model.lambda_range.check(lam)
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def _codec_config(cfg: dict) -> CodecConfig:
    metric = cfg.get("metric", "mse")
    if metric not in ("mse", "msssim"):
        raise UsageError(f"metric must be mse or msssim, got {metric!r}")
    return CodecConfig(**{k: cfg[k] for k in _ARCH}, lambda_range=LambdaSpec.for_metric(metric))


def _train_config(cfg: dict) -> training.TrainConfig:
    return training.TrainConfig(**{k: cfg[k] for k in _TRAIN}, seed=cfg["seed"])


def cmd_train(cfg: dict, out: Outputs) -> None:
    train_dir = _corpus(cfg, out, "dataset_dir")
    torch.manual_seed(cfg["seed"])
    model = SigVIC(_codec_config(cfg))
    log = out.path("train_log.csv")
    ckpt = out.path("checkpoints")
    if cfg["checkpoint_every"]:
        ckpt.mkdir(exist_ok=True)
    training.train(model, _load_images(train_dir), _train_config(cfg), log_path=log, checkpoint_dir=ckpt)
    target = out.path(cfg["model"] or "model.npz")
    save_model(model, target)
    out.add(log, target, *sorted(ckpt.glob("*.npz")))
    print(f"model written to {target}")


def cmd_calibrate(cfg: dict, out: Outputs) -> None:
    model = _model(cfg)
    train_dir = _corpus(cfg, out, "dataset_dir")
    indices = training.calibrate_topk(model, _load_images(train_dir))
    target = out.path(cfg["out"] or cfg["model"])
    save_model(model, target)
    out.add(target)
    print("top-k channels:", ",".join(map(str, indices)))


def cmd_compress(cfg: dict, out: Outputs) -> None:
    _require(cfg, "lambda", "in", "out")
    model = _model(cfg)
    _check_lambda(model, cfg["lambda"])
    x = data.read_image(cfg["in"])
    stream = compress(x, cfg["lambda"], model)
    target = out.path(cfg["out"])
    target.write_bytes(stream)
    out.add(target)
    h, w = x.shape[-2:]
    print(f"{len(stream)} bytes, {evaluation.stream_bpp(stream, h, w):.4f} bpp")


def cmd_decompress(cfg: dict, out: Outputs) -> None:
    _require(cfg, "in", "out")
    model = _model(cfg)
    x_hat = decompress(Path(cfg["in"]).read_bytes(), model)
    target = out.path(cfg["out"])
    data.write_png(x_hat, target)
    out.add(target)
    print(f"decoded {x_hat.shape[-1]}x{x_hat.shape[-2]} image to {target}")


def cmd_eval(cfg: dict, out: Outputs) -> None:
    model = _model(cfg)
    test_dir = _corpus(cfg, out, "test_dir")
    for lam in cfg["lambdas"]:
        _check_lambda(model, lam)
    curve = evaluation.sweep_rd(model, _load_images(test_dir), cfg["lambdas"], cfg["quality"], label="sigvic")
    csv_path, png_path = out.path("rd.csv"), out.path("rd.png")
    bd.write_rd_csv([curve], csv_path)
    evaluation.plot_rd_curves([curve], png_path, "PSNR (dB)" if cfg["quality"] == "psnr" else "MS-SSIM (dB)")
    out.add(csv_path, png_path)
    for p in curve.by_lambda():
        print(f"lambda={p.lam:g}  bpp={p.bpp:.4f}  {cfg['quality']}={p.quality:.3f}")


def cmd_bdrate(cfg: dict, out: Outputs) -> None:
    if cfg["reference"]:
        for row in bd.load_reference_bd():
            print(f"{row.method} [{row.dataset}]: {row.formatted()}")
        return
    _require(cfg, "anchor", "test")
    rate, qual = bd.bd_metrics(bd.read_single_curve(cfg["anchor"]), bd.read_single_curve(cfg["test"]))
    print(f"BD-Rate: {rate:.1f}%")
    print(f"BD-Quality: {qual:+.2f} dB")


def cmd_dump_maps(cfg: dict, out: Outputs) -> None:
    _require(cfg, "in")
    model = _model(cfg)
    x = data.read_image(cfg["in"])
    lambdas = [cfg["lambda"]] if cfg.get("lambda") is not None else cfg["lambdas"]
    for lam in lambdas:
        _check_lambda(model, lam)
        maps = evaluation.dump_maps(model, x, lam, out.path("maps"))
        out.add(*maps.files)
        print(f"lambda={lam:g}: {maps.total_bits:.1f} latent bits")


def cmd_ablate(cfg: dict, out: Outputs) -> None:
    train_dir, test_dir = _corpus(cfg, out, "dataset_dir"), _corpus(cfg, out, "test_dir")
    report = evaluation.ablation_run(
        _load_images(train_dir), _load_images(test_dir), _codec_config(cfg), _train_config(cfg),
        cfg["lambdas"], out_dir=out.root,
    )
    out.add(out.path("ablation.csv"), out.path("ablation_rd.csv"),
            *(out.path(f"train_{s.name}.csv") for s in report.schemes))
    for s in report.schemes:
        rate = "n/a" if s.bd_rate_vs_a is None else f"{s.bd_rate_vs_a:.2f}%"
        print(f"scheme {s.name}: params={s.params} BD-Rate vs A={rate} {s.note}")


COMMANDS = {
    "train": cmd_train, "calibrate": cmd_calibrate, "compress": cmd_compress,
    "decompress": cmd_decompress, "eval": cmd_eval, "bdrate": cmd_bdrate,
    "dump-maps": cmd_dump_maps, "ablate": cmd_ablate,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
        cfg = resolve(args.command, args)
        outputs = Outputs(cfg["out_dir"])
        COMMANDS[args.command](cfg, outputs)
        if outputs.written:
            outputs.write_manifest()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, DecodeError, ConfigurationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
