"""Command-line interface.

Subcommands: generate-data, train, evaluate, reconstruct, mask-inspect and
gradcheck.  Exit codes: 0 on success, 1 for invalid arguments, config or
input files, 2 for runtime failures (diverged training, corrupt checkpoints,
failed gradient checks).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, fourier, metrics, mri, network, phantom, training
from .autodiff import gradcheck as _gradcheck

__all__ = ["main", "ValidationError", "ExperimentConfig"]


class ValidationError(Exception):
    """Bad user input: flags, config keys or input files."""


class _Parser(argparse.ArgumentParser):
    # argparse would sys.exit(2) on bad flags; route that to exit code 1
    def error(self, message):
        raise ValidationError(message)


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat key=value experiment settings (file < command line)."""

    preset: str = "dircn"
    cascades: int = 2
    levels: int = 2
    base_channels: int = 8
    cardinality: int = 4
    se_ratio: int = 4
    sens_channels: int = 4
    epochs: int = 20
    slices_per_epoch: int = 200
    lr: float = 0.002
    lr_step_size: int = 60
    lr_gamma: float = 0.1
    amsgrad: bool = True
    accelerations: tuple[int, ...] = (4, 8)
    center_fraction: float | None = None
    mask_offset: int = 0
    seed: int = 1234
    model_seed: int = 0
    val_limit: int | None = None

    def model_config(self) -> network.ModelConfig:
        return network.preset_config(
            self.preset,
            cascades=self.cascades,
            levels=self.levels,
            base_channels=self.base_channels,
            cardinality=self.cardinality,
            se_ratio=self.se_ratio,
            sens_channels=self.sens_channels,
        )

    def train_settings(self) -> training.TrainSettings:
        return training.TrainSettings(
            epochs=self.epochs,
            slices_per_epoch=self.slices_per_epoch,
            lr=self.lr,
            lr_step_size=self.lr_step_size,
            lr_gamma=self.lr_gamma,
            amsgrad=self.amsgrad,
            accelerations=self.accelerations,
            center_fraction=self.center_fraction,
            mask_offset=self.mask_offset,
            seed=self.seed,
            val_limit=self.val_limit,
        )


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_accelerations(text) -> tuple[int, ...]:
    if isinstance(text, (tuple, list)):
        return tuple(int(v) for v in text)
    parts = [p for p in str(text).replace(" ", "").split(",") if p]
    if not parts:
        raise ValueError("empty acceleration list")
    return tuple(int(p) for p in parts)


def _parse_optional(converter):
    def parse(text):
        if text is None or str(text).strip().lower() in ("none", ""):
            return None
        return converter(text)

    return parse


_CONVERTERS = {
    "preset": str,
    "cascades": int,
    "levels": int,
    "base_channels": int,
    "cardinality": int,
    "se_ratio": int,
    "sens_channels": int,
    "epochs": int,
    "slices_per_epoch": int,
    "lr": float,
    "lr_step_size": int,
    "lr_gamma": float,
    "amsgrad": _parse_bool,
    "accelerations": _parse_accelerations,
    "center_fraction": _parse_optional(float),
    "mask_offset": int,
    "seed": int,
    "model_seed": int,
    "val_limit": _parse_optional(int),
}


def read_config_file(path) -> dict:
    """Parse `key = value` lines; # starts a comment, unknown keys reject."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ValidationError(
                f"{path}:{lineno}: unknown config key {key!r} "
                f"(known: {', '.join(sorted(_CONVERTERS))})"
            )
        if key in values:
            raise ValidationError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def resolve_config(file_values: dict, overrides: dict) -> ExperimentConfig:
    """defaults < config file < command-line overrides, all type-checked."""
    merged = {}
    for source in (file_values, overrides):
        for key, value in source.items():
            if value is None:
                continue
            try:
                merged[key] = _CONVERTERS[key](value)
            except (ValueError, TypeError) as exc:
                raise ValidationError(f"bad value for {key}: {exc}") from exc
    try:
        return ExperimentConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def config_lines(config: ExperimentConfig) -> list[str]:
    """Canonical sorted key=value rendering used for echo and digest."""
    out = []
    for f in sorted(fields(config), key=lambda f: f.name):
        value = getattr(config, f.name)
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        out.append(f"{f.name}={text}")
    return out


def config_digest(config: ExperimentConfig) -> str:
    payload = "\n".join(config_lines(config)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def _echo_config(config: ExperimentConfig, out_path: Path | None = None) -> None:
    lines = config_lines(config) + [f"config_digest={config_digest(config)}"]
    print("\n".join(lines))
    if out_path is not None:
        out_path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# image export
# ---------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray, scale_max: float) -> None:
    """16-bit binary PGM (P5, big-endian samples), clipped to [0, scale_max]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM export needs a 2-d image, got {image.shape}")
    if scale_max <= 0:
        raise ValueError(f"scale_max must be > 0, got {scale_max}")
    scaled = np.clip(image / scale_max, 0.0, 1.0)
    samples = np.round(scaled * 65535.0).astype(">u2")
    height, width = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n65535\n".encode("ascii"))
        fh.write(samples.tobytes())


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load_dataset(path) -> phantom.Dataset:
    try:
        return phantom.Dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise ValidationError(f"cannot open dataset: {exc}") from exc


def _load_checkpoint(path) -> training.Checkpoint:
    if not Path(path).is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    return training.load_checkpoint(path)


def cmd_generate_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(f"{out} exists and is not empty (use --force to overwrite)")
    try:
        fractions = tuple(float(p) for p in args.split.split(","))
        dataset = phantom.build_dataset(
            out,
            n_slices=args.slices,
            grid=args.grid,
            coils=args.coils,
            noise_sigma=args.noise_sigma,
            seed=args.seed,
            split_fractions=fractions,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    counts = {split: len(dataset.ids(split)) for split in ("train", "val", "test")}
    print(f"wrote {len(dataset)} slices ({dataset.grid}x{dataset.grid}, "
          f"{dataset.coils} coils) to {out}")
    print(f"splits: train={counts['train']} val={counts['val']} test={counts['test']}")
    return 0


def _train_overrides(args) -> dict:
    keys = (
        "preset", "cascades", "levels", "base_channels", "cardinality", "se_ratio",
        "sens_channels", "epochs", "slices_per_epoch", "lr", "lr_step_size",
        "lr_gamma", "amsgrad", "accelerations", "center_fraction", "mask_offset",
        "seed", "model_seed", "val_limit",
    )
    return {k: getattr(args, k) for k in keys if getattr(args, k) is not None}


def cmd_train(args) -> int:
    file_values = read_config_file(args.config) if args.config else {}
    config = resolve_config(file_values, _train_overrides(args))
    try:
        model_config = config.model_config()
        settings = config.train_settings()
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    dataset = _load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(config, out_dir / "config.resolved")

    resume = _load_checkpoint(args.resume) if args.resume else None
    model = training.build_model(resume) if resume else network.DIRCN(
        model_config, seed=config.model_seed
    )

    def report(stats: training.EpochStats) -> None:
        print(f"epoch {stats.epoch:4d}  lr {stats.lr:.2e}  "
              f"train {stats.train_loss:.6f}  val {stats.val_loss:.6f}")

    result = training.train(model, dataset, settings, out_dir=out_dir,
                            resume=resume, on_epoch=report)
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_evaluate(args) -> int:
    checkpoint = _load_checkpoint(args.checkpoint)
    model = training.build_model(checkpoint)
    dataset = _load_dataset(args.data)
    try:
        accelerations = _parse_accelerations(args.accelerations)
        result = training.evaluate(
            model, dataset, split=args.split, accelerations=accelerations,
            center_fraction=args.center_fraction, limit=args.limit,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc

    if args.csv:
        zf_by_key = {(r.slice_id, r.acceleration): r for r in result.zero_filled}
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(list(metrics.CSV_FIELDS) + ["zf_ssim", "zf_nmse", "zf_psnr"])
            for r in result.records:
                zf = zf_by_key[(r.slice_id, r.acceleration)]
                writer.writerow([
                    r.slice_id, r.contrast, r.acceleration,
                    repr(r.ssim), repr(r.nmse), repr(r.psnr),
                    repr(zf.ssim), repr(zf.nmse), repr(zf.psnr),
                ])
        print(f"per-slice metrics: {args.csv}")

    model_agg = result.aggregates()
    zf_agg = result.zero_filled_aggregates()
    print(f"{'group':8s} {'n':>4s} {'ssim':>8s} {'nmse':>8s} {'psnr':>7s}"
          f" {'zf_ssim':>8s} {'zf_nmse':>8s} {'zf_psnr':>7s}")
    for group in sorted(model_agg, key=lambda g: (g != "ALL", g)):
        row = model_agg[group]
        zf = zf_agg[group]
        print(f"{group:8s} {row['count']:4d} {row['ssim']:8.4f} {row['nmse']:8.4f}"
              f" {row['psnr']:7.2f} {zf['ssim']:8.4f} {zf['nmse']:8.4f} {zf['psnr']:7.2f}")
    return 0


def cmd_reconstruct(args) -> int:
    checkpoint = _load_checkpoint(args.checkpoint)
    model = training.build_model(checkpoint)
    dataset = _load_dataset(args.data)
    try:
        accelerations = _parse_accelerations(args.accelerations)
        k_full, contrast = dataset.load(args.slice)
    except (KeyError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    samples, recons, errors = {}, {}, {}
    for acceleration in accelerations:
        sample = mri.preprocess(k_full, acceleration, args.center_fraction,
                                contrast=contrast)
        recon = model.reconstruct(sample)
        samples[acceleration] = sample
        recons[acceleration] = recon
        errors[acceleration] = np.abs(recon - sample.target)

    reference = next(iter(samples.values()))
    write_pgm(out_dir / "ground_truth.pgm", reference.target, reference.data_range)
    # one shared scale keeps error maps comparable across accelerations
    error_scale = max(err.max() for err in errors.values())
    if error_scale == 0.0:
        error_scale = 1.0
    for acceleration in accelerations:
        sample = samples[acceleration]
        write_pgm(out_dir / f"recon_x{acceleration}.pgm",
                  recons[acceleration], sample.data_range)
        write_pgm(out_dir / f"error_x{acceleration}.pgm",
                  errors[acceleration], error_scale)
        s = metrics.ssim(recons[acceleration], sample.target, sample.data_range)
        n = metrics.nmse(recons[acceleration], sample.target)
        print(f"x{acceleration}: ssim={s:.4f} nmse={n:.4f} "
              f"-> recon_x{acceleration}.pgm error_x{acceleration}.pgm")
    print(f"images written to {out_dir}")
    return 0


def cmd_mask_inspect(args) -> int:
    try:
        center_fraction = args.center_fraction
        if center_fraction is None:
            if args.acceleration not in mri.CENTER_FRACTIONS:
                raise ValueError(
                    f"no default center fraction for R={args.acceleration}; pass one"
                )
            center_fraction = mri.CENTER_FRACTIONS[args.acceleration]
        mask = mri.make_equispaced_mask(args.lines, args.acceleration,
                                        center_fraction, args.offset)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    center_idx = np.flatnonzero(mask.center)
    center_span = f"{center_idx[0]}..{center_idx[-1]}" if center_idx.size else "none"
    print(f"lines={mask.n_ky} acceleration={mask.acceleration} "
          f"center_fraction={mask.center_fraction} offset={args.offset}")
    print(f"kept={mask.n_kept} realized={mask.realized_acceleration:.3f} "
          f"center={center_span} ({mask.n_center} lines)")
    print("indices:", " ".join(str(i) for i in mask.kept_indices))
    return 0


def cmd_gradcheck(args) -> int:
    failures = 0
    if args.scope in ("ops", "all"):
        results = _gradcheck.run_checks(tol=args.tol, step=args.step)
        for r in results:
            status = "pass" if r.passed else "FAIL"
            print(f"{status}  {r.name:20s} max_err={r.max_err:.3e}  tol={r.tol:.1e}")
            failures += 0 if r.passed else 1
    if args.scope in ("model", "all"):
        err = _model_gradcheck(step=args.step)
        status = "pass" if err <= args.model_tol else "FAIL"
        print(f"{status}  {'model (directional)':20s} max_err={err:.3e}  tol={args.model_tol:.1e}")
        failures += 0 if err <= args.model_tol else 1
    if failures:
        print(f"{failures} gradient check(s) failed")
        return 2
    print("all gradient checks passed")
    return 0


def _model_gradcheck(step: float = 1e-6) -> float:
    """Directional derivative check through a tiny full model."""
    rng = np.random.default_rng(11)
    config = network.preset_config("dircn", cascades=2, levels=2, base_channels=4,
                                   cardinality=2, sens_channels=4)
    model = network.DIRCN(config, seed=3)
    h = w = 12
    raw = rng.standard_normal((2, h, w)) + 1j * rng.standard_normal((2, h, w))
    sens = raw / mri.rss(raw)[None]
    image = np.abs(rng.standard_normal((h, w)))
    k = mri.simulate_acquisition(image, sens, 0.0)
    sample = mri.preprocess(k, 2, 0.25)

    def loss():
        pred = model.forward(sample.kspace, sample.mask)
        return training.reconstruction_loss(pred, sample.target, sample.data_range)

    params = model.parameters()
    return _gradcheck.directional_grad_check(loss, params, rng, step=step, directions=2)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dircn",
                     description="Cascaded MRI reconstruction on synthetic phantom data")
    parser.add_argument("--version", action="version", version=f"dircn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="build a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--slices", type=int, default=160)
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--coils", type=int, default=4)
    p.add_argument("--noise-sigma", type=float, default=0.002)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--split", default="0.75,0.125,0.125",
                   help="train,val,test fractions")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key = value experiment file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--preset", choices=sorted(network.PRESETS))
    for flag, key in (
        ("--cascades", int), ("--levels", int), ("--base-channels", int),
        ("--cardinality", int), ("--se-ratio", int), ("--sens-channels", int),
        ("--epochs", int), ("--slices-per-epoch", int), ("--lr", float),
        ("--lr-step-size", int), ("--lr-gamma", float), ("--mask-offset", int),
        ("--seed", int), ("--model-seed", int),
    ):
        p.add_argument(flag, type=key)
    p.add_argument("--amsgrad", choices=("true", "false"))
    p.add_argument("--accelerations", help="comma list, e.g. 4,8")
    p.add_argument("--center-fraction", help="number or 'none'")
    p.add_argument("--val-limit", help="number or 'none'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--accelerations", default="4,8")
    p.add_argument("--center-fraction", type=float, default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--csv", help="write per-slice metrics here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reconstruct", help="export reconstructions as PGM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--slice", required=True, help="slice id, e.g. s0003")
    p.add_argument("--accelerations", default="4")
    p.add_argument("--center-fraction", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("mask-inspect", help="print an undersampling mask")
    p.add_argument("--lines", type=int, required=True)
    p.add_argument("--acceleration", type=int, required=True)
    p.add_argument("--center-fraction", type=float, default=None)
    p.add_argument("--offset", type=int, default=0)
    p.set_defaults(func=cmd_mask_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=("ops", "model", "all"), default="all")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--model-tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (training.TrainingDivergedError, training.CheckpointError,
            training.NonFiniteGradientError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
