"""Training loop, optimizer, loss and checkpointing.

The loss weighs SSIM dissimilarity and range-normalized L1 equally.  The
optimizer is Adam with the amsgrad correction: the second-moment denominator
keeps the running elementwise maximum of the bias-corrected estimate, so it
never decreases.  Checkpoints are a single binary file carrying the model
config, every parameter, the optimizer state and the training RNG state;
save/load round-trips bit for bit and resuming continues the exact same
trajectory as an uninterrupted run.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, mri
from .autodiff import Tensor
from .network import DIRCN, ModelConfig

__all__ = [
    "NonFiniteGradientError",
    "TrainingDivergedError",
    "CheckpointError",
    "reconstruction_loss",
    "Adam",
    "lr_schedule",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "build_model",
    "TrainSettings",
    "EpochStats",
    "TrainResult",
    "train",
    "evaluate",
    "EvalResult",
]


class NonFiniteGradientError(RuntimeError):
    """A parameter gradient contained nan or inf; the step was rejected."""


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; training stopped."""


class CheckpointError(RuntimeError):
    """A checkpoint file is truncated, malformed or inconsistent."""


def reconstruction_loss(pred: Tensor, target: np.ndarray, data_range: float) -> Tensor:
    """0.5 * (1 - SSIM) + 0.5 * mean|pred - target| / data_range."""
    target = np.asarray(target, dtype=np.float64)
    dissim = 1.0 - metrics.ssim(pred, target, data_range)
    l1 = (pred - target).abs().mean()
    return 0.5 * dissim + 0.5 * (l1 / data_range)


class Adam:
    """Adam with bias correction and optional amsgrad.

    step() first validates every gradient and raises NonFiniteGradientError
    without touching any state if one is bad.  With amsgrad the denominator
    uses max over time of the bias-corrected second moment.
    """

    def __init__(self, named_params, lr=0.002, beta1=0.9, beta2=0.999,
                 eps=1e-8, amsgrad=True):
        named_params = list(named_params)
        names = [n for n, _ in named_params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if lr <= 0 or eps <= 0:
            raise ValueError(f"lr and eps must be > 0, got {lr}, {eps}")
        self._params = named_params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.amsgrad = bool(amsgrad)
        self.step_count = 0
        self._m = {n: np.zeros_like(p.data) for n, p in named_params}
        self._v = {n: np.zeros_like(p.data) for n, p in named_params}
        self._vmax = {n: np.zeros_like(p.data) for n, p in named_params} if amsgrad else {}

    def zero_grad(self) -> None:
        for _, p in self._params:
            p.zero_grad()

    def step(self) -> None:
        for name, p in self._params:
            if not np.isfinite(p.grad).all():
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self._params:
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            if self.amsgrad:
                np.maximum(self._vmax[name], v_hat, out=self._vmax[name])
                denom = np.sqrt(self._vmax[name]) + self.eps
            else:
                denom = np.sqrt(v_hat) + self.eps
            p.data -= self.lr * m_hat / denom

    def state_dict(self) -> dict:
        state = {
            "meta": {
                "lr": self.lr,
                "beta1": self.beta1,
                "beta2": self.beta2,
                "eps": self.eps,
                "amsgrad": self.amsgrad,
                "step_count": self.step_count,
            },
            "arrays": {},
        }
        for name, _ in self._params:
            state["arrays"][f"m:{name}"] = self._m[name].copy()
            state["arrays"][f"v:{name}"] = self._v[name].copy()
            if self.amsgrad:
                state["arrays"][f"vmax:{name}"] = self._vmax[name].copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        meta = state["meta"]
        self.lr = float(meta["lr"])
        self.beta1 = float(meta["beta1"])
        self.beta2 = float(meta["beta2"])
        self.eps = float(meta["eps"])
        self.amsgrad = bool(meta["amsgrad"])
        self.step_count = int(meta["step_count"])
        arrays = state["arrays"]
        want = set()
        for name, p in self._params:
            keys = [f"m:{name}", f"v:{name}"] + ([f"vmax:{name}"] if self.amsgrad else [])
            want.update(keys)
            for key in keys:
                if key not in arrays:
                    raise CheckpointError(f"optimizer state missing {key}")
                arr = np.asarray(arrays[key], dtype=np.float64)
                if arr.shape != p.data.shape:
                    raise CheckpointError(f"optimizer state shape mismatch for {key}")
        extra = sorted(set(arrays) - want)
        if extra:
            raise CheckpointError(f"unexpected optimizer entries: {extra[:4]}")
        self._vmax = {} if not self.amsgrad else self._vmax
        for name, _ in self._params:
            self._m[name] = np.array(arrays[f"m:{name}"], dtype=np.float64)
            self._v[name] = np.array(arrays[f"v:{name}"], dtype=np.float64)
            if self.amsgrad:
                self._vmax[name] = np.array(arrays[f"vmax:{name}"], dtype=np.float64)


def lr_schedule(base_lr: float, epoch: int, step_size: int = 60, gamma: float = 0.1) -> float:
    """Stepwise decay: base_lr * gamma ** (epoch // step_size)."""
    if base_lr <= 0 or step_size < 1 or gamma <= 0:
        raise ValueError("bad schedule parameters")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * gamma ** (epoch // step_size)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

_MAGIC = b"DIRCN1"
_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    epoch: int
    params: dict[str, np.ndarray]
    optimizer: dict | None = None
    rng_state: dict | None = None


def _write_json(fh, obj) -> None:
    blob = json.dumps(obj, sort_keys=True).encode("utf-8")
    fh.write(struct.pack("<I", len(blob)))
    fh.write(blob)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_json(fh):
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    try:
        return json.loads(_read_exact(fh, n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc


def _write_arrays(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        # asarray keeps 0-d arrays 0-d; ascontiguousarray would promote to 1-d
        arr = np.asarray(arr, dtype="<f8", order="C")
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def _read_arrays(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
        name = _read_exact(fh, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim)) if ndim else ()
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8")
        out[name] = data.reshape(shape).astype(np.float64)
    return out


def save_checkpoint(path, model: DIRCN, epoch: int,
                    optimizer: Adam | None = None, rng_state: dict | None = None) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        _write_json(fh, model.config.to_dict())
        fh.write(struct.pack("<I", epoch))
        _write_json(fh, rng_state)
        opt_state = optimizer.state_dict() if optimizer is not None else None
        _write_json(fh, opt_state["meta"] if opt_state else None)
        _write_arrays(fh, model.state_dict())
        _write_arrays(fh, opt_state["arrays"] if opt_state else {})


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        config = ModelConfig.from_dict(_read_json(fh))
        (epoch,) = struct.unpack("<I", _read_exact(fh, 4))
        rng_state = _read_json(fh)
        opt_meta = _read_json(fh)
        params = _read_arrays(fh)
        opt_arrays = _read_arrays(fh)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path} has trailing bytes")
    optimizer = {"meta": opt_meta, "arrays": opt_arrays} if opt_meta is not None else None
    return Checkpoint(config, epoch, params, optimizer, rng_state)


def build_model(checkpoint: Checkpoint, seed: int = 0) -> DIRCN:
    """Instantiate the checkpointed architecture and restore its weights."""
    model = DIRCN(checkpoint.config, seed=seed)
    model.load_state_dict(checkpoint.params)
    return model


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 20
    slices_per_epoch: int = 200
    lr: float = 0.002
    lr_step_size: int = 60
    lr_gamma: float = 0.1
    amsgrad: bool = True
    accelerations: tuple[int, ...] = (4, 8)
    center_fraction: float | None = None  # None: per-acceleration default
    mask_offset: int = 0
    seed: int = 1234
    val_limit: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.slices_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and slices_per_epoch >= 1")
        if not self.accelerations:
            raise ValueError("need at least one acceleration factor")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    steps: int


@dataclass
class TrainResult:
    history: list[EpochStats]
    checkpoint: Checkpoint
    checkpoint_path: Path | None


def _epoch_order(pool: int, count: int, rng: np.random.Generator) -> list[int]:
    """count indices into the pool; reshuffles so no index repeats before all appear."""
    order: list[int] = []
    while len(order) < count:
        order.extend(rng.permutation(pool).tolist())
    return order[:count]


def _loss_for_slice(model, k_full, acceleration, settings) -> tuple[Tensor, mri.Sample]:
    sample = mri.preprocess(
        k_full, acceleration, settings.center_fraction, settings.mask_offset
    )
    pred = model.forward(sample.kspace, sample.mask)
    return reconstruction_loss(pred, sample.target, sample.data_range), sample


def write_loss_csv(path, history: list[EpochStats]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "steps"])
        for s in history:
            writer.writerow([s.epoch, repr(s.lr), repr(s.train_loss), repr(s.val_loss), s.steps])


def train(model: DIRCN, dataset, settings: TrainSettings,
          out_dir=None, resume: Checkpoint | None = None, on_epoch=None) -> TrainResult:
    """Run the epoch loop and checkpoint after every epoch.

    Each epoch draws slices_per_epoch training slices (reshuffled cycling),
    one slice per step, with the acceleration drawn uniformly from
    settings.accelerations.  A validation pass follows each epoch and never
    touches parameters.  A non-finite loss aborts with the last finished
    epoch's checkpoint intact on disk.  Resuming from a checkpoint restores
    parameters, optimizer moments and the RNG, and continues the identical
    trajectory of an uninterrupted run.
    """
    train_ids = dataset.ids("train")
    if not train_ids:
        raise ValueError("dataset has no training split")
    val_ids = dataset.ids("val")
    if settings.val_limit is not None:
        val_ids = val_ids[: settings.val_limit]

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(settings.seed)
    opt = Adam(model.named_parameters(), lr=settings.lr, amsgrad=settings.amsgrad)
    start_epoch = 0
    history: list[EpochStats] = []

    if resume is not None:
        if resume.config != model.config:
            raise CheckpointError(
                f"checkpoint config {resume.config} does not match model {model.config}"
            )
        model.load_state_dict(resume.params)
        if resume.optimizer is not None:
            opt.load_state_dict(resume.optimizer)
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        start_epoch = resume.epoch

    accels = np.asarray(settings.accelerations, dtype=np.int64)

    def checkpoint_now(epoch: int) -> Checkpoint:
        ckpt = Checkpoint(
            config=model.config,
            epoch=epoch,
            params=model.state_dict(),
            optimizer=opt.state_dict(),
            rng_state=rng.bit_generator.state,
        )
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.bin", model, epoch, opt, rng.bit_generator.state)
            write_loss_csv(out_dir / "losses.csv", history)
        return ckpt

    ckpt = checkpoint_now(start_epoch)
    for epoch in range(start_epoch, settings.epochs):
        opt.lr = lr_schedule(settings.lr, epoch, settings.lr_step_size, settings.lr_gamma)
        order = _epoch_order(len(train_ids), settings.slices_per_epoch, rng)
        train_losses = []
        for index in order:
            k_full, _ = dataset.load(train_ids[index])
            acceleration = int(accels[rng.integers(len(accels))])
            loss, _ = _loss_for_slice(model, k_full, acceleration, settings)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch}, slice {train_ids[index]}"
                )
            train_losses.append(value)
            model.zero_grad()
            loss.backward()
            opt.step()

        # validation draws from its own deterministic stream so resuming and
        # val_limit changes cannot perturb the training trajectory
        val_rng = np.random.default_rng(np.random.SeedSequence(settings.seed, spawn_key=(epoch + 1,)))
        val_losses = []
        for vid in val_ids:
            k_full, _ = dataset.load(vid)
            acceleration = int(accels[val_rng.integers(len(accels))])
            loss, _ = _loss_for_slice(model, k_full, acceleration, settings)
            val_losses.append(loss.item())

        history.append(
            EpochStats(
                epoch=epoch,
                lr=opt.lr,
                train_loss=float(np.mean(train_losses)),
                val_loss=float(np.mean(val_losses)) if val_losses else float("nan"),
                steps=len(order),
            )
        )
        ckpt = checkpoint_now(epoch + 1)
        if on_epoch is not None:
            on_epoch(history[-1])

    return TrainResult(history=history, checkpoint=ckpt,
                       checkpoint_path=(out_dir / "checkpoint.bin") if out_dir else None)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    records: list[metrics.SliceMetrics]
    zero_filled: list[metrics.SliceMetrics]

    def aggregates(self) -> dict:
        return metrics.aggregate(self.records)

    def zero_filled_aggregates(self) -> dict:
        return metrics.aggregate(self.zero_filled)


def evaluate(model: DIRCN, dataset, split: str = "test",
             accelerations=(4, 8), center_fraction: float | None = None,
             offset: int = 0, limit: int | None = None) -> EvalResult:
    """Metrics for the model and the zero-filled baseline on one split."""
    from . import fourier

    ids = dataset.ids(split)
    if limit is not None:
        ids = ids[:limit]
    if not ids:
        raise ValueError(f"dataset split {split!r} is empty")
    records, zf_records = [], []
    for sid in ids:
        k_full, contrast = dataset.load(sid)
        for acceleration in accelerations:
            sample = mri.preprocess(k_full, acceleration, center_fraction, offset, contrast)
            recon = model.reconstruct(sample)
            records.append(metrics.SliceMetrics(
                sid, contrast, acceleration,
                metrics.ssim(recon, sample.target, sample.data_range),
                metrics.nmse(recon, sample.target),
                metrics.psnr(recon, sample.target, sample.data_range),
            ))
            zf = mri.zero_filled(fourier.channels_to_complex(sample.kspace))
            zf_records.append(metrics.SliceMetrics(
                sid, contrast, acceleration,
                metrics.ssim(zf, sample.target, sample.data_range),
                metrics.nmse(zf, sample.target),
                metrics.psnr(zf, sample.target, sample.data_range),
            ))
    return EvalResult(records, zf_records)
