"""Synthetic phantoms, coil sensitivities and the on-disk dataset container.

A slice is born as a random-ellipse magnitude image with a smooth low-order
phase, multiplied by smooth unit-RSS coil sensitivities and transformed to
noisy k-space.  Datasets store slices as raw little-endian float64 channel
pairs in one blob file next to a human-readable key=value manifest.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fourier, mri

__all__ = [
    "CONTRASTS",
    "PhantomSpec",
    "generate_phantom",
    "generate_sensitivities",
    "make_kspace",
    "SliceRecord",
    "Dataset",
    "build_dataset",
]

CONTRASTS = ("t1", "t2", "flair")

# ellipse intensity band and extra structure count per simulated contrast
_CONTRAST_PARAMS = {
    "t1": ((0.35, 1.0), 0),
    "t2": ((0.15, 0.9), 2),
    "flair": ((0.25, 0.8), 4),
}


@dataclass(frozen=True)
class PhantomSpec:
    grid: int = 64
    coils: int = 4
    n_ellipses: int = 8
    noise_sigma: float = 0.002
    seed: int = 0
    contrast: str = "t1"

    def __post_init__(self):
        if self.grid < 8:
            raise ValueError(f"grid must be >= 8, got {self.grid}")
        if self.coils < 1:
            raise ValueError(f"coils must be >= 1, got {self.coils}")
        if self.n_ellipses < 0:
            raise ValueError(f"n_ellipses must be >= 0, got {self.n_ellipses}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.contrast not in CONTRASTS:
            raise ValueError(f"contrast must be one of {CONTRASTS}, got {self.contrast!r}")


def _grid_coords(grid: int) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-1.0, 1.0, grid)
    return np.meshgrid(axis, axis, indexing="ij")


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Complex image (grid, grid): overlapping ellipses with smooth phase.

    The magnitude field is normalized to peak 1 before the unit-modulus
    phase factor is applied, so the complex image peaks at 1 to within one
    float epsilon whenever at least one ellipse landed on the grid.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    yy, xx = _grid_coords(spec.grid)
    intensity, extra = _CONTRAST_PARAMS[spec.contrast]

    mag = np.zeros((spec.grid, spec.grid))
    for _ in range(spec.n_ellipses + extra):
        cy, cx = rng.uniform(-0.5, 0.5, 2)
        a, b = rng.uniform(0.12, 0.55, 2)
        theta = rng.uniform(0.0, np.pi)
        value = rng.uniform(*intensity)
        xr = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        yr = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        mag += value * (((xr / a) ** 2 + (yr / b) ** 2) <= 1.0)
    peak = mag.max()
    if peak > 0:
        mag /= peak

    c = rng.uniform(-0.5, 0.5, 6)
    phase = c[0] + c[1] * xx + c[2] * yy + c[3] * xx * yy + c[4] * xx * xx + c[5] * yy * yy
    return mag * np.exp(1j * phase)


def generate_sensitivities(coils: int, grid: int, seed: int) -> np.ndarray:
    """Smooth unit-RSS coil maps: wide Gaussian lobes at angular positions.

    The per-pixel RSS over coils is 1 by construction; a single coil comes
    out with flat unit magnitude.
    """
    if coils < 1 or grid < 2:
        raise ValueError(f"need coils >= 1 and grid >= 2, got {coils}, {grid}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    yy, xx = _grid_coords(grid)
    maps = np.empty((coils, grid, grid), dtype=np.complex128)
    for j in range(coils):
        angle = 2.0 * np.pi * (j + rng.uniform(-0.1, 0.1)) / coils
        cy, cx = 0.55 * np.sin(angle), 0.55 * np.cos(angle)
        lobe = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * 1.1 ** 2))
        alpha, beta, gamma = rng.uniform(-0.8, 0.8, 3)
        maps[j] = lobe * np.exp(1j * (alpha * xx + beta * yy + gamma))
    return maps / mri.rss(maps)[None]


def make_kspace(spec: PhantomSpec) -> np.ndarray:
    """Fully sampled noisy k-space (coils, grid, grid) for one spec."""
    noise_rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(2,)))
    image = generate_phantom(spec)
    sens = generate_sensitivities(spec.coils, spec.grid, spec.seed)
    return mri.simulate_acquisition(image, sens, spec.noise_sigma, noise_rng)


# ---------------------------------------------------------------------------
# dataset container
# ---------------------------------------------------------------------------

_SPLITS = ("train", "val", "test")
_MANIFEST = "manifest.txt"
_BLOB = "data.bin"


@dataclass(frozen=True)
class SliceRecord:
    slice_id: str
    offset: int
    length: int
    contrast: str
    split: str
    seed: int


def _largest_remainder(total: int, fractions) -> list[int]:
    """Integer counts summing to total, proportional to the fractions."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be >= 0, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    raw = [f * total for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    leftovers = total - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:leftovers]:
        counts[i] += 1
    return counts


def build_dataset(
    out_dir,
    n_slices: int = 160,
    grid: int = 64,
    coils: int = 4,
    noise_sigma: float = 0.002,
    seed: int = 2024,
    split_fractions=(0.75, 0.125, 0.125),
    contrast_weights=None,
) -> "Dataset":
    """Generate slices and write the blob plus manifest into out_dir."""
    if n_slices < 1:
        raise ValueError(f"n_slices must be >= 1, got {n_slices}")
    if len(split_fractions) != 3:
        raise ValueError("split_fractions must be (train, val, test)")
    if contrast_weights is None:
        contrast_weights = [1.0 / len(CONTRASTS)] * len(CONTRASTS)
    if len(contrast_weights) != len(CONTRASTS):
        raise ValueError(f"need one weight per contrast {CONTRASTS}")
    wsum = float(sum(contrast_weights))
    if wsum <= 0:
        raise ValueError("contrast weights must have a positive sum")
    contrast_weights = [w / wsum for w in contrast_weights]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10,)))
    contrast_counts = _largest_remainder(n_slices, contrast_weights)
    tags = [c for c, n in zip(CONTRASTS, contrast_counts) for _ in range(n)]
    tags = [tags[i] for i in rng.permutation(n_slices)]

    split_counts = _largest_remainder(n_slices, split_fractions)
    split_of = np.empty(n_slices, dtype=object)
    perm = rng.permutation(n_slices)
    bounds = np.cumsum([0] + split_counts)
    for split, lo, hi in zip(_SPLITS, bounds[:-1], bounds[1:]):
        split_of[perm[lo:hi]] = split

    records = []
    with open(out_dir / _BLOB, "wb") as blob:
        offset = 0
        for i in range(n_slices):
            slice_seed = int(np.random.SeedSequence(seed, spawn_key=(11, i)).generate_state(1)[0])
            spec = PhantomSpec(
                grid=grid, coils=coils, noise_sigma=noise_sigma,
                seed=slice_seed, contrast=tags[i],
            )
            k = make_kspace(spec)
            payload = np.ascontiguousarray(
                fourier.complex_to_channels(k), dtype="<f8"
            ).tobytes()
            blob.write(payload)
            records.append(SliceRecord(
                slice_id=f"s{i:04d}", offset=offset, length=len(payload),
                contrast=tags[i], split=str(split_of[i]), seed=slice_seed,
            ))
            offset += len(payload)

    with open(out_dir / _MANIFEST, "w") as fh:
        fh.write("# dataset manifest\n")
        fh.write("version=1\n")
        fh.write(f"blob={_BLOB}\n")
        fh.write(f"count={n_slices}\n")
        fh.write(f"grid={grid}\n")
        fh.write(f"coils={coils}\n")
        fh.write(f"noise_sigma={noise_sigma!r}\n")
        fh.write(f"seed={seed}\n")
        for r in records:
            fh.write(
                f"slice id={r.slice_id} offset={r.offset} length={r.length} "
                f"contrast={r.contrast} split={r.split} seed={r.seed}\n"
            )
    return Dataset(out_dir)


class Dataset:
    """Read access to a built dataset directory (manifest + blob)."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / _MANIFEST
        if not manifest.is_file():
            raise FileNotFoundError(f"no manifest at {manifest}")
        self.attrs: dict[str, str] = {}
        self.records: dict[str, SliceRecord] = {}
        for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("slice "):
                try:
                    kv = dict(part.split("=", 1) for part in line.split()[1:])
                    record = SliceRecord(
                        slice_id=kv["id"], offset=int(kv["offset"]),
                        length=int(kv["length"]), contrast=kv["contrast"],
                        split=kv["split"], seed=int(kv["seed"]),
                    )
                except (KeyError, ValueError) as exc:
                    raise ValueError(f"{manifest}:{lineno}: bad slice line: {exc}") from exc
                if record.split not in _SPLITS:
                    raise ValueError(f"{manifest}:{lineno}: unknown split {record.split!r}")
                if record.slice_id in self.records:
                    raise ValueError(f"{manifest}:{lineno}: duplicate id {record.slice_id}")
                self.records[record.slice_id] = record
            elif "=" in line:
                key, value = line.split("=", 1)
                self.attrs[key] = value
            else:
                raise ValueError(f"{manifest}:{lineno}: unparseable line {line!r}")
        for key in ("version", "blob", "count", "grid", "coils"):
            if key not in self.attrs:
                raise ValueError(f"{manifest}: missing attribute {key}")
        if int(self.attrs["count"]) != len(self.records):
            raise ValueError(
                f"{manifest}: count={self.attrs['count']} but {len(self.records)} slice lines"
            )
        self.grid = int(self.attrs["grid"])
        self.coils = int(self.attrs["coils"])
        self._blob_path = self.root / self.attrs["blob"]
        if not self._blob_path.is_file():
            raise FileNotFoundError(f"missing blob file {self._blob_path}")

    def __len__(self) -> int:
        return len(self.records)

    def ids(self, split: str | None = None) -> list[str]:
        if split is None:
            return sorted(self.records)
        if split not in _SPLITS:
            raise ValueError(f"split must be one of {_SPLITS}, got {split!r}")
        return sorted(sid for sid, r in self.records.items() if r.split == split)

    def load(self, slice_id: str) -> tuple[np.ndarray, str]:
        """Complex k-space (coils, grid, grid) and the contrast tag."""
        if slice_id not in self.records:
            raise KeyError(f"no slice {slice_id!r} in {self.root}")
        r = self.records[slice_id]
        expected = self.coils * 2 * self.grid * self.grid * 8
        if r.length != expected:
            raise ValueError(f"slice {slice_id}: length {r.length} != expected {expected}")
        with open(self._blob_path, "rb") as fh:
            fh.seek(r.offset)
            payload = fh.read(r.length)
        if len(payload) != r.length:
            raise ValueError(f"slice {slice_id}: blob truncated")
        planes = np.frombuffer(payload, dtype="<f8").reshape(self.coils, 2, self.grid, self.grid)
        return fourier.channels_to_complex(planes.astype(np.float64)), r.contrast
