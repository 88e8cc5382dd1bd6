"""Cascaded reconstruction network and its building blocks.

A model is a sensitivity estimator plus a chain of cascades.  Every cascade
reduces the running k-space estimate to a combined image, refines it with a
U-shaped subnet, expands back to coils and applies learned soft data
consistency.  Three independently switchable modifications on top of that
baseline:

  dense             each cascade's subnet sees the concatenation of every
                    earlier reduced image, newest first (2k input channels
                    at cascade k)
  interconnections  per-resolution decoder feature maps harvested from
                    cascade i are concatenated into the skip connections and
                    bottleneck input of cascade i+1 (zeros feed cascade 1)
  resxunet          subnet blocks become grouped residual units with
                    squeeze-excitation instead of plain double convs

Presets wire the combinations used in the ablation study.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import mri
from .autodiff import Module, Parameter, Tensor
from .autodiff import functional as F

__all__ = [
    "ModelConfig",
    "PRESETS",
    "preset_config",
    "Conv2d",
    "ConvTranspose2d",
    "LinearLayer",
    "SqueezeExcite",
    "PlainBlock",
    "ResXBlock",
    "UNet",
    "SensitivityEstimator",
    "DataConsistency",
    "data_consistency",
    "Cascade",
    "DIRCN",
]

SUBNET_STYLES = ("plain_unet", "resxunet")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are desk scale, not full scale."""

    cascades: int = 2
    subnet: str = "plain_unet"
    dense: bool = False
    interconnections: bool = False
    levels: int = 2
    base_channels: int = 8
    cardinality: int = 4
    se_ratio: int = 4
    sens_channels: int = 4

    def __post_init__(self):
        if self.cascades < 1:
            raise ValueError(f"cascades must be >= 1, got {self.cascades}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if min(self.base_channels, self.sens_channels, self.cardinality, self.se_ratio) < 1:
            raise ValueError("channel counts, cardinality and se_ratio must be >= 1")
        if self.subnet not in SUBNET_STYLES:
            raise ValueError(f"subnet must be one of {SUBNET_STYLES}, got {self.subnet!r}")
        if self.subnet == "resxunet":
            if self.base_channels % self.cardinality:
                raise ValueError(
                    f"base_channels={self.base_channels} not divisible by "
                    f"cardinality={self.cardinality}"
                )
            if self.sens_channels % self.cardinality:
                raise ValueError(
                    f"sens_channels={self.sens_channels} not divisible by "
                    f"cardinality={self.cardinality}"
                )

    @property
    def sens_levels(self) -> int:
        # the sensitivity net is the same architecture, one level shallower
        return max(1, self.levels - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown model config keys: {unknown}")
        return cls(**data)


# ablation presets: the three switches behind the named experiment arms
PRESETS = {
    "baseline": dict(subnet="plain_unet", dense=False, interconnections=False),
    "dense": dict(subnet="plain_unet", dense=True, interconnections=False),
    "resxunet": dict(subnet="resxunet", dense=False, interconnections=False),
    "interconn": dict(subnet="plain_unet", dense=False, interconnections=True),
    "dircn": dict(subnet="resxunet", dense=True, interconnections=True),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    """Build a ModelConfig for a named preset; size fields may be overridden."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    fixed = PRESETS[name]
    clash = sorted(set(overrides) & set(fixed))
    if clash:
        raise ValueError(f"preset {name!r} fixes {clash}; override size fields only")
    return ModelConfig(**fixed, **overrides)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, rng, in_channels, out_channels, kernel_size,
                 stride=1, padding=0, groups=1, bias=True):
        if in_channels % groups or out_channels % groups:
            raise ValueError(
                f"groups={groups} must divide in={in_channels} and out={out_channels}"
            )
        cg = in_channels // groups
        bound = 1.0 / np.sqrt(cg * kernel_size * kernel_size)
        self.weight = Parameter(
            rng.uniform(-bound, bound, (out_channels, cg, kernel_size, kernel_size))
        )
        self.bias = Parameter(rng.uniform(-bound, bound, out_channels)) if bias else None
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias,
                        stride=self.stride, padding=self.padding, groups=self.groups)


class ConvTranspose2d(Module):
    def __init__(self, rng, in_channels, out_channels, kernel_size=2, stride=2):
        bound = 1.0 / np.sqrt(out_channels * kernel_size * kernel_size)
        self.weight = Parameter(
            rng.uniform(-bound, bound, (in_channels, out_channels, kernel_size, kernel_size))
        )
        self.bias = Parameter(rng.uniform(-bound, bound, out_channels))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class LinearLayer(Module):
    def __init__(self, rng, in_features, out_features):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)))
        self.bias = Parameter(rng.uniform(-bound, bound, out_features))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class SqueezeExcite(Module):
    """Channel gating: sigmoid(W2 silu(W1 GAP(x))), bottleneck max(1, C/ratio)."""

    def __init__(self, rng, channels, ratio=4):
        hidden = max(1, channels // ratio)
        self.fc1 = LinearLayer(rng, channels, hidden)
        self.fc2 = LinearLayer(rng, hidden, channels)

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[0], x.shape[1]
        gates = self.fc2(self.fc1(F.global_avg_pool(x)).silu()).sigmoid()
        return x * gates.reshape(n, c, 1, 1)


class PlainBlock(Module):
    """Two ungrouped conv / instance-norm / SiLU stages."""

    def __init__(self, rng, in_channels, out_channels):
        self.conv1 = Conv2d(rng, in_channels, out_channels, 3, padding=1)
        self.conv2 = Conv2d(rng, out_channels, out_channels, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = F.instance_norm(self.conv1(x)).silu()
        return F.instance_norm(self.conv2(h)).silu()


class ResXBlock(Module):
    """Grouped residual unit with squeeze-excitation on the residual branch.

    The first conv falls back to ungrouped when the incoming channel count
    is not divisible by the cardinality (the stem of dense cascades).
    """

    def __init__(self, rng, in_channels, out_channels, cardinality, se_ratio):
        g1 = cardinality if in_channels % cardinality == 0 else 1
        self.conv1 = Conv2d(rng, in_channels, out_channels, 3, padding=1, groups=g1)
        self.conv2 = Conv2d(rng, out_channels, out_channels, 3, padding=1, groups=cardinality)
        self.se = SqueezeExcite(rng, out_channels, se_ratio)
        self.proj = Conv2d(rng, in_channels, out_channels, 1) if in_channels != out_channels else None

    def forward(self, x: Tensor) -> Tensor:
        h = F.instance_norm(self.conv1(x)).silu()
        h = F.instance_norm(self.conv2(h))
        h = self.se(h)
        shortcut = self.proj(x) if self.proj is not None else x
        return (h + shortcut).silu()


# ---------------------------------------------------------------------------
# subnet
# ---------------------------------------------------------------------------


class UNet(Module):
    """U-shaped subnet that emits (and optionally consumes) decoder features.

    forward returns (output, harvested) where harvested[l] is the feature map
    produced at resolution level l (0 = full resolution, levels-1 = the
    bottleneck).  With consume_injected=True the forward pass requires a list
    of maps with exactly those shapes and concatenates them into the matching
    decoder inputs; that is how cascade interconnections are wired.

    Inputs whose spatial size is not a multiple of 2**(levels-1) are reflect
    padded on the bottom/right and cropped back after the head.
    """

    def __init__(self, rng, in_channels, out_channels, levels, base_channels,
                 style="plain_unet", cardinality=1, se_ratio=4, consume_injected=False):
        if levels < 1:
            raise ValueError(f"levels must be >= 1, got {levels}")
        if style not in SUBNET_STYLES:
            raise ValueError(f"unknown subnet style {style!r}")

        def block(ci, co):
            if style == "plain_unet":
                return PlainBlock(rng, ci, co)
            return ResXBlock(rng, ci, co, cardinality, se_ratio)

        down_groups = cardinality if style == "resxunet" else 1
        widths = [base_channels << l for l in range(levels)]
        self.in_channels = in_channels
        self.levels = levels
        self.widths = widths
        self.consume_injected = consume_injected

        self.stem = Conv2d(rng, in_channels, widths[0], 3, padding=1)
        self.encoders = [block(widths[l], widths[l]) for l in range(levels - 1)]
        self.downs = [
            Conv2d(rng, widths[l], widths[l + 1], 3, stride=2, padding=1, groups=down_groups)
            for l in range(levels - 1)
        ]
        extra = widths[-1] if consume_injected else 0
        self.bottleneck = block(widths[-1] + extra, widths[-1])
        self.ups = [ConvTranspose2d(rng, widths[l + 1], widths[l]) for l in range(levels - 1)]
        self.decoders = [
            block(2 * widths[l] + (widths[l] if consume_injected else 0), widths[l])
            for l in range(levels - 1)
        ]
        self.head = Conv2d(rng, widths[0], out_channels, 1)

    def feature_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        """(channels, h, w) of harvested[l] for an input of the given size."""
        div = 1 << (self.levels - 1)
        ph = height + (-height) % div
        pw = width + (-width) % div
        return [(self.widths[l], ph >> l, pw >> l) for l in range(self.levels)]

    def zero_injected(self, batch: int, height: int, width: int) -> list[Tensor]:
        """All-zero stand-ins for the first cascade's injected features."""
        return [Tensor(np.zeros((batch, c, h, w))) for c, h, w in self.feature_shapes(height, width)]

    def forward(self, x: Tensor, injected: list[Tensor] | None = None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (N, {self.in_channels}, H, W), got {x.shape}"
            )
        height, width = x.shape[2], x.shape[3]
        div = 1 << (self.levels - 1)
        if height < div or width < div:
            raise ValueError(f"input {height}x{width} too small for {self.levels} levels")
        if self.consume_injected:
            expected = self.feature_shapes(height, width)
            if injected is None or len(injected) != self.levels:
                raise ValueError(f"this subnet needs {self.levels} injected feature maps")
            for l, (t, (c, hh, ww)) in enumerate(zip(injected, expected)):
                if t.shape != (x.shape[0], c, hh, ww):
                    raise ValueError(
                        f"injected[{l}] shape {t.shape} != {(x.shape[0], c, hh, ww)}"
                    )
        elif injected is not None:
            raise ValueError("subnet built without consume_injected cannot take features")

        ph, pw = (-height) % div, (-width) % div
        h = F.pad2d(x, (0, ph, 0, pw), "reflect") if ph or pw else x
        h = self.stem(h)

        skips = []
        for l in range(self.levels - 1):
            h = self.encoders[l](h)
            skips.append(h)
            h = self.downs[l](h)

        if self.consume_injected:
            h = F.concat([h, injected[self.levels - 1]], axis=1)
        h = self.bottleneck(h)

        harvested: list[Tensor | None] = [None] * self.levels
        harvested[self.levels - 1] = h
        for l in range(self.levels - 2, -1, -1):
            parts = [self.ups[l](h), skips[l]]
            if self.consume_injected:
                parts.append(injected[l])
            h = self.decoders[l](F.concat(parts, axis=1))
            harvested[l] = h

        out = self.head(h)
        if ph or pw:
            out = out[:, :, :height, :width]
        return out, harvested


# ---------------------------------------------------------------------------
# physics-facing modules
# ---------------------------------------------------------------------------


class SensitivityEstimator(Module):
    """Coil sensitivities from the fully sampled center lines.

    Everything outside the center block is zeroed, each coil image runs
    through a small subnet with coils folded into the batch axis, and the
    output is normalized so the per-pixel RSS over coils is one.
    """

    def __init__(self, rng, config: ModelConfig):
        card = config.cardinality if config.subnet == "resxunet" else 1
        self.net = UNet(
            rng, 2, 2, config.sens_levels, config.sens_channels,
            style=config.subnet, cardinality=card, se_ratio=config.se_ratio,
        )

    def forward(self, k: Tensor, mask: mri.SamplingMask) -> Tensor:
        if mask.n_center == 0:
            raise ValueError("sensitivity estimation needs a fully sampled center block")
        center = k * mask.center_weights(4)
        images, _ = self.net(F.ifft2c(center))
        norm = ((images * images).sum(axis=(0, 1), keepdims=True) + 1e-30).sqrt()
        return images / norm


def data_consistency(k_pred: Tensor, k_meas: np.ndarray, mask: mri.SamplingMask, lam) -> Tensor:
    """Soft data consistency on kept lines.

    Kept columns become (k_meas + lam * k_pred) / (1 + lam); all other
    columns pass k_pred through unchanged.  lam = 0 reproduces the measured
    lines exactly, large lam trusts the prediction.
    """
    if k_pred.ndim != 4 or k_pred.shape[1] != 2:
        raise ValueError(f"k_pred must be (coils, 2, H, W), got {k_pred.shape}")
    k_meas = np.asarray(k_meas, dtype=np.float64)
    if k_meas.shape != k_pred.shape:
        raise ValueError(f"k_meas shape {k_meas.shape} != k_pred {k_pred.shape}")
    if k_pred.shape[-1] != mask.n_ky:
        raise ValueError(f"mask covers {mask.n_ky} lines, k-space has {k_pred.shape[-1]}")
    if not isinstance(lam, Tensor):
        lam = Tensor(lam)
    kept = mask.kept_weights(4)
    blended = (lam * k_pred + k_meas) / (lam + 1.0)
    return blended * kept + k_pred * (1.0 - kept)


class DataConsistency(Module):
    """data_consistency with a learned weight, one per cascade.

    The weight is kept positive through a softplus; raw is set so that the
    initial effective weight is exactly the requested init.
    """

    def __init__(self, init: float = 0.01):
        if init <= 0:
            raise ValueError(f"init must be > 0, got {init}")
        self.raw = Parameter(np.log(np.expm1(init)))

    def weight(self) -> Tensor:
        return self.raw.softplus()

    def forward(self, k_pred: Tensor, k_meas: np.ndarray, mask: mri.SamplingMask) -> Tensor:
        return data_consistency(k_pred, k_meas, mask, self.weight())


class Cascade(Module):
    def __init__(self, rng, config: ModelConfig, index: int):
        in_channels = 2 * (index + 1) if config.dense else 2
        card = config.cardinality if config.subnet == "resxunet" else 1
        self.subnet = UNet(
            rng, in_channels, 2, config.levels, config.base_channels,
            style=config.subnet, cardinality=card, se_ratio=config.se_ratio,
            consume_injected=config.interconnections,
        )
        self.dc = DataConsistency()


class DIRCN(Module):
    """Full model: sensitivity estimation plus the cascade chain.

    forward takes masked k-space as a channel pair (coils, 2, H, W) (array or
    Tensor) with its mask and returns the RSS magnitude image (H, W).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.sens_net = SensitivityEstimator(rng, config)
        self.cascades = [Cascade(rng, config, i) for i in range(config.cascades)]

    def forward(self, kspace, mask: mri.SamplingMask) -> Tensor:
        k0 = kspace if isinstance(kspace, Tensor) else Tensor(kspace)
        if k0.ndim != 4 or k0.shape[1] != 2:
            raise ValueError(f"kspace must be (coils, 2, H, W), got {k0.shape}")
        if k0.shape[-1] != mask.n_ky:
            raise ValueError(f"mask covers {mask.n_ky} lines, k-space has {k0.shape[-1]}")
        height, width = k0.shape[2], k0.shape[3]

        sens = self.sens_net(k0, mask)
        k_meas = k0.data

        injected = None
        if self.config.interconnections:
            injected = self.cascades[0].subnet.zero_injected(1, height, width)

        history: list[Tensor] = []
        k_pred = k0
        for cascade in self.cascades:
            reduced = mri.coil_reduce(k_pred, sens)
            if self.config.dense:
                history.insert(0, reduced)  # newest first
            else:
                history = [reduced]
            x = history[0] if len(history) == 1 else F.concat(history, axis=1)
            refined, harvested = cascade.subnet(
                x, injected if self.config.interconnections else None
            )
            if self.config.interconnections:
                injected = harvested
            expanded = mri.coil_expand(refined, sens)
            k_pred = cascade.dc(F.fft2c(expanded), k_meas, mask)
        return F.rss(F.ifft2c(k_pred))

    def reconstruct(self, sample: mri.Sample) -> np.ndarray:
        """Convenience inference path: Sample in, magnitude image out."""
        return self.forward(sample.kspace, sample.mask).data
