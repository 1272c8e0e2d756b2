"""UNet-style generators and strided-conv discriminators."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from counterfax.classifier import state_hash
from counterfax.errors import ConfigError, ShapeError


def _group_norm(channels: int) -> nn.Module:
    return nn.GroupNorm(min(8, channels), channels)


NORMS = {"batch": nn.BatchNorm2d, "group": _group_norm}


@dataclass
class GeneratorSpec:
    n_scales: int = 2
    base_channels: int = 16
    dropout_rate: float = 0.1
    output_mode: str = "clip"
    tail_convs: int = 0
    norm: str = "group"

    def __post_init__(self):
        if self.n_scales < 1:
            raise ConfigError("n_scales must be >= 1")
        if not 0.0 <= self.dropout_rate <= 0.5:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 0.5]")
        if self.output_mode not in ("clip", "sigmoid"):
            raise ConfigError(f"unknown output_mode {self.output_mode!r}")
        if self.tail_convs < 0:
            raise ConfigError("tail_convs must be >= 0")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}; expected one of {sorted(NORMS)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DiscriminatorSpec:
    n_blocks: int = 2
    base_channels: int = 32
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class ConvBlock(nn.Sequential):
    """norm -> ReLU -> 3x3 conv."""

    def __init__(self, c_in: int, c_out: int, norm: str = "batch"):
        super().__init__(NORMS[norm](c_in), nn.ReLU(), nn.Conv2d(c_in, c_out, 3, padding=1))


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, dropout: float, norm: str = "batch"):
        super().__init__()
        self.body = nn.Sequential(ConvBlock(c_in, c_out, norm), ConvBlock(c_out, c_out, norm))
        self.skip = nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.body(x) + self.skip(x))


class UpBlock(nn.Module):
    """Nearest x2 upsample + 3x3 conv, concat with the skip, then two conv blocks."""

    def __init__(self, c_in: int, c_skip: int, c_out: int, dropout: float, norm: str = "batch"):
        super().__init__()
        self.up = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.convs = nn.Sequential(
            ConvBlock(c_out + c_skip, c_out, norm), nn.Dropout(dropout),
            ConvBlock(c_out, c_out, norm), nn.Dropout(dropout),
        )

    def forward(self, x, skip):
        x = self.up(F.interpolate(x, scale_factor=2, mode="nearest"))
        return self.convs(torch.cat([x, skip], dim=1))


class UNetTrunk(nn.Module):
    """Encoder/decoder body; returns ``base_channels`` feature maps at input resolution."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        widths = [spec.base_channels * 2 ** i for i in range(spec.n_scales + 1)]
        self.down = nn.ModuleList()
        c = 1
        for w in widths[:-1]:
            self.down.append(ResidualBlock(c, w, spec.dropout_rate, spec.norm))
            c = w
        self.bottleneck = ResidualBlock(c, widths[-1], spec.dropout_rate, spec.norm)
        self.up = nn.ModuleList(
            UpBlock(widths[i + 1], widths[i], widths[i], spec.dropout_rate, spec.norm)
            for i in reversed(range(spec.n_scales))
        )

    def forward(self, x):
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = block(x, skip)
        return x


class OutputHead(nn.Module):
    """Optional tail conv blocks, then a plain 1x1 conv to one channel and the output squashing."""

    def __init__(self, channels: int, spec: GeneratorSpec):
        super().__init__()
        self.tail = nn.Sequential(*(ConvBlock(channels, channels, spec.norm) for _ in range(spec.tail_convs)))
        self.norm = nn.Sequential(NORMS[spec.norm](channels), nn.ReLU())
        self.out = nn.Conv2d(channels, 1, 1)
        self.output_mode = spec.output_mode

    def forward(self, h):
        y = self.out(self.norm(self.tail(h)))
        if self.output_mode == "sigmoid":
            return torch.sigmoid(y)
        return y.clamp(0.0, 1.0)


class Generator(nn.Module):
    """Image-to-image generator: (N, 1, H, W) in [0,1] -> same shape in [0,1]."""

    def __init__(self, spec: GeneratorSpec, input_size: int):
        super().__init__()
        self.spec = spec
        self.input_size = input_size
        self.trunk = UNetTrunk(spec)
        self.head = OutputHead(spec.base_channels, spec)

    def forward(self, x):
        return self.head(self.trunk(x))


class SharedGenerator(nn.Module):
    """One UNet trunk with separate stable and adversarial output heads."""

    def __init__(self, spec: GeneratorSpec, input_size: int):
        super().__init__()
        self.spec = spec
        self.input_size = input_size
        self.trunk = UNetTrunk(spec)
        self.heads = nn.ModuleDict({
            "stable": OutputHead(spec.base_channels, spec),
            "adversarial": OutputHead(spec.base_channels, spec),
        })

    def forward(self, x, kind: str):
        return self.heads[kind](self.trunk(x))

    def view(self, kind: str) -> "HeadView":
        return HeadView(self, kind)


class HeadView:
    """Callable exposing one head of a :class:`SharedGenerator` as a standalone generator."""

    def __init__(self, shared: SharedGenerator, kind: str):
        self.shared = shared
        self.kind = kind

    def __call__(self, x):
        return self.shared(x, self.kind)

    def parameters(self):
        return self.shared.parameters()

    @property
    def head(self) -> OutputHead:
        return self.shared.heads[self.kind]


class Discriminator(nn.Module):
    """Stride-2 conv blocks with leaky ReLU and no normalization, then a dense logit."""

    def __init__(self, spec: DiscriminatorSpec, input_size: int):
        super().__init__()
        self.spec = spec
        self.input_size = input_size
        layers, c, side = [], 1, input_size
        for i in range(spec.n_blocks):
            w = spec.base_channels * 2 ** i
            layers += [nn.Conv2d(c, w, 4, stride=2, padding=1), nn.LeakyReLU(spec.leaky_slope)]
            c, side = w, side // 2
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(c * side * side, 1)

    def forward(self, x):
        return self.fc(self.features(x).flatten(1)).squeeze(1)


def _check_input(x: torch.Tensor, input_size: int):
    if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != input_size or x.shape[3] != input_size:
        raise ShapeError(f"expected (N, 1, {input_size}, {input_size}) input, got {tuple(x.shape)}")


def build_generator(spec: GeneratorSpec, input_size: int, seed: int = 0) -> Generator:
    if input_size % (2 ** spec.n_scales):
        raise ConfigError(f"input_size {input_size} not divisible by 2^{spec.n_scales}")
    torch.manual_seed(seed)
    return Generator(spec, input_size)


def build_shared_generator(spec: GeneratorSpec, input_size: int, seed: int = 0) -> SharedGenerator:
    if input_size % (2 ** spec.n_scales):
        raise ConfigError(f"input_size {input_size} not divisible by 2^{spec.n_scales}")
    torch.manual_seed(seed)
    return SharedGenerator(spec, input_size)


def build_discriminator(spec: DiscriminatorSpec, input_size: int, seed: int = 0) -> Discriminator:
    if input_size < 2 ** spec.n_blocks:
        raise ConfigError(f"input_size {input_size} too small for {spec.n_blocks} stride-2 blocks")
    torch.manual_seed(seed)
    return Discriminator(spec, input_size)


def generator_forward(g, images: torch.Tensor) -> torch.Tensor:
    """Apply a generator (module or head view), validating the input shape."""
    size = g.shared.input_size if isinstance(g, HeadView) else g.input_size
    _check_input(images, size)
    return g(images)


def discriminator_forward(d: Discriminator, images: torch.Tensor) -> torch.Tensor:
    _check_input(images, d.input_size)
    return d(images)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


__all__ = [
    "DiscriminatorSpec",
    "Discriminator",
    "GeneratorSpec",
    "Generator",
    "HeadView",
    "SharedGenerator",
    "build_discriminator",
    "build_generator",
    "build_shared_generator",
    "discriminator_forward",
    "generator_forward",
    "param_count",
    "state_hash",
]
