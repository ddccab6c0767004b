"""Compact deterministic convolutional encoder with analytic parameter counting.

The encoder projects the input with a 1x1 convolution, runs a configurable
number of downsampling stages (residual blocks followed by a stride-2 conv
that doubles the channel width), and maps the final features to the latent
channel count with a 1x1 head. Spatial dims shrink by exactly 2**stages, which
is what lets one trained encoder run at any divisible input resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    ContractError,
    ImageBatch,
    LatentBatch,
    LatentSource,
    ValueRange,
    module_digest,
)

NORM_KINDS = ("group", "batch", "none")
MAX_WIDTH = 1 << 16


@dataclass
class StudentConfig:
    in_channels: int = 3
    hidden: int = 32
    stages: int = 3
    blocks_per_stage: int = 4
    convs_per_block: int = 2
    latent_channels: int = 16
    norm: str = "group"
    # Whether the last stage's strided conv still doubles channels before the head.
    double_final: bool = True

    def __post_init__(self) -> None:
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if self.hidden < 1 or self.in_channels < 1 or self.latent_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.blocks_per_stage < 1 or self.convs_per_block < 1:
            raise ValueError("blocks_per_stage and convs_per_block must be >= 1")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}, got {self.norm!r}")
        if self.hidden * 2**self.stages > MAX_WIDTH:
            raise ValueError(
                f"hidden * 2**stages = {self.hidden * 2 ** self.stages} exceeds the "
                f"width guard of {MAX_WIDTH}"
            )

    @property
    def downsample_factor(self) -> int:
        return 2**self.stages

    def stage_widths(self) -> list[tuple[int, int]]:
        """(block width, post-downsample width) per stage."""
        widths = []
        c = self.hidden
        for i in range(self.stages):
            doubles = self.double_final or i < self.stages - 1
            widths.append((c, 2 * c if doubles else c))
            c = widths[-1][1]
        return widths

    @property
    def final_width(self) -> int:
        return self.stage_widths()[-1][1]

    def to_dict(self) -> dict:
        return asdict(self)


def _make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        groups = 8 if channels % 8 == 0 else math.gcd(channels, 8)
        return nn.GroupNorm(groups, channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.Identity()


class ResidualBlock(nn.Module):
    """Pre-activation residual block: repeat [norm -> SiLU -> 3x3 conv], add input."""

    def __init__(self, channels: int, convs: int, norm: str) -> None:
        super().__init__()
        self.norms = nn.ModuleList(_make_norm(norm, channels) for _ in range(convs))
        self.convs = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1) for _ in range(convs)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for norm, conv in zip(self.norms, self.convs):
            h = conv(F.silu(norm(h)))
        return x + h


class StudentEncoder(nn.Module):
    def __init__(self, config: StudentConfig, seed: int | None = None) -> None:
        super().__init__()
        self.config = config
        self.seed = seed
        self.stem = nn.Conv2d(config.in_channels, config.hidden, 1)
        stages = []
        for width, out_width in config.stage_widths():
            blocks = [
                ResidualBlock(width, config.convs_per_block, config.norm)
                for _ in range(config.blocks_per_stage)
            ]
            blocks.append(nn.Conv2d(width, out_width, 3, stride=2, padding=1))
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(config.final_width, config.latent_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.stages(self.stem(x)))

    def encode(self, batch: ImageBatch) -> LatentBatch:
        """Contract-checked forward: [-1,1] input, divisible resolution, finite output."""
        batch.require_range(ValueRange.SYMMETRIC)
        batch.resolution.require_divisible(self.config.downsample_factor)
        out = self.forward(batch.data)
        if not torch.isfinite(out).all():
            bad = int((~torch.isfinite(out)).sum())
            raise ContractError(
                f"student forward produced {bad} non-finite values "
                f"(input {batch.resolution}, {batch.n} images)"
            )
        return LatentBatch(out, LatentSource.STUDENT)

    def parameter_hash(self) -> str:
        return module_digest(self)


def build_student(cfg: StudentConfig, seed: int) -> StudentEncoder:
    """Construct a student with seed-deterministic initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = StudentEncoder(cfg, seed=seed)
    return model


def count_parameters(cfg: StudentConfig) -> int:
    """Closed-form parameter count; matches the built model exactly.

    Convs contribute in*out*k*k + out, affine norms contribute 2*c. Batch norm
    running statistics are buffers, not parameters, and are excluded.
    """

    def conv(cin: int, cout: int, k: int) -> int:
        return cin * cout * k * k + cout

    norm_params = 0 if cfg.norm == "none" else 2
    total = conv(cfg.in_channels, cfg.hidden, 1)
    for width, out_width in cfg.stage_widths():
        per_block = cfg.convs_per_block * (conv(width, width, 3) + norm_params * width)
        total += cfg.blocks_per_stage * per_block
        total += conv(width, out_width, 3)
    total += conv(cfg.final_width, cfg.latent_channels, 1)
    return total


def parameter_bytes(cfg: StudentConfig, bits: int = 32) -> int:
    if bits not in (16, 32):
        raise ValueError("parameter size is reported at 16 or 32 bits")
    return count_parameters(cfg) * bits // 8
