"""Shared domain types: image/latent batches, resolutions, value ranges, seeding.

Conventions used across the package: encoders consume images in [-1, 1],
reconstruction metrics are computed in [0, 1], and every tensor is float32
unless a metric needs float64 internally. Resolutions that are not divisible
by the encoder stride after a remap are rejected, never padded.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import torch

LATENT_CHANNELS = 16
DOWNSAMPLE_FACTOR = 8
DEFAULT_EVAL_SCALES = (0.5, 1.0, 1.5, 2.0, 3.0, 4.0)


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


class ContractError(RuntimeError):
    """A shape, range, or finiteness contract was violated."""


class ValueRange(str, Enum):
    UNIT = "unit"            # [0, 1]
    SYMMETRIC = "symmetric"  # [-1, 1]


class LatentSource(str, Enum):
    TEACHER_SAMPLED = "teacher_sampled"
    TEACHER_MEAN = "teacher_mean"
    STUDENT = "student"


@dataclass(frozen=True, order=True)
class Resolution:
    height: int
    width: int

    def __post_init__(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ValueError(f"resolution must be at least 8x8, got {self.height}x{self.width}")

    @classmethod
    def square(cls, side: int) -> "Resolution":
        return cls(side, side)

    @property
    def size(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def divisible_by(self, factor: int) -> bool:
        return self.height % factor == 0 and self.width % factor == 0

    def require_divisible(self, factor: int = DOWNSAMPLE_FACTOR) -> None:
        if not self.divisible_by(factor):
            raise ContractError(
                f"resolution {self} is not divisible by {factor}; "
                "remap targets are rejected rather than padded"
            )

    def scaled(self, s: float, multiple: int = DOWNSAMPLE_FACTOR) -> "Resolution":
        """Scale both sides by ``s``, rounding to the nearest positive multiple.

        Rounding keeps every remapped resolution encodable; the caller is
        expected to log the actual resolution when it differs from h*s exactly.
        """
        if s <= 0:
            raise ValueError(f"scale factor must be positive, got {s}")
        h = max(multiple, int(round(self.height * s / multiple)) * multiple)
        w = max(multiple, int(round(self.width * s / multiple)) * multiple)
        return Resolution(h, w)

    def __str__(self) -> str:
        return f"{self.height}x{self.width}"


def parse_resolution(text: str | int) -> Resolution:
    """Parse '256', '256x256', or an int into a Resolution."""
    if isinstance(text, int):
        return Resolution.square(text)
    s = str(text).strip().lower()
    if "x" in s:
        h, w = s.split("x", 1)
        return Resolution(int(h), int(w))
    return Resolution.square(int(s))


def validate_scale(s: float) -> float:
    if not np.isfinite(s) or s <= 0:
        raise ValueError(f"scale factor must be a positive finite number, got {s}")
    return float(s)


@dataclass
class ImageBatch:
    """A batch of images with explicit range and resolution metadata.

    data has shape (batch, channel, height, width) and dtype float32.
    """

    data: torch.Tensor
    value_range: ValueRange
    resolution: Resolution

    def __post_init__(self) -> None:
        if self.data.ndim != 4:
            raise ContractError(f"image batch must be 4-axis (B,C,H,W), got {tuple(self.data.shape)}")
        if self.data.dtype != torch.float32:
            self.data = self.data.float()
        h, w = self.data.shape[-2:]
        if (h, w) != self.resolution.size:
            raise ContractError(
                f"declared resolution {self.resolution} does not match tensor {h}x{w}"
            )

    @classmethod
    def from_tensor(cls, data: torch.Tensor, value_range: ValueRange) -> "ImageBatch":
        return cls(data, value_range, Resolution(data.shape[-2], data.shape[-1]))

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def require_range(self, expected: ValueRange) -> None:
        if self.value_range != expected:
            raise ContractError(
                f"expected value range {expected.value!r}, got {self.value_range.value!r}; "
                "convert explicitly with convert_range"
            )

    def clone(self) -> "ImageBatch":
        return replace(self, data=self.data.clone())


@dataclass
class LatentBatch:
    """A batch of latent codes (B, 16, h, w) with provenance."""

    data: torch.Tensor
    source: LatentSource

    def __post_init__(self) -> None:
        if self.data.ndim != 4:
            raise ContractError(f"latent batch must be 4-axis, got {tuple(self.data.shape)}")
        if self.data.shape[1] != LATENT_CHANNELS:
            raise ContractError(
                f"latent channel axis must be {LATENT_CHANNELS}, got {self.data.shape[1]}"
            )
        if self.data.dtype != torch.float32:
            self.data = self.data.float()
        if not torch.isfinite(self.data).all():
            raise ContractError(f"latent batch ({self.source.value}) contains non-finite values")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return (self.data.shape[2], self.data.shape[3])


_RANGE_BOUNDS = {ValueRange.UNIT: (0.0, 1.0), ValueRange.SYMMETRIC: (-1.0, 1.0)}


def convert_range(batch: ImageBatch, target: ValueRange) -> ImageBatch:
    """Affine map between [0,1] and [-1,1]; metadata is updated, never guessed."""
    if not isinstance(target, ValueRange):
        try:
            target = ValueRange(target)
        except ValueError as exc:
            raise ValueError(f"unknown value range tag {target!r}") from exc
    if batch.value_range == target:
        return batch
    if target == ValueRange.SYMMETRIC:
        data = batch.data * 2.0 - 1.0
    else:
        data = (batch.data + 1.0) * 0.5
    return ImageBatch(data, target, batch.resolution)


def clamp_to_range(batch: ImageBatch) -> ImageBatch:
    lo, hi = _RANGE_BOUNDS[batch.value_range]
    return ImageBatch(batch.data.clamp(lo, hi), batch.value_range, batch.resolution)


def seed_all(seed: int) -> None:
    """Seed every RNG the package draws from (python, numpy, torch).

    Must run before any parallel work starts; library code that needs local
    determinism should additionally thread explicit generators.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def tensor_digest(t: torch.Tensor) -> str:
    arr = t.detach().cpu().contiguous().numpy()
    return hashlib.sha256(arr.tobytes() + str(arr.shape).encode()).hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    """Order-stable hash of all named parameters, for frozen-weights checks."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
