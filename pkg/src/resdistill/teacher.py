"""Uniform contract over teacher VAE encoder/decoder pairs.

A TeacherBundle exposes encode (image -> Gaussian latent parameters) and
decode (latent -> image) with a fixed 16-channel, factor-8 shape contract.
External teachers are wrapped through a registry of adapters; a built-in
synthetic toy teacher supports desk-scale experiments without any weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    ContractError,
    ImageBatch,
    LatentBatch,
    LatentSource,
    Resolution,
    ValueRange,
)
from .data import synthetic_images

STD_TRANSFORMS = ("logvar", "direct", "softplus")


@dataclass
class GaussianLatent:
    """Per-pixel Gaussian parameters of a teacher posterior, both (B,16,h,w)."""

    mean: torch.Tensor
    std: torch.Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.std.shape:
            raise ContractError(
                f"mean/std shapes differ: {tuple(self.mean.shape)} vs {tuple(self.std.shape)}"
            )
        if not torch.isfinite(self.mean).all() or not torch.isfinite(self.std).all():
            raise ContractError("Gaussian latent parameters contain non-finite values")
        if not (self.std > 0).all():
            raise ContractError("Gaussian latent std must be positive everywhere")


@dataclass
class TeacherBundle:
    name: str
    encode: Callable[[ImageBatch], GaussianLatent]
    decode: Callable[[LatentBatch], ImageBatch]
    latent_channels: int = 16
    downsample_factor: int = 8
    # Underlying torch modules, when available, for frozen-weights assertions.
    torch_modules: tuple[nn.Module, ...] = field(default=(), repr=False)


def split_gaussian(raw: torch.Tensor, std_transform: str = "logvar") -> GaussianLatent:
    """Split a 32-channel tensor into mean (first 16) and positive std (last 16).

    The raw second half is interpreted per ``std_transform``: 'logvar' applies
    exp(0.5 x), 'softplus' applies softplus(x) + 1e-6, 'direct' requires the
    values to already be positive. Real teachers differ here, so the choice is
    owned by each adapter.
    """
    if raw.ndim != 4 or raw.shape[1] != 32:
        raise ContractError(
            f"raw teacher output must be (B,32,h,w), got {tuple(raw.shape)}"
        )
    if std_transform not in STD_TRANSFORMS:
        raise ValueError(f"std_transform must be one of {STD_TRANSFORMS}")
    mean, second = raw[:, :16], raw[:, 16:]
    if std_transform == "logvar":
        std = torch.exp(0.5 * second)
    elif std_transform == "softplus":
        std = F.softplus(second) + 1e-6
    else:
        if not (second > 0).all():
            raise ContractError("direct std channels must be positive")
        std = second
    return GaussianLatent(mean=mean, std=std)


def sample_latent(g: GaussianLatent, generator: torch.Generator | None = None) -> LatentBatch:
    """Reparameterized draw z = mean + std * eps with eps ~ N(0, I)."""
    eps = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype)
    return LatentBatch(g.mean + g.std * eps, LatentSource.TEACHER_SAMPLED)


def mean_latent(g: GaussianLatent) -> LatentBatch:
    return LatentBatch(g.mean, LatentSource.TEACHER_MEAN)


def check_teacher_contract(bundle: TeacherBundle, resolution: Resolution = Resolution(64, 64)) -> None:
    """Smoke encode/decode on a zeros image; raises ContractError on any mismatch."""
    x = ImageBatch(
        torch.zeros(1, 3, resolution.height, resolution.width), ValueRange.SYMMETRIC, resolution
    )
    g = bundle.encode(x)
    expect = (1, bundle.latent_channels,
              resolution.height // bundle.downsample_factor,
              resolution.width // bundle.downsample_factor)
    if tuple(g.mean.shape) != expect:
        raise ContractError(
            f"teacher {bundle.name}: encode shape {tuple(g.mean.shape)}, expected {expect}"
        )
    rec = bundle.decode(mean_latent(g))
    if rec.resolution != resolution:
        raise ContractError(
            f"teacher {bundle.name}: decode returned {rec.resolution}, expected {resolution}"
        )


# ---------------------------------------------------------------------------
# Adapter registry for external teachers
# ---------------------------------------------------------------------------

_ADAPTERS: dict[str, Callable[[Path], TeacherBundle]] = {}


def register_teacher_adapter(adapter_id: str):
    def wrap(fn: Callable[[Path], TeacherBundle]):
        _ADAPTERS[adapter_id] = fn
        return fn

    return wrap


def registered_adapters() -> tuple[str, ...]:
    return tuple(sorted(_ADAPTERS))


def load_external_teacher(artifact_path: Path, adapter_id: str) -> TeacherBundle:
    path = Path(artifact_path)
    if not path.exists():
        raise FileNotFoundError(f"teacher weights not found at {path}")
    if adapter_id not in _ADAPTERS:
        raise ValueError(
            f"unknown teacher adapter {adapter_id!r}; registered adapters: "
            f"{', '.join(registered_adapters()) or '(none)'}"
        )
    bundle = _ADAPTERS[adapter_id](path)
    check_teacher_contract(bundle)
    return bundle


# ---------------------------------------------------------------------------
# Toy teacher: a frozen random conv pair for desk-scale runs
# ---------------------------------------------------------------------------

RESOLUTION_BIASES = ("none", "highres_sweet")


class _ToyEncoderNet(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.c1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(64, 32, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.c1(x))
        h = F.silu(self.c2(h))
        return self.c3(h)


class _ToyDecoderNet(nn.Module):
    def __init__(self) -> None:
        super().__init__()
        self.c1 = nn.Conv2d(16, 48, 3, padding=1)
        self.c2 = nn.Conv2d(48, 24, 3, padding=1)
        self.c3 = nn.Conv2d(24, 12, 3, padding=1)
        self.out = nn.Conv2d(12, 3, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.c1(z))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.c2(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.silu(self.c3(h))
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        return torch.tanh(self.out(h))


def _local_gradient_mean(x: torch.Tensor) -> torch.Tensor:
    """Mean absolute adjacent-pixel difference per image, a smoothness proxy."""
    dx = (x[..., :, 1:] - x[..., :, :-1]).abs().mean(dim=(1, 2, 3))
    dy = (x[..., 1:, :] - x[..., :-1, :]).abs().mean(dim=(1, 2, 3))
    return 0.5 * (dx + dy)


def make_toy_teacher(seed: int, resolution_bias: str = "none") -> TeacherBundle:
    """Small frozen random encoder/decoder pair satisfying the teacher contract.

    With resolution_bias='highres_sweet' the latent activations are multiplied
    by a gain that grows as inputs get smoother (upsampled images have smaller
    local gradients) and with the raw input side length, so the latent std
    increases monotonically with input resolution. The smoothness component is
    what a distilled student can actually pick up from single-resolution
    training; the explicit side-length factor sharpens the teacher trend.
    """
    if resolution_bias not in RESOLUTION_BIASES:
        raise ValueError(f"resolution_bias must be one of {RESOLUTION_BIASES}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        enc_net = _ToyEncoderNet()
        dec_net = _ToyDecoderNet()
    for p in enc_net.parameters():
        p.requires_grad_(False)
    for p in dec_net.parameters():
        p.requires_grad_(False)
    enc_net.eval()
    dec_net.eval()

    # Calibrate the raw mean half to roughly unit scale on reference images so
    # the distillation signal dominates the sampling noise.
    ref = synthetic_images(8, Resolution(32, 32), seed + 1)
    with torch.no_grad():
        raw_ref = enc_net(ref)
    mean_scale = float(1.0 / (raw_ref[:, :16].std() + 1e-8))

    def gain(x: torch.Tensor) -> torch.Tensor:
        g_content = (0.25 / (_local_gradient_mean(x) + 1e-3)).clamp(0.25, 4.0)
        g_side = (x.shape[-1] / 32.0) ** 0.25
        return (g_content * g_side).view(-1, 1, 1, 1)

    def encode(batch: ImageBatch) -> GaussianLatent:
        batch.require_range(ValueRange.SYMMETRIC)
        batch.resolution.require_divisible(8)
        with torch.no_grad():
            raw = enc_net(batch.data)
        mean = raw[:, :16] * mean_scale
        # Tight small-std band keeps the sampled target close to the mean.
        std = torch.exp(0.5 * (0.5 * torch.tanh(raw[:, 16:]) - 4.5))
        if resolution_bias == "highres_sweet":
            g = gain(batch.data)
            mean, std = mean * g, std * g
        return GaussianLatent(mean=mean, std=std)

    def decode(lat: LatentBatch) -> ImageBatch:
        # No no_grad here: composite distillation losses differentiate through
        # decode(z_s); the decoder's own parameters stay frozen regardless.
        out = dec_net(lat.data)
        return ImageBatch.from_tensor(out, ValueRange.SYMMETRIC)

    return TeacherBundle(
        name=f"toy(seed={seed},bias={resolution_bias})",
        encode=encode,
        decode=decode,
        torch_modules=(enc_net, dec_net),
    )


@register_teacher_adapter("toy")
def _load_toy(path: Path) -> TeacherBundle:
    """Toy teachers are fully defined by (seed, resolution_bias) stored as JSON."""
    spec = json.loads(Path(path).read_text())
    return make_toy_teacher(int(spec["seed"]), spec.get("resolution_bias", "none"))


def save_toy_teacher_spec(path: Path, seed: int, resolution_bias: str = "none") -> None:
    Path(path).write_text(
        json.dumps({"seed": seed, "resolution_bias": resolution_bias}, sort_keys=True) + "\n"
    )
