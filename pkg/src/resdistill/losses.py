"""Distillation objectives: Huber latent regression plus ablation composites."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .core import ConfigError, ImageBatch, LatentBatch, LatentSource, ValueRange
from .teacher import GaussianLatent, TeacherBundle

LOSS_KINDS = ("l1", "huber", "huber+lpips", "huber+lpips+recon", "huber+lpips+kl")
HUBER_PARAMETERIZATIONS = ("smooth_l1", "classic")


def huber_loss(
    a: torch.Tensor,
    b: torch.Tensor,
    beta: float,
    parameterization: str = "smooth_l1",
) -> torch.Tensor:
    """Mean piecewise penalty over all elements of the residual d = |a - b|.

    smooth_l1 (default): 0.5 * d**2 / beta for d < beta, else d - 0.5 * beta.
    classic:             0.5 * d**2 for d < beta, else beta * (d - 0.5 * beta).

    Both are continuous with matching one-sided derivatives at d = beta; beta
    is the transition point between the quadratic and linear regimes.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if parameterization not in HUBER_PARAMETERIZATIONS:
        raise ValueError(f"parameterization must be one of {HUBER_PARAMETERIZATIONS}")
    d = (a - b).abs()
    if parameterization == "smooth_l1":
        penalty = torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    else:
        penalty = torch.where(d < beta, 0.5 * d * d, beta * (d - 0.5 * beta))
    return penalty.mean()


@dataclass
class LossSpec:
    kind: str = "huber"
    beta: float = 0.15
    parameterization: str = "smooth_l1"
    term_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if any(w < 0 for w in self.term_weights.values()):
            raise ValueError("term weights must be non-negative")

    @property
    def terms(self) -> tuple[str, ...]:
        if self.kind == "l1":
            return ("l1",)
        parts = self.kind.split("+")
        return tuple(parts)

    def weight(self, term: str) -> float:
        return float(self.term_weights.get(term, 1.0))


# A loss function maps (z_s, z_t, images, teacher Gaussian) to a scalar total
# plus a detached per-term breakdown.
LossFn = Callable[
    [torch.Tensor, torch.Tensor, ImageBatch | None, "GaussianLatent | None"],
    tuple[torch.Tensor, dict[str, float]],
]


def _batch_moment_kl(
    z_s: torch.Tensor, z_t: torch.Tensor, gaussian: GaussianLatent | None
) -> torch.Tensor:
    """Gaussian KL between teacher latent batch statistics and student batch statistics.

    The student is deterministic, so this is a distribution-matching stand-in:
    the teacher side is the moment-matched Gaussian of its sampled latents.
    """
    if gaussian is not None:
        mu_t = gaussian.mean.mean()
        var_t = (gaussian.std**2).mean() + gaussian.mean.var()
    else:
        mu_t, var_t = z_t.mean(), z_t.var()
    mu_s, var_s = z_s.mean(), z_s.var() + 1e-8
    return torch.log(torch.sqrt(var_s) / torch.sqrt(var_t)) + (
        var_t + (mu_t - mu_s) ** 2
    ) / (2.0 * var_s) - 0.5


def build_loss(
    spec: LossSpec,
    teacher: TeacherBundle | None = None,
    perceptual=None,
) -> LossFn:
    """Compose the configured distillation loss.

    Composite kinds need the teacher (to decode latents) and, for lpips terms,
    a differentiable perceptual backend. The huber/l1 term always acts in
    latent space; recon is an MSE between decode(z_s) and the input image in
    [-1,1]; lpips compares decode(z_s) against decode(z_t).
    """
    needs_decode = any(t in ("lpips", "recon") for t in spec.terms)
    if needs_decode and teacher is None:
        raise ConfigError(f"loss kind {spec.kind!r} requires a teacher with a decoder")
    if "lpips" in spec.terms and perceptual is None:
        raise ConfigError(f"loss kind {spec.kind!r} requires a perceptual backend")

    def loss_fn(
        z_s: torch.Tensor,
        z_t: torch.Tensor,
        images: ImageBatch | None = None,
        gaussian: GaussianLatent | None = None,
    ) -> tuple[torch.Tensor, dict[str, float]]:
        raw: dict[str, torch.Tensor] = {}
        for term in spec.terms:
            if term == "l1":
                raw[term] = (z_s - z_t).abs().mean()
            elif term == "huber":
                raw[term] = huber_loss(z_s, z_t, spec.beta, spec.parameterization)
            elif term == "kl":
                raw[term] = _batch_moment_kl(z_s, z_t, gaussian)
            elif term in ("lpips", "recon"):
                rec_s = teacher.decode(LatentBatch(z_s, LatentSource.STUDENT))
                if term == "recon":
                    if images is None:
                        raise ValueError("recon term requires the input images")
                    images.require_range(ValueRange.SYMMETRIC)
                    raw[term] = ((rec_s.data - images.data) ** 2).mean()
                else:
                    rec_t = teacher.decode(LatentBatch(z_t, LatentSource.TEACHER_SAMPLED))
                    raw[term] = perceptual.distance(rec_s, rec_t).mean()
        total = sum(spec.weight(t) * v for t, v in raw.items())
        breakdown = {t: float(v.detach()) for t, v in raw.items()}
        return total, breakdown

    return loss_fn
