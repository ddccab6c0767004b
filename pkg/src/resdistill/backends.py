"""Pluggable feature and perceptual backends for rFID and LPIPS-style metrics.

The package never implements a pretrained perceptual network; it hosts
backends behind small registries. The built-in "toy-conv" / "toy-perceptual"
backends are frozen random conv nets: deterministic, fast, and sufficient for
desk-scale comparisons. Real backends (e.g. an inception feature extractor or
an LPIPS net) register under their own ids, and every report records which
backend produced its numbers.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageBatch, ValueRange, convert_range


class FeatureBackend:
    """Maps an ImageBatch to per-image feature vectors (n, feature_dim)."""

    def __init__(self, backend_id: str, feature_dim: int, fn: Callable[[ImageBatch], np.ndarray]):
        self.id = backend_id
        self.feature_dim = feature_dim
        self._fn = fn

    def extract(self, batch: ImageBatch) -> np.ndarray:
        feats = np.asarray(self._fn(batch), dtype=np.float64)
        if feats.shape != (batch.n, self.feature_dim):
            raise RuntimeError(
                f"backend {self.id}: expected ({batch.n}, {self.feature_dim}) features, "
                f"got {feats.shape}"
            )
        return feats


class PerceptualBackend:
    """Per-image perceptual distance between two batches; torch-differentiable."""

    def __init__(self, backend_id: str, fn: Callable[[ImageBatch, ImageBatch], torch.Tensor]):
        self.id = backend_id
        self._fn = fn

    def distance(self, x: ImageBatch, y: ImageBatch) -> torch.Tensor:
        return self._fn(x, y)


_FEATURE_BACKENDS: dict[str, Callable[[], FeatureBackend]] = {}
_PERCEPTUAL_BACKENDS: dict[str, Callable[[], PerceptualBackend]] = {}
_FEATURE_CACHE: dict[str, FeatureBackend] = {}
_PERCEPTUAL_CACHE: dict[str, PerceptualBackend] = {}


def register_feature_backend(backend_id: str, factory: Callable[[], FeatureBackend]) -> None:
    _FEATURE_BACKENDS[backend_id] = factory


def register_perceptual_backend(backend_id: str, factory: Callable[[], PerceptualBackend]) -> None:
    _PERCEPTUAL_BACKENDS[backend_id] = factory


def get_feature_backend(backend_id: str | None) -> FeatureBackend | None:
    if backend_id is None or backend_id == "none":
        return None
    if backend_id not in _FEATURE_BACKENDS:
        raise KeyError(
            f"no feature backend {backend_id!r}; registered: {sorted(_FEATURE_BACKENDS)}"
        )
    if backend_id not in _FEATURE_CACHE:
        _FEATURE_CACHE[backend_id] = _FEATURE_BACKENDS[backend_id]()
    return _FEATURE_CACHE[backend_id]


def get_perceptual_backend(backend_id: str | None) -> PerceptualBackend | None:
    if backend_id is None or backend_id == "none":
        return None
    if backend_id not in _PERCEPTUAL_BACKENDS:
        raise KeyError(
            f"no perceptual backend {backend_id!r}; registered: {sorted(_PERCEPTUAL_BACKENDS)}"
        )
    if backend_id not in _PERCEPTUAL_CACHE:
        _PERCEPTUAL_CACHE[backend_id] = _PERCEPTUAL_BACKENDS[backend_id]()
    return _PERCEPTUAL_CACHE[backend_id]


# ---------------------------------------------------------------------------
# Built-in toy backends
# ---------------------------------------------------------------------------


class _ToyTrunk(nn.Module):
    def __init__(self, seed: int = 2024) -> None:
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.c1 = nn.Conv2d(3, 8, 3, stride=2, padding=1)
            self.c2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h1 = F.silu(self.c1(x))
        h2 = F.silu(self.c2(h1))
        return h1, h2


def _as_symmetric_tensor(batch: ImageBatch) -> torch.Tensor:
    return convert_range(batch, ValueRange.SYMMETRIC).data


def _toy_feature_backend() -> FeatureBackend:
    trunk = _ToyTrunk()

    def extract(batch: ImageBatch) -> np.ndarray:
        with torch.no_grad():
            _, h2 = trunk.features(_as_symmetric_tensor(batch))
            pooled = F.adaptive_avg_pool2d(h2, 4)
        return pooled.flatten(1).cpu().numpy()

    return FeatureBackend("toy-conv", feature_dim=16 * 4 * 4, fn=extract)


def _toy_perceptual_backend() -> PerceptualBackend:
    trunk = _ToyTrunk()

    def distance(x: ImageBatch, y: ImageBatch) -> torch.Tensor:
        fx = trunk.features(_as_symmetric_tensor(x))
        fy = trunk.features(_as_symmetric_tensor(y))
        total = None
        for a, b in zip(fx, fy):
            layer = ((a - b) ** 2).mean(dim=(1, 2, 3))
            total = layer if total is None else total + layer
        return total / len(fx)

    return PerceptualBackend("toy-perceptual", distance)


register_feature_backend("toy-conv", _toy_feature_backend)
register_perceptual_backend("toy-perceptual", _toy_perceptual_backend)
