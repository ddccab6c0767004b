"""Reconstruction and perceptual metrics with per-image and aggregate reporting.

MSE, PSNR, and SSIM are computed natively in float64 on [0,1] images; LPIPS
and the Frechet distance delegate to pluggable backends for feature
extraction. Aggregates are always recomputable from the persisted per-image
vectors.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, ndimage

from .core import ImageBatch, ValueRange

log = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
LOWER_IS_BETTER = {"mse", "lpips", "rfid"}
HIGHER_IS_BETTER = {"psnr", "ssim"}


class MetricError(RuntimeError):
    pass


def _pair_to_f64(x: ImageBatch, y: ImageBatch) -> tuple[np.ndarray, np.ndarray]:
    x.require_range(ValueRange.UNIT)
    y.require_range(ValueRange.UNIT)
    if x.data.shape != y.data.shape:
        raise ValueError(
            f"image batches differ in shape: {tuple(x.data.shape)} vs {tuple(y.data.shape)}"
        )
    return (
        x.data.detach().cpu().numpy().astype(np.float64),
        y.data.detach().cpu().numpy().astype(np.float64),
    )


def mse(x: ImageBatch, y: ImageBatch) -> np.ndarray:
    """Per-image mean squared pixel difference."""
    a, b = _pair_to_f64(x, y)
    return ((a - b) ** 2).mean(axis=(1, 2, 3))


def psnr(x: ImageBatch, y: ImageBatch) -> np.ndarray:
    """Per-image 10*log10(1/MSE) in dB; zero-MSE images are capped at 100 dB."""
    m = mse(x, y)
    out = np.full_like(m, PSNR_CAP_DB)
    nz = m > 0
    out[nz] = -10.0 * np.log10(m[nz])
    return np.minimum(out, PSNR_CAP_DB)


def psnr_from_mse(m: float) -> float:
    return PSNR_CAP_DB if m <= 0 else min(-10.0 * float(np.log10(m)), PSNR_CAP_DB)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    half = (window - 1) / 2.0
    pos = np.arange(window, dtype=np.float64) - half
    k = np.exp(-(pos**2) / (2.0 * sigma**2))
    return k / k.sum()


def _local_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable windowed mean over the trailing two axes, valid region only."""
    half = len(kernel) // 2
    out = ndimage.correlate1d(img, kernel, axis=-2, mode="constant")
    out = ndimage.correlate1d(out, kernel, axis=-1, mode="constant")
    return out[..., half:-half, half:-half]


def ssim(
    x: ImageBatch,
    y: ImageBatch,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> np.ndarray:
    """Per-image mean structural similarity with a Gaussian window.

    Local statistics are taken over all fully-interior windows (no padding),
    the SSIM map is averaged over positions, then over channels. Constants
    follow the original defaults with dynamic range 1.
    """
    a, b = _pair_to_f64(x, y)
    h, w = a.shape[-2:]
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be an odd integer >= 3")
    if window > min(h, w):
        raise ValueError(f"window {window} exceeds image side min({h},{w})")
    kernel = _gaussian_kernel(window, sigma)
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    mu_x = _local_mean(a, kernel)
    mu_y = _local_mean(b, kernel)
    xx = _local_mean(a * a, kernel)
    yy = _local_mean(b * b, kernel)
    xy = _local_mean(a * b, kernel)
    var_x = xx - mu_x**2
    var_y = yy - mu_y**2
    cov = xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return (num / den).mean(axis=(1, 2, 3))


def lpips(x: ImageBatch, y: ImageBatch, backend) -> np.ndarray:
    """Perceptual distance through a registered backend (never silently zero)."""
    if backend is None:
        raise MetricError("lpips requested but no perceptual backend is available")
    import torch

    with torch.no_grad():
        d = backend.distance(x, y)
    return d.detach().cpu().numpy().astype(np.float64)


def feature_statistics(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"feature set must be 2-D (n, dim), got {feats.shape}")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    return mu, np.atleast_2d(cov)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, eps: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) between feature sets.

    Covariances are regularized by eps*I before the matrix square root. Small
    negative results from numerical error are clamped to zero with a warning.
    """
    feats_a, feats_b = np.asarray(feats_a, np.float64), np.asarray(feats_b, np.float64)
    if not (np.isfinite(feats_a).all() and np.isfinite(feats_b).all()):
        raise MetricError("feature sets contain non-finite values")
    mu_a, cov_a = feature_statistics(feats_a)
    mu_b, cov_b = feature_statistics(feats_b)
    dim = mu_a.shape[0]
    for name, n in (("a", len(feats_a)), ("b", len(feats_b))):
        if n <= dim:
            log.warning("frechet_distance: set %s has n=%d <= feature_dim=%d", name, n, dim)
    reg = eps * np.eye(dim)
    cov_a, cov_b = cov_a + reg, cov_b + reg
    covmean, _ = linalg.sqrtm(cov_a @ cov_b, disp=False)
    if np.iscomplexobj(covmean):
        imag_max = float(np.abs(covmean.imag).max())
        if imag_max > 1e-3:
            raise MetricError(
                f"covariance product square root is far from real (max imag {imag_max:.2e}); "
                "covariance is not PSD after regularization"
            )
        covmean = covmean.real
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * covmean))
    if value < 0:
        if value < -1e-6:
            raise MetricError(f"frechet distance is substantially negative: {value}")
        log.warning("frechet_distance: clamping tiny negative value %.3e to 0", value)
        value = 0.0
    return value


@dataclass
class MetricReport:
    """Per-image metric vectors plus exact aggregates.

    ``scalars`` holds set-level metrics (rfid); ``flags`` records per-image
    anomalies such as capped PSNR; ``unavailable`` lists metrics that were
    requested but had no backend.
    """

    per_image: dict[str, np.ndarray]
    mean: dict[str, float]
    std: dict[str, float]
    n: int
    scalars: dict[str, float] = field(default_factory=dict)
    flags: dict[str, list[int]] = field(default_factory=dict)
    unavailable: tuple[str, ...] = ()
    backend_ids: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_per_image(
        cls,
        per_image: dict[str, np.ndarray],
        scalars: dict[str, float] | None = None,
        flags: dict[str, list[int]] | None = None,
        unavailable: tuple[str, ...] = (),
        backend_ids: dict[str, str] | None = None,
    ) -> "MetricReport":
        per_image = {k: np.asarray(v, dtype=np.float64) for k, v in per_image.items()}
        sizes = {v.shape[0] for v in per_image.values()}
        if len(sizes) > 1:
            raise ValueError(f"per-image vectors disagree on batch size: {sizes}")
        n = sizes.pop() if sizes else 0
        mean = {k: float(v.mean()) for k, v in per_image.items()}
        std = {k: float(v.std(ddof=1)) if n > 1 else 0.0 for k, v in per_image.items()}
        return cls(
            per_image=per_image,
            mean=mean,
            std=std,
            n=n,
            scalars=dict(scalars or {}),
            flags={k: list(v) for k, v in (flags or {}).items()},
            unavailable=tuple(unavailable),
            backend_ids=dict(backend_ids or {}),
        )

    def metric_names(self) -> tuple[str, ...]:
        return tuple(self.per_image) + tuple(self.scalars)

    def value(self, metric: str) -> float:
        if metric in self.mean:
            return self.mean[metric]
        if metric in self.scalars:
            return self.scalars[metric]
        raise KeyError(f"metric {metric!r} not present in report")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mean": self.mean,
            "std": self.std,
            "scalars": self.scalars,
            "flags": self.flags,
            "unavailable": list(self.unavailable),
            "backend_ids": self.backend_ids,
        }

    @classmethod
    def from_dict(cls, data: dict, per_image: dict[str, np.ndarray] | None = None) -> "MetricReport":
        report = cls(
            per_image={k: np.asarray(v) for k, v in (per_image or {}).items()},
            mean=dict(data["mean"]),
            std=dict(data["std"]),
            n=int(data["n"]),
            scalars=dict(data.get("scalars", {})),
            flags={k: list(v) for k, v in data.get("flags", {}).items()},
            unavailable=tuple(data.get("unavailable", ())),
            backend_ids=dict(data.get("backend_ids", {})),
        )
        return report

    def per_image_csv(self) -> str:
        """One row per image plus an aggregate mean/std footer."""
        names = sorted(self.per_image)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image_index", *names])
        for i in range(self.n):
            writer.writerow([i, *(repr(float(self.per_image[m][i])) for m in names)])
        writer.writerow(["mean", *(repr(self.mean[m]) for m in names)])
        writer.writerow(["std", *(repr(self.std[m]) for m in names)])
        return buf.getvalue()


def compute_report(
    x: ImageBatch,
    y: ImageBatch,
    metrics: tuple[str, ...] = ("mse", "psnr", "ssim"),
    perceptual_backend=None,
    feature_backend=None,
) -> MetricReport:
    """Evaluate the requested metrics for reconstruction x against reference y."""
    per_image: dict[str, np.ndarray] = {}
    scalars: dict[str, float] = {}
    flags: dict[str, list[int]] = {}
    unavailable: list[str] = []
    backend_ids: dict[str, str] = {}
    for name in metrics:
        if name == "mse":
            per_image[name] = mse(x, y)
        elif name == "psnr":
            vals = psnr(x, y)
            capped = [int(i) for i in np.nonzero(vals >= PSNR_CAP_DB)[0]]
            if capped:
                flags["psnr"] = capped
            per_image[name] = vals
        elif name == "ssim":
            per_image[name] = ssim(x, y)
        elif name == "lpips":
            if perceptual_backend is None:
                unavailable.append(name)
                continue
            per_image[name] = lpips(x, y, perceptual_backend)
            backend_ids["lpips"] = perceptual_backend.id
        elif name == "rfid":
            if feature_backend is None:
                unavailable.append(name)
                continue
            scalars[name] = frechet_distance(
                feature_backend.extract(x), feature_backend.extract(y)
            )
            backend_ids["rfid"] = feature_backend.id
        else:
            raise ValueError(f"unknown metric {name!r}")
    return MetricReport.from_per_image(
        per_image, scalars=scalars, flags=flags, unavailable=tuple(unavailable),
        backend_ids=backend_ids,
    )
