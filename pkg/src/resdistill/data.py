"""Image-folder ingestion, resizing, and seed-reproducible evaluation subsets."""

from __future__ import annotations

import hashlib
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import ImageBatch, Resolution, ValueRange, clamp_to_range, convert_range

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
RESIZE_METHODS = ("bilinear", "bicubic", "nearest")


@dataclass
class DatasetSpec:
    root: Path
    split: str = "val"
    base_resolution: Resolution = Resolution(256, 256)
    eval_subset_size: int = 64
    subset_seed: int = 0

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be 'train' or 'val', got {self.split!r}")


@dataclass(frozen=True)
class SubsetManifest:
    """Ordered evaluation file list; regeneration with the same inputs is identical."""

    entries: tuple[str, ...]
    seed: int
    checksum: str

    def __post_init__(self) -> None:
        expected = checksum_entries(self.entries)
        if self.checksum != expected:
            raise ValueError("manifest checksum does not match its entries")


def checksum_entries(entries: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(entries).encode()).hexdigest()


def list_images(root: Path) -> list[str]:
    """Relative paths of all images under root (flat or class subfolders), sorted."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    found = [
        p.relative_to(root).as_posix()
        for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    ]
    return sorted(found)


def resize_images(
    batch: ImageBatch,
    target: Resolution,
    method: str = "bilinear",
    antialias: bool = True,
) -> ImageBatch:
    """Resize to ``target``; same-resolution calls are the exact identity.

    ``antialias`` applies only when at least one side shrinks and the method
    supports it (bilinear/bicubic). Values are clamped back to the declared
    range afterwards since bicubic interpolation can overshoot.
    """
    if method not in RESIZE_METHODS:
        raise ValueError(f"unknown resize method {method!r}, expected one of {RESIZE_METHODS}")
    if target == batch.resolution:
        return batch
    shrinks = target.height < batch.resolution.height or target.width < batch.resolution.width
    use_aa = bool(antialias) and shrinks and method in ("bilinear", "bicubic")
    kwargs = {} if method == "nearest" else {"align_corners": False, "antialias": use_aa}
    data = F.interpolate(batch.data, size=target.size, mode=method, **kwargs)
    return clamp_to_range(ImageBatch(data, batch.value_range, target))


def load_image_tensor(path: Path, base_resolution: Resolution) -> torch.Tensor:
    """Decode one image to a (3, H, W) tensor in [-1, 1] at base resolution.

    Non-square inputs are center-cropped to a square before resizing.
    """
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    t = torch.from_numpy(arr).permute(2, 0, 1)
    h, w = t.shape[-2:]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    t = t[:, top : top + side, left : left + side]
    batch = ImageBatch(t.unsqueeze(0), ValueRange.UNIT, Resolution(side, side))
    batch = resize_images(batch, base_resolution)
    return convert_range(batch, ValueRange.SYMMETRIC).data[0]


class FolderLoader:
    """Iterates ImageBatches at base resolution in [-1, 1].

    Order is a deterministic function of (paths, seed, epoch); re-iterating
    advances the epoch so training can cycle without repeating batch order.
    Undecodable files are skipped with a warning.
    """

    def __init__(
        self,
        spec: DatasetSpec,
        batch_size: int,
        shuffle: bool = False,
        seed: int = 0,
        paths: Sequence[str] | None = None,
    ) -> None:
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.spec = spec
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.seed = seed
        self.paths = list(paths) if paths is not None else list_images(spec.root)
        if not self.paths:
            raise ValueError(f"no decodable images found under {spec.root}")
        self.epoch = 0

    def __len__(self) -> int:
        return (len(self.paths) + self.batch_size - 1) // self.batch_size

    def __iter__(self) -> Iterator[ImageBatch]:
        order = list(self.paths)
        if self.shuffle:
            random.Random(self.seed * 1_000_003 + self.epoch).shuffle(order)
        self.epoch += 1
        chunk: list[torch.Tensor] = []
        for rel in order:
            try:
                chunk.append(load_image_tensor(self.spec.root / rel, self.spec.base_resolution))
            except (OSError, ValueError) as exc:
                log.warning("skipping undecodable image %s: %s", rel, exc)
                continue
            if len(chunk) == self.batch_size:
                yield ImageBatch(torch.stack(chunk), ValueRange.SYMMETRIC, self.spec.base_resolution)
                chunk = []
        if chunk:
            yield ImageBatch(torch.stack(chunk), ValueRange.SYMMETRIC, self.spec.base_resolution)


def build_loader(
    spec: DatasetSpec,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    paths: Sequence[str] | None = None,
) -> FolderLoader:
    return FolderLoader(spec, batch_size, shuffle=shuffle, seed=seed, paths=paths)


def make_eval_subset(spec: DatasetSpec) -> SubsetManifest:
    """Deterministic sample without replacement from the validation split."""
    if spec.split != "val":
        raise ValueError("evaluation subsets are drawn from the val split only")
    if spec.eval_subset_size <= 0:
        raise ValueError(f"eval_subset_size must be positive, got {spec.eval_subset_size}")
    population = list_images(spec.root)
    if spec.eval_subset_size > len(population):
        raise ValueError(
            f"requested subset of {spec.eval_subset_size} from only {len(population)} images"
        )
    # Fisher-Yates permutation under the seeded generator, take first k.
    random.Random(spec.subset_seed).shuffle(population)
    entries = tuple(population[: spec.eval_subset_size])
    return SubsetManifest(entries=entries, seed=spec.subset_seed, checksum=checksum_entries(entries))


def save_manifest(manifest: SubsetManifest, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(manifest.entries) + "\n")
    path.with_suffix(path.suffix + ".sha256").write_text(f"{manifest.checksum} seed={manifest.seed}\n")


def load_manifest(path: Path) -> SubsetManifest:
    path = Path(path)
    entries = tuple(line for line in path.read_text().splitlines() if line)
    sidecar = path.with_suffix(path.suffix + ".sha256").read_text().split()
    checksum, seed = sidecar[0], int(sidecar[1].split("=", 1)[1])
    if checksum_entries(entries) != checksum:
        raise ValueError(f"manifest {path} does not match its checksum sidecar")
    return SubsetManifest(entries=entries, seed=seed, checksum=checksum)


def manifest_batches(
    spec: DatasetSpec, manifest: SubsetManifest, batch_size: int
) -> Callable[[], Iterator[ImageBatch]]:
    """Factory yielding the manifest images in fixed order, for repeatable sweeps."""

    def factory() -> Iterator[ImageBatch]:
        return iter(FolderLoader(spec, batch_size, shuffle=False, paths=manifest.entries))

    return factory


def synthetic_images(n: int, resolution: Resolution | int, seed: int) -> torch.Tensor:
    """Generate (n, 3, H, W) images in [-1, 1] spanning a wide smoothness range.

    Each image is noise blurred by a random number of passes plus a random
    linear ramp, so local gradient statistics vary strongly across the set.
    """
    res = resolution if isinstance(resolution, Resolution) else Resolution.square(resolution)
    g = torch.Generator().manual_seed(seed)
    yy, xx = torch.meshgrid(
        torch.linspace(-1, 1, res.height), torch.linspace(-1, 1, res.width), indexing="ij"
    )
    imgs = []
    for _ in range(n):
        x = torch.randn(1, 3, res.height, res.width, generator=g)
        for _ in range(int(torch.randint(0, 8, (1,), generator=g).item())):
            x = F.avg_pool2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), 3, stride=1)
        ramp = torch.randn(2, generator=g) * 0.6
        amp = 0.2 + 0.6 * torch.rand(1, generator=g).item()
        x = x / (x.std() + 1e-6) * amp + ramp[0] * xx + ramp[1] * yy
        imgs.append(x.clamp(-1.0, 1.0))
    return torch.cat(imgs)


def make_synthetic_dataset(root: Path, n: int, resolution: Resolution | int, seed: int) -> list[str]:
    """Write n synthetic PNGs under root; returns the relative file names."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    res = resolution if isinstance(resolution, Resolution) else Resolution.square(resolution)
    imgs = synthetic_images(n, res, seed)
    names = []
    for i in range(n):
        arr = ((imgs[i] + 1.0) * 127.5).round().clamp(0, 255).byte()
        Image.fromarray(arr.permute(1, 2, 0).numpy()).save(root / f"img_{i:04d}.png")
        names.append(f"img_{i:04d}.png")
    return names
