"""Two-stage distillation training, checkpointing, and the from-scratch baseline."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_archive, save_archive
from .config import TrainStage
from .core import (
    ImageBatch,
    LatentBatch,
    LatentSource,
    Resolution,
    ValueRange,
    torch_generator,
)
from .data import DatasetSpec, FolderLoader, build_loader, resize_images
from .losses import LossFn, LossSpec, build_loss
from .student import StudentConfig, StudentEncoder, build_student
from .teacher import GaussianLatent, TeacherBundle, sample_latent, split_gaussian

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class TrainLog:
    """Append-only JSONL of per-step records; resumable runs keep numbering."""

    def __init__(self, path: Path | None, resume: bool = False) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if resume and self.path.exists():
                self.records = self.read(self.path)
            else:
                self.path.write_text("")

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @property
    def last_step(self) -> int:
        return self.records[-1]["step"] if self.records else -1

    @staticmethod
    def read(path: Path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


def _optimizer_state_arrays(opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    arrays = {}
    for gi, group in enumerate(opt.state_dict()["state"].items()):
        pid, state = group
        for key, val in state.items():
            if isinstance(val, torch.Tensor):
                arrays[f"opt/{pid}/{key}"] = val.detach().cpu().numpy()
            else:
                arrays[f"opt/{pid}/{key}"] = np.asarray(val)
    return arrays


def _restore_optimizer(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    sd = opt.state_dict()
    state: dict = {}
    for name, arr in arrays.items():
        if not name.startswith("opt/"):
            continue
        _, pid, key = name.split("/", 2)
        entry = state.setdefault(int(pid), {})
        entry[key] = torch.from_numpy(arr.copy()) if arr.ndim else torch.tensor(arr.item())
    sd["state"] = state
    opt.load_state_dict(sd)


def save_student_checkpoint(
    path: Path,
    student: StudentEncoder,
    step: int,
    stage_index: int,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    arrays = {
        f"model/{name}": p.detach().cpu().numpy() for name, p in student.state_dict().items()
    }
    if optimizer is not None:
        arrays.update(_optimizer_state_arrays(optimizer))
    meta = {
        "kind": "student",
        "step": step,
        "stage_index": stage_index,
        "seed": student.seed,
        "student_config": student.config.to_dict(),
    }
    save_archive(path, arrays, meta)


def load_student_checkpoint(
    path: Path, optimizer: torch.optim.Optimizer | None = None
) -> tuple[StudentEncoder, dict]:
    arrays, meta = load_archive(path)
    cfg = StudentConfig(**meta["student_config"])
    student = StudentEncoder(cfg, seed=meta.get("seed"))
    state = {
        name[len("model/") :]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("model/")
    }
    student.load_state_dict(state)
    if optimizer is not None:
        _restore_optimizer(optimizer, arrays)
    return student, meta


def _cycle(loader: FolderLoader) -> Iterator[ImageBatch]:
    while True:
        yield from loader


@dataclass
class DistillResult:
    student: StudentEncoder
    log: TrainLog
    final_checkpoint: Path | None


def distill(
    student: StudentEncoder,
    teacher: TeacherBundle,
    stages: Sequence[TrainStage],
    loss_spec: LossSpec,
    data: DatasetSpec,
    seed: int = 0,
    output_dir: Path | None = None,
    checkpoint_every: int = 1000,
    perceptual=None,
    resume_from: Path | None = None,
    target_mode: str = "sampled",
) -> DistillResult:
    """Train the student to regress the teacher's latents, stage by stage.

    Batches are resized to each stage's resolution; the regression target is
    the teacher's sampled latent (or its mean with target_mode='mean'). The
    teacher is frozen throughout. NaN losses abort with the last-good
    checkpoint preserved; checkpoints are written every ``checkpoint_every``
    global steps and at the end.
    """
    if target_mode not in ("sampled", "mean"):
        raise ValueError("target_mode must be 'sampled' or 'mean'")
    out = Path(output_dir) if output_dir is not None else None
    loss_fn: LossFn = build_loss(loss_spec, teacher=teacher, perceptual=perceptual)

    start_step = 0
    resume_arrays: dict[str, np.ndarray] | None = None
    if resume_from is not None:
        student, meta = load_student_checkpoint(resume_from)
        resume_arrays, _ = load_archive(resume_from)
        start_step = meta["step"] + 1
    train_log = TrainLog(out / "train_log.jsonl" if out else None, resume=resume_from is not None)

    total_steps = sum(s.steps for s in stages)
    if total_steps == 0:
        return DistillResult(student, train_log, None)

    sample_gen = torch_generator(seed * 7919 + 1)
    student.train()
    last_good: Path | None = resume_from
    optimizer: torch.optim.Optimizer | None = None
    global_step = 0
    final_path = out / "student_final.ckpt" if out else None

    for stage_index, stage in enumerate(stages):
        stage_end = global_step + stage.steps
        if stage.steps == 0 or stage_end <= start_step:
            global_step = stage_end
            continue
        # Fresh Adam per stage: the two-stage schedule keeps identical settings
        # and only changes the resolution, so no state carries over.
        optimizer = torch.optim.Adam(student.parameters(), lr=stage.lr, betas=(0.9, 0.999))
        if resume_arrays is not None:
            _restore_optimizer(optimizer, resume_arrays)
            resume_arrays = None
        loader = build_loader(data, stage.batch_size, shuffle=True, seed=seed + stage_index)
        batches = _cycle(loader)
        while global_step < stage_end:
            if global_step < start_step:
                global_step += 1
                continue
            batch = resize_images(next(batches), stage.resolution)
            with torch.no_grad():
                gaussian = teacher.encode(batch)
                if target_mode == "sampled":
                    z_t = sample_latent(gaussian, sample_gen).data
                else:
                    z_t = gaussian.mean
            z_s = student(batch.data)
            total, terms = loss_fn(z_s, z_t, batch, gaussian)
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at step {global_step}; "
                    f"last good checkpoint: {last_good or 'none'}"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            train_log.append(
                {
                    "step": global_step,
                    "stage": stage_index,
                    "loss": float(total.detach()),
                    "terms": terms,
                    "lr": stage.lr,
                    "wall_time": time.time(),
                }
            )
            global_step += 1
            if out is not None and checkpoint_every > 0 and global_step % checkpoint_every == 0:
                ckpt = out / f"ckpt_step{global_step:07d}.ckpt"
                save_student_checkpoint(ckpt, student, global_step - 1, stage_index, optimizer)
                last_good = ckpt

    student.eval()
    if final_path is not None:
        save_student_checkpoint(final_path, student, global_step - 1, len(stages) - 1, optimizer)
    return DistillResult(student, train_log, final_path)


# ---------------------------------------------------------------------------
# From-scratch VAE baseline (capacity-matched control for the sweeps)
# ---------------------------------------------------------------------------


@dataclass
class ScratchConfig:
    hidden: int = 64          # channels double per stage, capped at 128
    latent_channels: int = 16
    kl_weight: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hidden < 4:
            raise ValueError("hidden must be at least 4")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")


class ScratchEncoderNet(nn.Module):
    def __init__(self, hidden: int, latent_channels: int) -> None:
        super().__init__()
        c1, c2, c3 = hidden, min(2 * hidden, 128), min(4 * hidden, 128)
        self.stem = nn.Conv2d(3, c1, 3, padding=1)
        self.d1 = nn.Conv2d(c1, c1, 3, stride=2, padding=1)
        self.d2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.d3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.head = nn.Conv2d(c3, 2 * latent_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.stem(x))
        h = F.silu(self.d1(h))
        h = F.silu(self.d2(h))
        h = F.silu(self.d3(h))
        return self.head(h)


class ScratchDecoderNet(nn.Module):
    def __init__(self, hidden: int, latent_channels: int) -> None:
        super().__init__()
        c1, c2, c3 = hidden, min(2 * hidden, 128), min(4 * hidden, 128)
        self.stem = nn.Conv2d(latent_channels, c3, 3, padding=1)
        self.u1 = nn.Conv2d(c3, c2, 3, padding=1)
        self.u2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.u3 = nn.Conv2d(c1, c1, 3, padding=1)
        self.out = nn.Conv2d(c1, 3, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.stem(z))
        h = F.silu(self.u1(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = F.silu(self.u2(F.interpolate(h, scale_factor=2, mode="nearest")))
        h = F.silu(self.u3(F.interpolate(h, scale_factor=2, mode="nearest")))
        return torch.tanh(self.out(h))


def scratch_bundle(enc: ScratchEncoderNet, dec: ScratchDecoderNet, name: str) -> TeacherBundle:
    """Wrap trained scratch nets in the standard encoder/decoder contract."""

    def encode(batch: ImageBatch) -> GaussianLatent:
        batch.require_range(ValueRange.SYMMETRIC)
        batch.resolution.require_divisible(8)
        with torch.no_grad():
            raw = enc(batch.data)
        return split_gaussian(raw, std_transform="logvar")

    def decode(lat: LatentBatch) -> ImageBatch:
        out = dec(lat.data)
        return ImageBatch.from_tensor(out, ValueRange.SYMMETRIC)

    return TeacherBundle(name=name, encode=encode, decode=decode, torch_modules=(enc, dec))


@dataclass
class ScratchResult:
    bundle: TeacherBundle
    encoder: ScratchEncoderNet
    decoder: ScratchDecoderNet
    log: TrainLog


def train_scratch_autoencoder(
    cfg: ScratchConfig,
    data: DatasetSpec,
    stage: TrainStage,
    output_dir: Path | None = None,
) -> ScratchResult:
    """Train a conventional VAE at one fixed resolution (reconstruction + small KL).

    The result satisfies the teacher shape contract so the resolution sweep can
    evaluate it exactly like the teacher and the distilled student.
    """
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        enc = ScratchEncoderNet(cfg.hidden, cfg.latent_channels)
        dec = ScratchDecoderNet(cfg.hidden, cfg.latent_channels)
    out = Path(output_dir) if output_dir is not None else None
    train_log = TrainLog(out / "scratch_log.jsonl" if out else None)
    if stage.steps > 0:
        opt = torch.optim.Adam(
            list(enc.parameters()) + list(dec.parameters()), lr=stage.lr, betas=(0.9, 0.999)
        )
        loader = build_loader(data, stage.batch_size, shuffle=True, seed=cfg.seed)
        batches = _cycle(loader)
        gen = torch_generator(cfg.seed + 17)
        for step in range(stage.steps):
            batch = resize_images(next(batches), stage.resolution)
            raw = enc(batch.data)
            mu, logvar = raw[:, : cfg.latent_channels], raw[:, cfg.latent_channels :]
            logvar = logvar.clamp(-12.0, 4.0)
            std = torch.exp(0.5 * logvar)
            z = mu + std * torch.randn(mu.shape, generator=gen)
            rec = dec(z)
            rec_loss = ((rec - batch.data) ** 2).mean()
            kl = 0.5 * (mu**2 + logvar.exp() - 1.0 - logvar).mean()
            total = rec_loss + cfg.kl_weight * kl
            if not torch.isfinite(total):
                raise TrainingError(f"non-finite scratch loss at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            train_log.append(
                {
                    "step": step,
                    "stage": 0,
                    "loss": float(total.detach()),
                    "terms": {"recon": float(rec_loss.detach()), "kl": float(kl.detach())},
                    "lr": stage.lr,
                    "wall_time": time.time(),
                }
            )
    for p in enc.parameters():
        p.requires_grad_(False)
    for p in dec.parameters():
        p.requires_grad_(False)
    enc.eval()
    dec.eval()
    name = f"scratch(h={cfg.hidden},res={stage.resolution})"
    bundle = scratch_bundle(enc, dec, name)
    if out is not None:
        arrays = {f"enc/{k}": v.detach().numpy() for k, v in enc.state_dict().items()}
        arrays.update({f"dec/{k}": v.detach().numpy() for k, v in dec.state_dict().items()})
        save_archive(
            out / "scratch_final.ckpt",
            arrays,
            {
                "kind": "scratch_vae",
                "seed": cfg.seed,
                "hidden": cfg.hidden,
                "latent_channels": cfg.latent_channels,
                "trained_resolution": str(stage.resolution),
            },
        )
    return ScratchResult(bundle=bundle, encoder=enc, decoder=dec, log=train_log)


def load_scratch_checkpoint(path: Path) -> ScratchResult:
    arrays, meta = load_archive(path)
    enc = ScratchEncoderNet(meta["hidden"], meta["latent_channels"])
    dec = ScratchDecoderNet(meta["hidden"], meta["latent_channels"])
    enc.load_state_dict(
        {k[len("enc/") :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("enc/")}
    )
    dec.load_state_dict(
        {k[len("dec/") :]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("dec/")}
    )
    for p in enc.parameters():
        p.requires_grad_(False)
    for p in dec.parameters():
        p.requires_grad_(False)
    enc.eval()
    dec.eval()
    name = f"scratch(h={meta['hidden']},res={meta['trained_resolution']})"
    return ScratchResult(bundle=scratch_bundle(enc, dec, name), encoder=enc, decoder=dec,
                         log=TrainLog(None))
