"""MAE pre-training: AdamW, warmup plus cosine schedule, per-epoch checkpoints and resume.

A checkpoint directory holds, per finished epoch ``e``::

    epoch_{e:03d}.spnt    model parameters plus optimizer moments (SPNT)
    epoch_{e:03d}.json    step counter, rng state, configs, loss history
    loss.csv              one row per finished epoch
    config.json           resolved MAE config and schedule
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import channel_stats
from .mae import MAE, MAEConfig, random_mask
from .optim import AdamW, warmup_cosine_lr
from .snapshot import load_snapshot, save_snapshot
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256

    def steps_per_epoch(self, n_frames: int) -> int:
        return math.ceil(n_frames / self.batch_size)

    def lr_at(self, step: int, n_frames: int) -> float:
        spe = self.steps_per_epoch(n_frames)
        return warmup_cosine_lr(step, self.epochs * spe, self.warmup_epochs * spe, self.peak_lr)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainResult:
    model: MAE
    epoch_losses: list[float]
    step: int


def _checkpoint_paths(out: Path, epoch: int) -> tuple[Path, Path]:
    return out / f"epoch_{epoch:03d}.spnt", out / f"epoch_{epoch:03d}.json"


def latest_checkpoint(out: str | os.PathLike) -> int | None:
    """Highest epoch with both snapshot and manifest on disk, or None."""
    epochs = []
    for p in Path(out).glob("epoch_*.json"):
        e = int(p.stem.split("_")[1])
        if _checkpoint_paths(Path(out), e)[0].exists():
            epochs.append(e)
    return max(epochs) if epochs else None


def load_model(snapshot_path: str | os.PathLike, config: MAEConfig | None = None) -> MAE:
    """Rebuild a trained MAE from a checkpoint; the config is read from the manifest beside it."""
    snapshot_path = Path(snapshot_path)
    if config is None:
        manifest = json.loads(snapshot_path.with_suffix(".json").read_text())
        config = MAEConfig.from_dict(manifest["mae_config"])
    model = MAE(config)
    model.load_state_arrays(load_snapshot(snapshot_path))
    return model


def _write_loss_csv(out: Path, losses: list[float], lrs: list[float]) -> None:
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr_end"])
        for e, (loss, lr) in enumerate(zip(losses, lrs), start=1):
            w.writerow([e, repr(loss), repr(lr)])


def pretrain(
    frames: np.ndarray,
    config: MAEConfig,
    schedule: Schedule = Schedule(),
    seed: int = 0,
    out: str | os.PathLike | None = None,
    resume: bool = False,
    max_epochs: int | None = None,
) -> PretrainResult:
    """Train an MAE on ``frames`` (n, h, w, c) in [0, 1].

    With ``out`` a checkpoint is written after every epoch; ``resume`` picks up
    from the newest one and continues bit-identically.  ``max_epochs`` stops
    early (the schedule still spans ``schedule.epochs``).
    """
    frames = np.asarray(frames, dtype=np.float32)
    n = frames.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    fs = config.frame
    if frames.shape[1:] != (fs.h, fs.w, fs.c):
        raise ValueError(f"frames {frames.shape[1:]} do not match the configured {(fs.h, fs.w, fs.c)}")

    model = MAE(config, seed=seed)
    params = model.named_parameters()
    opt = AdamW(params, schedule.peak_lr, (schedule.beta1, schedule.beta2), weight_decay=schedule.weight_decay)
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    lrs: list[float] = []
    step = 0
    start_epoch = 0

    out_dir = Path(out) if out is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(
            json.dumps({"mae_config": config.to_dict(), "schedule": schedule.to_dict(), "seed": seed}, indent=2)
        )
        last = latest_checkpoint(out_dir) if resume else None
        if last is not None:
            snap_path, man_path = _checkpoint_paths(out_dir, last)
            manifest = json.loads(man_path.read_text())
            arrays = load_snapshot(snap_path)
            model.load_state_arrays(arrays)
            opt.load_state_arrays(arrays, manifest["step"])
            rng.bit_generator.state = manifest["rng_state"]
            losses = list(manifest["losses"])
            lrs = list(manifest["lrs"])
            step = manifest["step"]
            start_epoch = last
            log.info("resumed from epoch %d (step %d)", last, step)

    ch_mean, ch_std = channel_stats(frames)
    spe = schedule.steps_per_epoch(n)
    n_mask = fs.n_patches
    stop = schedule.epochs if max_epochs is None else min(schedule.epochs, max_epochs)
    for epoch in range(start_epoch, stop):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for b in range(spe):
            idx = perm[b * schedule.batch_size:(b + 1) * schedule.batch_size]
            masks = [random_mask(n_mask, config.mask_ratio, rng) for _ in idx]
            visible = np.stack([m[0] for m in masks])
            masked = np.stack([m[1] for m in masks])
            batch = frames[idx]
            lr = schedule.lr_at(step, n)
            opt.zero_grad()
            loss = model.loss(batch, model.forward(batch, visible), masked)
            value = loss.item()
            if not math.isfinite(value):
                msg = f"non-finite loss {value} at epoch {epoch + 1}, step {step}, lr {lr:.3g}"
                if out_dir is not None:
                    dump = out_dir / "nonfinite_dump.spnt"
                    save_snapshot(dump, model.state_arrays())
                    msg += f"; parameters dumped to {dump}"
                raise NonFiniteError(msg)
            loss.backward()
            opt.step(lr)
            step += 1
            total += value * len(idx)
            count += len(idx)
        losses.append(total / count)
        lrs.append(opt.state.lr)
        log.info("epoch %d/%d loss %.5f", epoch + 1, schedule.epochs, losses[-1])
        if out_dir is not None:
            snap_path, man_path = _checkpoint_paths(out_dir, epoch + 1)
            arrays = dict(model.state_arrays())
            arrays.update(opt.state_arrays())
            save_snapshot(snap_path, arrays)
            manifest = {
                "epoch": epoch + 1,
                "step": step,
                "rng_state": rng.bit_generator.state,
                "mae_config": config.to_dict(),
                "schedule": schedule.to_dict(),
                "seed": seed,
                "losses": losses,
                "lrs": lrs,
                "parameter_counts": model.parameter_counts(),
                "channel_mean": ch_mean.tolist(),
                "channel_std": ch_std.tolist(),
            }
            man_path.write_text(json.dumps(manifest, indent=2))
            _write_loss_csv(out_dir, losses, lrs)
    return PretrainResult(model, losses, step)
