"""Mini-batch training with per-epoch checkpoints and a per-term loss log."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .model import Adam, LocalizationModel, loss_terms
from .synthdata import SceneSet

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "ssl", "avpm", "sra", "total")


class TrainingDiverged(FloatingPointError):
    """A loss term or gradient went non-finite."""


@dataclass
class TrainState:
    model: LocalizationModel
    optimizer: Adam
    step: int = 0
    log_rows: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def steps_per_epoch(cfg: RunConfig, n: int) -> int:
    spe = n // cfg.batch_size
    if spe == 0:
        raise ValueError(f"dataset of {n} samples is smaller than one batch of {cfg.batch_size}")
    return spe


def total_steps(cfg: RunConfig, n: int) -> int:
    total = cfg.epochs * steps_per_epoch(cfg, n)
    return min(total, cfg.max_steps) if cfg.max_steps > 0 else total


def _batch_rng(cfg: RunConfig) -> np.random.Generator:
    # kept separate from the weight-init stream so the two never interact
    return np.random.default_rng([cfg.seed, 1])


def snapshot(state: TrainState, rng_state: dict) -> Checkpoint:
    opt = state.optimizer
    return Checkpoint(
        config=state.model.cfg,
        params={k: p.data.copy() for k, p in state.model.parameters().items()},
        adam_m={k: v.copy() for k, v in opt.m.items()},
        adam_v={k: v.copy() for k, v in opt.v.items()},
        adam_steps=opt.step_count,
        step=state.step,
        rng_state=rng_state,
    )


def restore(ckpt: Checkpoint) -> TrainState:
    cfg = ckpt.config
    model = LocalizationModel(cfg)
    model.load_parameters(ckpt.params)
    opt = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
    opt.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
    opt.step_count = ckpt.adam_steps
    return TrainState(model, opt, step=ckpt.step)


def format_row(row: dict) -> list[str]:
    return [str(row["step"]), str(row["epoch"])] + [repr(float(row[k])) for k in LOG_FIELDS[2:]]


def write_loss_log(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for row in rows:
            w.writerow(format_row(row))


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), "epoch": int(r["epoch"]),
                 **{k: float(r[k]) for k in LOG_FIELDS[2:]}} for r in csv.DictReader(fh)]


def train_step(state: TrainState, images, spectrograms) -> dict[str, float]:
    cfg = state.model.cfg
    with Tape() as tape:
        out = state.model.forward(images, spectrograms)
        try:
            terms = loss_terms(out, cfg.loss_config())
        except FloatingPointError as exc:
            raise TrainingDiverged(f"step {state.step + 1}: {exc}") from None
    grads = tape.backward(terms["total"])
    for name, p in state.model.parameters().items():
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"step {state.step + 1}: gradient of {name} is not finite")
    state.optimizer.step(grads)
    state.step += 1
    return {k: v.item() for k, v in terms.items()}


def train(cfg: RunConfig, data: SceneSet, out_dir=None, resume=None, progress=None) -> TrainState:
    """Train on ``data``; ``resume`` may be a checkpoint object or path.

    With ``out_dir`` set, writes ``checkpoints/epoch_NNN.ckpt`` after every
    epoch, ``checkpoints/final.ckpt`` at the end and ``loss_log.csv``.
    """
    spe = steps_per_epoch(cfg, len(data))
    rng = _batch_rng(cfg)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        # the run length may be extended on resume; everything else must match
        if ckpt.config.replace(epochs=cfg.epochs, max_steps=cfg.max_steps) != cfg:
            raise ValueError("checkpoint config differs from the requested run config")
        state = restore(ckpt)
        state.model.cfg = cfg
        rng.bit_generator.state = ckpt.rng_state
        if out_dir is not None and (Path(out_dir) / "loss_log.csv").exists():
            state.log_rows = [r for r in read_loss_log(Path(out_dir) / "loss_log.csv") if r["step"] <= state.step]
    else:
        model = LocalizationModel(cfg)
        state = TrainState(model, Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2)))

    last = total_steps(cfg, len(data))
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    # the rng state at the start of the current epoch is what a checkpoint stores;
    # resuming replays that epoch's permutation and skips the finished batches
    epoch_state = rng.bit_generator.state
    try:
        while state.step < last:
            epoch, offset = divmod(state.step, spe)
            perm = rng.permutation(len(data))
            for b in range(offset, spe):
                if state.step >= last:
                    break
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                terms = train_step(state, data.images[idx], data.spectrograms[idx])
                state.log_rows.append({"step": state.step, "epoch": epoch, **terms})
                if progress is not None:
                    progress(state.step, terms)
            if state.step % spe == 0:
                epoch_state = rng.bit_generator.state
                if ckpt_dir is not None:
                    state.checkpoints.append(save_checkpoint(snapshot(state, epoch_state),
                                                             ckpt_dir / f"epoch_{epoch + 1:03d}.ckpt"))
            else:
                rng.bit_generator.state = epoch_state
    finally:
        # the log is written even when training aborts, so the failing step is inspectable
        if out_dir is not None:
            write_loss_log(state.log_rows, Path(out_dir) / "loss_log.csv")
    if ckpt_dir is not None:
        state.checkpoints.append(save_checkpoint(snapshot(state, epoch_state), ckpt_dir / "final.ckpt"))
    return state
