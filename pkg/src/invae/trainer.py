"""Two-stage invariance-constrained training.

Stage 1 minimizes plain reconstruction error over the pooled domains.
Stage 2 standardizes the stage-1 encoder outputs and minimizes
reconstruction plus ``lam`` times the configured invariance penalty, with
every step drawing an equal share of the batch from each domain. Linear
pipelines skip the split and optimize one linear autoencoder jointly.

The optimized objective is the expected squared reconstruction *norm*
(output dimension times the elementwise MSE) plus the penalty, so the
penalty weight means the same thing regardless of the observation
dimension; logs still record the elementwise MSE.

Runs are deterministic per (config, seed): batches, init, and reduction
order are all fixed.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .invariance import PenaltyConfig, total_penalty_node
from .models import Stage2Autoencoder, _Model
from .numcore import (
    AdamState,
    NumericError,
    PlateauSchedule,
    Tape,
    adam_step,
    plateau_update,
)

__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainResult",
    "TrainingDivergedError",
    "train_stage1",
    "train_stage2",
    "train_linear_joint",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    batch_size: int = 1024
    max_steps: int = 2000
    lr0: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    plateau_cooldown: int = 10
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-4
    steps_per_epoch: int = 50
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    seed: int = 0
    stage: int = 2

    def validate(self) -> None:
        if self.max_steps < 1:
            raise ValueError("TrainConfig: max_steps must be >= 1")
        if self.batch_size < 2 * self.penalty.top_k:
            raise ValueError(
                "TrainConfig: batch_size must be >= 2 * penalty.top_k"
            )
        if self.steps_per_epoch < 1:
            raise ValueError("TrainConfig: steps_per_epoch must be >= 1")


@dataclass
class TrainLog:
    recon: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.recon)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "recon_loss", "penalty", "lr"])
            for i in range(self.steps):
                writer.writerow(
                    [i, f"{self.recon[i]:.17g}", f"{self.penalty[i]:.17g}", f"{self.lr[i]:.17g}"]
                )
        return path


@dataclass
class TrainResult:
    model: _Model
    log: TrainLog
    final_recon: float
    final_penalty: float
    meta: dict = field(default_factory=dict)


def _batch_quota(batch_size: int, k: int) -> list[int]:
    """Equal per-domain split; the remainder goes to the earliest domains."""
    base = batch_size // k
    rem = batch_size - base * k
    return [base + (1 if j < rem else 0) for j in range(k)]


def _run(
    model: _Model,
    x_domains: list[np.ndarray],
    config: TrainConfig,
    apply_penalty: bool,
) -> TrainResult:
    config.validate()
    k = len(x_domains)
    if apply_penalty and k < 2:
        raise ValueError("cannot enforce invariance with fewer than 2 domains")
    quota = _batch_quota(config.batch_size, k)
    lam = config.penalty.lam
    rng = np.random.default_rng(config.seed)
    adam = AdamState(lr=config.lr0)
    sched = PlateauSchedule(
        lr=config.lr0,
        factor=config.plateau_factor,
        patience=config.plateau_patience,
        cooldown=config.plateau_cooldown,
        min_lr=config.min_lr,
        threshold=config.plateau_threshold,
    )
    log = TrainLog()
    epoch_losses: list[float] = []
    t0 = time.perf_counter()
    for step in range(config.max_steps):
        parts = []
        for j in range(k):
            idx = rng.integers(0, x_domains[j].shape[0], size=quota[j])
            parts.append(x_domains[j][idx])
        offsets = np.concatenate([[0], np.cumsum(quota)])

        try:
            tape = Tape()
            pnodes = model.bind(tape)
            xb = tape.constant(np.concatenate(parts, axis=0))
            zhat = model.encode_node(tape, xb, pnodes)
            xhat = model.decode_node(tape, zhat, pnodes)
            recon = tape.mse(xhat, xb)
            # objective in expected-squared-norm units: dims * mse keeps the
            # penalty weight comparable across output dimensions
            loss = tape.scale(recon, float(xb.value.shape[1]))
            pen_value = 0.0
            if apply_penalty:
                per_domain = [
                    tape.slice_rows(zhat, int(offsets[j]), int(offsets[j + 1]))
                    for j in range(k)
                ]
                pen = total_penalty_node(tape, per_domain, config.penalty)
                pen_value = float(pen.value)
                if lam != 0.0:
                    loss = tape.add(loss, tape.scale(pen, lam))
            total = float(loss.value)
            if not math.isfinite(total) or not math.isfinite(pen_value):
                raise TrainingDivergedError(step)
            tape.backward(loss)
        except NumericError as err:
            raise TrainingDivergedError(step) from err
        grads = {name: node.grad for name, node in pnodes.items()}
        adam.lr = sched.lr
        adam_step(adam, model.params, grads)

        log.recon.append(float(recon.value))
        log.penalty.append(pen_value)
        log.lr.append(sched.lr)
        epoch_losses.append(total)
        if (step + 1) % config.steps_per_epoch == 0:
            plateau_update(sched, float(np.mean(epoch_losses)))
            epoch_losses.clear()
    log.wall_seconds = time.perf_counter() - t0

    tail = min(config.steps_per_epoch, log.steps)
    return TrainResult(
        model=model,
        log=log,
        final_recon=float(np.mean(log.recon[-tail:])),
        final_penalty=float(np.mean(log.penalty[-tail:])),
        meta={"seed": config.seed, "steps": log.steps},
    )


def train_stage1(
    x_domains: list[np.ndarray], model: _Model, config: TrainConfig
) -> TrainResult:
    """Plain reconstruction training on the pooled domains."""
    return _run(model, x_domains, config, apply_penalty=False)


def train_linear_joint(
    x_domains: list[np.ndarray], model: _Model, config: TrainConfig
) -> TrainResult:
    """One linear autoencoder optimized jointly for reconstruction plus the
    invariance penalty (the linear-mixing protocol: no separate stages)."""
    return _run(model, x_domains, config, apply_penalty=True)


def train_stage2(
    xtilde_domains: list[np.ndarray],
    config: TrainConfig,
    model: Stage2Autoencoder | None = None,
    model_seed: int | None = None,
) -> TrainResult:
    """Invariance-constrained training on standardized stage-1 outputs.

    Inputs are standardized per dimension with pooled statistics; the mean
    and scale are returned in ``result.meta`` so evaluation can replay the
    exact transform. With ``penalty.lam == 0`` the penalty is still logged,
    just not added to the objective.
    """
    if len(xtilde_domains) < 2:
        raise ValueError("cannot enforce invariance with fewer than 2 domains")
    pooled = np.concatenate(xtilde_domains, axis=0)
    if not np.all(np.isfinite(pooled)):
        raise ValueError("train_stage2: stage-1 outputs contain non-finite values")
    mu = pooled.mean(axis=0)
    sigma = np.maximum(pooled.std(axis=0), 1e-12)
    standardized = [(x - mu) / sigma for x in xtilde_domains]
    d_in = pooled.shape[1]
    if model is None:
        seed = model_seed if model_seed is not None else config.seed + 1
        model = Stage2Autoencoder(d_in, seed=seed)
    result = _run(model, standardized, config, apply_penalty=True)
    result.meta["input_mean"] = mu.tolist()
    result.meta["input_std"] = sigma.tolist()
    return result
