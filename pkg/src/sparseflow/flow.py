"""Rectified-flow objective, interpolation schedules, and the Euler sampler.

Training regresses the drift network onto straight-line directions
(z1 - z0) at linearly interpolated points, with the loss masked to target
frames; prompt frames enter the state clean and contribute exactly zero
loss. Sampling integrates the learned drift with fixed-step Euler updates.

``integrate`` returns both the endpoint and the accumulated displacement,
with endpoint computed as start + displacement in one addition; folding a
chain of window displacements onto the start state therefore reproduces
the chained endpoint bit-exactly, which is what the window-distillation
telescoping identity relies on.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import alignment as al
from . import backbone as bb
from . import numerics as nm
from .errors import DomainError, LengthError, NumericsError
from .numerics import Tensor
from .optim import Adam
from .synthvox import TaskSpec, Utterance, render_utterance

LINEAR, VP = "linear", "vp"


@dataclass(frozen=True)
class FlowSchedule:
    """linear: z_t = (1-t) z0 + t z1; vp: z_t = sqrt(1-sigma^2) z1 + sigma z0
    with sigma(t) = 1 - t (so t=0 is pure noise under both kinds)."""

    kind: str = LINEAR

    def __post_init__(self):
        if self.kind not in (LINEAR, VP):
            raise DomainError(f"unknown schedule kind {self.kind!r}")

    def sigma(self, t: float) -> float:
        return 1.0 - t


def interpolate(schedule: FlowSchedule, z0, z1, t):
    """t may be a scalar or an (n,) per-frame vector; vectors broadcast
    over channels."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise LengthError(f"z0 {z0.shape} vs z1 {z1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"t={t} outside [0, 1]")
    if t.ndim == 1:
        t = t[:, None]
    if schedule.kind == LINEAR:
        return (1.0 - t) * z0 + t * z1
    s = 1.0 - t
    return np.sqrt(np.maximum(1.0 - s * s, 0.0)) * z1 + s * z0


@dataclass
class TrainBatch:
    """One example of the masked flow-matching objective.

    z0 and z1 are independent draws (noise and data); t is the example's
    interpolation time -- a scalar for a sequence example, or an (n,) vector
    when the n frames are themselves independent examples (the 1-D oracle
    task). Prompt frames (mask True) stay clean in the state and are
    excluded from the loss.
    """

    z1: np.ndarray  # (n, C) clean latents
    z0: np.ndarray  # (n, C) standard normal draw
    t: float | np.ndarray
    prompt_mask: np.ndarray  # (n,) bool
    cond: bb.ConditionBundle | None = None

    def __post_init__(self):
        if self.z1.shape != self.z0.shape:
            raise LengthError(f"z1 {self.z1.shape} vs z0 {self.z0.shape}")
        if self.prompt_mask.shape != (self.z1.shape[0],):
            raise LengthError("prompt_mask length mismatch")
        t = np.asarray(self.t, dtype=np.float64)
        if t.ndim not in (0, 1) or (t.ndim == 1 and t.shape != (self.z1.shape[0],)):
            raise LengthError(f"t must be scalar or ({self.z1.shape[0]},)")
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise DomainError("t outside [0, 1]")


DriftFn = Callable[[np.ndarray, float], np.ndarray]


def fm_loss(drift_fn: Callable[[Tensor, float], Tensor], batch: TrainBatch,
            schedule: FlowSchedule = FlowSchedule(LINEAR)) -> Tensor:
    """Mean over target frames of |(z1 - z0) - v(z_t, t)|^2.

    The state fed to the drift keeps prompt frames clean (their z1 values);
    only target frames are interpolated toward noise. Prompt-frame
    predictions are multiplied by an exact zero mask, so perturbing them
    cannot change the loss in any bit.
    """
    target_mask = ~batch.prompt_mask
    k = int(target_mask.sum())
    if k == 0:
        raise DomainError("batch has no target frames to learn from")
    z_t = interpolate(schedule, batch.z0, batch.z1, batch.t)
    z_t = np.where(batch.prompt_mask[:, None], batch.z1, z_t)
    v = drift_fn(nm.tensor(z_t), batch.t)
    direction = batch.z1 - batch.z0
    mask = np.broadcast_to(target_mask[:, None], direction.shape).astype(np.float64)
    diff = nm.mul(nm.sub(v, direction), mask)
    return nm.mul(nm.sum_all(nm.mul(diff, diff)), 1.0 / k)


def backbone_drift(config: bb.BackboneConfig, params: dict[str, Tensor],
                   cond: bb.ConditionBundle) -> Callable[[Tensor, float], Tensor]:
    """Adapter: close over a condition bundle, expose (z_t, t) -> drift."""

    def drift(z_t: Tensor, t: float) -> Tensor:
        return bb.forward(config, params, z_t, replace(cond, t=t))

    return drift


# ---------------------------------------------------------------------------
# Euler integration
# ---------------------------------------------------------------------------


def integrate(drift_fn: DriftFn, z_start: np.ndarray, t0: float, t1: float,
              substeps: int, freeze_mask: np.ndarray | None = None
              ) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step Euler over [t0, t1]; returns (endpoint, displacement).

    The state at each substep is start + accumulated displacement; frozen
    (prompt) frames have their drift zeroed, so they never move. The
    endpoint is start + displacement in a single final addition.
    """
    if substeps < 1:
        raise DomainError(f"substeps must be >= 1, got {substeps}")
    z_start = np.asarray(z_start, dtype=np.float64)
    h = (t1 - t0) / substeps
    delta = np.zeros_like(z_start)
    for i in range(substeps):
        t = t0 + i * h
        v = np.asarray(drift_fn(z_start + delta, t), dtype=np.float64)
        if v.shape != z_start.shape:
            raise LengthError(f"drift shape {v.shape} != state {z_start.shape}")
        if not np.isfinite(v).all():
            raise NumericsError(
                f"non-finite drift at t={t:.4f} (substep {i}/{substeps}, "
                f"max |z|={np.max(np.abs(z_start + delta)):.3e})")
        if freeze_mask is not None:
            v = np.where(freeze_mask[:, None], 0.0, v)
        delta += h * v
    return z_start + delta, delta


def euler_sample(drift_fn: DriftFn, z_init: np.ndarray, steps: int,
                 freeze_mask: np.ndarray | None = None) -> np.ndarray:
    """z <- z + (1/steps) v(z, i/steps) for i = 0..steps-1."""
    endpoint, _ = integrate(drift_fn, z_init, 0.0, 1.0, steps, freeze_mask)
    return endpoint


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    backbone: bb.BackboneConfig
    steps: int = 20_000
    lr: float = 1e-3  # paper scale: 5e-5
    warmup_steps: int = 500  # paper scale: 10k
    batch_size: int = 8
    seed: int = 0
    mode: str = al.MODE_SPARSE
    schedule: FlowSchedule = FlowSchedule(LINEAR)
    loss_every: int = 50
    checkpoint_every: int = 500
    condition_dropout: bool = True
    # duration augmentation: with this probability an example's regions are
    # rescaled by iid log-uniform factors and re-rendered, so canvases outside
    # the corpus duration range (stretch control, noisy duration predictors)
    # are in-distribution. Needs the task to re-render.
    stretch_prob: float = 0.0
    stretch_range: tuple[float, float] = (0.5, 2.0)
    task: TaskSpec | None = None

    def __post_init__(self):
        if self.mode not in al.MODES:
            raise DomainError(f"mode must be one of {al.MODES}")
        if not 0.0 <= self.stretch_prob <= 1.0:
            raise DomainError(f"stretch_prob must be in [0, 1], got {self.stretch_prob}")
        lo, hi = self.stretch_range
        if not 0.0 < lo <= hi:
            raise DomainError(f"stretch_range must satisfy 0 < lo <= hi, got {self.stretch_range}")
        if self.stretch_prob > 0.0 and self.task is None:
            raise DomainError("stretch_prob > 0 requires the task for re-rendering")


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    losses: list[tuple[int, float]]  # (step, loss) every loss_every steps
    diverged: bool
    steps_run: int


def labels_for_mode(mode: str, utt: Utterance, rng: np.random.Generator | None) -> np.ndarray:
    """Per-frame alignment labels under the given conditioning mode.

    sparse with an rng resamples anchors (training); sparse without an rng
    places anchors at region centers (inference); forced uses the full hard
    path; none masks everything.
    """
    hard = al.expand_hard(utt.tokens, utt.durations)
    if mode == al.MODE_FORCED:
        return hard.labels
    if mode == al.MODE_NONE:
        return np.full(hard.frames, al.MASK, dtype=np.int64)
    sp = al.sample_sparse(hard, rng) if rng is not None else al.center_sparse(hard)
    return sp.labels


def stretch_utterance(task: TaskSpec, utt: Utterance, factor_range: tuple[float, float],
                      rng: np.random.Generator) -> Utterance:
    """Rescale each region's duration by an iid log-uniform factor (floored at
    1 frame) and re-render; the renderer is exact for any duration vector, so
    the stretched pair is as clean a training target as the original."""
    lo, hi = factor_range
    factors = np.exp(rng.uniform(np.log(lo), np.log(hi), size=len(utt.durations)))
    durs = [max(1, int(np.rint(f * d))) for f, d in zip(factors, utt.durations)]
    return render_utterance(task, utt.tokens, durs, utt.style_id)


def make_train_batch(utt: Utterance, config: TrainConfig,
                     rng: np.random.Generator) -> TrainBatch:
    if config.stretch_prob > 0.0 and rng.uniform() < config.stretch_prob:
        utt = stretch_utterance(config.task, utt, config.stretch_range, rng)
    z1 = utt.latents.values
    prompt_mask, _ = bb.split_prompt_target(z1, rng, config.backbone.mask_ratio_range)
    labels = labels_for_mode(config.mode, utt, rng)
    cond = bb.ConditionBundle(align_labels=labels, prompt_latents=z1,
                              prompt_mask=prompt_mask, t=float(rng.uniform()))
    if config.condition_dropout:
        cond = bb.apply_condition_dropout(cond, rng, config.backbone)
    z0 = rng.standard_normal(z1.shape)
    return TrainBatch(z1=z1, z0=z0, t=cond.t, prompt_mask=prompt_mask, cond=cond)


def train_loop(config: TrainConfig, dataset: list[Utterance],
               checkpoint_dir=None) -> TrainResult:
    """Seeded Adam training; on NaN loss, aborts and restores the last
    parameters snapshotted at a checkpoint boundary."""
    if not dataset:
        raise LengthError("dataset must be nonempty")
    params = bb.init_backbone(config.backbone, seed=config.seed)
    names = sorted(params)
    opt = Adam([params[n] for n in names], lr=config.lr,
               warmup_steps=config.warmup_steps, decay_steps=config.steps)
    rng = np.random.default_rng((config.seed, 99))
    losses: list[tuple[int, float]] = []
    last_good = {n: params[n].data.copy() for n in names}
    diverged = False
    step = 0
    for step in range(1, config.steps + 1):
        picks = rng.integers(0, len(dataset), size=config.batch_size)
        with nm.GradTape() as tape:
            total = None
            for k in picks:
                batch = make_train_batch(dataset[int(k)], config, rng)
                drift = backbone_drift(config.backbone, params, batch.cond)
                loss = fm_loss(drift, batch, config.schedule)
                total = loss if total is None else nm.add(total, loss)
            total = nm.mul(total, 1.0 / config.batch_size)
            tape.backward(total)
        value = total.item()
        if not np.isfinite(value):
            for n in names:
                params[n].data = last_good[n].copy()
                params[n].grad = None
            diverged = True
            break
        opt.step()
        if step % config.loss_every == 0 or step == 1:
            losses.append((step, value))
        if step % config.checkpoint_every == 0:
            last_good = {n: params[n].data.copy() for n in names}
            if checkpoint_dir is not None:
                nm.save_checkpoint(checkpoint_dir, params, {"step": step})
    return TrainResult(params=params, losses=losses, diverged=diverged, steps_run=step)


def write_loss_csv(path, losses: list[tuple[int, float]]) -> None:
    """CSV trace: header then one (step, loss) row per recorded step."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in losses:
            writer.writerow([step, repr(loss)])
