"""Piecewise window distillation of a trained drift field.

The unit time axis is split into K equal windows. For each window the
frozen teacher is integrated from the window startpoint with a few Euler
substeps, and the student regresses onto the window's average slope
(endpoint minus startpoint over the window width) at times sampled inside
the window. After training, sampling takes one Euler step per window.

Window solving shares ``flow.integrate``: endpoints are returned together
with the accumulated displacement, and chained windows reuse them, so the
sum of window displacements folded onto the chain start reproduces the
final endpoint bit-exactly, and a single window solved with the teacher's
full step count is bit-identical to ordinary full-trajectory sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import backbone as bb
from . import flow as fl
from . import numerics as nm
from .errors import DomainError, LengthError
from .numerics import Tensor
from .optim import Adam
from .synthvox import Utterance


@dataclass(frozen=True)
class WindowPartition:
    """K equal windows with boundaries t_k = k / K, k = 0..K."""

    k_windows: int

    def __post_init__(self):
        if self.k_windows < 1:
            raise DomainError(f"need at least one window, got {self.k_windows}")

    def boundaries(self) -> np.ndarray:
        return np.arange(self.k_windows + 1, dtype=np.float64) / self.k_windows

    def window(self, k: int) -> tuple[float, float]:
        """Bounds of window k (0-based)."""
        if not 0 <= k < self.k_windows:
            raise DomainError(f"window {k} outside 0..{self.k_windows - 1}")
        return k / self.k_windows, (k + 1) / self.k_windows


def window_startpoint(schedule: fl.FlowSchedule, z1: np.ndarray, eps: np.ndarray,
                      t: float) -> np.ndarray:
    """State at a window boundary, built from data and a fresh noise draw.

    vp: sqrt(1 - sigma^2(t)) z1 + sigma(t) eps with sigma(t) = 1 - t;
    linear: (1 - t) eps + t z1. Both hand back eps at t=0 and z1 at t=1.
    """
    return fl.interpolate(schedule, eps, z1, t)


@dataclass
class WindowSolve:
    """One teacher window solution: endpoints plus the exact displacement
    the integrator accumulated (z_end == z_start + displacement bit-wise)."""

    t_start: float
    t_end: float
    z_start: np.ndarray
    z_end: np.ndarray
    displacement: np.ndarray

    def slope(self) -> np.ndarray:
        return self.displacement / (self.t_end - self.t_start)


def teacher_window_endpoint(drift_fn: fl.DriftFn, z_start: np.ndarray,
                            t_start: float, t_end: float, substeps: int,
                            freeze_mask: np.ndarray | None = None) -> WindowSolve:
    """Integrate the frozen teacher across one window.

    The drift is evaluated on plain arrays outside any gradient tape, so no
    gradient can reach the teacher.
    """
    if not t_start < t_end:
        raise DomainError(f"window [{t_start}, {t_end}] is empty")
    z_end, delta = fl.integrate(drift_fn, z_start, t_start, t_end, substeps,
                                freeze_mask)
    return WindowSolve(t_start=t_start, t_end=t_end, z_start=z_start,
                       z_end=z_end, displacement=delta)


def solve_window_chain(drift_fn: fl.DriftFn, z0: np.ndarray,
                       partition: WindowPartition, substeps: int,
                       freeze_mask: np.ndarray | None = None) -> list[WindowSolve]:
    """Solve all windows consecutively, each starting at the previous
    endpoint (endpoints reused, displacements telescope)."""
    solves = []
    cur = z0
    for k in range(partition.k_windows):
        t0, t1 = partition.window(k)
        solve = teacher_window_endpoint(drift_fn, cur, t0, t1, substeps,
                                        freeze_mask)
        solves.append(solve)
        cur = solve.z_end
    return solves


def perflow_loss(drift_fn, solve: WindowSolve, t: float,
                 prompt_mask: np.ndarray) -> Tensor:
    """Least squares of the student drift against the window-average slope.

    The state is interpolated linearly between the window startpoint and
    the teacher endpoint at fraction (t - t_start) / (t_end - t_start);
    prompt frames are masked out of the loss exactly as in fm_loss.
    """
    if not solve.t_start < t <= solve.t_end:
        raise DomainError(f"t={t} outside ({solve.t_start}, {solve.t_end}]")
    target_mask = ~prompt_mask
    k = int(target_mask.sum())
    if k == 0:
        raise DomainError("window batch has no target frames")
    frac = (t - solve.t_start) / (solve.t_end - solve.t_start)
    z_t = (1.0 - frac) * solve.z_start + frac * solve.z_end
    v = drift_fn(nm.tensor(z_t), t)
    slope = solve.slope()
    mask = np.broadcast_to(target_mask[:, None], slope.shape).astype(np.float64)
    diff = nm.mul(nm.sub(v, slope), mask)
    return nm.mul(nm.sum_all(nm.mul(diff, diff)), 1.0 / k)


def distilled_sample(drift_fn: fl.DriftFn, z_init: np.ndarray,
                     partition: WindowPartition,
                     freeze_mask: np.ndarray | None = None) -> np.ndarray:
    """One Euler step per window: K drift evaluations in total."""
    cur = np.asarray(z_init, dtype=np.float64)
    for k in range(partition.k_windows):
        t0, t1 = partition.window(k)
        cur, _ = fl.integrate(drift_fn, cur, t0, t1, 1, freeze_mask)
    return cur


# ---------------------------------------------------------------------------
# distillation loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    k_windows: int = 8
    teacher_steps: int = 8  # Euler substeps per window when solving
    teacher_total_steps: int = 25  # reference full-trajectory step count
    steps: int = 2000
    lr: float = 5e-4
    warmup_steps: int = 100
    batch_size: int = 4
    seed: int = 0
    schedule: str = fl.LINEAR  # startpoint construction
    mode: str = "sparse"
    cfg_in_teacher: bool = False
    condition_dropout: bool = True
    loss_every: int = 50

    def __post_init__(self):
        if self.teacher_steps < 1:
            raise DomainError("teacher_steps must be >= 1")
        WindowPartition(self.k_windows)
        fl.FlowSchedule(self.schedule)

    def to_json(self) -> str:
        return json.dumps({"K": self.k_windows, "teacher_steps": self.teacher_steps,
                           "steps": self.steps, "seed": self.seed,
                           "schedule": self.schedule,
                           "teacher_total_steps": self.teacher_total_steps,
                           "lr": self.lr, "warmup_steps": self.warmup_steps,
                           "batch_size": self.batch_size, "mode": self.mode,
                           "cfg_in_teacher": self.cfg_in_teacher,
                           "condition_dropout": self.condition_dropout,
                           "loss_every": self.loss_every}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "DistillConfig":
        raw = json.loads(text)
        return cls(k_windows=raw["K"], teacher_steps=raw["teacher_steps"],
                   steps=raw["steps"], seed=raw["seed"], schedule=raw["schedule"],
                   teacher_total_steps=raw.get("teacher_total_steps", 25),
                   lr=raw.get("lr", 5e-4), warmup_steps=raw.get("warmup_steps", 100),
                   batch_size=raw.get("batch_size", 4), mode=raw.get("mode", "sparse"),
                   cfg_in_teacher=raw.get("cfg_in_teacher", False),
                   condition_dropout=raw.get("condition_dropout", True),
                   loss_every=raw.get("loss_every", 50))


@dataclass
class DistillResult:
    student_params: dict[str, Tensor]
    losses: list[tuple[int, float]]
    diverged: bool
    steps_run: int


def _teacher_drift(bconfig: bb.BackboneConfig, teacher_params: dict,
                   cond: bb.ConditionBundle, config: DistillConfig) -> fl.DriftFn:
    if config.cfg_in_teacher:
        from . import guidance as gd
        scales = gd.load_presets()["zeroshot"]
        return gd.guided_drift_fn(bconfig, teacher_params, cond, scales)

    def drift(z_values: np.ndarray, t: float) -> np.ndarray:
        out = bb.forward(bconfig, teacher_params, nm.tensor(z_values),
                         replace(cond, t=t))
        return out.data

    return drift


def distill(config: DistillConfig, bconfig: bb.BackboneConfig,
            teacher_params: dict[str, Tensor],
            dataset: list[Utterance]) -> DistillResult:
    """Train a student (warm-started from the teacher) on window slopes.

    The teacher is only ever evaluated on plain arrays and its parameters
    are never touched; the student owns a deep copy.
    """
    if not dataset:
        raise LengthError("dataset must be nonempty")
    student = {name: nm.parameter(p.data) for name, p in teacher_params.items()}
    names = sorted(student)
    opt = Adam([student[n] for n in names], lr=config.lr,
               warmup_steps=config.warmup_steps, decay_steps=config.steps)
    rng = np.random.default_rng((config.seed, 77))
    partition = WindowPartition(config.k_windows)
    schedule = fl.FlowSchedule(config.schedule)
    losses: list[tuple[int, float]] = []
    last_good = {n: student[n].data.copy() for n in names}
    diverged = False
    step = 0
    for step in range(1, config.steps + 1):
        picks = rng.integers(0, len(dataset), size=config.batch_size)
        with nm.GradTape() as tape:
            total = None
            for idx in picks:
                utt = dataset[int(idx)]
                z1 = utt.latents.values
                prompt_mask, _ = bb.split_prompt_target(
                    z1, rng, bconfig.mask_ratio_range)
                labels = fl.labels_for_mode(config.mode, utt, rng)
                cond = bb.ConditionBundle(align_labels=labels, prompt_latents=z1,
                                          prompt_mask=prompt_mask,
                                          t=float(rng.uniform()))
                if config.condition_dropout:
                    cond = bb.apply_condition_dropout(cond, rng, bconfig)
                k = int(rng.integers(0, config.k_windows))
                t0, t1 = partition.window(k)
                eps = rng.standard_normal(z1.shape)
                z_start = window_startpoint(schedule, z1, eps, t0)
                z_start = np.where(prompt_mask[:, None], z1, z_start)
                teacher = _teacher_drift(bconfig, teacher_params, cond, config)
                solve = teacher_window_endpoint(teacher, z_start, t0, t1,
                                                config.teacher_steps, prompt_mask)
                # t uniform over the half-open window (t0, t1]
                t = t1 - float(rng.uniform()) * (t1 - t0)
                student_drift = fl.backbone_drift(bconfig, student, cond)
                loss = perflow_loss(student_drift, solve, t, prompt_mask)
                total = loss if total is None else nm.add(total, loss)
            total = nm.mul(total, 1.0 / config.batch_size)
            tape.backward(total)
        value = total.item()
        if not np.isfinite(value):
            for n in names:
                student[n].data = last_good[n].copy()
                student[n].grad = None
            diverged = True
            break
        opt.step()
        if step % config.loss_every == 0 or step == 1:
            losses.append((step, value))
        if step % 500 == 0:
            last_good = {n: student[n].data.copy() for n in names}
    return DistillResult(student_params=student, losses=losses,
                         diverged=diverged, steps_run=step)
