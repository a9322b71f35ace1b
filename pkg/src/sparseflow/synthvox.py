"""Procedural stand-in for speech data.

Renders (tokens, durations, style) into latent frames through a fixed
closed-form recipe and decodes latents back to tokens by inverting that
recipe, so intelligibility and style metrics have an exact oracle. Base
patterns per token are kept at least ``SEPARATION`` apart, which leaves a
decision margin that absorbs the within-token ramp and small noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, LengthError, VocabError
from .numerics import load_array, save_array

SEPARATION = 1.0  # min pairwise distance between base patterns
STYLE_SEPARATION = 0.1  # min mean style-core distance between styles
DURATION_CHOICES = (1, 2, 3, 4, 5, 6)


@dataclass(frozen=True)
class TaskSpec:
    """Deterministic description of one synthetic token-to-latent task."""

    seed: int
    vocab_size: int
    latent_channels: int
    frame_rate: int
    style_count: int
    base_patterns: np.ndarray  # (V, C)
    style_gains: np.ndarray  # (S, C) in [0.5, 1.5]
    style_offsets: np.ndarray  # (S, C) in [-0.5, 0.5]
    style_freqs: np.ndarray  # (S,)
    style_phases: np.ndarray  # (S,)
    prosody_amplitude: float
    ramp_rate: float
    prosody_dir: np.ndarray  # (C,) unit vector
    ramp_dir: np.ndarray  # (C,) unit vector
    duration_means: np.ndarray  # (S, V) in [1.5, 5.5]
    standard_style: int = 0


def _style_core_distance(patterns: np.ndarray, g1, o1, g2, o2) -> float:
    """Mean over tokens of the distance between two styles' rendered cores."""
    diff = (g1 - g2) * patterns + (o1 - o2)
    return float(np.linalg.norm(diff, axis=1).mean())


def make_task_spec(seed: int = 0, vocab_size: int = 16, latent_channels: int = 8,
                   frame_rate: int = 25, style_count: int = 8,
                   prosody_amplitude: float = 0.2, ramp_rate: float = 0.1) -> TaskSpec:
    """Build a TaskSpec whose every array is a pure function of ``seed``.

    Base patterns are redrawn with an incremented sub-seed until all pairs
    are >= SEPARATION apart; styles likewise until every pair of styles
    moves the rendered core by >= STYLE_SEPARATION on average.
    """
    if vocab_size < 2 or style_count < 1 or latent_channels < 1:
        raise DomainError("need vocab_size >= 2, style_count >= 1, latent_channels >= 1")
    sub = 0
    while True:
        rng = np.random.default_rng((seed, 0, sub))
        patterns = rng.standard_normal((vocab_size, latent_channels))
        dists = np.linalg.norm(patterns[:, None] - patterns[None, :], axis=-1)
        if dists[np.triu_indices(vocab_size, k=1)].min() >= SEPARATION:
            break
        sub += 1

    sub = 0
    while True:
        rng = np.random.default_rng((seed, 1, sub))
        gains = rng.uniform(0.5, 1.5, (style_count, latent_channels))
        offsets = rng.uniform(-0.5, 0.5, (style_count, latent_channels))
        gains[0] = 1.0
        offsets[0] = 0.0
        ok = True
        for a in range(style_count):
            for b in range(a + 1, style_count):
                if _style_core_distance(patterns, gains[a], offsets[a],
                                        gains[b], offsets[b]) < STYLE_SEPARATION:
                    ok = False
        if ok:
            break
        sub += 1

    rng = np.random.default_rng((seed, 2))
    freqs = rng.uniform(0.5, 2.0, style_count)
    phases = rng.uniform(0.0, 2.0 * np.pi, style_count)
    prosody_dir = rng.standard_normal(latent_channels)
    prosody_dir /= np.linalg.norm(prosody_dir)
    ramp_dir = rng.standard_normal(latent_channels)
    ramp_dir /= np.linalg.norm(ramp_dir)
    duration_means = rng.uniform(1.5, 5.5, (style_count, vocab_size))

    return TaskSpec(seed=seed, vocab_size=vocab_size, latent_channels=latent_channels,
                    frame_rate=frame_rate, style_count=style_count,
                    base_patterns=patterns, style_gains=gains, style_offsets=offsets,
                    style_freqs=freqs, style_phases=phases,
                    prosody_amplitude=prosody_amplitude, ramp_rate=ramp_rate,
                    prosody_dir=prosody_dir, ramp_dir=ramp_dir,
                    duration_means=duration_means)


@dataclass
class LatentSequence:
    frames: int
    channels: int
    values: np.ndarray  # (frames, channels)

    def __post_init__(self):
        if self.values.shape != (self.frames, self.channels):
            raise LengthError(f"latent values {self.values.shape} do not match "
                              f"({self.frames}, {self.channels})")
        if self.frames < 1:
            raise LengthError("latent sequence must have at least one frame")
        if not np.isfinite(self.values).all():
            raise DomainError("latent values must be finite")


@dataclass
class Utterance:
    tokens: list[int]
    durations: list[int]
    style_id: int
    latents: LatentSequence = field(repr=False)

    def __post_init__(self):
        if len(self.tokens) != len(self.durations):
            raise LengthError(f"{len(self.tokens)} tokens vs {len(self.durations)} durations")
        if any(d < 1 for d in self.durations):
            raise DomainError("durations must be >= 1")
        if sum(self.durations) != self.latents.frames:
            raise LengthError("latent frames must equal sum of durations")


def _check_tokens(spec: TaskSpec, tokens) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise LengthError("tokens must be a nonempty 1-D sequence")
    if toks.min() < 0 or toks.max() >= spec.vocab_size:
        raise VocabError(f"token out of range [0, {spec.vocab_size})")
    return toks


def render(spec: TaskSpec, tokens, durations, style_id: int) -> LatentSequence:
    """Frame i of token v at within-token offset j:

    z_i = g_s * b_v + o_s + A sin(2 pi f_s i/n + phi_s) u + r (j/d_v) w
    """
    toks = _check_tokens(spec, tokens)
    durs = np.asarray(durations, dtype=np.int64)
    if durs.shape != toks.shape:
        raise LengthError(f"{toks.size} tokens vs {durs.size} durations")
    if durs.min() < 1:
        raise DomainError("durations must be >= 1")
    if not 0 <= style_id < spec.style_count:
        raise DomainError(f"style_id {style_id} out of range")

    n = int(durs.sum())
    v = np.repeat(toks, durs)  # token id per frame
    d = np.repeat(durs, durs).astype(np.float64)  # duration of owning token
    j = np.concatenate([np.arange(k) for k in durs]).astype(np.float64)
    i = np.arange(n, dtype=np.float64)

    g = spec.style_gains[style_id]
    o = spec.style_offsets[style_id]
    prosody = spec.prosody_amplitude * np.sin(
        2.0 * np.pi * spec.style_freqs[style_id] * i / n + spec.style_phases[style_id])
    values = (g * spec.base_patterns[v] + o
              + prosody[:, None] * spec.prosody_dir
              + spec.ramp_rate * (j / d)[:, None] * spec.ramp_dir)
    return LatentSequence(frames=n, channels=spec.latent_channels, values=values)


def render_utterance(spec: TaskSpec, tokens, durations, style_id: int) -> Utterance:
    lat = render(spec, tokens, durations, style_id)
    return Utterance(tokens=list(map(int, tokens)), durations=list(map(int, durations)),
                     style_id=style_id, latents=lat)


def style_corrected(spec: TaskSpec, latents, style_id: int) -> np.ndarray:
    """Undo the style transform: subtract the known prosody term and o_s,
    divide by g_s. Leaves the base pattern plus the ramp contribution."""
    values = latents.values if isinstance(latents, LatentSequence) else np.asarray(latents)
    if values.ndim != 2 or values.shape[1] != spec.latent_channels:
        raise LengthError(f"latents shape {values.shape} does not match {spec.latent_channels} channels")
    if not 0 <= style_id < spec.style_count:
        raise DomainError(f"style_id {style_id} out of range")
    n = values.shape[0]
    i = np.arange(n, dtype=np.float64)
    prosody = spec.prosody_amplitude * np.sin(
        2.0 * np.pi * spec.style_freqs[style_id] * i / n + spec.style_phases[style_id])
    return (values - prosody[:, None] * spec.prosody_dir
            - spec.style_offsets[style_id]) / spec.style_gains[style_id]


def frame_tokens(spec: TaskSpec, latents, style_id: int) -> np.ndarray:
    """Nearest base pattern per frame after style correction (ties go to the
    lowest token id, the behavior of argmin)."""
    core = style_corrected(spec, latents, style_id)
    d2 = ((core[:, None, :] - spec.base_patterns[None, :, :]) ** 2).sum(axis=-1)
    return d2.argmin(axis=1)


def collapse_runs(per_frame) -> list[int]:
    """[p1,p1,p2,p2,p2] -> [p1,p2]."""
    out: list[int] = []
    for t in per_frame:
        if not out or out[-1] != t:
            out.append(int(t))
    return out


def oracle_decode(spec: TaskSpec, latents, style_id: int) -> list[int]:
    """Invert the render recipe and read off tokens.

    Per frame: subtract the known prosody term, subtract o_s, divide by g_s,
    then pick the nearest base pattern. Consecutive runs collapse to one token.
    """
    return collapse_runs(frame_tokens(spec, latents, style_id))


def token_error_rate(ref_tokens, hyp_tokens) -> float:
    """Levenshtein distance between sequences divided by reference length."""
    ref = list(ref_tokens)
    hyp = list(hyp_tokens)
    if not ref:
        raise DomainError("reference token sequence must be nonempty")
    prev = list(range(len(hyp) + 1))
    for a, r in enumerate(ref, start=1):
        cur = [a]
        for b, h in enumerate(hyp, start=1):
            cur.append(min(prev[b] + 1, cur[b - 1] + 1, prev[b - 1] + (r != h)))
        prev = cur
    return prev[-1] / len(ref)


def _draw_tokens(rng: np.random.Generator, spec: TaskSpec, m: int,
                 forbid_first: int | None = None) -> list[int]:
    """m tokens with no adjacent duplicates (keeps run-collapse decoding exact)."""
    toks: list[int] = []
    last = forbid_first
    for _ in range(m):
        t = int(rng.integers(0, spec.vocab_size))
        while t == last:
            t = int(rng.integers(0, spec.vocab_size))
        toks.append(t)
        last = t
    return toks


def _draw_durations(rng: np.random.Generator, spec: TaskSpec, style_id: int,
                    tokens: list[int]) -> list[int]:
    """Noisy per-(style, token) duration profile, clipped into {1..6}."""
    mu = spec.duration_means[style_id, tokens]
    d = np.rint(mu + rng.uniform(-1.0, 1.0, len(tokens)))
    return [int(x) for x in np.clip(d, DURATION_CHOICES[0], DURATION_CHOICES[-1])]


def sample_dataset(spec: TaskSpec, count: int, len_range: tuple[int, int] = (2, 12),
                   concat_mode: bool = False, frame_range: tuple[int, int] = (40, 120),
                   seed: int | None = None) -> list[Utterance]:
    """Seeded utterance draws.

    Plain mode draws a token count uniformly from ``len_range``. Concat mode
    instead targets a frame count uniform in ``frame_range`` and extends a
    same-style token stream until it covers the target, trimming the final
    duration, mimicking fixed-length segments cut from longer recordings.
    """
    lo, hi = len_range
    if not (2 <= lo <= hi <= 64):
        raise DomainError(f"len_range {len_range} outside [2, 64]")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    out: list[Utterance] = []
    for _ in range(count):
        style = int(rng.integers(0, spec.style_count))
        if concat_mode:
            target = int(rng.integers(frame_range[0], frame_range[1] + 1))
            toks: list[int] = []
            durs: list[int] = []
            total = 0
            while total < target:
                t = _draw_tokens(rng, spec, 1, forbid_first=toks[-1] if toks else None)[0]
                d = _draw_durations(rng, spec, style, [t])[0]
                toks.append(t)
                durs.append(d)
                total += d
            durs[-1] -= total - target
            out.append(render_utterance(spec, toks, durs, style))
        else:
            m = int(rng.integers(lo, hi + 1))
            toks = _draw_tokens(rng, spec, m)
            durs = _draw_durations(rng, spec, style, toks)
            out.append(render_utterance(spec, toks, durs, style))
    return out


def save_dataset(dirpath, utterances: list[Utterance]) -> None:
    """One JSON-lines manifest plus one latent tensor file per utterance."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    lines = []
    for k, utt in enumerate(utterances):
        name = f"utt_{k:05d}.bin"
        save_array(dirpath / name, utt.latents.values, name=name, dtype="f64")
        lines.append(json.dumps({"tokens": utt.tokens, "durations": utt.durations,
                                 "style_id": utt.style_id, "latents": name},
                                sort_keys=True))
    (dirpath / "dataset.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))


def load_dataset(dirpath) -> list[Utterance]:
    dirpath = Path(dirpath)
    out = []
    for line in (dirpath / "dataset.jsonl").read_text().splitlines():
        rec = json.loads(line)
        values = load_array(dirpath / rec["latents"])
        lat = LatentSequence(frames=values.shape[0], channels=values.shape[1], values=values)
        out.append(Utterance(tokens=rec["tokens"], durations=rec["durations"],
                             style_id=rec["style_id"], latents=lat))
    return out
