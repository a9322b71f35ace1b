"""Drift estimator: a small LLAMA-style transformer over latent frames.

Per-frame input is the channel concat of the noisy latent state, a prompt
block (clean latents on prompt frames, zeros elsewhere), the alignment
embedding, and a prompt/target/null indicator embedding, linearly projected
to the model width; a sinusoidal timestep embedding passes through a 2-layer
MLP and is added after the projection. Blocks are pre-RMSNorm bidirectional
attention with rotary positions plus SwiGLU MLPs.

Dropped conditions are represented structurally: a dropped prompt zeroes
the prompt block and switches every indicator to the null state; dropped
text replaces every alignment label with MASK. The latent state itself is
never altered by dropout, matching how guidance branches share one state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .alignment import MASK
from .errors import ConfigError, LengthError, ShapeError, StateError
from .numerics import Tensor
from .synthvox import LatentSequence

IND_TARGET, IND_PROMPT, IND_NULL = 0, 1, 2


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 4  # paper scale: 24
    heads: int = 4  # paper scale: 16
    model_dim: int = 64  # paper scale: 1024
    latent_channels: int = 8
    vocab_size: int = 16
    alignment_embed_dim: int = 16
    indicator_embed_dim: int = 8
    time_embed_dim: int = 64
    mask_ratio_range: tuple[float, float] = (0.1, 0.9)
    p_spk_drop: float = 0.10
    p_txt_drop_given_spk_dropped: float = 0.5

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by {self.heads} heads")
        if (self.model_dim // self.heads) % 2 != 0:
            raise ConfigError("head dim must be even for rotary embeddings")
        for p in (self.p_spk_drop, self.p_txt_drop_given_spk_dropped):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability {p} outside [0, 1]")
        lo, hi = self.mask_ratio_range
        if not 0.0 < lo <= hi < 1.0:
            raise ConfigError(f"mask_ratio_range {self.mask_ratio_range} invalid")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return 2 * self.model_dim


@dataclass(frozen=True)
class ConditionBundle:
    """Everything the drift estimator is conditioned on for one sequence."""

    align_labels: np.ndarray  # (n,) token ids, MASK where unanchored
    prompt_latents: np.ndarray | None  # (n, C) clean latents, None = dropped
    prompt_mask: np.ndarray  # (n,) bool, True on prompt frames
    t: float

    def __post_init__(self):
        n = self.align_labels.shape[0]
        if self.prompt_mask.shape != (n,):
            raise LengthError("prompt_mask length does not match labels")
        if self.prompt_latents is not None and self.prompt_latents.shape[0] != n:
            raise LengthError("prompt latents length does not match labels")
        if not 0.0 <= self.t <= 1.0:
            raise ShapeError(f"timestep {self.t} outside [0, 1]")

    @property
    def prompt_dropped(self) -> bool:
        return self.prompt_latents is None

    @property
    def text_dropped(self) -> bool:
        return bool(np.all(self.align_labels == MASK))


def init_backbone(config: BackboneConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d = config.model_dim

    def dense(fan_in, fan_out):
        return nm.parameter(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))

    params: dict[str, Tensor] = {
        "align_table": nm.parameter(rng.standard_normal(
            (config.vocab_size + 1, config.alignment_embed_dim)) * 0.3),
        "indicator_table": nm.parameter(rng.standard_normal(
            (3, config.indicator_embed_dim)) * 0.3),
        "in_proj.w": dense(2 * config.latent_channels + config.alignment_embed_dim
                           + config.indicator_embed_dim, d),
        "in_proj.b": nm.parameter(np.zeros(d)),
        "time_mlp.w1": dense(config.time_embed_dim, d),
        "time_mlp.b1": nm.parameter(np.zeros(d)),
        "time_mlp.w2": dense(d, d),
        "time_mlp.b2": nm.parameter(np.zeros(d)),
        "out_norm": nm.parameter(np.ones(d)),
        "head.w": nm.parameter(rng.standard_normal((d, config.latent_channels)) * 0.02),
        "head.b": nm.parameter(np.zeros(config.latent_channels)),
    }
    for i in range(config.layers):
        params[f"l{i}.attn_norm"] = nm.parameter(np.ones(d))
        params[f"l{i}.wq"] = dense(d, d)
        params[f"l{i}.wk"] = dense(d, d)
        params[f"l{i}.wv"] = dense(d, d)
        params[f"l{i}.wo"] = dense(d, d)
        params[f"l{i}.mlp_norm"] = nm.parameter(np.ones(d))
        params[f"l{i}.w_gate"] = dense(d, config.mlp_hidden)
        params[f"l{i}.w_up"] = dense(d, config.mlp_hidden)
        params[f"l{i}.w_down"] = dense(config.mlp_hidden, d)
    return params


def rope_rotate(x, positions) -> Tensor:
    """Rotate feature pairs by position-dependent angles (half-split pairing).

    Accepts (n, head_dim) or (heads, n, head_dim); pairs feature j with
    j + head_dim/2 at angle pos * 10000^(-2j/head_dim). Norm-preserving, and
    dot products of rotated queries/keys depend only on position offsets.
    """
    x = x if isinstance(x, Tensor) else nm.tensor(x)
    dh = x.shape[-1]
    if dh % 2 != 0:
        raise ConfigError(f"head dim {dh} must be even for rotation")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.shape[-2],):
        raise LengthError(f"positions {pos.shape} do not match sequence {x.shape[-2]}")
    half = dh // 2
    freqs = 10000.0 ** (-np.arange(half) * 2.0 / dh)
    angles = pos[:, None] * freqs
    shape = x.shape[:-1] + (half,)
    cos = np.broadcast_to(np.cos(angles), shape)
    sin = np.broadcast_to(np.sin(angles), shape)
    x1 = nm.slice_last(x, 0, half)
    x2 = nm.slice_last(x, half, dh)
    rot1 = nm.sub(nm.mul(x1, cos), nm.mul(x2, sin))
    rot2 = nm.add(nm.mul(x1, sin), nm.mul(x2, cos))
    return nm.concat([rot1, rot2], axis=-1)


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features of t in [0,1], scaled to the usual 0..1000 range."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = 1000.0 * t * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])


class AttentionRecorder:
    """Per-call buffer of attention matrices keyed (timestep, layer, head)."""

    def __init__(self):
        self.entries: dict[tuple[float, int, int], np.ndarray] = {}

    def _store(self, t: float, layer: int, weights: np.ndarray) -> None:
        for h in range(weights.shape[0]):
            self.entries[(t, layer, h)] = weights[h].copy()


def _attention(config: BackboneConfig, params, x: Tensor, layer: int,
               recorder: AttentionRecorder | None, t: float) -> Tensor:
    n = x.shape[0]
    h, dh = config.heads, config.head_dim
    normed = nm.rmsnorm(x, params[f"l{layer}.attn_norm"])
    q = nm.transpose(nm.reshape(nm.matmul(normed, params[f"l{layer}.wq"]), (n, h, dh)), (1, 0, 2))
    k = nm.transpose(nm.reshape(nm.matmul(normed, params[f"l{layer}.wk"]), (n, h, dh)), (1, 0, 2))
    v = nm.transpose(nm.reshape(nm.matmul(normed, params[f"l{layer}.wv"]), (n, h, dh)), (1, 0, 2))
    pos = np.arange(n)
    q = rope_rotate(q, pos)
    k = rope_rotate(k, pos)
    scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    weights = nm.softmax(scores, axis=-1)
    if recorder is not None:
        recorder._store(t, layer, weights.data)
    mixed = nm.transpose(nm.matmul(weights, v), (1, 0, 2))
    return nm.matmul(nm.reshape(mixed, (n, h * dh)), params[f"l{layer}.wo"])


def _swiglu(config: BackboneConfig, params, x: Tensor, layer: int) -> Tensor:
    normed = nm.rmsnorm(x, params[f"l{layer}.mlp_norm"])
    gate = nm.silu(nm.matmul(normed, params[f"l{layer}.w_gate"]))
    up = nm.matmul(normed, params[f"l{layer}.w_up"])
    return nm.matmul(nm.mul(gate, up), params[f"l{layer}.w_down"])


def forward(config: BackboneConfig, params: dict[str, Tensor], z_t,
            cond: ConditionBundle, recorder: AttentionRecorder | None = None) -> Tensor:
    """Drift estimate with the same shape as the latent state."""
    z = z_t.values if isinstance(z_t, LatentSequence) else z_t
    z = z if isinstance(z, Tensor) else nm.tensor(np.asarray(z, dtype=np.float64))
    n, c = z.shape
    if c != config.latent_channels:
        raise ShapeError(f"latent channels {c} != configured {config.latent_channels}")
    if cond.align_labels.shape[0] != n:
        raise ShapeError(f"condition length {cond.align_labels.shape[0]} != latent length {n}")
    if not np.isfinite(z.data).all():
        raise ShapeError("latent state must be finite")

    if cond.prompt_dropped:
        prompt_block = nm.tensor(np.zeros((n, c)))
        indicator_ids = np.full(n, IND_NULL, dtype=np.int64)
    else:
        block = np.where(cond.prompt_mask[:, None], cond.prompt_latents, 0.0)
        prompt_block = nm.tensor(block)
        indicator_ids = np.where(cond.prompt_mask, IND_PROMPT, IND_TARGET).astype(np.int64)

    ids = np.where(cond.align_labels == MASK, config.vocab_size, cond.align_labels)
    align_emb = nm.embedding(params["align_table"], ids.astype(np.int64))
    ind_emb = nm.embedding(params["indicator_table"], indicator_ids)

    features = nm.concat([z, prompt_block, align_emb, ind_emb], axis=-1)
    x = nm.add(nm.matmul(features, params["in_proj.w"]), params["in_proj.b"])
    temb = nm.tensor(timestep_embedding(cond.t, config.time_embed_dim)[None, :])
    th = nm.silu(nm.add(nm.matmul(temb, params["time_mlp.w1"]), params["time_mlp.b1"]))
    tvec = nm.add(nm.matmul(th, params["time_mlp.w2"]), params["time_mlp.b2"])
    x = nm.add(x, nm.embedding(tvec, np.zeros(n, dtype=np.int64)))

    for i in range(config.layers):
        x = nm.add(x, _attention(config, params, x, i, recorder, cond.t))
        x = nm.add(x, _swiglu(config, params, x, i))
    x = nm.rmsnorm(x, params["out_norm"])
    return nm.add(nm.matmul(x, params["head.w"]), params["head.b"])


def split_prompt_target(z, rng: np.random.Generator,
                        ratio_range: tuple[float, float] = (0.1, 0.9)) -> tuple[np.ndarray, float]:
    """Prefix prompt mask: gamma ~ U(range), prompt = first ceil(gamma n) frames.

    Both regions stay nonempty (the prompt size is clamped to [1, n-1]).
    """
    n = z.frames if isinstance(z, LatentSequence) else np.asarray(z).shape[0]
    if n < 2:
        raise LengthError(f"need at least 2 frames to split, got {n}")
    gamma = float(rng.uniform(*ratio_range))
    k = min(max(int(np.ceil(gamma * n)), 1), n - 1)
    mask = np.zeros(n, dtype=bool)
    mask[:k] = True
    return mask, gamma


def apply_condition_dropout(cond: ConditionBundle, rng: np.random.Generator,
                            config: BackboneConfig) -> ConditionBundle:
    """Drop the prompt with p_spk; only then, drop text with the given odds."""
    if rng.uniform() < config.p_spk_drop:
        labels = cond.align_labels
        if rng.uniform() < config.p_txt_drop_given_spk_dropped:
            labels = np.full_like(cond.align_labels, MASK)
        return replace(cond, prompt_latents=None, align_labels=labels)
    return cond


def export_attention(recorder: AttentionRecorder) -> dict[tuple[float, int, int], np.ndarray]:
    """Recorded row-stochastic matrices keyed (timestep, layer, head)."""
    if not recorder.entries:
        raise StateError("no attention was recorded; pass a recorder to forward")
    return dict(recorder.entries)


def save_attention(dirpath, recorder: AttentionRecorder) -> None:
    from pathlib import Path
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for (t, layer, head), mat in export_attention(recorder).items():
        name = f"attn_t{t:.4f}_l{layer}_h{head}.bin"
        nm.save_array(dirpath / name, mat, name=name, dtype="f32")
