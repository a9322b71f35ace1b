"""Toy convolutional VAE over a pseudo-waveform.

The "waveform" is a latent sequence upsampled in time by the downsample
factor with linear interpolation plus seeded noise; the encoder compresses
it back by that factor into a diagonal-Gaussian posterior and the decoder
reconstructs the signal. Trained with plain L2 reconstruction plus a
lightly weighted closed-form KL penalty. No adversarial terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DomainError, LengthError, ShapeError
from .numerics import Tensor
from .optim import Adam

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass(frozen=True)
class CodecConfig:
    downsample_factor: int = 8
    latent_channels: int = 32
    kl_weight: float = 1e-3
    signal_channels: int = 8
    hidden: int = 24
    kernel_width: int = 5

    def __post_init__(self):
        if self.downsample_factor < 1:
            raise DomainError("downsample_factor must be >= 1")


@dataclass
class GaussianPosterior:
    mean: Tensor  # (frames, latent_channels)
    logvar: Tensor  # same shape, clamped to [LOGVAR_MIN, LOGVAR_MAX]


def _strides(d: int) -> list[int]:
    """Factor the downsample factor into per-block conv strides."""
    out = []
    while d % 2 == 0:
        out.append(2)
        d //= 2
    if d > 1:
        out.append(d)
    return out


def make_pseudo_signal(latents: np.ndarray, downsample_factor: int,
                       noise_scale: float = 0.02, seed: int = 0) -> np.ndarray:
    """Upsample (n, C) latents x d in time by linear interpolation, add noise."""
    lat = np.asarray(latents, dtype=np.float64)
    n = lat.shape[0]
    d = downsample_factor
    pos = np.arange(n * d) / d
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo)[:, None]
    sig = (1.0 - frac) * lat[lo] + frac * lat[hi]
    rng = np.random.default_rng(seed)
    return sig + noise_scale * rng.standard_normal(sig.shape)


def _conv_init(rng, width, c_in, c_out):
    return nm.parameter(rng.standard_normal((width, c_in, c_out)) / np.sqrt(width * c_in))


def init_codec(config: CodecConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    w = config.kernel_width
    h = config.hidden
    params: dict[str, Tensor] = {}
    c = config.signal_channels
    for k, _ in enumerate(_strides(config.downsample_factor)):
        params[f"enc{k}.kernel"] = _conv_init(rng, w, c, h)
        params[f"enc{k}.bias"] = nm.parameter(np.zeros(h))
        c = h
    params["enc_head.kernel"] = _conv_init(rng, 3, c, 2 * config.latent_channels)
    # start the posterior narrow (sigma ~ e^-2) so early reparameterization
    # noise does not drown the reconstruction signal
    head_bias = np.zeros(2 * config.latent_channels)
    head_bias[config.latent_channels:] = -4.0
    params["enc_head.bias"] = nm.parameter(head_bias)

    c = config.latent_channels
    for k, _ in enumerate(_strides(config.downsample_factor)):
        params[f"dec{k}.kernel"] = _conv_init(rng, w, c, h)
        params[f"dec{k}.bias"] = nm.parameter(np.zeros(h))
        c = h
    params["dec_head.kernel"] = _conv_init(rng, 3, c, config.signal_channels)
    params["dec_head.bias"] = nm.parameter(np.zeros(config.signal_channels))
    return params


def encode(config: CodecConfig, params: dict[str, Tensor], signal) -> GaussianPosterior:
    """Strided same-padded conv stack; output frames = ceil(len / d)."""
    x = signal if isinstance(signal, Tensor) else Tensor(np.asarray(signal, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != config.signal_channels:
        raise ShapeError(f"signal shape {x.shape} does not match {config.signal_channels} channels")
    if x.shape[0] < config.downsample_factor:
        raise LengthError(f"signal length {x.shape[0]} shorter than downsample factor "
                          f"{config.downsample_factor}")
    for k, s in enumerate(_strides(config.downsample_factor)):
        x = nm.conv1d(x, params[f"enc{k}.kernel"], stride=s, padding="same")
        x = nm.silu(nm.add(x, params[f"enc{k}.bias"]))
    x = nm.add(nm.conv1d(x, params["enc_head.kernel"], stride=1, padding="same"),
               params["enc_head.bias"])
    mean = nm.slice_last(x, 0, config.latent_channels)
    logvar = nm.clip(nm.slice_last(x, config.latent_channels, 2 * config.latent_channels),
                     LOGVAR_MIN, LOGVAR_MAX)
    return GaussianPosterior(mean=mean, logvar=logvar)


def sample_posterior(posterior: GaussianPosterior, rng: np.random.Generator) -> Tensor:
    """Reparameterized draw: mean + exp(logvar/2) * eps."""
    eps = rng.standard_normal(posterior.mean.shape)
    return nm.add(posterior.mean, nm.mul(nm.exp(nm.mul(posterior.logvar, 0.5)), eps))


def decode(config: CodecConfig, params: dict[str, Tensor], z) -> Tensor:
    """Repeat-upsample then smooth; output length = frames * d."""
    x = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != config.latent_channels:
        raise ShapeError(f"latent shape {x.shape} does not match {config.latent_channels} channels")
    if not np.isfinite(x.data).all():
        raise DomainError("latent must be finite")
    for k, s in enumerate(reversed(_strides(config.downsample_factor))):
        ids = np.repeat(np.arange(x.shape[0]), s)
        x = nm.embedding(x, ids)
        x = nm.conv1d(x, params[f"dec{k}.kernel"], stride=1, padding="same")
        x = nm.silu(nm.add(x, params[f"dec{k}.bias"]))
    x = nm.add(nm.conv1d(x, params["dec_head.kernel"], stride=1, padding="same"),
               params["dec_head.bias"])
    return x


def vae_loss(config: CodecConfig, signal, posterior: GaussianPosterior,
             reconstruction: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """total = rec + kl_weight * KL(q || N(0, I)), both terms per-element means.

    KL element: (mu^2 + exp(logvar) - 1 - logvar) / 2, the diagonal-Gaussian
    closed form; nonnegative, zero iff the posterior is standard normal.
    """
    target = signal.data if isinstance(signal, Tensor) else np.asarray(signal, dtype=np.float64)
    if reconstruction.shape != target.shape:
        raise ShapeError(f"reconstruction {reconstruction.shape} vs signal {target.shape}")
    diff = nm.sub(reconstruction, target)
    rec = nm.mean_all(nm.mul(diff, diff))
    mu, lv = posterior.mean, posterior.logvar
    kl_elem = nm.mul(nm.sub(nm.add(nm.mul(mu, mu), nm.exp(lv)), nm.add(lv, 1.0)), 0.5)
    kl = nm.mean_all(kl_elem)
    total = nm.add(rec, nm.mul(kl, config.kl_weight))
    return total, rec, kl


def train_codec(config: CodecConfig, signals: list[np.ndarray], steps: int,
                seed: int = 0, lr: float = 1e-3, warmup_steps: int = 100,
                batch_size: int = 4) -> tuple[dict[str, Tensor], list[float]]:
    """Batch-averaged Adam steps; returns params and the loss history.

    Batches walk a seeded shuffle of the corpus round-robin, so equal spans
    of steps see equal signal multisets whenever the corpus size divides
    span * batch_size; loss histories over such spans are then comparable
    without sampling noise.
    """
    params = init_codec(config, seed=seed)
    opt = Adam(list(params.values()), lr=lr, warmup_steps=warmup_steps,
               decay_steps=steps)
    rng = np.random.default_rng((seed, 1))
    order = rng.permutation(len(signals))
    cursor = 0
    history: list[float] = []
    for _ in range(steps):
        picks = order[(cursor + np.arange(batch_size)) % len(signals)]
        cursor = (cursor + batch_size) % len(signals)
        with nm.GradTape() as tape:
            batch_total = None
            for k in picks:
                sig = signals[int(k)]
                post = encode(config, params, sig)
                z = sample_posterior(post, rng)
                recon = decode(config, params, z)
                total, _, _ = vae_loss(config, sig, post, recon)
                batch_total = total if batch_total is None else nm.add(batch_total, total)
            batch_total = nm.mul(batch_total, 1.0 / batch_size)
            tape.backward(batch_total)
        history.append(batch_total.item())
        opt.step()
    return params, history
