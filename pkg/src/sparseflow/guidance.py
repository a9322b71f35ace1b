"""Classifier-free guidance combinators.

Standard CFG extrapolates between a conditional and an unconditional drift
with one scale. The two-scale form splits the conditional signal into a
speaker-prompt part and a text part so each can be pushed independently:

    out = a_spk (g_full - g_txt_only) + a_txt (g_txt_only - g_null) + g_null

evaluated as the equivalent single linear combination

    out = a_spk g_full + (a_txt - a_spk) g_txt_only + (1 - a_txt) g_null

so that scales (1, 1) return g_full exactly (the other coefficients are
exact zeros) rather than accumulating two rounded subtractions.

The three drift states are exactly the states reachable by training-time
condition dropout: full (text + prompt), text-only (prompt dropped), and
null (both dropped). The fourth combination (prompt kept, text dropped) is
never constructed or queried.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from . import backbone as bb
from . import numerics as nm
from .errors import ConfigError, DomainError, ShapeError

PRESET_FILE = "presets.json"


@dataclass(frozen=True)
class GuidanceScales:
    alpha_spk: float
    alpha_txt: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha_spk) and np.isfinite(self.alpha_txt)):
            raise DomainError("guidance scales must be finite")


def cfg_standard(g_cond: np.ndarray, g_uncond: np.ndarray, alpha: float) -> np.ndarray:
    g_cond = np.asarray(g_cond, dtype=np.float64)
    g_uncond = np.asarray(g_uncond, dtype=np.float64)
    if g_cond.shape != g_uncond.shape:
        raise ShapeError(f"cfg shapes {g_cond.shape} vs {g_uncond.shape}")
    # evaluated as a linear combination so alpha in {0, 1} returns the
    # corresponding input exactly (the other coefficient is an exact zero)
    return alpha * g_cond + (1.0 - alpha) * g_uncond


def cfg_multi(g_full: np.ndarray, g_txt_only: np.ndarray, g_null: np.ndarray,
              scales: GuidanceScales) -> np.ndarray:
    g_full = np.asarray(g_full, dtype=np.float64)
    g_txt_only = np.asarray(g_txt_only, dtype=np.float64)
    g_null = np.asarray(g_null, dtype=np.float64)
    if not g_full.shape == g_txt_only.shape == g_null.shape:
        raise ShapeError(f"cfg shapes {g_full.shape}, {g_txt_only.shape}, "
                         f"{g_null.shape} differ")
    a_spk, a_txt = scales.alpha_spk, scales.alpha_txt
    return a_spk * g_full + (a_txt - a_spk) * g_txt_only + (1.0 - a_txt) * g_null


def condition_states(cond: bb.ConditionBundle) -> tuple[bb.ConditionBundle,
                                                        bb.ConditionBundle,
                                                        bb.ConditionBundle]:
    """(full, text-only, null) bundles for one guided evaluation."""
    txt_only = replace(cond, prompt_latents=None)
    null = replace(cond, prompt_latents=None,
                   align_labels=np.full_like(cond.align_labels, bb.MASK))
    return cond, txt_only, null


def guided_drift(config: bb.BackboneConfig, params: dict, z_t, cond: bb.ConditionBundle,
                 scales: GuidanceScales) -> np.ndarray:
    """Three forward passes combined; collapses to one pass at (1, 1)."""
    z_t = z_t if isinstance(z_t, nm.Tensor) else nm.tensor(z_t)
    full, txt_only, null = condition_states(cond)
    if scales.alpha_spk == 1.0 and scales.alpha_txt == 1.0:
        return bb.forward(config, params, z_t, full).data
    outs = [bb.forward(config, params, z_t, c).data for c in (full, txt_only, null)]
    return cfg_multi(outs[0], outs[1], outs[2], scales)


def guided_drift_fn(config: bb.BackboneConfig, params: dict,
                    cond: bb.ConditionBundle, scales: GuidanceScales):
    """Sampler-facing closure: (z_values, t) -> combined drift array."""

    def drift(z_values: np.ndarray, t: float) -> np.ndarray:
        return guided_drift(config, params, z_values, replace(cond, t=t), scales)

    return drift


def load_presets() -> dict[str, GuidanceScales]:
    raw = json.loads(resources.files("sparseflow").joinpath(PRESET_FILE).read_text())
    presets = {}
    for name, vals in raw.items():
        try:
            presets[name] = GuidanceScales(alpha_spk=float(vals["alpha_spk"]),
                                           alpha_txt=float(vals["alpha_txt"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed preset {name!r}: {exc}") from exc
    return presets


def resolve_scales(preset: str | None, alpha_spk: float | None,
                   alpha_txt: float | None) -> GuidanceScales:
    """Explicit flags override the preset; preset defaults to zeroshot."""
    base = load_presets()
    name = preset if preset is not None else "zeroshot"
    if name not in base:
        raise ConfigError(f"unknown preset {name!r}; have {sorted(base)}")
    scales = base[name]
    return GuidanceScales(
        alpha_spk=scales.alpha_spk if alpha_spk is None else float(alpha_spk),
        alpha_txt=scales.alpha_txt if alpha_txt is None else float(alpha_txt))
