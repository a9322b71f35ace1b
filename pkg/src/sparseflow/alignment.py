"""Speech-text alignment machinery.

Hard alignments repeat each token over its duration; sparse alignments keep
exactly one anchored frame per token region and mask the rest, giving the
model coarse positional hints without constraining fine timing. Includes
anchor-coordinate scaling for length control, a small duration predictor,
and duration perturbation for robustness probes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DomainError, LengthError, StateError, VocabError
from .numerics import Tensor
from .optim import Adam

MASK = -1  # per-frame label for frames with no anchored token

MODE_SPARSE = "sparse"
MODE_FORCED = "forced"
MODE_NONE = "none"
MODES = (MODE_SPARSE, MODE_FORCED, MODE_NONE)


@dataclass(frozen=True)
class HardAlignment:
    tokens: tuple[int, ...]
    durations: tuple[int, ...]
    labels: np.ndarray  # (n,) token id per frame

    @property
    def frames(self) -> int:
        return self.labels.shape[0]

    def offsets(self) -> np.ndarray:
        """Start frame of each token region."""
        return np.concatenate([[0], np.cumsum(self.durations)[:-1]])


@dataclass(frozen=True)
class SparseAlignment:
    tokens: tuple[int, ...]
    durations: tuple[int, ...]
    labels: np.ndarray  # (n,) token id at anchors, MASK elsewhere
    anchor_coords: np.ndarray  # (m,) strictly increasing frame indices

    def __post_init__(self):
        m = len(self.tokens)
        n = int(sum(self.durations))
        if self.anchor_coords.shape != (m,) or self.labels.shape != (n,):
            raise LengthError("anchor/label shapes do not match tokens/durations")
        offs = np.concatenate([[0], np.cumsum(self.durations)[:-1]])
        for i, c in enumerate(self.anchor_coords):
            if not offs[i] <= c < offs[i] + self.durations[i]:
                raise DomainError(f"anchor {c} outside region {i}")
        if np.any(np.diff(self.anchor_coords) <= 0):
            raise DomainError("anchors must be strictly increasing")
        expect = np.full(n, MASK, dtype=np.int64)
        expect[self.anchor_coords] = self.tokens
        if not np.array_equal(self.labels, expect):
            raise DomainError("labels must be MASK everywhere except anchors")

    @property
    def frames(self) -> int:
        return self.labels.shape[0]


def expand_hard(tokens, durations) -> HardAlignment:
    """p=[p1,p2,p3], d=[2,2,3] -> [p1,p1,p2,p2,p3,p3,p3]."""
    toks = tuple(int(t) for t in tokens)
    durs = tuple(int(d) for d in durations)
    if len(toks) != len(durs):
        raise LengthError(f"{len(toks)} tokens vs {len(durs)} durations")
    if len(toks) == 0:
        raise LengthError("need at least one token")
    if any(d < 1 for d in durs):
        raise DomainError("durations must be >= 1")
    labels = np.repeat(np.asarray(toks, dtype=np.int64), durs)
    return HardAlignment(tokens=toks, durations=durs, labels=labels)


def _sparse_from_anchors(hard: HardAlignment, anchors: np.ndarray) -> SparseAlignment:
    labels = np.full(hard.frames, MASK, dtype=np.int64)
    labels[anchors] = hard.tokens
    return SparseAlignment(tokens=hard.tokens, durations=hard.durations,
                           labels=labels, anchor_coords=anchors)


def sample_sparse(hard: HardAlignment, rng: np.random.Generator) -> SparseAlignment:
    """Keep one uniformly drawn anchor frame per token region."""
    offs = hard.offsets()
    anchors = offs + rng.integers(0, hard.durations)
    return _sparse_from_anchors(hard, anchors.astype(np.int64))


def center_sparse(hard: HardAlignment) -> SparseAlignment:
    """Deterministic anchors at region centers (inference placement)."""
    offs = hard.offsets()
    anchors = offs + (np.asarray(hard.durations, dtype=np.int64) - 1) // 2
    return _sparse_from_anchors(hard, anchors)


def enumerate_sparse(hard: HardAlignment) -> list[tuple[int, ...]]:
    """All possible anchor placements (product of region sizes)."""
    offs = hard.offsets()
    combos: list[tuple[int, ...]] = [()]
    for off, d in zip(offs, hard.durations):
        combos = [c + (off + k,) for c in combos for k in range(d)]
    return combos


def embed_and_downsample(labels, embedding_table: Tensor, target_len: int) -> Tensor:
    """Embed per-frame labels and average-pool down to ``target_len`` frames.

    MASK frames read a dedicated final row of the table. The label length
    must be an exact multiple of target_len; the pooling stride is that
    multiple (stride 1 when rates already match). Learned mixing happens
    downstream; the pooling kernel itself is a fixed average.
    """
    lab = labels.labels if isinstance(labels, (HardAlignment, SparseAlignment)) else np.asarray(labels)
    lab = lab.astype(np.int64)
    rows = embedding_table.shape[0]
    if lab.min(initial=0) < MASK or lab.max(initial=MASK) >= rows - 1:
        raise VocabError(f"labels must lie in [{MASK}, {rows - 1})")
    if target_len < 1 or len(lab) % target_len != 0:
        raise LengthError(f"cannot pool {len(lab)} label frames to {target_len}")
    stride = len(lab) // target_len
    ids = np.where(lab == MASK, rows - 1, lab)
    emb = nm.embedding(embedding_table, ids)
    if stride == 1:
        return emb
    ca = embedding_table.shape[1]
    windows = nm.transpose(nm.reshape(emb, (target_len, stride, ca)), (0, 2, 1))
    ones = nm.tensor(np.full((target_len, stride, 1), 1.0))
    summed = nm.reshape(nm.matmul(windows, ones), (target_len, ca))
    return nm.mul(summed, 1.0 / stride)


def scale_anchors(sparse: SparseAlignment, phoneme_indices, factor: float) -> SparseAlignment:
    """Rescale selected token regions and carry their anchors along.

    Each selected region's duration becomes max(1, round(factor * d)); its
    anchor keeps the same relative offset within the region. When every
    region is selected with an integer factor this multiplies every anchor
    coordinate exactly by the factor; the max(1, .) floor is what resolves
    would-be collisions by pushing later anchors right.
    """
    if factor <= 0.0:
        raise DomainError(f"factor must be positive, got {factor}")
    m = len(sparse.tokens)
    selected = set(int(i) for i in phoneme_indices)
    if any(i < 0 or i >= m for i in selected):
        raise DomainError("phoneme index out of range")
    old_offs = np.concatenate([[0], np.cumsum(sparse.durations)[:-1]])
    new_durs = []
    new_anchors = []
    off = 0
    for i in range(m):
        d = sparse.durations[i]
        rho = int(sparse.anchor_coords[i] - old_offs[i])
        if i in selected:
            nd = max(1, int(np.rint(factor * d)))
            nr = min(nd - 1, int(np.rint(rho * nd / d)))
        else:
            nd, nr = d, rho
        new_durs.append(nd)
        new_anchors.append(off + nr)
        off += nd
    if off < m:
        raise DomainError(f"scaled length {off} cannot hold {m} anchors")
    labels = np.full(off, MASK, dtype=np.int64)
    anchors = np.asarray(new_anchors, dtype=np.int64)
    labels[anchors] = sparse.tokens
    return SparseAlignment(tokens=sparse.tokens, durations=tuple(new_durs),
                           labels=labels, anchor_coords=anchors)


def perturb_durations(durations, rel_noise: float, rng: np.random.Generator) -> list[int]:
    """Scale each duration by U(1-rel_noise, 1+rel_noise), round, floor at 1."""
    if not 0.0 <= rel_noise < 1.0:
        raise DomainError(f"rel_noise must be in [0, 1), got {rel_noise}")
    durs = np.asarray(durations, dtype=np.float64)
    if rel_noise == 0.0:
        return [int(d) for d in durs]
    u = rng.uniform(1.0 - rel_noise, 1.0 + rel_noise, durs.shape)
    return [int(max(1, np.rint(d * f))) for d, f in zip(durs, u)]


# ---------------------------------------------------------------------------
# toy duration predictor
# ---------------------------------------------------------------------------


@dataclass
class DurationPredictor:
    params: dict[str, Tensor]
    vocab_size: int
    trained: bool = False


def init_duration_predictor(vocab_size: int, style_dim: int, embed_dim: int = 16,
                            hidden: int = 32, seed: int = 0) -> DurationPredictor:
    rng = np.random.default_rng(seed)
    params = {
        "tok_table": nm.parameter(rng.standard_normal((vocab_size, embed_dim)) * 0.1),
        "style_w": nm.parameter(rng.standard_normal((style_dim, embed_dim)) / np.sqrt(style_dim)),
        "w1": nm.parameter(rng.standard_normal((2 * embed_dim, hidden)) / np.sqrt(2 * embed_dim)),
        "b1": nm.parameter(np.zeros(hidden)),
        "w2": nm.parameter(rng.standard_normal((hidden, 1)) / np.sqrt(hidden)),
        "b2": nm.parameter(np.zeros(1)),
    }
    return DurationPredictor(params=params, vocab_size=vocab_size)


def _predict_log_durations(pred: DurationPredictor, tokens, style_vec) -> Tensor:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.min(initial=0) < 0 or toks.max(initial=0) >= pred.vocab_size:
        raise VocabError("token out of range")
    p = pred.params
    emb = nm.embedding(p["tok_table"], toks)
    style = nm.matmul(nm.tensor(np.asarray(style_vec, dtype=np.float64)[None, :]), p["style_w"])
    style_rows = nm.embedding(style, np.zeros(len(toks), dtype=np.int64))
    h = nm.silu(nm.add(nm.matmul(nm.concat([emb, style_rows], axis=-1), p["w1"]), p["b1"]))
    return nm.add(nm.matmul(h, p["w2"]), p["b2"])


def predict_durations(pred: DurationPredictor, tokens, style_vec,
                      oracle=None) -> list[int]:
    """Positive integer durations; ``oracle`` passes ground truth through."""
    if oracle is not None:
        durs = [int(d) for d in oracle]
        if any(d < 1 for d in durs):
            raise DomainError("oracle durations must be >= 1")
        return durs
    if not pred.trained:
        raise StateError("duration predictor has not been trained")
    logd = _predict_log_durations(pred, tokens, style_vec)
    return [int(max(1, np.rint(np.exp(x)))) for x in logd.data[:, 0]]


def train_duration_predictor(pred: DurationPredictor, examples, steps: int = 2000,
                             seed: int = 0, lr: float = 3e-3,
                             batch_size: int = 8) -> list[float]:
    """examples: (tokens, durations, style_vec) triples; regresses log durations."""
    opt = Adam([pred.params[k] for k in sorted(pred.params)], lr=lr,
               warmup_steps=50, decay_steps=steps)
    rng = np.random.default_rng(seed)
    history: list[float] = []
    for _ in range(steps):
        picks = rng.integers(0, len(examples), size=batch_size)
        with nm.GradTape() as tape:
            total = None
            for k in picks:
                tokens, durations, style_vec = examples[int(k)]
                target = np.log(np.asarray(durations, dtype=np.float64))[:, None]
                diff = nm.sub(_predict_log_durations(pred, tokens, style_vec), target)
                loss = nm.mean_all(nm.mul(diff, diff))
                total = loss if total is None else nm.add(total, loss)
            total = nm.mul(total, 1.0 / batch_size)
            tape.backward(total)
        history.append(total.item())
        opt.step()
    pred.trained = True
    return history


# ---------------------------------------------------------------------------
# debugging dumps
# ---------------------------------------------------------------------------


def to_json(align) -> str:
    rec = {"tokens": list(align.tokens), "durations": list(align.durations),
           "labels": align.labels.tolist()}
    if isinstance(align, SparseAlignment):
        rec["anchors"] = align.anchor_coords.tolist()
    return json.dumps(rec, sort_keys=True)


def from_json(text: str):
    rec = json.loads(text)
    if "anchors" in rec:
        return SparseAlignment(tokens=tuple(rec["tokens"]), durations=tuple(rec["durations"]),
                               labels=np.asarray(rec["labels"], dtype=np.int64),
                               anchor_coords=np.asarray(rec["anchors"], dtype=np.int64))
    return expand_hard(rec["tokens"], rec["durations"])
