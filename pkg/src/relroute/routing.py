"""Fuzzy pair-routing operators and pair-budget accounting.

A routing operator turns two endpoint saliencies ``wi, wj`` in [0, 1] into a
pair weight in [0, 1]:

    AND  wi * wj            (product t-norm)
    OR   wi + wj - wi * wj  (probabilistic sum)
    XOR  |wi - wj|

``uniform`` is the constant-1 operator used by unrouted relation distillation.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

OPERATORS = ("and", "or", "xor")
ALL_OPERATORS = ("uniform",) + OPERATORS
CATEGORIES = ("fg_fg", "fg_bg", "bg_bg")


class Category(str, enum.Enum):
    FG_FG = "FG-FG"
    FG_BG = "FG-BG"
    BG_BG = "BG-BG"


def normalize_op(op: str) -> str:
    name = str(op).strip().lower()
    if name not in ALL_OPERATORS:
        raise ValueError(f"unknown pair-routing operator {op!r}; expected one of {ALL_OPERATORS}")
    return name


def _check_unit(x, what="saliency"):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError(f"{what} must lie in [0, 1]")
    return x


def pair_weight(op: str, wi, wj):
    """Pair weight for endpoint saliencies; broadcasts over arrays."""
    op = normalize_op(op)
    wi = _check_unit(wi)
    wj = _check_unit(wj)
    if op == "and":
        out = wi * wj
    elif op == "or":
        out = wi + wj - wi * wj
    elif op == "xor":
        out = np.abs(wi - wj)
    else:
        out = np.ones(np.broadcast(wi, wj).shape)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class PairWeightField:
    """Spatial (B, T, N, N) and temporal (B, T, N, T, N) pair weights."""

    spatial: np.ndarray
    temporal: np.ndarray
    op: str


def pair_field(w, op: str = "or") -> PairWeightField:
    """Per-pair weights for a saliency field ``w`` of shape (B, T, N) or (T, N)."""
    w = _check_unit(w)
    squeeze = w.ndim == 2
    if squeeze:
        w = w[None]
    if w.ndim != 3:
        raise ValueError(f"saliency must have shape (B, T, N), got {w.shape}")
    b, t, n = w.shape
    flat = w.reshape(b, t * n)
    full = pair_weight(op, flat[:, :, None], flat[:, None, :])
    full = np.broadcast_to(full, (b, t * n, t * n))
    temporal = np.ascontiguousarray(full).reshape(b, t, n, t, n)
    frames = np.arange(t)
    spatial = np.ascontiguousarray(temporal[:, frames, :, frames, :].transpose(1, 0, 2, 3))
    if squeeze:
        return PairWeightField(spatial[0], temporal[0], normalize_op(op))
    return PairWeightField(spatial, temporal, normalize_op(op))


def or_pair_field(w) -> PairWeightField:
    return pair_field(w, "or")


def discrete_limit_category(wi: int, wj: int) -> Category:
    """Classify a pair of binary saliencies and check the Boolean truth tables."""
    for v in (wi, wj):
        if v not in (0, 1):
            raise ValueError(f"discrete-limit saliency must be 0 or 1, got {v!r}")
    if wi and wj:
        cat = Category.FG_FG
    elif wi or wj:
        cat = Category.FG_BG
    else:
        cat = Category.BG_BG
    assert (pair_weight("and", wi, wj) == 1.0) == (cat is Category.FG_FG)
    assert (pair_weight("or", wi, wj) == 1.0) == (cat is not Category.BG_BG)
    assert (pair_weight("xor", wi, wj) == 1.0) == (cat is Category.FG_BG)
    return cat


def category_masks(labels) -> dict[str, np.ndarray]:
    """Boolean (..., N, N) masks of FG-FG / FG-BG / BG-BG pairs for binary labels (..., N)."""
    fg = np.asarray(labels) > 0.5
    a, b = fg[..., :, None], fg[..., None, :]
    return {"fg_fg": a & b, "fg_bg": a ^ b, "bg_bg": ~a & ~b}


@dataclass
class BudgetReport:
    p_fg: float
    share_ffg: float
    share_fbg: float
    share_bbg: float
    retained_fraction: dict = field(default_factory=dict)
    n_frames: int = 0
    n_clips: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _retained(ffg: float, fbg: float, bbg: float) -> dict:
    return {"uniform": ffg + fbg + bbg, "and": ffg, "or": ffg + fbg, "xor": fbg}


def analytic_budget(p_fg: float) -> BudgetReport:
    """Pair-category shares under uniform weighting for foreground fraction ``p_fg``."""
    p = float(p_fg)
    if not 0.0 <= p <= 1.0:
        raise ValueError("p_fg must lie in [0, 1]")
    ffg = p * p
    fbg = 2.0 * p * (1.0 - p)
    bbg = 1.0 - ffg - fbg
    return BudgetReport(p, ffg, fbg, bbg, _retained(ffg, fbg, bbg))


def empirical_budget(masks) -> BudgetReport:
    """Count within-frame ordered pairs (i = j included) by endpoint label.

    ``masks`` is a binary array (C, T, N) or (T, N), or a list of (T, N)
    arrays. Shares are averaged over frames and then over clips.
    """
    if isinstance(masks, np.ndarray) and masks.ndim == 2:
        masks = [masks]
    clips = [np.asarray(m, dtype=np.float64) for m in masks]
    if not clips:
        raise ValueError("empirical_budget needs at least one mask")
    shares = np.zeros(3)
    p_sum = 0.0
    frames = 0
    for m in clips:
        if m.ndim != 2:
            raise ValueError(f"each mask must have shape (T, N), got {m.shape}")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("masks must be binary")
        n = m.shape[1]
        fg = m.sum(axis=1)
        ffg = fg * fg
        fbg = 2.0 * fg * (n - fg)
        bbg = (n - fg) ** 2
        per_frame = np.stack([ffg, fbg, bbg], axis=1) / float(n * n)
        shares += per_frame.mean(axis=0)
        p_sum += float(m.mean())
        frames += m.shape[0]
    shares /= len(clips)
    ffg, fbg, bbg = (float(s) for s in shares)
    return BudgetReport(p_sum / len(clips), ffg, fbg, bbg, _retained(ffg, fbg, bbg),
                        n_frames=frames, n_clips=len(clips))


def p_fg_histogram(masks, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of per-clip foreground fractions on [0, 1]."""
    if isinstance(masks, np.ndarray) and masks.ndim == 2:
        masks = [masks]
    fractions = [float(np.mean(m)) for m in masks]
    counts, edges = np.histogram(fractions, bins=bins, range=(0.0, 1.0))
    return counts, edges
