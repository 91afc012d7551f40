"""Token-relation distillation: cosine Gram tensors and (masked) L1 relation losses.

Feature grids are arrays of shape (B, T, N, D). The losses accept either a
plain array or a :class:`~relroute.tensor_math.Node` for the student grid
``vp``; with a node they stay on its tape so callers can back-propagate.
The teacher grid ``vy`` and the saliency ``w`` are always constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_math as tm
from .routing import normalize_op, pair_weight

ROLES = ("projected", "target", "fused")


@dataclass(frozen=True)
class FeatureGrid:
    values: np.ndarray
    role: str = "target"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 4 or min(v.shape) < 1:
            raise ValueError(f"feature grid must be (B, T, N, D) with positive extents, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature grid contains non-finite values")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class MaskedTrdConfig:
    lambda_tmp: float = 1.0
    epsilon: float = 1e-6
    tau: float = math.inf

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.lambda_tmp >= 0:
            raise ValueError("lambda_tmp must be non-negative")
        if not self.tau > 0:
            raise ValueError("tau must be positive or infinite")


@dataclass
class TrdTerms:
    """Loss with its breakdown; entries are floats or tape nodes."""

    total: object
    spatial: object
    temporal: object
    per_element: object = None


def _grid(x) -> np.ndarray:
    arr = np.asarray(x.values if isinstance(x, FeatureGrid) else x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected (B, T, N, D) features, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("features must be finite")
    return arr


def l2_normalize_tokens(grid) -> np.ndarray:
    """Unit-normalize every token; tokens with norm below 1e-12 become zero."""
    arr = np.asarray(grid.values if isinstance(grid, FeatureGrid) else grid, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("features must be finite")
    return tm.PRIMITIVES["l2_normalize"].forward(arr)


def spatial_gram(normalized) -> np.ndarray:
    """S[b, t, i, j] = <x[b, t, i], x[b, t, j]>."""
    x = _grid(normalized)
    return np.matmul(x, np.swapaxes(x, -1, -2))


def temporal_gram(normalized) -> np.ndarray:
    """C[b, t, i, u, j] = <x[b, t, i], x[b, u, j]>."""
    x = _grid(normalized)
    b, t, n, d = x.shape
    flat = x.reshape(b, t * n, d)
    return np.matmul(flat, np.swapaxes(flat, -1, -2)).reshape(b, t, n, t, n)


def temporal_decay(t: int, u: int, tau: float = math.inf) -> float:
    if not tau > 0:
        raise ValueError("tau must be positive or infinite")
    if math.isinf(tau):
        return 1.0
    return math.exp(-abs(t - u) / tau)


def decay_matrix(frames: int, tau: float = math.inf) -> np.ndarray:
    idx = np.arange(frames)
    if not tau > 0:
        raise ValueError("tau must be positive or infinite")
    if math.isinf(tau):
        return np.ones((frames, frames))
    return np.exp(-np.abs(idx[:, None] - idx[None, :]) / tau)


def _student_gram(vp):
    """Flattened (B, TN, TN) cosine Gram of the student, on a tape."""
    if not isinstance(vp, tm.Node):
        vp = tm.Tape().const(_grid(vp))
    elif vp.ndim != 4:
        raise ValueError(f"expected (B, T, N, D) features, got shape {vp.shape}")
    b, t, n, d = vp.shape
    xhat = tm.reshape(tm.l2_normalize(vp), (b, t * n, d))
    return tm.matmul(xhat, tm.swapaxes(xhat, 1, 2)), (b, t, n, d)


def _teacher_gram(vy) -> np.ndarray:
    y = l2_normalize_tokens(_grid(vy))
    b, t, n, d = y.shape
    flat = y.reshape(b, t * n, d)
    return np.matmul(flat, np.swapaxes(flat, -1, -2))


def _finish(node_or_val, is_node):
    return node_or_val if is_node else float(np.asarray(node_or_val.value).reshape(()))


def _frame_masks(t: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    frame = np.repeat(np.arange(t), n)
    same = frame[:, None] == frame[None, :]
    return same.astype(np.float64), (~same).astype(np.float64)


def trd_loss(vp, vy) -> TrdTerms:
    """Uniform relation loss: mean L1 over T*N^2 spatial and T(T-1)*N^2 cross-frame pairs.

    The cross-frame term is 0 when T = 1. Per-element losses are averaged
    over the batch.
    """
    is_node = isinstance(vp, tm.Node)
    cp, (b, t, n, d) = _student_gram(vp)
    cy = _teacher_gram(vy)
    if cy.shape != cp.shape:
        raise ValueError(f"shape mismatch: student {cp.shape} vs target {cy.shape}")
    tape = cp.tape
    diff = tm.absolute(tm.sub(tape.const(cy), cp))
    same, cross = _frame_masks(t, n)
    spa = tm.scale(tm.reduce_sum(tm.mul(diff, tape.const(same)), axis=(1, 2)), 1.0 / (t * n * n))
    if t > 1:
        tmp = tm.scale(tm.reduce_sum(tm.mul(diff, tape.const(cross)), axis=(1, 2)),
                       1.0 / (t * (t - 1) * n * n))
    else:
        tmp = tape.const(np.zeros(b))
    per = tm.add(spa, tmp)
    return TrdTerms(_finish(tm.reduce_mean(per), is_node), _finish(tm.reduce_mean(spa), is_node),
                    _finish(tm.reduce_mean(tmp), is_node),
                    per if is_node else per.value.copy())


def pair_weight_matrix(w, op: str, t: int, n: int) -> np.ndarray:
    """(B, TN, TN) routed pair weights; ``uniform`` ignores ``w``."""
    op = normalize_op(op)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    if w.shape[1:] != (t, n):
        raise ValueError(f"saliency shape {w.shape} does not match grid (T={t}, N={n})")
    if np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(w > 1):
        raise ValueError("saliency must lie in [0, 1]")
    b = w.shape[0]
    if op == "uniform":
        return np.ones((b, t * n, t * n))
    flat = w.reshape(b, t * n)
    return pair_weight(op, flat[:, :, None], flat[:, None, :])


def masked_trd(vp, vy, w, op: str = "or", cfg: MaskedTrdConfig | None = None) -> TrdTerms:
    """Saliency-routed relation loss.

    spatial  = sum W |dS| / (sum W + eps)              over same-frame pairs
    temporal = sum om W |dC| / (sum om W + eps)        over t != u
    total    = spatial + lambda_tmp * temporal

    computed per batch element and averaged over B.
    """
    cfg = cfg or MaskedTrdConfig()
    is_node = isinstance(vp, tm.Node)
    cp, (b, t, n, d) = _student_gram(vp)
    cy = _teacher_gram(vy)
    if cy.shape != cp.shape:
        raise ValueError(f"shape mismatch: student {cp.shape} vs target {cy.shape}")
    weights = pair_weight_matrix(w, op, t, n)
    if weights.shape[0] not in (1, b):
        raise ValueError(f"saliency batch {weights.shape[0]} does not match features batch {b}")
    weights = np.broadcast_to(weights, (b, t * n, t * n))
    same, cross = _frame_masks(t, n)
    omega = np.repeat(np.repeat(decay_matrix(t, cfg.tau), n, axis=0), n, axis=1)
    w_spa = weights * same
    w_tmp = weights * cross * omega

    tape = cp.tape
    diff = tm.absolute(tm.sub(tape.const(cy), cp))
    den_spa = w_spa.sum(axis=(1, 2)) + cfg.epsilon
    spa = tm.mul(tm.reduce_sum(tm.mul(diff, tape.const(w_spa)), axis=(1, 2)), tape.const(1.0 / den_spa))
    if t > 1:
        den_tmp = w_tmp.sum(axis=(1, 2)) + cfg.epsilon
        tmp = tm.mul(tm.reduce_sum(tm.mul(diff, tape.const(w_tmp)), axis=(1, 2)),
                     tape.const(1.0 / den_tmp))
    else:
        tmp = tape.const(np.zeros(b))
    per = tm.add(spa, tm.scale(tmp, cfg.lambda_tmp))
    return TrdTerms(_finish(tm.reduce_mean(per), is_node), _finish(tm.reduce_mean(spa), is_node),
                    _finish(tm.reduce_mean(tmp), is_node),
                    per if is_node else per.value.copy())


def masked_trd_grad(vp, vy, w, op: str = "or", cfg: MaskedTrdConfig | None = None) -> np.ndarray:
    """Gradient of the masked loss with respect to the student grid ``vp``."""
    tape = tm.Tape()
    x = tape.leaf(_grid(vp))
    terms = masked_trd(x, vy, w, op, cfg)
    (g,) = tape.grad(terms.total, [x])
    return g.reshape(np.shape(vp))


def trd_loss_grad(vp, vy) -> np.ndarray:
    tape = tm.Tape()
    x = tape.leaf(_grid(vp))
    (g,) = tape.grad(trd_loss(x, vy).total, [x])
    return g.reshape(np.shape(vp))


def category_relation_error(vp, vy, fg_mask) -> dict[str, float]:
    """Unweighted mean |S^y - S^p| over within-frame pairs of each category.

    ``fg_mask`` is binary (B, T, N). Categories with no pairs report NaN.
    """
    sp = spatial_gram(l2_normalize_tokens(_grid(vp)))
    sy = spatial_gram(l2_normalize_tokens(_grid(vy)))
    diff = np.abs(sy - sp)
    fg = np.asarray(fg_mask) > 0.5
    if fg.ndim == 2:
        fg = fg[None]
    a, b_ = fg[..., :, None], fg[..., None, :]
    masks = {"fg_fg": a & b_, "fg_bg": a ^ b_, "bg_bg": ~a & ~b_}
    out = {}
    for name, m in masks.items():
        m = np.broadcast_to(m, diff.shape)
        out[name] = float(diff[m].mean()) if m.any() else float("nan")
    return out
