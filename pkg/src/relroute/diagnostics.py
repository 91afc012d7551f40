"""Seven scalar probes of a trained aligner, averaged over an analysis set.

All entropies are in nats and treat 0 * ln 0 as 0.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .aligner import AlignerConfig, full_caption_saliency, run_numpy
from .synth import SyntheticScene

DIST_TOL = 1e-9


def _xlogx(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * np.log(safe), 0.0)


def binary_entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -(_xlogx(p) + _xlogx(1.0 - p))


def row_entropy(rows) -> np.ndarray:
    return -_xlogx(rows).sum(axis=-1)


def _check_rows(rows: np.ndarray, what: str):
    if rows.shape[-1] < 1:
        raise ValueError(f"{what}: empty distribution")
    if np.any(rows < -DIST_TOL) or np.any(np.abs(rows.sum(axis=-1) - 1.0) > DIST_TOL):
        raise ValueError(f"{what}: rows must be probability distributions")


def saliency_stats(mp) -> tuple[float, float, float, float]:
    """(mean, max, fraction above 0.5, mean Bernoulli entropy)."""
    mp = np.asarray(mp, dtype=np.float64)
    if mp.size == 0 or np.any(mp < 0) or np.any(mp > 1):
        raise ValueError("saliency must be a non-empty field in [0, 1]")
    return (float(mp.mean()), float(mp.max()), float(np.mean(mp > 0.5)),
            float(binary_entropy(mp).mean()))


def ca_focus(attn) -> float:
    """Mean of 1 - H(row) / ln(L + 1) over rows of a (..., L) attention."""
    attn = np.asarray(attn, dtype=np.float64)
    _check_rows(attn, "ca_focus")
    return float(np.mean(1.0 - row_entropy(attn) / math.log(attn.shape[-1] + 1)))


def mean_normalized_entropy(attn) -> float:
    attn = np.asarray(attn, dtype=np.float64)
    _check_rows(attn, "self-attention")
    n = attn.shape[-1]
    if n < 2:
        return 0.0
    return float(np.mean(row_entropy(attn) / math.log(n)))


def delta_self_attn_entropy(a_post, a_raw) -> float:
    """Length-normalised self-attention entropy after fusion minus on raw features."""
    a_post, a_raw = np.asarray(a_post), np.asarray(a_raw)
    if a_post.shape != a_raw.shape:
        raise ValueError(f"attention shape mismatch {a_post.shape} vs {a_raw.shape}")
    return mean_normalized_entropy(a_post) - mean_normalized_entropy(a_raw)


def top3_variance_ratio(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError("expected a (tokens, features) matrix")
    centred = v - v.mean(axis=0, keepdims=True)
    s = np.linalg.svd(centred, compute_uv=False)
    total = float(np.sum(s * s))
    if total == 0.0:
        raise ValueError("degenerate matrix: zero variance after centring")
    return float(np.sum(s[:3] ** 2) / total)


def pca_delta_var_ratio(v_fused, v_raw) -> float:
    return top3_variance_ratio(v_fused) - top3_variance_ratio(v_raw)


@dataclass
class DiagnosticsReport:
    saliency_mean: float
    saliency_max: float
    saliency_coverage: float
    saliency_entropy: float
    ca_focus_mean: float
    delta_self_attn_entropy: float
    pca_delta_var_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def metric_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def raw_self_attention(params: dict, vy: np.ndarray, cfg: AlignerConfig) -> np.ndarray:
    """First self-attention block's query/key maps applied to unfused features, (H, N, N)."""
    g = params["sa.0.norm1"]
    h = vy / np.sqrt(np.mean(vy * vy, axis=-1, keepdims=True) + 1e-6) * g
    dh = cfg.d_v // cfg.heads
    q = (h @ params["sa.0.wq"]).reshape(-1, cfg.heads, dh).transpose(1, 0, 2)
    k = (h @ params["sa.0.wk"]).reshape(-1, cfg.heads, dh).transpose(1, 0, 2)
    return _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh))


def scene_diagnostics(params: dict, scene: SyntheticScene, cfg: AlignerConfig) -> DiagnosticsReport:
    """Metrics for one scene queried with its full caption."""
    vy = scene.features.reshape(-1, cfg.d_v)
    out = run_numpy(params, vy, [scene.full_caption], cfg)
    mean, mx, cov, ent = saliency_stats(out.saliency.value[0])
    ca = out.cross_attn[-1].value[0].mean(axis=0)
    a_post = out.self_attn[0].value[0]
    return DiagnosticsReport(
        saliency_mean=mean, saliency_max=mx, saliency_coverage=cov, saliency_entropy=ent,
        ca_focus_mean=ca_focus(ca),
        delta_self_attn_entropy=delta_self_attn_entropy(a_post, raw_self_attention(params, vy, cfg)),
        pca_delta_var_ratio=pca_delta_var_ratio(out.fused.value[0], vy))


def analyse(params: dict, scenes: Sequence[SyntheticScene], cfg: AlignerConfig) -> DiagnosticsReport:
    if not scenes:
        raise ValueError("analysis set is empty")
    reports = [scene_diagnostics(params, s, cfg).to_dict() for s in scenes]
    return DiagnosticsReport(**{k: float(np.mean([r[k] for r in reports]))
                                for k in DiagnosticsReport.metric_names()})


__all__ = ["DiagnosticsReport", "analyse", "binary_entropy", "ca_focus", "delta_self_attn_entropy",
           "full_caption_saliency", "pca_delta_var_ratio", "raw_self_attention", "row_entropy",
           "saliency_stats", "scene_diagnostics", "top3_variance_ratio"]
