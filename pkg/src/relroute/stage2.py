"""Toy continual trainer: a small token denoiser with an alignment hookup.

Loss per step is ``diffusion + lambda_trd * masked_trd(V_p, V_y, w)`` where
``V_p`` is the projected hidden state of a mid-depth block, ``V_y`` is the
clean latent grid itself and ``w`` is the frozen aligner's saliency under the
full caption.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import tensor_math as tm
from .relation import MaskedTrdConfig, category_relation_error, masked_trd
from .routing import ALL_OPERATORS, normalize_op
from .synth import SyntheticScene


@dataclass(frozen=True)
class DenoiserConfig:
    d_latent: int = 32
    d_cond: int = 32
    width: int = 64
    blocks: int = 4
    heads: int = 4
    hookup: int = 2
    time_dim: int = 16

    def __post_init__(self):
        if not 1 <= self.hookup <= self.blocks:
            raise ValueError(f"hookup block {self.hookup} outside 1..{self.blocks}")
        if self.width % self.heads:
            raise ValueError("head count must divide the width")


@dataclass(frozen=True)
class Stage2Config:
    lambda_trd: float = 0.5
    trd: MaskedTrdConfig = field(default_factory=MaskedTrdConfig)
    operator: str = "or"
    steps: int = 600
    batch: int = 4
    seed: int = 0
    eval_every: int = 50
    eval_t: float = 0.5
    optimizer: nn.OptimizerConfig = field(default_factory=lambda: nn.OptimizerConfig(
        lr=1e-3, warmup_steps=20, schedule="cosine"))

    def __post_init__(self):
        if self.lambda_trd < 0:
            raise ValueError("lambda_trd must be non-negative")
        normalize_op(self.operator)


def init_denoiser(cfg: DenoiserConfig, seed: int = 0) -> nn.Params:
    rng = np.random.default_rng(seed)
    w = cfg.width
    p = {
        "in.w": nn.glorot(rng, cfg.d_latent, w),
        "in.b": np.zeros(w),
        "time.w": nn.glorot(rng, cfg.time_dim, w),
        "cond.w": nn.glorot(rng, cfg.d_cond, w),
    }
    for i in range(cfg.blocks):
        p.update(nn.init_block(rng, f"blk.{i}", w))
    p["proj.w"] = nn.glorot(rng, w, cfg.d_latent)
    p["proj.b"] = np.zeros(cfg.d_latent)
    p["out.norm"] = np.ones(w)
    p["out.w"] = nn.glorot(rng, w, cfg.d_latent) * 0.1
    p["out.b"] = np.zeros(cfg.d_latent)
    return p


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1], shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def noised_latent(z0: np.ndarray, noise: np.ndarray, t) -> np.ndarray:
    """Straight-line path z_t = (1 - t) z0 + t * noise, t broadcast over leading axis."""
    t = np.asarray(t, dtype=np.float64).reshape((-1,) + (1,) * (np.ndim(z0) - 1))
    return (1.0 - t) * z0 + t * noise


def denoise(p: dict, zt: np.ndarray, t: np.ndarray, cond: np.ndarray,
            cfg: DenoiserConfig) -> tuple[tm.Node, tm.Node]:
    """Returns (predicted noise (B, L, D), projected hookup state (B, L, D))."""
    tape = next(iter(p.values())).tape
    x = nn.linear(tape.const(zt), p["in.w"], p["in.b"])
    emb = tm.add(tm.matmul(tape.const(time_features(t, cfg.time_dim)), p["time.w"]),
                 tm.matmul(tape.const(cond), p["cond.w"]))
    x = tm.add(x, tm.reshape(emb, (emb.shape[0], 1, emb.shape[1])))
    hook = None
    for i in range(cfg.blocks):
        x, _ = nn.block(x, p, f"blk.{i}", cfg.heads)
        if i + 1 == cfg.hookup:
            hook = nn.linear(x, p["proj.w"], p["proj.b"])
    out = nn.linear(nn.rms_norm(x, p["out.norm"]), p["out.w"], p["out.b"])
    return out, hook


def diffusion_loss(predict: Callable, z0, cond, t, noise):
    """Mean squared error between the true noise and ``predict(z_t, t, cond)``.

    ``predict`` may return an array (float result) or a tape node (node result).
    """
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    pred = predict(noised_latent(z0, noise, t), t, cond)
    if isinstance(pred, tm.Node):
        err = tm.sub(pred.tape.const(noise), pred)
        return tm.reduce_mean(tm.mul(err, err))
    return float(np.mean((noise - np.asarray(pred)) ** 2))


@dataclass
class Sample:
    """One training clip: clean latent grid, caption condition, frozen saliency, masks."""

    z0: np.ndarray      # (T, N, D)
    cond: np.ndarray    # (D_t,) pooled full-caption tokens
    saliency: np.ndarray  # (T, N) in [0, 1]
    fg: np.ndarray      # (T, N) binary


def make_samples(scenes: Sequence[SyntheticScene], saliency_fn: Callable[[SyntheticScene], np.ndarray]
                 ) -> list[Sample]:
    return [Sample(s.features, s.full_caption.mean(axis=0), np.clip(saliency_fn(s), 0.0, 1.0),
                   s.fg_mask) for s in scenes]


def stage2_loss(p: dict, batch: Sequence[Sample], t: np.ndarray, noise: np.ndarray,
                cfg: DenoiserConfig, s2: Stage2Config, operator: str | None = None):
    """Returns (total, diffusion, masked trd) tape nodes."""
    op = normalize_op(operator or s2.operator)
    z0 = np.stack([s.z0 for s in batch])
    b, tt, n, d = z0.shape
    cond = np.stack([s.cond for s in batch])
    flat0 = z0.reshape(b, tt * n, d)
    flat_noise = noise.reshape(b, tt * n, d)
    pred, hook = denoise(p, noised_latent(flat0, flat_noise, t), t, cond, cfg)
    tape = pred.tape
    err = tm.sub(tape.const(flat_noise), pred)
    diff = tm.reduce_mean(tm.mul(err, err))
    w = np.stack([s.saliency for s in batch])
    vp = tm.reshape(hook, (b, tt, n, d))
    trd = masked_trd(vp, z0, w, op, s2.trd).total
    total = tm.add(diff, tm.scale(trd, s2.lambda_trd))
    return total, diff, trd


def evaluate(params: nn.Params, samples: Sequence[Sample], cfg: DenoiserConfig, s2: Stage2Config,
             operator: str | None = None) -> dict[str, float]:
    """Held-out losses and per-category relational error at a fixed timestep and noise."""
    rng = np.random.default_rng(10_000 + s2.seed)
    sums = {"diff": [], "trd": [], "fg_fg": [], "fg_bg": [], "bg_bg": []}
    tape = tm.Tape()
    lifted = {k: tape.const(v) for k, v in params.items()}
    t = np.array([s2.eval_t])
    for s in samples:
        noise = rng.normal(size=(1,) + s.z0.shape)
        _, diff, trd = stage2_loss(lifted, [s], t, noise, cfg, s2, operator)
        sums["diff"].append(float(diff.value))
        sums["trd"].append(float(trd.value))
        tt, n, d = s.z0.shape
        _, hook = denoise(lifted, noised_latent(s.z0.reshape(1, tt * n, d), noise.reshape(1, tt * n, d), t),
                          t, s.cond[None], cfg)
        e = category_relation_error(hook.value.reshape(1, tt, n, d), s.z0[None], s.fg[None])
        for k, v in e.items():
            if not math.isnan(v):
                sums[k].append(v)
    return {k: float(np.mean(v)) if v else float("nan") for k, v in sums.items()}


def train_stage2(samples: Sequence[Sample], eval_samples: Sequence[Sample], cfg: DenoiserConfig,
                 s2: Stage2Config, operator: str | None = None,
                 log: Callable[[dict], None] | None = None) -> tuple[nn.Params, list[dict]]:
    """Train one denoiser; returns final params and per-evaluation rows.

    Logged losses and relational errors are held-out values at ``eval_t``.

    The data order, timesteps and noise depend only on ``s2.seed``, so runs
    that differ only in operator see identical inputs.
    """
    op = normalize_op(operator or s2.operator)
    if s2.steps and s2.batch > len(samples):
        raise ValueError(f"batch {s2.batch} exceeds the {len(samples)} training samples")
    params = init_denoiser(cfg, s2.seed)
    opt = nn.AdamW(nn.OptimizerConfig(**{**asdict(s2.optimizer), "total_steps": s2.steps}))
    rng = np.random.default_rng(s2.seed + 1)
    rows = []

    def record(step):
        e = evaluate(params, eval_samples, cfg, s2, op)
        row = {"step": step, "diff_loss": e["diff"], "trd_loss": e["trd"],
               "err_ffg": e["fg_fg"], "err_fbg": e["fg_bg"], "err_bbg": e["bg_bg"]}
        rows.append(row)
        if log is not None:
            log(row)

    record(0)
    for step in range(1, s2.steps + 1):
        idx = rng.choice(len(samples), size=s2.batch, replace=False)
        batch = [samples[i] for i in idx]
        t = rng.uniform(0.0, 1.0, size=s2.batch)
        noise = rng.normal(size=(s2.batch,) + batch[0].z0.shape)
        tape = tm.Tape()
        lifted = nn.lift(tape, params)
        total, _, _ = stage2_loss(lifted, batch, t, noise, cfg, s2, op)
        if not math.isfinite(float(total.value)):
            raise FloatingPointError("non-finite stage-2 loss")
        names = list(params)
        grads = dict(zip(names, tape.grad(total, [lifted[k] for k in names])))
        params, _ = opt.update(params, grads)
        if step % s2.eval_every == 0 or step == s2.steps:
            record(step)
    return params, rows


def routing_experiment(samples: Sequence[Sample], eval_samples: Sequence[Sample],
                       operators: Sequence[str], cfg: DenoiserConfig, s2: Stage2Config,
                       log: Callable[[str, dict], None] | None = None) -> dict[str, list[dict]]:
    """One run per operator with identical seeds; returns per-operator learning curves."""
    if not operators:
        raise ValueError("routing experiment needs at least one operator")
    curves = {}
    for op in operators:
        name = normalize_op(op)
        _, rows = train_stage2(samples, eval_samples, cfg, s2, name,
                               None if log is None else (lambda r, name=name: log(name, r)))
        curves[name] = rows
    return curves


__all__ = ["ALL_OPERATORS", "DenoiserConfig", "Stage2Config", "Sample", "denoise", "diffusion_loss",
           "evaluate", "init_denoiser", "make_samples", "noised_latent", "routing_experiment",
           "stage2_loss", "train_stage2"]
