"""Layers and optimizer shared by the aligner and the toy denoiser.

Parameters are flat ``dict[str, np.ndarray]``; a forward pass lifts them onto a
tape with :func:`lift` and the layer functions below work on the nodes.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_math as tm

Params = dict


def lift(tape: tm.Tape, params: Params) -> dict:
    return {name: tape.leaf(value) for name, value in params.items()}


def fingerprint(params: Params) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


def init_block(rng, prefix: str, width: int, ctx_width: int | None = None,
               mlp_ratio: int = 2, zero_out: bool = False) -> Params:
    """Pre-norm attention block (cross-attention when ``ctx_width`` is given) plus MLP."""
    kv = width if ctx_width is None else ctx_width
    hidden = mlp_ratio * width
    out_scale = 0.0 if zero_out else 1.0
    p = {
        f"{prefix}.norm1": np.ones(width),
        f"{prefix}.wq": glorot(rng, width, width),
        f"{prefix}.wk": glorot(rng, kv, width),
        f"{prefix}.wv": glorot(rng, kv, width),
        f"{prefix}.wo": glorot(rng, width, width) * out_scale,
        f"{prefix}.norm2": np.ones(width),
        f"{prefix}.w1": glorot(rng, width, hidden),
        f"{prefix}.b1": np.zeros(hidden),
        f"{prefix}.w2": glorot(rng, hidden, width) * out_scale,
        f"{prefix}.b2": np.zeros(width),
    }
    if ctx_width is not None:
        p[f"{prefix}.norm_ctx"] = np.ones(ctx_width)
    return p


def rms_norm(x: tm.Node, gain: tm.Node, eps: float = 1e-6) -> tm.Node:
    ms = tm.reduce_mean(tm.mul(x, x), axis=-1, keepdims=True)
    return tm.mul(tm.mul(x, tm.power(tm.add(ms, x.tape.const(eps)), -0.5)), gain)


def linear(x: tm.Node, w: tm.Node, b: tm.Node | None = None) -> tm.Node:
    y = tm.matmul(x, w)
    return y if b is None else tm.add(y, b)


def gelu(x: tm.Node) -> tm.Node:
    # sigmoid approximation of GELU; smooth everywhere
    return tm.mul(x, tm.sigmoid(tm.scale(x, 1.702)))


def split_heads(x: tm.Node, heads: int) -> tm.Node:
    b, n, d = x.shape
    return tm.transpose(tm.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: tm.Node) -> tm.Node:
    b, h, n, dh = x.shape
    return tm.reshape(tm.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention(q_in: tm.Node, kv_in: tm.Node, p: dict, prefix: str, heads: int,
              bias: np.ndarray | None = None) -> tuple[tm.Node, tm.Node]:
    """Multi-head attention; returns (output, probabilities (B, H, Nq, Nk))."""
    width = p[f"{prefix}.wq"].shape[1]
    if width % heads:
        raise ValueError(f"width {width} not divisible by {heads} heads")
    q = split_heads(tm.scale(tm.matmul(q_in, p[f"{prefix}.wq"]), 1.0 / math.sqrt(width // heads)), heads)
    k = split_heads(tm.matmul(kv_in, p[f"{prefix}.wk"]), heads)
    v = split_heads(tm.matmul(kv_in, p[f"{prefix}.wv"]), heads)
    scores = tm.matmul(q, tm.swapaxes(k, 2, 3))
    if bias is not None:
        scores = tm.add(scores, q_in.tape.const(bias))
    probs = tm.softmax(scores, axis=-1)
    out = tm.matmul(merge_heads(tm.matmul(probs, v)), p[f"{prefix}.wo"])
    return out, probs


def block(x: tm.Node, p: dict, prefix: str, heads: int, ctx: tm.Node | None = None,
          bias: np.ndarray | None = None, last_only: bool = False) -> tuple[tm.Node, tm.Node]:
    """x + Attn(norm x, ctx) then x + MLP(norm x). Returns (output, attention probs).

    ``last_only`` computes self-attention output for the final position only.
    """
    h = rms_norm(x, p[f"{prefix}.norm1"])
    kv = h if ctx is None else rms_norm(ctx, p[f"{prefix}.norm_ctx"])
    if last_only:
        n = x.shape[1]
        x = tm.gather(x, [n - 1], axis=1)
        h = tm.gather(h, [n - 1], axis=1)
        bias = None if bias is None else bias[..., n - 1:, :]
    attn, probs = attention(h, kv, p, prefix, heads, bias)
    x = tm.add(x, attn)
    h = rms_norm(x, p[f"{prefix}.norm2"])
    h = linear(gelu(linear(h, p[f"{prefix}.w1"], p[f"{prefix}.b1"])), p[f"{prefix}.w2"], p[f"{prefix}.b2"])
    return tm.add(x, h), probs


def causal_bias(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -1e30), k=1)


def key_padding_bias(lengths, max_len: int) -> np.ndarray:
    """(B, 1, 1, L) additive bias masking padded key positions."""
    lengths = np.asarray(lengths)
    pad = np.arange(max_len)[None, :] >= lengths[:, None]
    return np.where(pad, -1e30, 0.0)[:, None, None, :]


@dataclass
class OptimizerConfig:
    lr: float = 3e-3
    min_lr: float = 1e-4
    warmup_steps: int = 50
    total_steps: int = 1000
    weight_decay: float = 0.01
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"  # or "constant"


@dataclass
class AdamW:
    """Adam with decoupled weight decay, linear warmup and global-norm clipping."""

    cfg: OptimizerConfig
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        c = self.cfg
        lo = min(c.min_lr, c.lr)
        if c.warmup_steps and step < c.warmup_steps:
            return c.lr * (step + 1) / c.warmup_steps
        if c.schedule == "constant":
            return c.lr
        span = max(c.total_steps - c.warmup_steps, 1)
        frac = min(max(step - c.warmup_steps, 0) / span, 1.0)
        return lo + 0.5 * (c.lr - lo) * (1.0 + math.cos(math.pi * frac))

    def update(self, params: Params, grads: dict) -> tuple[Params, dict]:
        c = self.cfg
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not math.isfinite(gnorm):
            raise FloatingPointError("non-finite gradient norm")
        factor = min(1.0, c.clip / (gnorm + 1e-12)) if c.clip > 0 else 1.0
        lr = self.lr_at(self.step)
        self.step += 1
        t = self.step
        new = {}
        for name, value in params.items():
            g = grads[name] * factor
            m = c.beta1 * self.m.get(name, 0.0) + (1 - c.beta1) * g
            v = c.beta2 * self.v.get(name, 0.0) + (1 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - c.beta1 ** t)
            vhat = v / (1 - c.beta2 ** t)
            decayed = value * (1.0 - lr * c.weight_decay) if value.ndim > 1 else value
            new[name] = decayed - lr * mhat / (np.sqrt(vhat) + c.eps)
        return new, {"grad_norm": gnorm, "lr": lr}
