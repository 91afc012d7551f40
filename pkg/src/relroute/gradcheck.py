"""Finite-difference checks of every differentiable objective on tiny instances.

Derivatives are estimated with a fourth-order central stencil at step 1e-4;
a 1e-6 two-point step loses small gradient entries to round-off. Coordinates
whose stencil straddles an L1 kink (a sign change of some absolute-value
argument between x - 2h and x + 2h) are skipped, which covers every
coordinate within 1e-6 of a kink.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import aligner as al
from . import nn
from . import stage2 as s2m
from . import tensor_math as tm
from .relation import MaskedTrdConfig, l2_normalize_tokens, masked_trd, trd_loss
from .synth import GeneratorConfig, generate_scene

TARGETS = ("trd", "masked-trd", "bce", "infonce", "stage1", "stage2")
KINK_WINDOW = 1e-6
FD_STEP = 1e-4
RESIDUAL_FLOOR = 1e-12


@dataclass
class Problem:
    """A scalar objective of one flat parameter vector with its tape gradient."""

    point: np.ndarray
    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    residual: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass
class GradcheckReport:
    target: str
    op: str | None
    seed: int
    checked: int
    skipped_kinks: int
    max_rel_err: float
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_rel_err < self.tolerance)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def near_kink(residual: Callable, x: np.ndarray, k: int, h: float) -> bool:
    flat = x.reshape(-1)
    orig = flat[k]
    flat[k] = orig + h
    hi = np.asarray(residual(x))
    flat[k] = orig - h
    lo = np.asarray(residual(x))
    flat[k] = orig
    live = np.maximum(np.abs(hi), np.abs(lo)) > RESIDUAL_FLOOR
    return bool(np.any(live & (np.sign(hi) != np.sign(lo))))


def check(problem: Problem, coords: int = 40, step: float = FD_STEP, seed: int = 0
          ) -> tuple[float, int, int]:
    """(max relative error, coordinates checked, coordinates skipped near kinks)."""
    x = problem.point.copy()
    rng = np.random.default_rng(seed)
    pool = np.arange(x.size)
    picked = pool if x.size <= coords else np.sort(rng.choice(pool, size=coords, replace=False))
    keep, skipped = [], 0
    reach = max(2 * step, KINK_WINDOW)
    for k in picked:
        if problem.residual is not None and near_kink(problem.residual, x, int(k), reach):
            skipped += 1
        else:
            keep.append(int(k))
    analytic = problem.gradient(x).reshape(-1)[keep]
    numeric = tm.finite_difference(problem.value, x, step=step, coords=keep, order=4).reshape(-1)[keep]
    return tm.relative_error(analytic, numeric), len(keep), skipped


def _tape_grad(build: Callable[[tm.Node], tm.Node], shape) -> Callable[[np.ndarray], np.ndarray]:
    def g(x):
        tape = tm.Tape()
        leaf = tape.leaf(x.reshape(shape))
        (out,) = tape.grad(build(leaf), [leaf])
        return out
    return g


def _gram_residual(vy, shape):
    """Flattened target-minus-student Gram, the argument of every |.| in the relation losses."""
    b, t, n, d = shape
    yn = l2_normalize_tokens(vy).reshape(b, t * n, d)
    gy = yn @ np.swapaxes(yn, 1, 2)

    def r(x):
        xn = l2_normalize_tokens(x.reshape(shape)).reshape(b, t * n, d)
        return gy - xn @ np.swapaxes(xn, 1, 2)
    return r


def relation_problem(seed: int, op: str | None, shape=(2, 2, 4, 3)) -> Problem:
    rng = np.random.default_rng(seed)
    vp, vy = rng.normal(size=shape), rng.normal(size=shape)
    w = rng.uniform(size=shape[:3])
    cfg = MaskedTrdConfig(tau=2.0)

    def loss(node_or_arr):
        x = node_or_arr if isinstance(node_or_arr, tm.Node) else node_or_arr.reshape(shape)
        if op is None:
            return trd_loss(x, vy).total
        return masked_trd(x, vy, w, op, cfg).total

    return Problem(vp.reshape(-1).copy(), lambda x: float(loss(x)), _tape_grad(loss, shape),
                   _gram_residual(vy, shape))


def bce_problem(seed: int) -> Problem:
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(3, 7))
    target = (rng.uniform(size=(3, 7)) > 0.5).astype(float)

    def build(x):
        return al.bce_loss(tm.sigmoid(x), target)

    def value(x):
        return float(al.bce_loss(1.0 / (1.0 + np.exp(-x.reshape(3, 7))), target))

    return Problem(logits.reshape(-1), value, _tape_grad(build, (3, 7)))


def infonce_problem(seed: int, tau: float = 0.07) -> Problem:
    rng = np.random.default_rng(seed)
    hp = rng.normal(size=(4, 5))
    hy = rng.normal(size=(4, 5))
    hy /= np.linalg.norm(hy, axis=1, keepdims=True)

    def build(x):
        return al.infonce_loss(tm.l2_normalize(x), hy, tau)

    def value(x):
        z = x.reshape(4, 5)
        return float(al.infonce_loss(z / np.linalg.norm(z, axis=1, keepdims=True), hy, tau))

    return Problem(hp.reshape(-1), value, _tape_grad(build, (4, 5)))


def _param_problem(params: dict, objective: Callable[[dict], tm.Node],
                   residual: Callable[[dict], np.ndarray] | None = None) -> Problem:
    """Flatten a parameter dict into one vector for finite differencing."""
    names = sorted(params)
    shapes = [params[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]

    def unflat(x):
        out, i = {}, 0
        for k, s, n in zip(names, shapes, sizes):
            out[k] = x[i:i + n].reshape(s)
            i += n
        return out

    def value(x):
        tape = tm.Tape()
        return float(objective({k: tape.const(v) for k, v in unflat(x).items()}).value)

    def gradient(x):
        tape = tm.Tape()
        lifted = nn.lift(tape, unflat(x))
        grads = tape.grad(objective(lifted), [lifted[k] for k in names])
        return np.concatenate([g.reshape(-1) for g in grads])

    point = np.concatenate([params[k].reshape(-1) for k in names])
    res = None if residual is None else (lambda x: residual(unflat(x)))
    return Problem(point, value, gradient, res)


def stage1_problem(seed: int) -> Problem:
    cfg = al.AlignerConfig(d_v=8, d_t=8, heads=2, n_cross=1, n_self=1, sal_hidden=8, text_heads=2)
    gen = GeneratorConfig(height=4, width=4, d_v=8, d_t=8, caption_len=2, k_min=2, k_max=2,
                          p_fg_mean=0.4)
    scene = generate_scene(gen, seed)
    text_model = al.TextModel(cfg.d_t, cfg.text_blocks, cfg.text_heads, cfg.text_seed)
    video = al.supervision_units(scene, text_model, "full")
    s1 = al.Stage1Config(tau_nce=0.5)
    params = al.init_params(cfg, seed)
    return _param_problem(params, lambda p: al.stage1_objective(p, [video], cfg, s1, text_model)[0])


def stage2_problem(seed: int, op: str = "or") -> Problem:
    cfg = s2m.DenoiserConfig(d_latent=4, d_cond=4, width=8, blocks=2, heads=2, hookup=1, time_dim=4)
    rng = np.random.default_rng(seed)
    t_frames, n = 2, 4
    samples = [s2m.Sample(rng.normal(size=(t_frames, n, 4)), rng.normal(size=4),
                          rng.uniform(size=(t_frames, n)),
                          (rng.uniform(size=(t_frames, n)) > 0.5).astype(float)) for _ in range(2)]
    t = rng.uniform(size=2)
    noise = rng.normal(size=(2, t_frames, n, 4))
    s2 = s2m.Stage2Config(operator=op, trd=MaskedTrdConfig(tau=2.0))
    params = s2m.init_denoiser(cfg, seed)

    def objective(p):
        return s2m.stage2_loss(p, samples, t, noise, cfg, s2)[0]

    z0 = np.stack([s.z0 for s in samples])
    yn = l2_normalize_tokens(z0).reshape(2, t_frames * n, 4)
    gy = yn @ np.swapaxes(yn, 1, 2)

    def residual(p):
        tape = tm.Tape()
        lifted = {k: tape.const(v) for k, v in p.items()}
        flat0 = z0.reshape(2, t_frames * n, 4)
        _, hook = s2m.denoise(lifted, s2m.noised_latent(flat0, noise.reshape(flat0.shape), t), t,
                              np.stack([s.cond for s in samples]), cfg)
        hn = l2_normalize_tokens(hook.value.reshape(z0.shape)).reshape(flat0.shape)
        return gy - hn @ np.swapaxes(hn, 1, 2)

    return _param_problem(params, objective, residual)


def build_problem(target: str, seed: int, op: str = "or") -> Problem:
    if target == "trd":
        return relation_problem(seed, None)
    if target == "masked-trd":
        return relation_problem(seed, op)
    if target == "bce":
        return bce_problem(seed)
    if target == "infonce":
        return infonce_problem(seed)
    if target == "stage1":
        return stage1_problem(seed)
    if target == "stage2":
        return stage2_problem(seed, op)
    raise ValueError(f"unknown gradcheck target {target!r}; expected one of {TARGETS}")


def run_gradcheck(target: str, seed: int = 0, op: str = "or", coords: int = 40,
                  tolerance: float = 1e-4) -> GradcheckReport:
    problem = build_problem(target, seed, op)
    err, n, skipped = check(problem, coords=coords, seed=seed)
    uses_op = target in ("masked-trd", "stage2")
    return GradcheckReport(target, op if uses_op else None, seed, n, skipped, err, tolerance)
