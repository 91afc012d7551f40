"""Text-conditioned saliency aligner (cross-attention fusion, saliency head, projector).

The frozen text model is a fixed-seed random causal attention stack. It plays
both text roles: caption token embeddings are fed to the aligner's
cross-attention as they are, and the same stack, run over a token sequence and
last-token pooled, produces the contrastive hidden state (for captions and,
through the projector, for fused visual tokens).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import tensor_math as tm
from .synth import SyntheticScene

BCE_CLAMP = 1e-7
KINDS = ("entity", "combined", "background")
RECIPES = ("full", "no-nce", "no-entity", "no-nce-no-entity")


@dataclass(frozen=True)
class AlignerConfig:
    d_v: int = 32
    d_t: int = 32
    heads: int = 8
    n_cross: int = 2
    n_self: int = 4
    sal_hidden: int = 512
    mlp_ratio: int = 2
    text_blocks: int = 2
    text_heads: int = 4
    text_seed: int = 7

    def __post_init__(self):
        if self.d_v % self.heads or self.d_t % self.text_heads:
            raise ValueError("head count must divide the model width")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Stage1Config:
    lambda_bce: float = 1.0
    lambda_nce: float = 1.0
    tau_nce: float = 0.07
    recipe: str = "full"
    steps: int = 1000
    videos_per_step: int = 1
    seed: int = 0
    optimizer: nn.OptimizerConfig = field(default_factory=nn.OptimizerConfig)

    def __post_init__(self):
        if not self.tau_nce > 0:
            raise ValueError("tau_nce must be positive")
        if self.lambda_bce < 0 or self.lambda_nce < 0:
            raise ValueError("loss weights must be non-negative")
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}")


def ablation_variant(recipe: str, base: Stage1Config | None = None) -> Stage1Config:
    """Training config for a Stage-1 recipe; ``no-nce`` zeroes the InfoNCE weight."""
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")
    base = base or Stage1Config()
    kw = {k: getattr(base, k) for k in base.__dataclass_fields__}
    kw["recipe"] = recipe
    kw["lambda_nce"] = 0.0 if "no-nce" in recipe else base.lambda_nce
    return Stage1Config(**kw)


def uses_entity_units(recipe: str) -> bool:
    return "no-entity" not in recipe


# frozen text model ------------------------------------------------------------

class TextModel:
    """Frozen surrogate language model over (L, D_t) token sequences."""

    def __init__(self, d_t: int, blocks: int = 2, heads: int = 4, seed: int = 7):
        rng = np.random.default_rng(seed)
        self.heads = heads
        self.blocks = blocks
        self.params = {}
        for i in range(blocks):
            self.params.update(nn.init_block(rng, f"lm.{i}", d_t))

    def run(self, tokens: tm.Node, params: dict) -> tm.Node:
        """Pooled, unit-norm last-token hidden state for (B, L, D_t) tokens."""
        n = tokens.shape[1]
        bias = nn.causal_bias(n)
        x = tokens
        for i in range(self.blocks):
            x, _ = nn.block(x, params, f"lm.{i}", self.heads, bias=bias,
                            last_only=i == self.blocks - 1)
        last = tm.reshape(x, (x.shape[0], x.shape[2]))
        return tm.l2_normalize(last)

    def encode(self, tokens: np.ndarray) -> np.ndarray:
        tape = tm.Tape()
        frozen = {k: tape.const(v) for k, v in self.params.items()}
        x = tape.const(np.asarray(tokens, dtype=np.float64)[None])
        return self.run(x, frozen).value[0]


@dataclass
class CaptionEmbedding:
    token_embeddings: np.ndarray  # (L, D_t)
    pooled_hidden: np.ndarray     # (D_t,), unit norm

    @classmethod
    def from_tokens(cls, tokens: np.ndarray, text_model: TextModel) -> "CaptionEmbedding":
        tokens = np.asarray(tokens, dtype=np.float64)
        return cls(tokens, text_model.encode(tokens))


@dataclass
class EntitySupervisionUnit:
    caption: CaptionEmbedding
    mask: np.ndarray  # (T_s, H_s * W_s) binary
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown unit kind {self.kind!r}")
        m = np.asarray(self.mask, dtype=np.float64)
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("supervision mask must be binary")


@dataclass
class VideoUnits:
    features: np.ndarray  # (T_s, N, D_v)
    units: list
    grid: tuple = (0, 0)  # (H_s, W_s)


def supervision_units(scene: SyntheticScene, text_model: TextModel, recipe: str = "full",
                      grid: tuple | None = None) -> VideoUnits:
    """K entity units + combined + background, or a single combined unit without entity separation."""
    t = scene.features.shape[0]
    hs, ws = grid or (scene.height, scene.width)

    def target(mask):
        m = mask.reshape(t, scene.height, scene.width)
        return downsample_mask(m, (t, hs, ws)).reshape(t, hs * ws)

    fg = scene.fg_mask
    units = []
    if uses_entity_units(recipe):
        for caption, mask in zip(scene.entity_captions, scene.entity_masks):
            units.append(EntitySupervisionUnit(
                CaptionEmbedding.from_tokens(caption, text_model), target(mask), "entity"))
    units.append(EntitySupervisionUnit(
        CaptionEmbedding.from_tokens(scene.combined_caption, text_model), target(fg), "combined"))
    if uses_entity_units(recipe):
        units.append(EntitySupervisionUnit(
            CaptionEmbedding.from_tokens(scene.background_caption, text_model),
            target(scene.bg_mask), "background"))
    return VideoUnits(scene.features, units, (hs, ws))


# mask targets -------------------------------------------------------------------

def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) half-pixel bilinear resampling weights."""
    mat = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        x = (i + 0.5) * scale - 0.5
        x = min(max(x, 0.0), src - 1.0)
        lo = int(math.floor(x))
        hi = min(lo + 1, src - 1)
        frac = x - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


def downsample_mask(mask, target: Sequence[int]) -> np.ndarray:
    """Bilinear spatial resampling of a binary (F, H, W) mask, then threshold at 0.5 (ties -> 1).

    Frames are broadcast (F = 1) or sampled at the nearest source frame.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[None]
    ts, hs, ws = (int(x) for x in target)
    f, h, w = m.shape
    if min(ts, hs, ws, f, h, w) < 1:
        raise ValueError("degenerate mask extents")
    if hs > h or ws > w:
        raise ValueError(f"target {target} exceeds source extents {(f, h, w)}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mask must be binary")
    rows, cols = _bilinear_matrix(h, hs), _bilinear_matrix(w, ws)
    small = np.einsum("ih,fhw,jw->fij", rows, m, cols)
    if f == 1:
        frames = np.zeros(ts, dtype=int)
    else:
        frames = np.minimum(((np.arange(ts) + 0.5) * f / ts).astype(int), f - 1)
    return (small[frames] >= 0.5 - 1e-12).astype(np.float64)


# parameters and forward ---------------------------------------------------------

def init_params(cfg: AlignerConfig, seed: int = 0, zero_out: bool = False) -> nn.Params:
    rng = np.random.default_rng(seed)
    p: nn.Params = {}
    for i in range(cfg.n_cross):
        p.update(nn.init_block(rng, f"ca.{i}", cfg.d_v, ctx_width=cfg.d_t,
                               mlp_ratio=cfg.mlp_ratio, zero_out=zero_out))
    for i in range(cfg.n_self):
        p.update(nn.init_block(rng, f"sa.{i}", cfg.d_v, mlp_ratio=cfg.mlp_ratio, zero_out=zero_out))
    p["sal.w1"] = nn.glorot(rng, cfg.d_v, cfg.sal_hidden)
    p["sal.b1"] = np.zeros(cfg.sal_hidden)
    p["sal.w2"] = nn.glorot(rng, cfg.sal_hidden, 1)
    p["sal.b2"] = np.zeros(1)
    p["proj.norm"] = np.ones(cfg.d_v)
    p["proj.w"] = nn.glorot(rng, cfg.d_v, cfg.d_t)
    return p


@dataclass
class ForwardOut:
    fused: tm.Node            # (U, N_v, D_v)
    saliency: tm.Node         # (U, N_v)
    pooled: tm.Node | None    # (U, D_t)
    cross_attn: list          # per CA block, (U, H, N_v, L)
    self_attn: list           # per SA block, (U, H, N_v, N_v)


def pad_captions(captions: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([c.shape[0] for c in captions])
    out = np.zeros((len(captions), int(lengths.max()), captions[0].shape[1]))
    for i, c in enumerate(captions):
        out[i, :c.shape[0]] = c
    return out, lengths


def fuse(vy: tm.Node, text: tm.Node, p: dict, cfg: AlignerConfig,
         lengths=None) -> tuple[tm.Node, list, list]:
    """Cross-attention blocks (visual queries, text keys/values) then self-attention blocks."""
    if vy.shape[-1] != cfg.d_v or text.shape[-1] != cfg.d_t:
        raise ValueError(f"width mismatch: visual {vy.shape[-1]} vs {cfg.d_v}, "
                         f"text {text.shape[-1]} vs {cfg.d_t}")
    bias = None if lengths is None else nn.key_padding_bias(lengths, text.shape[1])
    x = vy
    ca, sa = [], []
    for i in range(cfg.n_cross):
        x, probs = nn.block(x, p, f"ca.{i}", cfg.heads, ctx=text, bias=bias)
        ca.append(probs)
    for i in range(cfg.n_self):
        x, probs = nn.block(x, p, f"sa.{i}", cfg.heads)
        sa.append(probs)
    return x, ca, sa


def saliency(fused: tm.Node, p: dict) -> tm.Node:
    h = nn.gelu(nn.linear(fused, p["sal.w1"], p["sal.b1"]))
    logits = nn.linear(h, p["sal.w2"], p["sal.b2"])
    return tm.reshape(tm.sigmoid(logits), fused.shape[:2])


def project_visual(fused: tm.Node, p: dict, text_model: TextModel, frozen: dict) -> tm.Node:
    """Projector into text-embedding space, frozen text stack, last-token pool, normalize."""
    z = tm.matmul(nn.rms_norm(fused, p["proj.norm"]), p["proj.w"])
    return text_model.run(z, frozen)


def forward(p: dict, vy: np.ndarray, captions: Sequence[np.ndarray], cfg: AlignerConfig,
            text_model: TextModel | None = None, tape: tm.Tape | None = None) -> ForwardOut:
    """One batched forward: row u pairs the visual tokens with caption u.

    ``vy`` is (N_v, D_v) shared by all rows or (U, N_v, D_v).
    """
    tape = tape or next(iter(p.values())).tape
    vy = np.asarray(vy, dtype=np.float64)
    if vy.ndim == 2:
        vy = np.broadcast_to(vy, (len(captions),) + vy.shape)
    text, lengths = pad_captions(captions)
    fused, ca, sa = fuse(tape.const(vy), tape.const(text), p, cfg,
                         lengths if np.any(lengths != lengths.max()) else None)
    sal = saliency(fused, p)
    pooled = None
    if text_model is not None:
        frozen = {k: tape.const(v) for k, v in text_model.params.items()}
        pooled = project_visual(fused, p, text_model, frozen)
    return ForwardOut(fused, sal, pooled, ca, sa)


def run_numpy(params: nn.Params, vy: np.ndarray, captions, cfg: AlignerConfig,
              text_model: TextModel | None = None) -> ForwardOut:
    tape = tm.Tape()
    lifted = {k: tape.const(v) for k, v in params.items()}
    return forward(lifted, vy, captions, cfg, text_model, tape)


# losses -------------------------------------------------------------------------

def bce_loss(mp, my) -> object:
    """Mean per-patch binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    is_node = isinstance(mp, tm.Node)
    node = mp if is_node else tm.Tape().const(mp)
    y = np.asarray(my, dtype=np.float64)
    if y.shape != node.shape:
        raise ValueError(f"shape mismatch: prediction {node.shape} vs target {y.shape}")
    tape = node.tape
    p = tm.clip(node, BCE_CLAMP, 1.0 - BCE_CLAMP)
    ll = tm.add(tm.mul(tape.const(y), tm.log(p)),
                tm.mul(tape.const(1.0 - y), tm.log(tm.sub(tape.const(1.0), p))))
    loss = tm.scale(tm.reduce_mean(ll), -1.0)
    return loss if is_node else float(loss.value)


def infonce_loss(hp, hy, tau_nce: float = 0.07) -> object:
    """Mean over rows of cross-entropy of (hp @ hy.T / tau) against the diagonal."""
    if not tau_nce > 0:
        raise ValueError("tau_nce must be positive")
    is_node = isinstance(hp, tm.Node)
    node = hp if is_node else tm.Tape().const(hp)
    y = np.asarray(hy, dtype=np.float64)
    if y.shape != node.shape or node.ndim != 2:
        raise ValueError(f"expected matching (B, D) inputs, got {node.shape} and {y.shape}")
    tape = node.tape
    logits = tm.scale(tm.matmul(node, tape.const(y.T)), 1.0 / tau_nce)
    positive = tm.reduce_sum(tm.mul(logits, tape.const(np.eye(y.shape[0]))), axis=1)
    loss = tm.reduce_mean(tm.sub(tm.logsumexp(logits, axis=1), positive))
    return loss if is_node else float(loss.value)


# stage-1 training ---------------------------------------------------------------

@dataclass
class StepResult:
    params: nn.Params
    loss: float
    bce: float
    nce: float
    n_forwards: int
    grad_norm: float = 0.0
    lr: float = 0.0


def stage1_objective(p: dict, videos: Sequence[VideoUnits], cfg: AlignerConfig,
                     s1: Stage1Config, text_model: TextModel,
                     before_forward: Callable[[], None] | None = None):
    """lambda_bce * BCE + lambda_nce * InfoNCE over every unit of every video.

    BCE averages over all units' patches; the InfoNCE batch pools all units in
    the step. Returns (loss node, bce node, nce node, forward count).
    """
    if not videos or not any(v.units for v in videos):
        raise ValueError("stage-1 step needs at least one supervision unit")
    sal_terms, pooled, targets = [], [], []
    for video in videos:
        if before_forward is not None:
            before_forward()
        caps = [u.caption.token_embeddings for u in video.units]
        out = forward(p, video.features.reshape(-1, cfg.d_v), caps, cfg,
                      text_model if s1.lambda_nce > 0 else None)
        my = np.stack([u.mask.reshape(-1) for u in video.units])
        sal_terms.append(bce_loss(out.saliency, my))
        if out.pooled is not None:
            pooled.append(out.pooled)
            targets.extend(u.caption.pooled_hidden for u in video.units)
    tape = sal_terms[0].tape
    n_forwards = sum(len(v.units) for v in videos)
    weights = [len(v.units) / n_forwards for v in videos]
    bce = sal_terms[0] if len(sal_terms) == 1 else tm.reduce_sum(
        tm.concat([tm.reshape(tm.scale(b, wt), (1,)) for b, wt in zip(sal_terms, weights)]))
    if pooled:
        hp = pooled[0] if len(pooled) == 1 else tm.concat(pooled, axis=0)
        nce = infonce_loss(hp, np.stack(targets), s1.tau_nce)
    else:
        nce = tape.const(0.0)
    loss = tm.add(tm.scale(bce, s1.lambda_bce), tm.scale(nce, s1.lambda_nce))
    return loss, bce, nce, n_forwards


def stage1_step(videos: Sequence[VideoUnits], params: nn.Params, cfg: AlignerConfig,
                s1: Stage1Config, optimizer: nn.AdamW, text_model: TextModel,
                on_forward: Callable[[str], None] | None = None) -> StepResult:
    """One optimizer update from the K+2 (or 1) forwards of each video, parameters shared."""
    tape = tm.Tape()
    lifted = nn.lift(tape, params)
    hook = None if on_forward is None else (lambda: on_forward(nn.fingerprint(params)))
    loss, bce, nce, n = stage1_objective(lifted, videos, cfg, s1, text_model, hook)
    value = float(loss.value)
    if not math.isfinite(value):
        raise FloatingPointError("non-finite stage-1 loss")
    names = list(params)
    grads = dict(zip(names, tape.grad(loss, [lifted[k] for k in names])))
    new, info = optimizer.update(params, grads)
    return StepResult(new, value, float(bce.value), float(nce.value), n,
                      info["grad_norm"], info["lr"])


def train_aligner(scenes: Sequence[SyntheticScene], cfg: AlignerConfig, s1: Stage1Config,
                  text_model: TextModel | None = None, params: nn.Params | None = None,
                  log: Callable[[dict], None] | None = None) -> tuple[nn.Params, list[dict]]:
    text_model = text_model or TextModel(cfg.d_t, cfg.text_blocks, cfg.text_heads, cfg.text_seed)
    params = params if params is not None else init_params(cfg, s1.seed)
    opt_cfg = nn.OptimizerConfig(**{**asdict(s1.optimizer), "total_steps": s1.steps})
    optimizer = nn.AdamW(opt_cfg)
    videos = [supervision_units(s, text_model, s1.recipe) for s in scenes]
    rng = np.random.default_rng(s1.seed)
    order = np.array([], dtype=int)
    rows = []
    for step in range(s1.steps):
        if order.size < s1.videos_per_step:
            order = np.concatenate([order, rng.permutation(len(videos))])
        pick, order = order[:s1.videos_per_step], order[s1.videos_per_step:]
        res = stage1_step([videos[i] for i in pick], params, cfg, s1, optimizer, text_model)
        params = res.params
        row = {"step": step, "loss": res.loss, "bce": res.bce, "nce": res.nce,
               "forwards": res.n_forwards, "grad_norm": res.grad_norm, "lr": res.lr}
        rows.append(row)
        if log is not None:
            log(row)
    return params, rows


# evaluation -----------------------------------------------------------------------

def iou(pred, target) -> float:
    pred, target = np.asarray(pred) > 0.5, np.asarray(target) > 0.5
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def entity_saliency(params: nn.Params, scene: SyntheticScene, cfg: AlignerConfig) -> np.ndarray:
    """(K, T*N) saliency for each per-entity caption query."""
    out = run_numpy(params, scene.features.reshape(-1, cfg.d_v), scene.entity_captions, cfg)
    return out.saliency.value


def full_caption_saliency(params: nn.Params, scene: SyntheticScene, cfg: AlignerConfig) -> np.ndarray:
    """(T, N) saliency when queried with the scene's full caption."""
    out = run_numpy(params, scene.features.reshape(-1, cfg.d_v), [scene.full_caption], cfg)
    return out.saliency.value[0].reshape(scene.features.shape[:2])


def evaluate_aligner(params: nn.Params, scenes: Sequence[SyntheticScene], cfg: AlignerConfig,
                     text_model: TextModel | None = None) -> dict:
    """Held-out per-entity IoU, BCE and coverage under per-entity queries."""
    ious, bces, cover = [], [], []
    for scene in scenes:
        if scene.k == 0:
            continue
        sal = entity_saliency(params, scene, cfg)
        for k in range(scene.k):
            target = scene.entity_masks[k].reshape(-1)
            ious.append(iou(sal[k], target))
            bces.append(bce_loss(sal[k], target))
            cover.append(float(np.mean(sal[k] > 0.5)))
    return {"iou": float(np.mean(ious)), "bce": float(np.mean(bces)),
            "coverage": float(np.mean(cover)), "n_queries": len(ious)}
