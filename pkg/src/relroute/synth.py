"""Synthetic scenes standing in for frozen video features, entity masks and captions.

Every scene lives in a fixed "world" (drawn from ``vocab_seed``): a vocabulary
of entity and background concept directions in feature space, a shared
objectness direction, and a fixed map from feature space to text-embedding
space. A scene plants K disjoint rectangles, each filled with one entity
concept; its caption tokens are noisy text-space images of the same concept.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class GeneratorConfig:
    k_min: int = 2
    k_max: int = 3
    frames: int = 1
    height: int = 16
    width: int = 16
    d_v: int = 32
    d_t: int = 32
    caption_len: int = 4
    p_fg_mean: float = 0.48
    p_fg_concentration: float = 24.0
    entity_amp: float = 1.0
    objectness: float = 0.5
    background_amp: float = 0.6
    noise: float = 0.15
    text_noise: float = 0.3
    n_entity_concepts: int = 12
    n_background_concepts: int = 4
    vocab_seed: int = 1234

    def __post_init__(self):
        if min(self.frames, self.height, self.width, self.d_v, self.d_t, self.caption_len) < 1:
            raise ValueError("grid extents and widths must be positive")
        if not 0 <= self.k_min <= self.k_max:
            raise ValueError("need 0 <= k_min <= k_max")
        if not 0.0 < self.p_fg_mean < 1.0:
            raise ValueError("p_fg_mean must lie in (0, 1)")
        if self.k_max > self.n_entity_concepts:
            raise ValueError("k_max exceeds the entity vocabulary")

    @property
    def tokens(self) -> int:
        return self.height * self.width

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class World:
    entity_anchors: np.ndarray      # (C_e, D_v) unit rows
    background_anchors: np.ndarray  # (C_b, D_v) unit rows
    objectness: np.ndarray          # (D_v,)
    text_map: np.ndarray            # (D_v, D_t)


@lru_cache(maxsize=8)
def world_for(cfg: GeneratorConfig) -> World:
    rng = np.random.default_rng(cfg.vocab_seed)

    def unit_rows(n):
        x = rng.normal(size=(n, cfg.d_v))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    ent = unit_rows(cfg.n_entity_concepts)
    bg = unit_rows(cfg.n_background_concepts)
    obj = unit_rows(1)[0]
    text_map = rng.normal(size=(cfg.d_v, cfg.d_t)) / math.sqrt(cfg.d_v)
    return World(ent, bg, obj, text_map)


@dataclass
class SyntheticScene:
    features: np.ndarray              # (T, N, D_v)
    entity_masks: np.ndarray          # (K, T, N) binary
    entity_captions: list             # K arrays (L, D_t)
    background_caption: np.ndarray    # (L, D_t)
    p_fg: float
    seed: int
    height: int
    width: int
    entity_concepts: list = field(default_factory=list)
    background_concept: int = 0

    @property
    def k(self) -> int:
        return len(self.entity_captions)

    @property
    def fg_mask(self) -> np.ndarray:
        return mask_union(list(self.entity_masks), shape=self.features.shape[:2])

    @property
    def bg_mask(self) -> np.ndarray:
        return mask_complement(self.fg_mask)

    @property
    def combined_caption(self) -> np.ndarray:
        if not self.entity_captions:
            return np.zeros((0, self.background_caption.shape[1]))
        return np.concatenate(self.entity_captions, axis=0)

    @property
    def full_caption(self) -> np.ndarray:
        return np.concatenate(list(self.entity_captions) + [self.background_caption], axis=0)


def mask_union(masks, shape=None) -> np.ndarray:
    """Elementwise OR of equally-shaped binary masks."""
    masks = [np.asarray(m, dtype=np.float64) for m in masks]
    if not masks:
        if shape is None:
            raise ValueError("mask_union of no masks needs a shape")
        return np.zeros(shape)
    first = masks[0].shape
    for m in masks:
        if m.shape != first:
            raise ValueError(f"mask shape mismatch: {m.shape} vs {first}")
        _check_binary(m)
    return np.maximum.reduce(masks).astype(np.float64)


def mask_complement(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64)
    _check_binary(m)
    return 1.0 - m


def _check_binary(m: np.ndarray):
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("mask must be binary")


def _place_rectangles(rng, cfg: GeneratorConfig, k: int, target_area: float, tries: int = 200):
    """K disjoint rectangles whose areas split ``target_area``; None on failure."""
    h, w = cfg.height, cfg.width
    shares = rng.dirichlet(np.full(k, 2.0))
    areas = np.maximum(shares * target_area, 1.0)
    occupied = np.zeros((h, w), dtype=bool)
    rects = []
    for area in sorted(areas, reverse=True):
        placed = False
        for _ in range(tries):
            aspect = math.exp(rng.uniform(-0.6, 0.6))
            rh = int(np.clip(round(math.sqrt(area * aspect)), 1, h))
            rw = int(np.clip(round(area / rh), 1, w))
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            if not occupied[top:top + rh, left:left + rw].any():
                occupied[top:top + rh, left:left + rw] = True
                rects.append((top, left, rh, rw))
                placed = True
                break
        if not placed:
            return None
    return rects


def generate_scene(cfg: GeneratorConfig, seed: int) -> SyntheticScene:
    """Deterministic synthetic scene for ``seed``."""
    rng = np.random.default_rng(seed)
    world = world_for(cfg)
    n_tok = cfg.tokens
    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    if k > n_tok:
        raise ValueError(f"cannot fit {k} entities on a {cfg.height}x{cfg.width} grid")

    rects = []
    if k:
        a = cfg.p_fg_mean * cfg.p_fg_concentration
        b = (1.0 - cfg.p_fg_mean) * cfg.p_fg_concentration
        for _ in range(100):
            target = float(np.clip(rng.beta(a, b), 0.02, 0.95)) * n_tok
            rects = _place_rectangles(rng, cfg, k, target)
            if rects is not None:
                break
        else:
            raise ValueError(f"could not place {k} disjoint entities on a "
                             f"{cfg.height}x{cfg.width} grid")

    concepts = [int(c) for c in rng.choice(cfg.n_entity_concepts, size=k, replace=False)]
    bg_concept = int(rng.integers(cfg.n_background_concepts))

    t = cfg.frames
    masks = np.zeros((k, t, n_tok))
    for idx, (top, left, rh, rw) in enumerate(rects):
        grid = np.zeros((cfg.height, cfg.width))
        grid[top:top + rh, left:left + rw] = 1.0
        masks[idx] = grid.reshape(-1)[None, :]

    feats = rng.normal(0.0, cfg.noise, size=(t, n_tok, cfg.d_v))
    fg = masks.sum(axis=0) if k else np.zeros((t, n_tok))
    feats += (1.0 - fg)[..., None] * cfg.background_amp * world.background_anchors[bg_concept]
    for idx, c in enumerate(concepts):
        planted = cfg.entity_amp * world.entity_anchors[c] + cfg.objectness * world.objectness
        feats += masks[idx][..., None] * planted

    def caption(anchor):
        base = anchor @ world.text_map
        base = base / np.linalg.norm(base)
        toks = base[None, :] + rng.normal(0.0, cfg.text_noise / math.sqrt(cfg.d_t),
                                          size=(cfg.caption_len, cfg.d_t))
        return toks

    entity_captions = [caption(world.entity_anchors[c]) for c in concepts]
    background_caption = caption(world.background_anchors[bg_concept])

    scene = SyntheticScene(
        features=feats, entity_masks=masks, entity_captions=entity_captions,
        background_caption=background_caption, p_fg=float(fg.mean()), seed=int(seed),
        height=cfg.height, width=cfg.width, entity_concepts=concepts,
        background_concept=bg_concept)
    margin = planted_margin(scene, cfg)
    if k and margin < 0.2:
        raise RuntimeError(f"scene {seed}: planted-signal margin {margin:.3f} below 0.2")
    return scene


def planted_margin(scene: SyntheticScene, cfg: GeneratorConfig) -> float:
    """Smallest (mean cosine inside - mean cosine outside) to an entity's anchor."""
    world = world_for(cfg)
    x = scene.features / np.linalg.norm(scene.features, axis=-1, keepdims=True)
    margins = []
    for mask, c in zip(scene.entity_masks, scene.entity_concepts):
        cos = x @ world.entity_anchors[c]
        inside = mask > 0.5
        if inside.all() or not inside.any():
            continue
        margins.append(float(cos[inside].mean() - cos[~inside].mean()))
    return min(margins) if margins else math.inf


def generate_dataset(cfg: GeneratorConfig, n: int, seed: int = 0) -> list[SyntheticScene]:
    return [generate_scene(cfg, seed * 1_000_003 + i) for i in range(n)]
