"""Sparse measurement masks, the observation model and the dense initial fill."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .priors import GAIN_FLOOR_DB

SAMPLING_MODES = ("random", "grid", "road")
BENCHMARK_RATIOS = (0.05, 0.10, 0.20, 0.40)

# Row-major order of the 8-neighborhood; init_fill sums neighbors in this order.
NEIGHBOR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class SamplingConfig:
    mode: str = "random"
    ratio: float = 0.10
    noise_std_db: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if self.noise_std_db < 0:
            raise ValueError("noise_std_db must be nonnegative")

    @property
    def tag(self) -> str:
        return f"{self.mode}{int(round(self.ratio * 100)):02d}"


@dataclass
class SparseObservation:
    Gs: np.ndarray
    Ms: np.ndarray
    config: SamplingConfig


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_mask(Ma: np.ndarray, road_mask: np.ndarray | None, config: SamplingConfig) -> np.ndarray:
    """Boolean observation mask, always a subset of ``Ma``."""
    Ma = np.asarray(Ma) > 0.5
    n_acc = int(Ma.sum())
    if n_acc == 0:
        raise ValueError("accessibility mask has no accessible cell")
    target = max(_round_half_up(config.ratio * n_acc), 1)
    rng = np.random.default_rng(int(config.seed))
    ms = np.zeros(Ma.shape, dtype=bool)

    if config.mode == "random":
        cand = np.flatnonzero(Ma)
        ms.flat[rng.choice(cand, size=min(target, cand.size), replace=False)] = True
    elif config.mode == "grid":
        stride = max(int(math.floor(math.sqrt(n_acc / target))), 1)
        anchor = stride // 2
        ms[anchor::stride, anchor::stride] = True
        ms &= Ma
    else:
        if road_mask is None:
            raise ValueError("road sampling requires a road mask")
        cand = np.flatnonzero(Ma & (np.asarray(road_mask) > 0.5))
        if cand.size == 0:
            raise ValueError("road sampling requested but no accessible road cell exists")
        ms.flat[rng.choice(cand, size=min(target, cand.size), replace=False)] = True
    return ms


def observe(G, Ms, noise_std_db: float = 0.0, seed: int = 0, config: SamplingConfig | None = None) -> SparseObservation:
    """Apply ``Gs = Ms * (G + N)`` with noise drawn only at observed cells."""
    g = np.asarray(getattr(G, "values", G), dtype=float)
    ms = np.asarray(Ms) > 0.5
    if g.shape != ms.shape:
        raise ValueError(f"gain shape {g.shape} does not match mask shape {ms.shape}")
    gs = np.zeros_like(g)
    vals = g[ms]
    if noise_std_db > 0:
        vals = vals + np.random.default_rng(int(seed)).normal(0.0, noise_std_db, size=vals.size)
    gs[ms] = vals
    if config is None:
        config = SamplingConfig(noise_std_db=noise_std_db, seed=seed)
    return SparseObservation(gs, ms, config)


def _shifted(a: np.ndarray, di: int, dj: int, fill) -> np.ndarray:
    """``out[i, j] = a[i + di, j + dj]`` with out-of-range reads set to ``fill``."""
    out = np.full_like(a, fill)
    h, w = a.shape
    src_i = slice(max(di, 0), h + min(di, 0))
    src_j = slice(max(dj, 0), w + min(dj, 0))
    dst_i = slice(max(-di, 0), h + min(-di, 0))
    dst_j = slice(max(-dj, 0), w + min(-dj, 0))
    out[dst_i, dst_j] = a[src_i, src_j]
    return out


def init_fill(Gs, Ms, Ma, floor_value: float = GAIN_FLOOR_DB, max_iter: int | None = None):
    """Dense initialization by simultaneous neighbor-mean sweeps.

    Each sweep assigns every unfilled accessible cell that has at least one
    filled accessible 8-neighbor the mean of those neighbors, all cells updated
    from the previous sweep's state. Sweeps stop when nothing changes or after
    ``4 * max(H, W)`` sweeps; accessible cells still unfilled take the mean of
    the observations and inaccessible cells take ``floor_value``.
    """
    gs = np.asarray(Gs, dtype=np.float64)
    ms = np.asarray(Ms) > 0.5
    ma = np.asarray(Ma) > 0.5
    if not (gs.shape == ms.shape == ma.shape):
        raise ValueError("Gs, Ms and Ma must share one shape")
    obs = ms & ma
    if ma.any() and not obs.any():
        raise ValueError("init_fill needs at least one observed accessible cell")
    if max_iter is None:
        max_iter = 4 * max(gs.shape)

    vals = np.where(obs, gs, 0.0)
    filled = obs.copy()
    for _ in range(max_iter):
        total = np.zeros_like(vals)
        count = np.zeros(vals.shape, dtype=np.int64)
        for di, dj in NEIGHBOR_OFFSETS:
            f = _shifted(filled, di, dj, False)
            total = total + np.where(f, _shifted(vals, di, dj, 0.0), 0.0)
            count += f
        new = ma & ~filled & (count > 0)
        if not new.any():
            break
        vals = np.where(new, total / np.maximum(count, 1), vals)
        filled = filled | new

    out = np.full(gs.shape, float(floor_value))
    out[filled] = vals[filled]
    rest = ma & ~filled
    if rest.any():
        out[rest] = gs[obs].mean()
    out[obs] = gs[obs]
    return out
