"""Geometry prior channels, normalization statistics and model-input assembly."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .fieldsim import distance_field, los_field
from .scenegen import BsDeployment, Scene

GAIN_FLOOR_DB = -140.0
GAIN_CEIL_DB = -50.0
STD_FLOOR = 1e-6

#: Fixed channel order of a model input stack.
CHANNELS = ("O", "Hh", "Rx", "Ry", "D", "L", "Gs", "Ms", "Ma", "Ginit", "E")
CH = {name: k for k, name in enumerate(CHANNELS)}
PRIOR_CHANNELS = ("O", "Hh", "Rx", "Ry", "D", "L", "Ma", "E")
GAIN_CHANNELS = ("Gs", "Ginit")
MASK_CHANNELS = ("O", "L", "Ms", "Ma")


@dataclass
class PriorTensor:
    O: np.ndarray
    Hh: np.ndarray
    Rx: np.ndarray
    Ry: np.ndarray
    D: np.ndarray
    L: np.ndarray
    Ma: np.ndarray
    E: np.ndarray

    def planes(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PRIOR_CHANNELS}

    def crop(self, row: int, col: int, size: int) -> "PriorTensor":
        sl = (slice(row, row + size), slice(col, col + size))
        return PriorTensor(**{k: v[sl].copy() for k, v in self.planes().items()})


@dataclass(frozen=True)
class NormStats:
    height_max: float
    rx_mean: float
    rx_std: float
    ry_mean: float
    ry_std: float
    d_mean: float
    d_std: float
    gain_floor_db: float = GAIN_FLOOR_DB
    gain_ceil_db: float = GAIN_CEIL_DB

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(**{k: float(v) for k, v in d.items()})


def edge_cue(occupancy: np.ndarray, heights: np.ndarray) -> np.ndarray:
    """Clipped sum of central-difference gradient magnitudes of O and H/max(H)."""
    o = occupancy.astype(float)
    hmax = float(heights.max())
    hn = heights / hmax if hmax > 0 else np.zeros_like(heights, dtype=float)
    gy, gx = np.gradient(o)
    hy, hx = np.gradient(hn)
    return np.clip(np.hypot(gx, gy) + np.hypot(hx, hy), 0.0, 1.0)


def build_priors(scene: Scene, bs: BsDeployment, rx_height_m: float = 1.5) -> PriorTensor:
    h, w = scene.shape
    tx = bs.position
    x, y = scene.cell_center(np.arange(h)[:, None], np.arange(w)[None, :])
    rx = np.broadcast_to(x - tx[0], (h, w)).astype(float)
    ry = np.broadcast_to(y - tx[1], (h, w)).astype(float)
    d = distance_field(scene, tx, rx_height_m)
    los, _, _ = los_field(scene, tx, rx_height_m)
    occ = scene.occupancy.astype(float)
    return PriorTensor(
        O=occ,
        Hh=np.where(scene.occupancy, scene.heights, 0.0),
        Rx=rx,
        Ry=ry,
        D=d,
        L=los.astype(float),
        Ma=1.0 - occ,
        E=edge_cue(scene.occupancy, scene.heights),
    )


def compute_norm_stats(priors) -> NormStats:
    """Statistics over every cell of the training priors.

    ``priors`` is an iterable of :class:`PriorTensor` or raw 11-channel stacks.
    """
    hs, rxs, rys, ds = [], [], [], []
    for p in priors:
        if isinstance(p, PriorTensor):
            hs.append(p.Hh.ravel()), rxs.append(p.Rx.ravel()), rys.append(p.Ry.ravel()), ds.append(p.D.ravel())
        else:
            p = np.asarray(p)
            hs.append(p[..., CH["Hh"], :, :].ravel())
            rxs.append(p[..., CH["Rx"], :, :].ravel())
            rys.append(p[..., CH["Ry"], :, :].ravel())
            ds.append(p[..., CH["D"], :, :].ravel())
    if not hs:
        raise ValueError("cannot compute normalization statistics from an empty training split")
    h, rx, ry, d = (np.concatenate(a) for a in (hs, rxs, rys, ds))
    hmax = float(h.max())
    return NormStats(
        height_max=hmax if hmax > 0 else 1.0,
        rx_mean=float(rx.mean()),
        rx_std=max(float(rx.std()), STD_FLOOR),
        ry_mean=float(ry.mean()),
        ry_std=max(float(ry.std()), STD_FLOOR),
        d_mean=float(d.mean()),
        d_std=max(float(d.std()), STD_FLOOR),
    )


def normalize_gain(g, floor: float = GAIN_FLOOR_DB, ceil: float = GAIN_CEIL_DB):
    return (np.clip(g, floor, ceil) - floor) / (ceil - floor)


def denormalize_gain(g, floor: float = GAIN_FLOOR_DB, ceil: float = GAIN_CEIL_DB):
    return np.asarray(g) * (ceil - floor) + floor


def raw_stack(priors: PriorTensor, Gs, Ms, Ginit) -> np.ndarray:
    """Unnormalized 11-channel stack (gains in dB) in :data:`CHANNELS` order."""
    planes = priors.planes()
    planes.update(Gs=np.asarray(Gs, float), Ms=np.asarray(Ms, float), Ginit=np.asarray(Ginit, float))
    shape = planes["O"].shape
    for k, v in planes.items():
        if v.shape != shape:
            raise ValueError(f"channel {k} has shape {v.shape}, expected {shape}")
    return np.stack([planes[k] for k in CHANNELS])


def normalize_stack(raw: np.ndarray, stats: NormStats) -> np.ndarray:
    """Normalize raw stacks of shape ``(11, H, W)`` or ``(N, 11, H, W)``."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-3] != len(CHANNELS):
        raise ValueError(f"expected {len(CHANNELS)} channels, got {raw.shape[-3]}")
    x = raw.copy()
    c = lambda name: (Ellipsis, CH[name], slice(None), slice(None))  # noqa: E731
    x[c("Hh")] = raw[c("Hh")] / stats.height_max
    x[c("Rx")] = (raw[c("Rx")] - stats.rx_mean) / stats.rx_std
    x[c("Ry")] = (raw[c("Ry")] - stats.ry_mean) / stats.ry_std
    x[c("D")] = (raw[c("D")] - stats.d_mean) / stats.d_std
    ms = raw[c("Ms")] > 0.5
    x[c("Gs")] = np.where(ms, normalize_gain(raw[c("Gs")], stats.gain_floor_db, stats.gain_ceil_db), 0.0)
    x[c("Ginit")] = normalize_gain(raw[c("Ginit")], stats.gain_floor_db, stats.gain_ceil_db)
    return x


def normalize_inputs(priors: PriorTensor, Gs, Ms, Ginit, stats: NormStats) -> np.ndarray:
    """Normalized ``(11, H, W)`` model input; unobserved ``Gs`` cells stay 0."""
    return normalize_stack(raw_stack(priors, Gs, Ms, Ginit), stats)
