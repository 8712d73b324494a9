"""Reconstruction and uncertainty metrics."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .priors import GAIN_CEIL_DB, GAIN_FLOOR_DB, normalize_gain

DOMAINS = ("accessible", "unobs_accessible")


@dataclass
class MetricReport:
    rmse_norm: float
    rmse_db: float
    mae_db: float
    err_unc_corr: float = 0.0
    corr_defined: bool = False
    n_cells: int = 0
    domain: str = "unobs_accessible"
    keys: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        keys = d.pop("keys")
        return {**keys, **d}


def domain_mask(Ma, Ms, domain: str) -> np.ndarray:
    ma = np.asarray(Ma) > 0.5
    if domain == "accessible":
        return ma
    if domain in ("unobs_accessible", "unobs"):
        return ma & ~(np.asarray(Ms) > 0.5)
    raise ValueError(f"unknown domain {domain!r}")


def compute_metrics(G_hat_db, G_db, Ma, Ms, domain: str = "unobs_accessible") -> MetricReport:
    """Masked RMSE/MAE in dB and RMSE of the [0, 1]-normalized maps."""
    m = domain_mask(Ma, Ms, domain)
    n = int(m.sum())
    if n == 0:
        raise ValueError(f"metric domain {domain!r} is empty")
    gh = np.asarray(G_hat_db, dtype=float)[m]
    g = np.asarray(G_db, dtype=float)[m]
    err = gh - g
    rmse = float(np.sqrt(np.mean(err**2)))
    mae = float(np.mean(np.abs(err)))
    en = normalize_gain(gh, GAIN_FLOOR_DB, GAIN_CEIL_DB) - normalize_gain(g, GAIN_FLOOR_DB, GAIN_CEIL_DB)
    return MetricReport(float(np.sqrt(np.mean(en**2))), rmse, mae, n_cells=n, domain=domain)


def err_unc_correlation(G_hat, G, U_hat, mask) -> tuple[float, bool]:
    """Pearson correlation of ``|G_hat - G|`` and ``U_hat`` over ``mask``.

    Returns ``(value, defined)``. When either series is constant the value is
    reported as 0.0 with ``defined=False``.
    """
    m = np.asarray(mask) > 0.5
    if m.sum() < 2:
        raise ValueError("correlation needs at least two domain cells")
    e = np.abs(np.asarray(G_hat, float) - np.asarray(G, float))[m]
    u = np.asarray(U_hat, float)[m]
    e = e - e.mean()
    u = u - u.mean()
    den = np.sqrt(np.sum(e * e) * np.sum(u * u))
    if den == 0 or not np.isfinite(den):
        return 0.0, False
    return float(np.clip(np.sum(e * u) / den, -1.0, 1.0)), True


def evaluate(G_hat_db, G_db, U_hat, Ma, Ms, domain="unobs_accessible", keys=None) -> MetricReport:
    rep = compute_metrics(G_hat_db, G_db, Ma, Ms, domain)
    if U_hat is not None and rep.n_cells >= 2:
        rep.err_unc_corr, rep.corr_defined = err_unc_correlation(G_hat_db, G_db, U_hat, domain_mask(Ma, Ms, domain))
    rep.keys = dict(keys or {})
    return rep


def aggregate(reports: list[MetricReport], by: str | tuple[str, ...]) -> dict:
    """Unweighted mean of per-patch metrics for every value of the grouping key(s)."""
    by = (by,) if isinstance(by, str) else tuple(by)
    groups: dict = defaultdict(list)
    for r in reports:
        groups[tuple(r.keys.get(k) for k in by)].append(r)
    out = {}
    for key, rs in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        out[key if len(by) > 1 else key[0]] = {
            "rmse_norm": float(np.mean([r.rmse_norm for r in rs])),
            "rmse_db": float(np.mean([r.rmse_db for r in rs])),
            "mae_db": float(np.mean([r.mae_db for r in rs])),
            "err_unc_corr": float(np.mean([r.err_unc_corr for r in rs])),
            "n_patches": len(rs),
        }
    return out


def write_report_csv(path, reports: list[MetricReport]) -> None:
    if not reports:
        return
    rows = [r.row() for r in reports]
    fields = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def to_gray8(a, lo=None, hi=None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    lo = float(np.nanmin(a)) if lo is None else lo
    hi = float(np.nanmax(a)) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.clip(np.round((a - lo) * scale), 0, 255).astype(np.uint8)


def write_pgm(path, a, lo=None, hi=None) -> None:
    img = to_gray8(a, lo, hi)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_png(path, a, lo=None, hi=None) -> None:
    from PIL import Image

    Image.fromarray(to_gray8(a, lo, hi)).save(path)
