"""Uncertainty-guided measurement acquisition.

An episode starts from a sparse observation of one patch and runs ``rounds``
acquisition steps. Each step reconstructs the patch, scores the unobserved
accessible cells, reveals the ground truth at ``K`` of them and rebuilds the
initialization map before the next prediction.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .priors import CH, NormStats, denormalize_gain, normalize_stack
from .sampling import init_fill

logger = logging.getLogger(__name__)

POLICIES = ("uncertainty_topk", "random")
EVAL_REGIONS = ("initial", "current")


@dataclass(frozen=True)
class ActiveConfig:
    rounds: int = 4
    budget_per_round_frac: float = 0.01
    policy: str = "uncertainty_topk"
    seed: int = 0
    eval_region: str = "initial"

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if not 0.0 < self.budget_per_round_frac < 1.0:
            raise ValueError("budget_per_round_frac must lie in (0, 1)")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.eval_region not in EVAL_REGIONS:
            raise ValueError(f"unknown eval_region {self.eval_region!r}")

    def budget(self, shape: tuple[int, int]) -> int:
        return int(math.ceil(self.budget_per_round_frac * shape[0] * shape[1]))


class Reconstructor(Protocol):
    def __call__(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map one raw stack ``(11, H, W)`` to ``(G_hat_db, U_hat)``."""


class ModelReconstructor:
    """Adapter from a fitted estimator working on normalized stacks to dB outputs.

    Blending happens in dB so that observed cells pass through unchanged.
    """

    def __init__(self, estimator, stats: NormStats):
        self.estimator = estimator
        self.stats = stats

    def __call__(self, raw: np.ndarray):
        x = normalize_stack(raw[None], self.stats)
        out = self.estimator.predict_full(x)
        g_u = denormalize_gain(out["G_u"][0], self.stats.gain_floor_db, self.stats.gain_ceil_db)
        ms = raw[CH["Ms"]] > 0.5
        return np.where(ms, raw[CH["Gs"]], g_u), out["U_hat"][0]


@dataclass
class RoundRecord:
    round: int
    budget_frac: float
    rmse_db: float
    n_candidates: int
    n_queried: int
    n_observed: int
    region_empty: bool = False


@dataclass
class ActiveEpisode:
    policy: str
    rounds: list[RoundRecord] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    queries: list[np.ndarray] = field(default_factory=list)
    """Flat row-major indices queried in each acquisition round."""
    final_G_hat: np.ndarray | None = None
    exhausted: bool = False
    key: str = ""

    @property
    def rmse_curve(self) -> np.ndarray:
        return np.array([r.rmse_db for r in self.rounds])


def candidates(Ma, M_t) -> np.ndarray:
    """Flat row-major indices of accessible unobserved cells."""
    return np.flatnonzero((np.asarray(Ma) > 0.5) & ~(np.asarray(M_t) > 0.5))


def select_topk(U, Ma, M_t, K: int) -> np.ndarray:
    """Flat indices of the ``K`` candidates with the largest ``U``; ties go to the lower row-major index."""
    if K < 1:
        raise ValueError("K must be at least 1")
    cand = candidates(Ma, M_t)
    if cand.size == 0:
        return cand
    score = np.asarray(U, dtype=np.float64).ravel()[cand]
    order = np.lexsort((cand, -score))
    return np.sort(cand[order[:K]])


def select_random(Ma, M_t, K: int, rng: np.random.Generator) -> np.ndarray:
    if K < 1:
        raise ValueError("K must be at least 1")
    cand = candidates(Ma, M_t)
    if cand.size == 0:
        return cand
    return np.sort(rng.choice(cand, size=min(K, cand.size), replace=False))


def _rmse(a, b, region) -> tuple[float, bool]:
    if not region.any():
        return float("nan"), True
    d = np.asarray(a, float)[region] - np.asarray(b, float)[region]
    return float(np.sqrt(np.mean(d * d))), False


def run_episode(model: Reconstructor, raw: np.ndarray, G_db: np.ndarray, config: ActiveConfig, key: str = "") -> ActiveEpisode:
    """Run one acquisition episode on a raw ``(11, H, W)`` stack with dB ground truth ``G_db``.

    Queries reveal noiseless ground truth. When the candidate set runs out the
    remaining rounds acquire nothing and repeat the last reconstruction, so the
    curve always has ``rounds + 1`` entries.
    """
    raw = np.array(raw, dtype=np.float64)
    G_db = np.asarray(G_db, dtype=np.float64)
    ma = raw[CH["Ma"]] > 0.5
    ms = raw[CH["Ms"]] > 0.5
    gs = np.where(ms, raw[CH["Gs"]], 0.0)
    shape = ms.shape
    K = config.budget(shape)
    rng = np.random.default_rng(config.seed)
    region0 = ma & ~ms
    ep = ActiveEpisode(config.policy, key=key)

    def predict():
        raw[CH["Gs"]] = gs
        raw[CH["Ms"]] = ms
        raw[CH["Ginit"]] = init_fill(gs, ms, ma)
        return model(raw)

    g_hat, u = predict()
    for t in range(config.rounds + 1):
        region = region0 if config.eval_region == "initial" else ma & ~ms
        rmse, empty = _rmse(g_hat, G_db, region)
        cand = candidates(ma, ms)
        rec = RoundRecord(t, t * config.budget_per_round_frac, rmse, int(cand.size), 0, int(ms.sum()), empty)
        ep.rounds.append(rec)
        ep.masks.append(ms.copy())
        if t == config.rounds:
            break
        if cand.size == 0:
            ep.exhausted = True
            ep.queries.append(cand)
            continue
        if config.policy == "uncertainty_topk":
            q = select_topk(u, ma, ms, K)
        else:
            q = select_random(ma, ms, K, rng)
        ep.queries.append(q)
        rec.n_queried = int(q.size)
        rows, cols = np.unravel_index(q, shape)
        gs[rows, cols] = G_db[rows, cols]
        ms[rows, cols] = True
        g_hat, u = predict()
    ep.final_G_hat = g_hat
    return ep


def oracle_reconstructor(G_db: np.ndarray, base: Callable[[np.ndarray], np.ndarray] | None = None):
    """Test double whose uncertainty is the true absolute error of the nearest fill."""

    def f(raw):
        ms = raw[CH["Ms"]] > 0.5
        g = base(raw) if base is not None else raw[CH["Ginit"]]
        g = np.where(ms, raw[CH["Gs"]], g)
        return g, np.abs(g - G_db)

    return f


# -- reporting ----------------------------------------------------------------


def mean_curve(episodes: list[ActiveEpisode]) -> np.ndarray:
    return np.nanmean(np.stack([e.rmse_curve for e in episodes]), axis=0)


def write_curve_csv(path, episodes: list[ActiveEpisode]) -> None:
    """Mean RMSE per round: ``round, budget_frac, rmse_db, policy``."""
    by_policy: dict[str, list[ActiveEpisode]] = {}
    for e in episodes:
        by_policy.setdefault(e.policy, []).append(e)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "budget_frac", "rmse_db", "policy"])
        for policy, eps in by_policy.items():
            curve = mean_curve(eps)
            for r, v in zip(eps[0].rounds, curve):
                w.writerow([r.round, f"{r.budget_frac:.4f}", f"{v:.6f}", policy])


def write_episodes_csv(path, episodes: list[ActiveEpisode]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "policy", "round", "budget_frac", "rmse_db", "n_candidates", "n_queried", "n_observed", "exhausted"])
        for e in episodes:
            for r in e.rounds:
                w.writerow([e.key, e.policy, r.round, f"{r.budget_frac:.4f}", f"{r.rmse_db:.6f}",
                            r.n_candidates, r.n_queried, r.n_observed, int(e.exhausted)])


@dataclass
class ActiveSummary:
    budget_frac: float
    uq_rmse_db: float
    random_rmse_db: float
    gain_db: float
    win_rate: float
    n_patches: int
    initial_rmse_db: float

    def row(self) -> dict:
        return dict(vars(self))


def summarize(uq: list[ActiveEpisode], rnd: list[ActiveEpisode]) -> ActiveSummary:
    """Final-round comparison of paired episodes (same patches, same order)."""
    if len(uq) != len(rnd) or not uq:
        raise ValueError("need equally many nonempty paired episode lists")
    fu = np.array([e.rounds[-1].rmse_db for e in uq])
    fr = np.array([e.rounds[-1].rmse_db for e in rnd])
    ok = np.isfinite(fu) & np.isfinite(fr)
    return ActiveSummary(
        budget_frac=uq[0].rounds[-1].budget_frac,
        uq_rmse_db=float(fu[ok].mean()),
        random_rmse_db=float(fr[ok].mean()),
        gain_db=float(fr[ok].mean() - fu[ok].mean()),
        win_rate=float(np.mean(fu[ok] < fr[ok])),
        n_patches=int(ok.sum()),
        initial_rmse_db=float(np.nanmean([e.rounds[0].rmse_db for e in uq])),
    )


def write_summary_csv(path, summary: ActiveSummary) -> None:
    row = summary.row()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row))
        w.writeheader()
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
