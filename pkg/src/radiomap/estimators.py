"""scikit-learn compatible estimators.

All estimators consume input stacks of shape ``(N, 11, H, W)`` in the channel
order of :data:`radiomap.priors.CHANNELS`. :class:`InputNormalizer` maps raw
stacks (gains in dB, offsets in meters) to the normalized space the
reconstructors work in; targets are normalized gain maps ``(N, H, W)``.
"""

from __future__ import annotations

import json
import logging
import os

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import load_checkpoint, save_checkpoint, set_determinism
from .datasetio import build_splits
from .net import GeoUQGFNet, NetConfig, build_model
from .objective import LossWeights
from .priors import CH, NormStats, compute_norm_stats, denormalize_gain, normalize_stack
from .trainer import TrainConfig, train
from .validation import check_divisible, check_stack, check_target

logger = logging.getLogger(__name__)


def _unobs(X: np.ndarray) -> np.ndarray:
    return (X[:, CH["Ma"]] > 0.5) & ~(X[:, CH["Ms"]] > 0.5)


def blend(X: np.ndarray, G_u: np.ndarray) -> np.ndarray:
    """Keep observed values, fill the rest from ``G_u``."""
    return np.where(X[:, CH["Ms"]] > 0.5, X[:, CH["Gs"]], G_u)


class InputNormalizer(TransformerMixin, BaseEstimator):
    """Learn channel statistics on raw training stacks and normalize stacks with them."""

    def fit(self, X, y=None):
        X = check_stack(X)
        self.stats_ = compute_norm_stats(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return normalize_stack(check_stack(X), self.stats_)

    @classmethod
    def from_stats(cls, stats: NormStats) -> "InputNormalizer":
        obj = cls()
        obj.stats_ = stats
        return obj

    def inverse_transform_gain(self, g):
        check_is_fitted(self, "stats_")
        return denormalize_gain(g, self.stats_.gain_floor_db, self.stats_.gain_ceil_db)


class _ReconstructorMixin:
    def score(self, X, y):
        """Negative RMSE over unobserved accessible cells (higher is better)."""
        X = check_stack(X)
        y = check_target(y, X)
        pred = self.predict(X)
        m = _unobs(X)
        return -float(np.sqrt(np.mean((pred[m] - y[m]) ** 2)))


class NearestFillRegressor(_ReconstructorMixin, RegressorMixin, BaseEstimator):
    """Baseline: the neighbor-propagation initialization with observed values kept."""

    def fit(self, X, y=None):
        check_stack(X)
        self.fitted_ = True
        return self

    def predict(self, X, return_std=False):
        X = check_stack(X)
        g = blend(X, X[:, CH["Ginit"]])
        if return_std:
            return g, np.zeros_like(g)
        return g


class GeoUQRegressor(_ReconstructorMixin, RegressorMixin, BaseEstimator):
    """Geometry-gated reconstruction network with a heteroscedastic uncertainty head."""

    def __init__(
        self,
        base_channels=32,
        kan_hidden=32,
        kan_bases=10,
        ghost_ratio=2,
        fpn_channels=64,
        large_kernel=7,
        dropout=0.0,
        logvar_clip=(-6.0, 2.0),
        restrict_output=False,
        batch_size=8,
        max_epochs=120,
        lr=1e-4,
        weight_decay=1e-5,
        plateau_patience=5,
        min_lr=1e-6,
        early_stop_patience=20,
        grad_clip_norm=1.0,
        augment=True,
        loss_weights=(1.0, 0.05, 0.2, 0.001),
        validation_fraction=0.15,
        random_state=0,
        threads=1,
    ):
        self.base_channels = base_channels
        self.kan_hidden = kan_hidden
        self.kan_bases = kan_bases
        self.ghost_ratio = ghost_ratio
        self.fpn_channels = fpn_channels
        self.large_kernel = large_kernel
        self.dropout = dropout
        self.logvar_clip = logvar_clip
        self.restrict_output = restrict_output
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.plateau_patience = plateau_patience
        self.min_lr = min_lr
        self.early_stop_patience = early_stop_patience
        self.grad_clip_norm = grad_clip_norm
        self.augment = augment
        self.loss_weights = loss_weights
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.threads = threads

    def net_config(self) -> NetConfig:
        return NetConfig(
            base_channels=self.base_channels,
            kan_hidden=self.kan_hidden,
            kan_bases=self.kan_bases,
            ghost_ratio=self.ghost_ratio,
            fpn_channels=self.fpn_channels,
            large_kernel=self.large_kernel,
            dropout=self.dropout,
            logvar_clip=tuple(self.logvar_clip),
            restrict_output=self.restrict_output,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            lr=self.lr,
            weight_decay=self.weight_decay,
            plateau_patience_epochs=self.plateau_patience,
            min_lr=self.min_lr,
            early_stop_patience=self.early_stop_patience,
            grad_clip_norm=self.grad_clip_norm,
            augment=self.augment,
            seed=self.random_state,
            threads=self.threads,
        )

    def fit(self, X, y, X_val=None, y_val=None, stats: NormStats | None = None, out_dir=None):
        """Train on normalized stacks.

        Without an explicit validation set, ``validation_fraction`` of the
        samples is held out by a seeded split. ``stats`` lets augmentation
        rotate the standardized offset channels correctly.
        """
        X = check_stack(X)
        y = check_target(y, X)
        check_divisible(X)
        if X_val is None:
            ids = [str(k) for k in range(len(X))]
            frac = self.validation_fraction
            assign = build_splits(ids, (1.0 - frac, frac, 0.0), seed=self.random_state)
            tr = np.array([assign[i] == "train" for i in ids])
            X, y, X_val, y_val = X[tr], y[tr], X[~tr], y[~tr]
        else:
            X_val = check_stack(X_val)
            y_val = check_target(y_val, X_val)
        self.model_, self.history_ = train(
            X, y, X_val, y_val,
            net_config=self.net_config(),
            config=self.train_config(),
            weights=LossWeights(*self.loss_weights),
            stats=stats,
            out_dir=out_dir,
        )
        self.n_parameters_ = self.model_.n_parameters()
        return self

    def _forward(self, X: np.ndarray, batch_size: int | None = None):
        check_is_fitted(self, "model_")
        X = check_stack(X)
        check_divisible(X)
        set_determinism(self.threads)
        bs = batch_size or max(self.batch_size, 1)
        dtype = next(self.model_.parameters()).dtype
        outs = {k: [] for k in ("G_u", "U_hat", "S_logvar", "delta")}
        self.model_.eval()
        with torch.no_grad():
            for s in range(0, len(X), bs):
                p = self.model_(torch.as_tensor(X[s : s + bs], dtype=dtype))
                for k in outs:
                    outs[k].append(getattr(p, k).double().numpy())
        out = {k: np.concatenate(v) for k, v in outs.items()}
        out["G_hat"] = blend(X, out["G_u"])
        return out

    def predict(self, X, return_std=False):
        """Normalized gain maps; with ``return_std`` also the predictive std maps."""
        out = self._forward(X)
        if return_std:
            return out["G_hat"], out["U_hat"]
        return out["G_hat"]

    def predict_full(self, X) -> dict[str, np.ndarray]:
        """All head outputs: ``G_hat``, ``G_u``, ``U_hat``, ``S_logvar``, ``delta``."""
        return self._forward(X)

    # -- persistence ----------------------------------------------------------

    def save(self, out_dir) -> None:
        check_is_fitted(self, "model_")
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), self.model_.state_dict())
        with open(os.path.join(out_dir, "estimator.json"), "w", encoding="utf-8") as fh:
            json.dump(self.get_params(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, out_dir) -> "GeoUQRegressor":
        with open(os.path.join(out_dir, "estimator.json"), encoding="utf-8") as fh:
            params = json.load(fh)
        params["logvar_clip"] = tuple(params["logvar_clip"])
        params["loss_weights"] = tuple(params["loss_weights"])
        est = cls(**params)
        est.model_ = load_model(os.path.join(out_dir, "model.ckpt"), est.net_config())
        est.n_parameters_ = est.model_.n_parameters()
        return est

    @classmethod
    def from_model(cls, model: GeoUQGFNet, **params) -> "GeoUQRegressor":
        cfg = model.config
        est = cls(
            base_channels=cfg.base_channels, kan_hidden=cfg.kan_hidden, kan_bases=cfg.kan_bases,
            ghost_ratio=cfg.ghost_ratio, fpn_channels=cfg.fpn_channels, large_kernel=cfg.large_kernel,
            dropout=cfg.dropout, logvar_clip=cfg.logvar_clip, restrict_output=cfg.restrict_output, **params,
        )
        est.model_ = model
        est.n_parameters_ = model.n_parameters()
        return est


def load_model(path, config: NetConfig) -> GeoUQGFNet:
    weights = load_checkpoint(path)
    model = build_model(config)
    expected = model.state_dict()
    if list(weights) != list(expected):
        raise ValueError("checkpoint parameters do not match the network configuration")
    for k, v in weights.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise ValueError(f"checkpoint parameter {k} has shape {v.shape}, expected {tuple(expected[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in weights.items()})
    model.eval()
    return model
