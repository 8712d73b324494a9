"""Training loop for the reconstruction network."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .autodiff import save_checkpoint, set_determinism
from .net import GeoUQGFNet, NetConfig, build_model
from .objective import LossWeights, total_loss
from .priors import CH

logger = logging.getLogger(__name__)

TRANSFORMS = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v")
_HISTORY_KEYS = ("total", "l1", "grad", "nll", "var_reg")


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 120
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    plateau_factor: float = 0.5
    plateau_patience_epochs: int = 5
    min_lr: float = 1e-6
    early_stop_patience: int = 20
    grad_clip_norm: float = 1.0
    augment: bool = True
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.lr <= 0 or self.grad_clip_norm <= 0:
            raise ValueError("lr and grad_clip_norm must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    aborted: bool = False

    def numeric(self) -> np.ndarray:
        """History values without wall-clock columns, for reproducibility checks."""
        keys = [k for k in self.rows[0] if k != "wall_time_s"] if self.rows else []
        return np.array([[r[k] for k in keys] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        if not self.rows:
            return
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})


def clip_gradients(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; return the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if not math.isfinite(norm):
        raise NonFiniteGradientError(f"gradient norm is {norm}; step aborted")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


def make_optimizer(params, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=config.lr, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay
    )


def optimizer_step(optimizer: torch.optim.Optimizer, config: TrainConfig) -> float:
    """Clip to ``grad_clip_norm`` then apply one decoupled-weight-decay Adam update."""
    params = [p for g in optimizer.param_groups for p in g["params"]]
    norm = clip_gradients(params, config.grad_clip_norm)
    optimizer.step()
    return norm


def _spatial(a: np.ndarray, transform: str) -> np.ndarray:
    if transform == "identity":
        return a
    if transform.startswith("rot"):
        return np.rot90(a, k=int(transform[3:]) // 90, axes=(-2, -1))
    if transform == "flip_h":
        return np.flip(a, axis=-1)
    if transform == "flip_v":
        return np.flip(a, axis=-2)
    raise ValueError(f"unknown transform {transform!r}")


def augment(x: np.ndarray, y: np.ndarray, transform: str, stats=None) -> tuple[np.ndarray, np.ndarray]:
    """Apply one spatial transform to an input stack ``(11, H, W)`` and its target.

    The relative-offset channels are rotated/reflected as vectors. When the
    stack is standardized, pass its :class:`NormStats` so the vector transform
    acts on raw offsets; otherwise raw values are assumed.
    """
    if transform.startswith("rot") and x.shape[-1] != x.shape[-2]:
        raise ValueError("rotations need square patches")
    xo = np.ascontiguousarray(_spatial(x, transform)).copy()
    yo = np.ascontiguousarray(_spatial(y, transform)).copy()
    if transform == "identity":
        return xo, yo

    rx, ry = xo[CH["Rx"]].copy(), xo[CH["Ry"]].copy()
    if stats is not None:
        rx = rx * stats.rx_std + stats.rx_mean
        ry = ry * stats.ry_std + stats.ry_mean
    new = {
        "rot90": (ry, -rx),
        "rot180": (-rx, -ry),
        "rot270": (-ry, rx),
        "flip_h": (-rx, ry),
        "flip_v": (rx, -ry),
    }[transform]
    nrx, nry = new
    if stats is not None:
        nrx = (nrx - stats.rx_mean) / stats.rx_std
        nry = (nry - stats.ry_mean) / stats.ry_std
    xo[CH["Rx"]], xo[CH["Ry"]] = nrx, nry
    return xo, yo


def _batch_loss(model, xb, yb, weights):
    pred = model(xb)
    return total_loss(pred, yb, xb[:, CH["Ms"]], xb[:, CH["Ma"]], weights)


def evaluate_loss(model, X, y, config: TrainConfig, weights=None) -> dict:
    model.eval()
    sums = dict.fromkeys(_HISTORY_KEYS, 0.0)
    n = 0
    with torch.no_grad():
        for s in range(0, len(X), config.batch_size):
            xb = torch.as_tensor(X[s : s + config.batch_size])
            yb = torch.as_tensor(y[s : s + config.batch_size])
            row = _batch_loss(model, xb, yb, weights).row()
            for k in _HISTORY_KEYS:
                sums[k] += row[k] * len(xb)
            n += len(xb)
    return {k: v / max(n, 1) for k, v in sums.items()}


def train(
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray,
    y_val: np.ndarray,
    net_config: NetConfig | None = None,
    config: TrainConfig | None = None,
    weights: LossWeights | None = None,
    stats=None,
    out_dir: str | os.PathLike | None = None,
    model: GeoUQGFNet | None = None,
) -> tuple[GeoUQGFNet, TrainHistory]:
    """Fit on normalized stacks ``(N, 11, H, W)`` against normalized targets ``(N, H, W)``.

    Returns the model loaded with its best-validation weights and the history.
    """
    cfg = config or TrainConfig()
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("train and validation splits must be nonempty")
    set_determinism(cfg.threads)
    torch.manual_seed(cfg.seed)
    X_train = np.asarray(X_train, dtype=np.float32)
    y_train = np.asarray(y_train, dtype=np.float32)
    X_val = np.asarray(X_val, dtype=np.float32)
    y_val = np.asarray(y_val, dtype=np.float32)

    if model is None:
        model = build_model(net_config, seed=cfg.seed)
    opt = make_optimizer(model.parameters(), cfg)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience_epochs,
        threshold=0.0, min_lr=cfg.min_lr,
    )
    history = TrainHistory()
    best_val = math.inf
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(X_train))
        tforms = rng.integers(len(TRANSFORMS), size=len(X_train))
        model.train()
        sums = dict.fromkeys(_HISTORY_KEYS, 0.0)
        diverged = False
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            if cfg.augment:
                pairs = [augment(X_train[i], y_train[i], TRANSFORMS[tforms[i]], stats) for i in idx]
                xb = torch.as_tensor(np.stack([p[0] for p in pairs]))
                yb = torch.as_tensor(np.stack([p[1] for p in pairs]))
            else:
                xb, yb = torch.as_tensor(X_train[idx]), torch.as_tensor(y_train[idx])
            opt.zero_grad(set_to_none=True)
            lb = _batch_loss(model, xb, yb, weights)
            if not torch.isfinite(lb.total):
                diverged = True
                break
            lb.total.backward()
            try:
                optimizer_step(opt, cfg)
            except NonFiniteGradientError:
                diverged = True
                break
            row = lb.row()
            for k in _HISTORY_KEYS:
                sums[k] += row[k] * len(idx)
        if diverged:
            logger.error("training diverged at epoch %d; restoring epoch %d", epoch, history.best_epoch)
            history.aborted = True
            break

        train_row = {k: v / len(X_train) for k, v in sums.items()}
        val_row = evaluate_loss(model, X_val, y_val, cfg, weights)
        lr = opt.param_groups[0]["lr"]
        row = {"epoch": epoch, "lr": lr}
        row.update({f"train_{k}": v for k, v in train_row.items()})
        row.update({f"val_{k}": v for k, v in val_row.items()})
        if val_row["total"] < best_val:
            best_val = val_row["total"]
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        row["best_val_total"] = best_val
        row["wall_time_s"] = time.perf_counter() - t0
        history.rows.append(row)
        logger.info("epoch %d lr %.2e train %.5f val %.5f", epoch, lr, train_row["total"], val_row["total"])
        sched.step(val_row["total"])
        if since_best >= cfg.early_stop_patience:
            break

    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model.state_dict())
        history.to_csv(os.path.join(out_dir, "history.csv"))
        with open(os.path.join(out_dir, "train_config.txt"), "w", encoding="utf-8") as fh:
            for k, v in {**asdict(cfg), **(model.config.to_dict())}.items():
                fh.write(f"{k}={v}\n")
    return model, history


def synthetic_batch(n: int, size: int, seed: int = 0, dtype=torch.float64) -> tuple[torch.Tensor, torch.Tensor]:
    """Random normalized input stacks and targets with plausible masks."""
    g = torch.Generator().manual_seed(int(seed))
    x = torch.randn(n, len(CH), size, size, generator=g, dtype=dtype)
    ma = (torch.rand(n, size, size, generator=g, dtype=dtype) < 0.8).to(dtype)
    ms = (torch.rand(n, size, size, generator=g, dtype=dtype) < 0.15).to(dtype) * ma
    y = torch.rand(n, size, size, generator=g, dtype=dtype)
    x[:, CH["O"]] = 1.0 - ma
    x[:, CH["Ma"]] = ma
    x[:, CH["Ms"]] = ms
    x[:, CH["L"]] = (x[:, CH["L"]] > 0).to(dtype)
    x[:, CH["E"]] = x[:, CH["E"]].abs().clamp(max=1.0)
    x[:, CH["Hh"]] = x[:, CH["Hh"]].abs() * x[:, CH["O"]]
    x[:, CH["Gs"]] = y * ms
    x[:, CH["Ginit"]] = y + 0.1 * torch.randn(n, size, size, generator=g, dtype=dtype)
    return x, y


def model_grad_check(
    net_config: NetConfig | None = None,
    size: int = 16,
    batch: int = 2,
    seed: int = 0,
    max_elements: int = 10_000,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    weights: LossWeights | None = None,
):
    """Finite-difference check of the full loss gradient in float64.

    Parameters are jittered first so the zero-initialized mean head does not
    hide the upstream paths. The loss has kinks (absolute value, log-variance
    clamp), so ``eps`` must stay small enough not to straddle them.
    """
    from .autodiff import grad_check

    cfg = net_config or NetConfig.tiny()
    model = build_model(cfg, seed=seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(int(seed) + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    model.train()
    x, y = synthetic_batch(batch, size, seed, torch.float64)

    def loss_fn():
        return _batch_loss(model, x, y, weights).total

    return grad_check(loss_fn, model.named_parameters(), eps=eps, tolerance=tolerance, max_elements=max_elements, seed=seed)
