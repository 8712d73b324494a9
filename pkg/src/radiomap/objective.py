"""Composite training objective over masked domains.

All terms use mean reduction by default so the weights do not depend on the
patch resolution; ``hetero_nll(..., reduction="sum")`` gives the summed form.
Tensors may be ``(H, W)`` or batched ``(N, H, W)``; masks are 0/1 tensors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch

from .autodiff import masked_mean


class EmptyDomainWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    grad: float = 0.05
    nll: float = 0.2
    var: float = 0.001

    def __post_init__(self):
        for k in ("l1", "grad", "nll", "var"):
            v = getattr(self, k)
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"loss weight {k} must be finite and nonnegative")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    l1: float
    grad: float
    nll: float
    var_reg: float
    counts: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "l1": self.l1,
            "grad": self.grad,
            "nll": self.nll,
            "var_reg": self.var_reg,
            **{f"n_{k}": v for k, v in self.counts.items()},
        }


def unobserved_domain(Ms: torch.Tensor, Ma: torch.Tensor) -> torch.Tensor:
    return ((Ma > 0.5) & (Ms < 0.5)).to(Ma.dtype)


def _warn_empty(name: str) -> None:
    warnings.warn(f"{name}: empty domain, term defined as 0", EmptyDomainWarning, stacklevel=3)


def masked_l1(G_hat, G, domain) -> torch.Tensor:
    val, n = masked_mean((G_hat - G).abs(), domain)
    if n == 0:
        _warn_empty("masked_l1")
    return val


def grad_consistency(G_hat, G, Ma) -> torch.Tensor:
    """Mean |forward-difference mismatch| over horizontally and vertically adjacent accessible pairs."""
    ma = (Ma > 0.5).to(G.dtype)
    e = G_hat - G
    dx = (e[..., :, 1:] - e[..., :, :-1]).abs()
    dy = (e[..., 1:, :] - e[..., :-1, :]).abs()
    vx = ma[..., :, 1:] * ma[..., :, :-1]
    vy = ma[..., 1:, :] * ma[..., :-1, :]
    n = vx.sum() + vy.sum()
    if n.item() == 0:
        return e.sum() * 0.0
    return ((dx * vx).sum() + (dy * vy).sum()) / n


def hetero_nll(G_hat, G, S, domain, reduction: str = "mean") -> torch.Tensor:
    """Gaussian NLL ``0.5 * exp(-s) * err^2 + 0.5 * s`` over the domain."""
    per_cell = 0.5 * torch.exp(-S) * (G_hat - G) ** 2 + 0.5 * S
    if reduction == "sum":
        return (per_cell * domain).sum()
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    val, n = masked_mean(per_cell, domain)
    if n == 0:
        _warn_empty("hetero_nll")
    return val


def var_reg(S, domain) -> torch.Tensor:
    val, _ = masked_mean(S * S, domain)
    return val


def total_loss(pred, G, Ms, Ma, weights: LossWeights | None = None, nll_reduction: str = "mean") -> LossBreakdown:
    """Weighted sum of the four terms; ``pred`` needs ``G_hat`` and ``S_logvar``."""
    w = weights or LossWeights()
    dom = unobserved_domain(Ms, Ma)
    n_unobs = int(dom.sum().item())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyDomainWarning)
        l1 = masked_l1(pred.G_hat, G, dom)
        nll = hetero_nll(pred.G_hat, G, pred.S_logvar, dom, nll_reduction)
        vr = var_reg(pred.S_logvar, dom)
    gr = grad_consistency(pred.G_hat, G, Ma)
    total = w.l1 * l1 + w.grad * gr + w.nll * nll + w.var * vr
    return LossBreakdown(
        total=total,
        l1=float(l1.detach()),
        grad=float(gr.detach()),
        nll=float(nll.detach()),
        var_reg=float(vr.detach()),
        counts={"unobs": n_unobs, "accessible": int((Ma > 0.5).sum().item())},
    )
