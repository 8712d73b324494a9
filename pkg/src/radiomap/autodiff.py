"""Tensor primitives, gradient verification and parameter checkpoints.

Reverse-mode differentiation itself comes from ``torch.autograd``; this module
adds what the reconstruction network needs on top of it:

* the fixed nonlinearity and normalization layer used everywhere,
* a central finite-difference gradient checker that never calls autograd on
  the perturbed evaluations,
* a flat float32 little-endian checkpoint blob with an ordered name manifest,
* deterministic execution settings and a finite-value debug mode.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

GELU_COEF = 0.044715
GELU_SCALE = math.sqrt(2.0 / math.pi)


def smooth_activation(x: torch.Tensor) -> torch.Tensor:
    """Tanh-form GELU: ``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))``."""
    return 0.5 * x * (1.0 + torch.tanh(GELU_SCALE * (x + GELU_COEF * x * x * x)))


class SmoothActivation(nn.Module):
    def forward(self, x):
        return smooth_activation(x)


def norm_groups(channels: int) -> int:
    """Group count for channel-group normalization: ``min(8, C)``, reduced to divide ``C``."""
    g = min(8, channels)
    while channels % g:
        g -= 1
    return g


def group_norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(norm_groups(channels), channels, eps=1e-5, affine=True)


def clamp(x: torch.Tensor, low: float, high: float) -> torch.Tensor:
    """Hard clamp; gradient is zero for elements outside ``[low, high]``."""
    return torch.clamp(x, low, high)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean of ``x`` over ``mask``; returns ``(0, 0)`` for an empty mask."""
    n = int(mask.sum().item())
    if n == 0:
        return x.sum() * 0.0, 0
    return (x * mask).sum() / n, n


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def set_determinism(threads: int = 1) -> None:
    """Fixed thread count and deterministic kernels; results are bit-stable per thread count."""
    torch.set_num_threads(int(threads))
    torch.use_deterministic_algorithms(True)
    os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


class NonFiniteError(FloatingPointError):
    pass


def attach_finite_checks(model: nn.Module) -> list:
    """Debug mode: raise :class:`NonFiniteError` naming the first module emitting NaN/Inf."""
    handles = []

    def make_hook(name):
        def hook(_mod, _inp, out):
            outs = out if isinstance(out, (tuple, list)) else (out,)
            for o in outs:
                if torch.is_tensor(o) and not torch.isfinite(o).all():
                    raise NonFiniteError(f"non-finite output at node {name or '<root>'}")

        return hook

    for name, mod in model.named_modules():
        handles.append(mod.register_forward_hook(make_hook(name)))
    return handles


@dataclass
class GradCheckReport:
    errors: list[tuple[str, float]] = field(default_factory=list)
    """``(parameter name, max relative error)`` sorted by decreasing error."""
    checked_elements: int = 0
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max((e for _, e in self.errors), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def format(self) -> str:
        lines = [f"{name}\t{err:.3e}" for name, err in self.errors]
        status = "PASS" if self.passed else "FAIL"
        lines.append(
            f"{status} max_rel_error={self.max_error:.3e} tol={self.tolerance:.1e} elements={self.checked_elements}"
        )
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, abs_floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    max_elements: int = 10_000,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    Every parameter element is perturbed unless the total exceeds
    ``max_elements``, in which case a seeded uniform subsample is checked.
    Parameters should be float64.
    """
    named = list(params.items()) if isinstance(params, Mapping) else list(params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in named}

    sizes = [p.numel() for _, p in named]
    total = sum(sizes)
    if total > max_elements:
        rng = np.random.default_rng(seed)
        picked = np.sort(rng.choice(total, size=max_elements, replace=False))
    else:
        picked = np.arange(total)
    offsets = np.cumsum([0] + sizes)

    worst: dict[str, float] = {}
    with torch.no_grad():
        for k, (name, p) in enumerate(named):
            idx = picked[(picked >= offsets[k]) & (picked < offsets[k + 1])] - offsets[k]
            if idx.size == 0:
                continue
            flat = p.view(-1)
            g = analytic[name].view(-1)
            err = 0.0
            for e in idx:
                orig = flat[e].item()
                flat[e] = orig + eps
                f_plus = loss_fn().item()
                flat[e] = orig - eps
                f_minus = loss_fn().item()
                flat[e] = orig
                num = (f_plus - f_minus) / (2.0 * eps)
                err = max(err, relative_error(g[e].item(), num, abs_floor))
            worst[name] = err
    errors = sorted(worst.items(), key=lambda kv: kv[1], reverse=True)
    return GradCheckReport(errors, int(picked.size), tolerance)


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, torch.Tensor | np.ndarray]) -> None:
    """Write ``path`` (float32 LE blob) and ``path.manifest`` (``name<TAB>shape`` lines, blob order)."""
    path = os.fspath(path)
    lines = []
    with open(path, "wb") as fh:
        for name, value in params.items():
            arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            lines.append(f"{name}\t{','.join(str(s) for s in arr.shape)}")
    with open(path + ".manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    path = os.fspath(path)
    with open(path + ".manifest", encoding="utf-8") as fh:
        entries = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    blob = np.fromfile(path, dtype="<f4")
    out, pos = {}, 0
    for name, shape_s in entries:
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + n > blob.size:
            raise ValueError(f"checkpoint blob too short for parameter {name}")
        out[name] = blob[pos : pos + n].reshape(shape).copy()
        pos += n
    if pos != blob.size:
        raise ValueError("checkpoint blob has trailing data not listed in the manifest")
    return out
