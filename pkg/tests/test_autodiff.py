import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from radiomap.autodiff import (
    GELU_COEF,
    GELU_SCALE,
    NonFiniteError,
    attach_finite_checks,
    backward,
    clamp,
    grad_check,
    group_norm,
    load_checkpoint,
    masked_mean,
    norm_groups,
    relative_error,
    save_checkpoint,
    smooth_activation,
)
from radiomap.net import GeoUQGFNet

D = torch.float64


def naive_conv(x, w, groups=1, pad=1):
    """Direct O(k^2 HW) convolution reference for a single image."""
    c_in, h, wd = x.shape
    c_out, cg, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((c_out, h, wd))
    per = c_out // groups
    for o in range(c_out):
        g = o // per
        for c in range(cg):
            ci = g * cg + c
            for i in range(h):
                for j in range(wd):
                    out[o, i, j] += np.sum(xp[ci, i : i + k, j : j + k] * w[o, c])
    return out


def test_identity_kernel_conv():
    x = torch.randn(1, 3, 7, 7, dtype=D)
    w = torch.zeros(3, 1, 3, 3, dtype=D)
    w[:, 0, 1, 1] = 1.0
    assert torch.equal(F.conv2d(x, w, padding=1, groups=3), x)


def test_bilinear_upsample_constant():
    x = torch.full((1, 2, 5, 6), 3.25, dtype=D)
    y = GeoUQGFNet.up2(x)
    assert y.shape == (1, 2, 10, 12)
    assert torch.all(y == 3.25)


def test_bilinear_half_pixel_convention():
    x = torch.tensor([[[[0.0, 1.0]]]], dtype=D)
    y = GeoUQGFNet.up2(x)[0, 0, 0]
    # align_corners=False: output sample k maps to input coordinate (k + 0.5) / 2 - 0.5, clamped.
    assert torch.allclose(y, torch.tensor([0.0, 0.25, 0.75, 1.0], dtype=D))


def test_depthwise_box_on_impulse_matches_naive():
    x = np.zeros((2, 9, 9))
    x[:, 4, 4] = 1.0
    w = np.full((2, 1, 3, 3), 1.0 / 9.0)
    got = F.conv2d(torch.tensor(x)[None], torch.tensor(w), padding=1, groups=2)[0].numpy()
    ref = naive_conv(x, w, groups=2)
    assert np.allclose(got, ref, atol=1e-15)
    assert np.allclose(got[:, 3:6, 3:6], 1.0 / 9.0)
    assert got.sum() == pytest.approx(2.0)


def test_strided_conv_matches_naive_subsample():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    got = F.conv2d(torch.tensor(x)[None], torch.tensor(w), padding=1, stride=2)[0].numpy()
    assert np.allclose(got, naive_conv(x, w)[:, ::2, ::2])


def test_smooth_activation_formula():
    x = torch.linspace(-4, 4, 101, dtype=D)
    ref = 0.5 * x * (1 + torch.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert torch.allclose(smooth_activation(x), ref, rtol=0, atol=1e-15)
    assert GELU_COEF == 0.044715 and GELU_SCALE == math.sqrt(2 / math.pi)
    assert torch.allclose(smooth_activation(x), F.gelu(x, approximate="tanh"))


def test_group_norm_group_count():
    assert norm_groups(4) == 4 and norm_groups(32) == 8 and norm_groups(12) == 6 and norm_groups(1) == 1
    gn = group_norm(16).double()
    x = torch.randn(2, 16, 5, 5, dtype=D) * 3 + 7
    y = gn(x).view(2, 8, -1)
    assert torch.allclose(y.mean(-1), torch.zeros(2, 8, dtype=D), atol=1e-12)


def test_linear_gradient_exact():
    w = torch.randn(2, 3, 4, 4, dtype=D, requires_grad=True)
    x = torch.randn(2, 3, 4, 4, dtype=D)
    backward((w * x).sum())
    assert torch.equal(w.grad, x)


def test_clamp_gradient_zero_outside():
    x = torch.tensor([-10.0, 0.0, 10.0], dtype=D, requires_grad=True)
    backward(clamp(x, -6.0, 2.0).sum())
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_non_scalar_loss_rejected():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2)


def test_masked_mean():
    x = torch.arange(6.0, dtype=D)
    m = torch.tensor([1, 0, 1, 0, 0, 0], dtype=D)
    v, n = masked_mean(x, m)
    assert n == 2 and v.item() == 1.0
    v, n = masked_mean(x, torch.zeros(6, dtype=D))
    assert n == 0 and v.item() == 0.0


def test_grad_check_linear_graph():
    w = torch.randn(3, 5, dtype=D, requires_grad=True)
    x = torch.randn(3, 5, dtype=D)
    rep = grad_check(lambda: (w * x).sum(), {"w": w})
    assert rep.max_error < 1e-9
    assert rep.checked_elements == 15


def test_grad_check_composite_conv_norm_act():
    torch.manual_seed(1)
    conv = torch.nn.Conv2d(3, 8, 3, padding=1).double()
    gn = group_norm(8).double()
    x = torch.randn(2, 3, 6, 6, dtype=D)
    params = dict(conv.named_parameters())
    params.update({f"gn.{k}": v for k, v in gn.named_parameters()})
    rep = grad_check(lambda: smooth_activation(gn(conv(x))).mean(), params, eps=1e-5)
    assert rep.passed and rep.max_error < 1e-4


def test_grad_check_clamp_away_from_knees():
    a = torch.tensor([0.3, -0.7, 1.2, 5.0], dtype=D, requires_grad=True)
    rep = grad_check(lambda: (clamp(a * 2.0, -3.0, 4.0) ** 2).sum(), {"a": a}, tolerance=1e-6)
    assert rep.passed


def test_grad_check_subsamples_large_params():
    w = torch.randn(200, 80, dtype=D, requires_grad=True)
    rep = grad_check(lambda: (w**2).sum(), {"w": w}, max_elements=50, seed=3)
    assert rep.checked_elements == 50
    assert rep.passed


def test_grad_check_detects_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * 3.0

        @staticmethod
        def backward(ctx, g):
            return g * 2.0

    w = torch.randn(4, dtype=D, requires_grad=True)
    rep = grad_check(lambda: Bad.apply(w).sum(), {"w": w})
    assert not rep.passed
    assert "FAIL" in rep.format()


def test_report_sorted():
    w1 = torch.randn(3, dtype=D, requires_grad=True)
    w2 = torch.randn(3, dtype=D, requires_grad=True)
    rep = grad_check(lambda: (w1**3).sum() + (w2 * 2).sum(), {"a": w1, "b": w2})
    errs = [e for _, e in rep.errors]
    assert errs == sorted(errs, reverse=True)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == 0.5


def test_forward_determinism():
    torch.manual_seed(0)
    conv = torch.nn.Conv2d(3, 4, 3, padding=1)
    x = torch.randn(2, 3, 16, 16)
    assert torch.equal(conv(x), conv(x))


def test_finite_checks_name_node():
    model = torch.nn.Sequential(torch.nn.Linear(2, 2), torch.nn.Linear(2, 2))
    with torch.no_grad():
        model[1].weight.fill_(float("inf"))
    handles = attach_finite_checks(model)
    with pytest.raises(NonFiniteError, match="node 1"):
        model(torch.ones(1, 2))
    for h in handles:
        h.remove()


def test_checkpoint_roundtrip(tmp_path):
    params = {"a.weight": torch.randn(3, 4), "b": torch.randn(5), "s": torch.tensor(2.5)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert np.array_equal(back[k], params[k].numpy())
    assert path.stat().st_size == 4 * (12 + 5 + 1)
    assert (tmp_path / "m.ckpt.manifest").read_text().splitlines()[0] == "a.weight\t3,4"


def test_checkpoint_blob_layout_little_endian(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"v": np.array([1.0, -2.0])})
    assert path.read_bytes() == np.array([1.0, -2.0], dtype="<f4").tobytes()


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"v": np.arange(4.0)})
    path.write_bytes(path.read_bytes()[:8])
    with pytest.raises(ValueError):
        load_checkpoint(path)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), groups=st.sampled_from([1, 2, 4]))
def test_property_conv_backward_matches_fd(seed, groups):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 4, 5, 5, generator=g, dtype=D)
    w = torch.randn(4, 4 // groups, 3, 3, generator=g, dtype=D, requires_grad=True)
    rep = grad_check(lambda: torch.tanh(F.conv2d(x, w, padding=1, groups=groups)).sum(), {"w": w})
    assert rep.max_error < 1e-4
