import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from radiomap.autodiff import smooth_activation
from radiomap.net import GeoUQGFNet, GhostBlock, GridKAN, NetConfig, build_model, rbf_responses
from radiomap.priors import CH
from radiomap.trainer import synthetic_batch

DEFAULT_PARAMS = 801_070


@pytest.fixture(scope="module")
def tiny():
    return build_model(NetConfig.tiny(), seed=0, dtype=torch.float64).eval()


def _x(n=2, size=16, seed=0):
    return synthetic_batch(n, size, seed, torch.float64)[0]


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(base_channels=5, ghost_ratio=2)
    with pytest.raises(ValueError):
        NetConfig(large_kernel=6)
    with pytest.raises(ValueError):
        NetConfig(logvar_clip=(2.0, -6.0))
    cfg = NetConfig()
    assert (cfg.base_channels, cfg.kan_hidden, cfg.kan_bases, cfg.fpn_channels, cfg.large_kernel) == (32, 32, 10, 64, 7)
    assert cfg.logvar_clip == (-6.0, 2.0)


def test_default_parameter_count_stable():
    a = build_model(NetConfig(), seed=0).n_parameters()
    b = build_model(NetConfig(), seed=1).n_parameters()
    assert a == b == DEFAULT_PARAMS


def test_build_model_seeded_and_rng_untouched():
    torch.manual_seed(123)
    before = torch.get_rng_state()
    a = build_model(NetConfig.tiny(), seed=4)
    assert torch.equal(before, torch.get_rng_state())
    b = build_model(NetConfig.tiny(), seed=4)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


# -- front-end ---------------------------------------------------------------------------


def test_wrong_channel_count_rejected(tiny):
    with pytest.raises(ValueError):
        tiny(torch.zeros(1, 10, 16, 16, dtype=torch.float64))


def test_non_divisible_resolution_rejected(tiny):
    with pytest.raises(ValueError):
        tiny(torch.zeros(1, 11, 18, 16, dtype=torch.float64))


def test_zero_gates_are_identity():
    m = build_model(NetConfig.tiny(), seed=1, dtype=torch.float64)
    x = _x()
    with torch.no_grad():
        for g in (m.g_geo, m.g_mask):
            g.out.weight.zero_()
            g.out.bias.fill_(-1e4)
        g_geo, g_mask = m.gates(x)
        assert torch.all(g_geo == 0) and torch.all(g_mask == 0)
        f_obs = m.f_obs(x[:, [CH["Gs"], CH["Ms"], CH["Ginit"]]])
        assert torch.equal(f_obs * (1.0 + g_geo + g_mask), f_obs)


def test_gate_modulation_range(tiny):
    with torch.no_grad():
        g_geo, g_mask = tiny.gates(_x(seed=3))
    factor = 1 + g_geo + g_mask
    assert torch.all(factor > 1) and torch.all(factor < 3)


def test_mask_gate_non_degenerate(tiny):
    x = _x(seed=5)
    xs = x.clone()
    xs[:, CH["Ms"]], xs[:, CH["Ma"]] = x[:, CH["Ma"]], x[:, CH["Ms"]]
    with torch.no_grad():
        assert not torch.allclose(tiny.gates(x)[1], tiny.gates(xs)[1])


# -- Grid-KAN ---------------------------------------------------------------------------------


def test_rbf_peak_and_sigma():
    c = torch.tensor([0.5, -1.0], dtype=torch.float64)
    s = torch.tensor([0.25, 2.0], dtype=torch.float64)
    h = torch.tensor([0.5, 0.75, 1.0], dtype=torch.float64).view(1, 1, 3, 1)
    b = rbf_responses(h, c, s)  # (1, 2, 1, 3, 1)
    assert b[0, 0, 0, 0, 0].item() == 1.0
    assert b[0, 0, 0, 1, 0].item() == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert b[0, 1, 0, 2, 0].item() == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert math.exp(-0.5) == pytest.approx(0.60653, abs=1e-5)


def test_rbf_flat_limit():
    h = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    b = rbf_responses(h, torch.zeros(5, dtype=torch.float64), torch.full((5,), 1e6, dtype=torch.float64))
    assert torch.all((b - 1).abs() < 1e-9)


def test_kan_init_and_scale_floor():
    k = GridKAN(4, 3, 5)
    assert torch.allclose(k.centers, torch.linspace(-2, 2, 5))
    assert torch.allclose(k.scales, torch.full((5,), 1.0))
    with torch.no_grad():
        k.scales.fill_(-3.0)
    z = torch.randn(1, 4, 4, 4)
    b = k.responses(z)
    assert torch.all(torch.isfinite(b))
    h = k.proj(z)
    assert torch.allclose(b[:, 0], torch.exp(-((h - k.centers[0]) ** 2) / (2 * 1e-3**2)))


def test_kan_residual_with_zero_mix():
    k = GridKAN(4, 3, 5)
    with torch.no_grad():
        k.mix.weight.zero_()
        k.mix.bias.zero_()
    z = torch.randn(2, 4, 6, 6)
    assert torch.equal(k(z), z)


# -- encoder ----------------------------------------------------------------------------------


def test_encoder_shapes():
    m = build_model(NetConfig(base_channels=8, kan_hidden=4, kan_bases=3, fpn_channels=8), seed=0).eval()
    x = synthetic_batch(1, 128, 0, torch.float32)[0]
    with torch.no_grad():
        s1, s2, s3, f_ctx = m.encode(m.frontend(x))
    assert s1.shape[-2:] == (128, 128) and s1.shape[1] == 8
    assert s2.shape[-2:] == (64, 64) and s2.shape[1] == 16
    assert s3.shape[-2:] == (32, 32) and f_ctx.shape[-2:] == (32, 32) and s3.shape[1] == 32


def test_ghost_zero_cheap_branch():
    torch.manual_seed(0)
    g = GhostBlock(8, 2).double()
    with torch.no_grad():
        for p in g.cheap.parameters():
            p.zero_()
    z = torch.randn(2, 8, 5, 5, dtype=torch.float64)
    out = g(z)
    # The cheap channels reduce to the activated residual input.
    assert torch.equal(out[:, 4:], smooth_activation(z[:, 4:]))


def test_context_receptive_field(tiny):
    k = tiny.config.large_kernel
    size = 64
    x = _x(1, size, seed=2)
    xp = x.clone()
    xp[0, CH["Ginit"], size // 2, size // 2] += 1.0
    with torch.no_grad():
        a = tiny.encode(tiny.frontend(x))[3]
        b = tiny.encode(tiny.frontend(xp))[3]
    changed = ((a - b).abs().amax(dim=(0, 1)) > 0).nonzero()
    width_in_input = (changed[:, 1].max() - changed[:, 1].min() + 1).item() * 4
    assert width_in_input >= k * 4


# -- decoder ---------------------------------------------------------------------------------


def test_fuse_shapes(tiny):
    for size in (64, 128):
        with torch.no_grad():
            out = tiny(_x(1, size))
        assert out.G_hat.shape == (1, size, size)


def test_zero_features_give_constant_fref(tiny):
    c = tiny.config.base_channels
    s1 = torch.zeros(1, c, 16, 16, dtype=torch.float64)
    s2 = torch.zeros(1, 2 * c, 8, 8, dtype=torch.float64)
    f = torch.zeros(1, 4 * c, 4, 4, dtype=torch.float64)
    with torch.no_grad():
        out = tiny.fuse(s1, s2, f)
    assert torch.allclose(out, out[:, :, :1, :1].expand_as(out), atol=1e-12)


def test_zero_p3_removes_context():
    m = build_model(NetConfig.tiny(), seed=0, dtype=torch.float64).eval()
    with torch.no_grad():
        m.p3.weight.zero_()
        s1, s2, _s3, f = m.encode(m.frontend(_x(1, 16)))
        a = m.fuse(s1, s2, f)
        b = m.fuse(s1, s2, f + torch.randn_like(f))
    assert torch.equal(a, b)


# -- prediction -------------------------------------------------------------------------------


def test_blending_exact_any_weights():
    for seed in range(3):
        m = build_model(NetConfig.tiny(), seed=seed)
        with torch.no_grad():
            for p in m.parameters():
                p.add_(torch.randn_like(p))
            x = synthetic_batch(2, 16, seed, torch.float32)[0]
            out = m(x)
        ms = x[:, CH["Ms"]] > 0.5
        assert torch.equal(out.G_hat[ms], x[:, CH["Gs"]][ms])
        assert torch.equal(out.G_hat[~ms], out.G_u[~ms])


def test_logvar_clamped_and_std_positive():
    m = build_model(NetConfig.tiny(), seed=0)
    with torch.no_grad():
        m.var_head[-1].bias.fill_(50.0)
        hi = m(synthetic_batch(1, 16, 0, torch.float32)[0])
        m.var_head[-1].bias.fill_(-50.0)
        lo = m(synthetic_batch(1, 16, 0, torch.float32)[0])
    assert torch.all(hi.S_logvar <= 2.0) and torch.all(lo.S_logvar >= -6.0)
    assert torch.all(hi.U_hat <= math.exp(1) + 1e-6) and torch.all(lo.U_hat >= math.exp(-3) - 1e-9)


def test_zero_logvar_unit_std():
    m = build_model(NetConfig.tiny(), seed=0, dtype=torch.float64)
    with torch.no_grad():
        m.var_head[-1].weight.zero_()
        m.var_head[-1].bias.zero_()
        out = m(_x())
    assert torch.all(out.U_hat == 1.0)


def test_initial_model_is_nearest_fill(tiny):
    x = _x()
    with torch.no_grad():
        out = tiny(x)
    assert torch.all(out.delta == 0)
    assert torch.equal(out.G_u, x[:, CH["Ginit"]])


def test_restrict_output_flag():
    m = build_model(NetConfig(**{**NetConfig.tiny().to_dict(), "restrict_output": True}), seed=0, dtype=torch.float64)
    x = _x()
    x[:, CH["Ginit"]] = 3.0
    with torch.no_grad():
        out = m(x)
    ms = x[:, CH["Ms"]] > 0.5
    assert torch.all(out.G_hat[~ms] <= 1.0)


def test_forward_deterministic(tiny):
    x = _x(seed=9)
    with torch.no_grad():
        a, b = tiny(x), tiny(x)
    assert torch.equal(a.G_hat, b.G_hat) and torch.equal(a.S_logvar, b.S_logvar)


@settings(max_examples=10, deadline=None)
@given(h=st.sampled_from([8, 12, 20]), w=st.sampled_from([8, 16, 24]), seed=st.integers(0, 1000))
def test_property_shape_contract_and_uncertainty(tiny, h, w, seed):
    x = synthetic_batch(1, max(h, w), seed, torch.float64)[0][..., :h, :w]
    with torch.no_grad():
        out = tiny(x)
    assert out.G_hat.shape == (1, h, w) and out.U_hat.shape == (1, h, w)
    assert torch.all(out.U_hat > 0)
    assert torch.allclose(out.U_hat, torch.exp(out.S_logvar / 2))
