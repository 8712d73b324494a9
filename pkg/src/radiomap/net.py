"""GeoUQ-GFNet: geometry-gated sparse-to-dense gain reconstruction with uncertainty."""

from __future__ import annotations

from dataclasses import asdict, dataclass
import logging

import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import SmoothActivation, clamp, group_norm, smooth_activation
from .priors import CH, CHANNELS

logger = logging.getLogger(__name__)

STR_CHANNELS = [CH[c] for c in ("O", "Hh", "Ma", "L", "E")]
REL_CHANNELS = [CH[c] for c in ("Rx", "Ry", "D")]
OBS_CHANNELS = [CH[c] for c in ("Gs", "Ms", "Ginit")]
MASK_CHANNELS = [CH[c] for c in ("Ms", "Ma")]


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 32
    kan_hidden: int = 32
    kan_bases: int = 10
    ghost_ratio: int = 2
    fpn_channels: int = 64
    large_kernel: int = 7
    dropout: float = 0.0
    logvar_clip: tuple[float, float] = (-6.0, 2.0)
    restrict_output: bool = False
    logvar_init: float = -4.0

    def __post_init__(self):
        for name in ("base_channels", "kan_hidden", "kan_bases", "ghost_ratio", "fpn_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.base_channels % self.ghost_ratio:
            raise ValueError("base_channels must be divisible by ghost_ratio")
        if self.large_kernel < 1 or self.large_kernel % 2 == 0:
            raise ValueError("large_kernel must be an odd positive integer")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        lo, hi = self.logvar_clip
        if not lo < hi:
            raise ValueError("logvar_clip must be (low, high) with low < high")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def tiny(cls) -> "NetConfig":
        return cls(base_channels=4, kan_hidden=4, kan_bases=4, fpn_channels=8, large_kernel=5)


@dataclass
class Prediction:
    G_hat: torch.Tensor
    U_hat: torch.Tensor
    S_logvar: torch.Tensor
    delta: torch.Tensor
    G_u: torch.Tensor


def conv(cin, cout, k=3, stride=1, groups=1, bias=True, padding_mode="zeros"):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, groups=groups, bias=bias, padding_mode=padding_mode)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1, groups=1, padding_mode="zeros"):
        super().__init__(
            conv(cin, cout, k, stride, groups, bias=False, padding_mode=padding_mode),
            group_norm(cout),
            SmoothActivation(),
        )


class TwoConv(nn.Sequential):
    def __init__(self, cin, cout):
        super().__init__(ConvNormAct(cin, cout), ConvNormAct(cout, cout))


class Gate(nn.Module):
    """Two 3x3 conv layers ending in a sigmoid, so outputs lie in (0, 1)."""

    def __init__(self, cin, cout):
        super().__init__()
        self.body = ConvNormAct(cin, cout)
        self.out = conv(cin=cout, cout=cout)

    def forward(self, x):
        return torch.sigmoid(self.out(self.body(x)))


class ResidualBlock(nn.Module):
    def __init__(self, c, padding_mode="zeros"):
        super().__init__()
        self.body = nn.Sequential(
            ConvNormAct(c, c, padding_mode=padding_mode),
            conv(c, c, bias=False, padding_mode=padding_mode),
            group_norm(c),
        )

    def forward(self, x):
        return smooth_activation(x + self.body(x))


class GhostBlock(nn.Module):
    """``act(Z + [primary(Z), cheap(primary(Z))])`` with a depthwise cheap branch."""

    def __init__(self, c, ratio=2):
        super().__init__()
        if c % ratio:
            raise ValueError(f"channels {c} not divisible by ghost ratio {ratio}")
        init = c // ratio
        self.primary = ConvNormAct(c, init)
        self.cheap = ConvNormAct(init, c - init, groups=init)

    def forward(self, z):
        p = self.primary(z)
        return smooth_activation(z + torch.cat([p, self.cheap(p)], dim=1))


def rbf_responses(h: torch.Tensor, centers: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """``exp(-(h - c_m)^2 / (2 sigma_m^2))`` stacked on a new dim 1: ``(N, M, C, H, W)``."""
    c = centers.view(1, -1, 1, 1, 1)
    s = scales.view(1, -1, 1, 1, 1)
    d = h.unsqueeze(1) - c
    return torch.exp(-(d * d) / (2.0 * s * s))


class GridKAN(nn.Module):
    """Learnable Gaussian basis expansion of a projected feature, mixed back residually."""

    SCALE_FLOOR = 1e-3

    def __init__(self, c, hidden, n_bases):
        super().__init__()
        self.n_bases = n_bases
        self.proj = nn.Conv2d(c, hidden, 1)
        centers = torch.linspace(-2.0, 2.0, n_bases) if n_bases > 1 else torch.zeros(1)
        spacing = 4.0 / (n_bases - 1) if n_bases > 1 else 1.0
        self.centers = nn.Parameter(centers)
        self.scales = nn.Parameter(torch.full((n_bases,), spacing))
        self.mix = nn.Conv2d(n_bases * hidden, c, 1)

    def responses(self, z):
        h = self.proj(z)
        return rbf_responses(h, self.centers, torch.clamp(self.scales, min=self.SCALE_FLOOR))

    def forward(self, z):
        b = self.responses(z)
        n, m, c, hh, ww = b.shape
        return z + self.mix(b.reshape(n, m * c, hh, ww))


class GeoUQGFNet(nn.Module):
    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        cfg = config or NetConfig()
        self.config = cfg
        c, f, r = cfg.base_channels, cfg.fpn_channels, cfg.ghost_ratio

        # front-end
        self.f_str = TwoConv(len(STR_CHANNELS), c)
        self.f_rel = TwoConv(len(REL_CHANNELS), c)
        self.f_obs = TwoConv(len(OBS_CHANNELS), c)
        self.g_geo = Gate(len(STR_CHANNELS), c)
        self.g_mask = Gate(len(MASK_CHANNELS), c)
        self.fuse_proj = nn.Conv2d(3 * c, c, 1)
        self.fuse_refine = ResidualBlock(c)

        # encoder
        self.stage1 = GhostBlock(c, r)
        self.down2 = ConvNormAct(c, 2 * c, stride=2)
        self.stage2 = nn.Sequential(GhostBlock(2 * c, r), GridKAN(2 * c, cfg.kan_hidden, cfg.kan_bases))
        self.down3 = ConvNormAct(2 * c, 4 * c, stride=2)
        self.stage3 = nn.Sequential(GhostBlock(4 * c, r), GridKAN(4 * c, cfg.kan_hidden, cfg.kan_bases))
        k = cfg.large_kernel
        self.ctx = nn.Sequential(
            ConvNormAct(4 * c, 4 * c, k=k, groups=4 * c),
            ConvNormAct(4 * c, 4 * c),
            nn.Conv2d(4 * c, 4 * c, 1),
        )

        # decoder; replicate padding keeps spatially constant maps constant
        self.p1 = nn.Conv2d(c, f, 1)
        self.p2 = nn.Conv2d(2 * c, f, 1)
        self.p3 = nn.Conv2d(4 * c, f, 1)
        self.f_fpn = ConvNormAct(3 * f, f, padding_mode="replicate")
        self.f_ref = ResidualBlock(f, padding_mode="replicate")
        self.dropout = nn.Dropout2d(cfg.dropout) if cfg.dropout > 0 else nn.Identity()

        # heads
        half = max(f // 2, 1)
        self.mean_head = nn.Sequential(ConvNormAct(f, half), conv(half, 1))
        self.f_uq = ConvNormAct(f + 3, f)
        self.kan_uq = GridKAN(f, cfg.kan_hidden, cfg.kan_bases)
        self.var_head = nn.Sequential(ConvNormAct(f, half), conv(half, 1))

        nn.init.zeros_(self.mean_head[-1].weight)
        nn.init.zeros_(self.mean_head[-1].bias)
        nn.init.constant_(self.var_head[-1].bias, cfg.logvar_init)

    # -- stages ---------------------------------------------------------

    @staticmethod
    def check_input(x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != len(CHANNELS):
            raise ValueError(f"expected input (N, {len(CHANNELS)}, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"input height and width must be divisible by 4, got {tuple(x.shape[-2:])}")

    def gates(self, x):
        return self.g_geo(x[:, STR_CHANNELS]), self.g_mask(x[:, MASK_CHANNELS])

    def frontend(self, x):
        self.check_input(x)
        f_str = self.f_str(x[:, STR_CHANNELS])
        f_rel = self.f_rel(x[:, REL_CHANNELS])
        f_obs = self.f_obs(x[:, OBS_CHANNELS])
        g_geo, g_mask = self.gates(x)
        f_obs = f_obs * (1.0 + g_geo + g_mask)
        return self.fuse_refine(self.fuse_proj(torch.cat([f_str, f_rel, f_obs], dim=1)))

    def encode(self, f0):
        s1 = self.stage1(f0)
        s2 = self.stage2(self.down2(s1))
        s3 = self.stage3(self.down3(s2))
        return s1, s2, s3, s3 + self.ctx(s3)

    @staticmethod
    def up2(x):
        return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)

    def fuse(self, s1, s2, f_ctx):
        a = self.p1(s1)
        b = self.up2(self.p2(s2))
        c = self.up2(self.up2(self.p3(f_ctx)))
        return self.dropout(self.f_ref(self.f_fpn(torch.cat([a, b, c], dim=1))))

    def forward(self, x: torch.Tensor) -> Prediction:
        f_ref = self.fuse(*self._encoded(x))
        ms = x[:, CH["Ms"] : CH["Ms"] + 1]
        gs = x[:, CH["Gs"] : CH["Gs"] + 1]
        ginit = x[:, CH["Ginit"] : CH["Ginit"] + 1]

        delta = self.mean_head(f_ref)
        g_u = ginit + delta
        if self.config.restrict_output:
            g_u = torch.clamp(g_u, 0.0, 1.0)
        g_hat = torch.where(ms > 0.5, gs, g_u)

        masks = x[:, [CH["Ms"], CH["Ma"], CH["L"]]]
        f_uq = self.kan_uq(self.f_uq(torch.cat([f_ref, masks], dim=1)))
        lo, hi = self.config.logvar_clip
        s = clamp(self.var_head(f_uq), lo, hi)
        u = torch.exp(0.5 * s)
        return Prediction(g_hat[:, 0], u[:, 0], s[:, 0], delta[:, 0], g_u[:, 0])

    def _encoded(self, x):
        s1, s2, _s3, f_ctx = self.encode(self.frontend(x))
        return s1, s2, f_ctx

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: NetConfig | None = None, seed: int = 0, dtype=torch.float32) -> GeoUQGFNet:
    """Seeded construction; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = GeoUQGFNet(config)
    model = model.to(dtype)
    logger.info("GeoUQ-GFNet parameters: %d", model.n_parameters())
    return model
