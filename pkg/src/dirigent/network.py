"""Conditional denoising network that maps (noisy joints, RGB condition, noise level) to joints.

Layout::

    noisy joints --linear+reshape--> 3x64x64 --contract--> 16x16x128 --2x DoubleConv--+
                                                                                      |
    condition    ----------------------------> contract ---+--------------------------+
                                                           | 64^2, 32^2, 16^2 features
                                                           v
                              expand 16^2 -> 32^2 -> 64^2 (concat condition at each scale)
                                                           |
                                          flatten 64x64x64 -> linear -> joint values

The first contracting path only reaches the expanding path through its bottleneck;
the condition path is concatenated into the expanding path at every resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CARTESIAN_DIM = 7


@dataclass
class NetworkConfig:
    image_size: int = 64
    in_channels: int = 3
    base_channels: tuple[int, int, int] = (64, 96, 128)
    bottleneck_channels: int = 96
    attention_heads: int = 4
    joint_dim: int = 26
    timestep_embed_dim: int = 128
    num_timesteps: int = 1000
    cartesian_head: str = "off"  # off | consistency
    cartesian_chains: int = 1  # 7 pose values per chain join the diffusion vector
    attention_resolutions: tuple[int, ...] = (32, 16)

    def __post_init__(self):
        self.base_channels = tuple(self.base_channels)
        self.attention_resolutions = tuple(self.attention_resolutions)
        if self.joint_dim <= 0:
            raise ValueError(f"joint_dim must be positive, got {self.joint_dim}")
        if self.image_size % 4:
            raise ValueError(f"image_size must be divisible by 4, got {self.image_size}")
        if len(self.base_channels) != 3:
            raise ValueError("base_channels needs one width per resolution (3 entries)")
        if self.cartesian_head not in ("off", "consistency"):
            raise ValueError(f"unknown cartesian_head {self.cartesian_head!r}")

    @property
    def diffusion_dim(self) -> int:
        """Length of the vector that is noised and denoised."""
        extra = CARTESIAN_DIM * self.cartesian_chains if self.cartesian_head == "consistency" else 0
        return self.joint_dim + extra

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_channels"] = list(self.base_channels)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class DoubleConv(nn.Module):
    """Two 3x3 conv + GroupNorm + GELU, with the noise-level embedding added in between."""

    def __init__(self, in_ch, out_ch, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm1 = nn.GroupNorm(math.gcd(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(math.gcd(8, out_ch), out_ch)
        self.emb = nn.Linear(emb_dim, out_ch)

    def forward(self, x, emb):
        h = F.gelu(self.norm1(self.conv1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        return F.gelu(self.norm2(self.conv2(h)))


class SelfAttention(nn.Module):
    """Multi-head self-attention over flattened spatial positions."""

    def __init__(self, channels, heads):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x):
        b, c, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2)
        q = self.norm(seq)
        seq = seq + self.attn(q, q, q, need_weights=False)[0]
        return seq.transpose(1, 2).reshape(b, c, h, w)


class ContractingPath(nn.Module):
    """64^2 -> 32^2 -> 16^2 encoder returning features at every resolution."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c0, c1, c2 = cfg.base_channels
        e = cfg.timestep_embed_dim
        s = cfg.image_size
        self.inc = DoubleConv(cfg.in_channels, c0, e)
        self.down1 = DoubleConv(c0, c1, e)
        self.down2 = DoubleConv(c1, c2, e)
        self.attn1 = SelfAttention(c1, cfg.attention_heads) if s // 2 in cfg.attention_resolutions else nn.Identity()
        self.attn2 = SelfAttention(c2, cfg.attention_heads) if s // 4 in cfg.attention_resolutions else nn.Identity()

    def forward(self, x, emb):
        f0 = self.inc(x, emb)
        f1 = self.attn1(self.down1(F.max_pool2d(f0, 2), emb))
        f2 = self.attn2(self.down2(F.max_pool2d(f1, 2), emb))
        return [f0, f1, f2]


class UpBlock(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch, emb_dim, attention=None):
        super().__init__()
        # channel reduction runs before the nearest upsample to keep the 64^2 stage cheap
        self.up = nn.Conv2d(in_ch, out_ch, 1)
        self.conv = DoubleConv(out_ch + skip_ch, out_ch, emb_dim)
        self.attn = attention if attention is not None else nn.Identity()

    def forward(self, x, skip, emb):
        x = F.interpolate(self.up(x), scale_factor=2, mode="nearest")
        x = self.conv(torch.cat([x, skip], dim=1), emb)
        return self.attn(x)


class Dirigent(nn.Module):
    """Two contracting paths, one expanding path, linear joint decoder.

    ``forward`` returns the normalised diffusion vector (joints, plus 7 Cartesian values
    when ``cartesian_head == "consistency"``). Kinematics is applied outside the module
    so that the network stays robot-agnostic.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = cfg.base_channels
        e = cfg.timestep_embed_dim
        s = cfg.image_size
        d = cfg.diffusion_dim
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.GELU(), nn.Linear(e, e))
        self.encode = nn.Linear(d, cfg.in_channels * s * s)
        self.noisy_path = ContractingPath(cfg)
        self.cond_path = ContractingPath(cfg)
        self.mid1 = DoubleConv(c2, cfg.bottleneck_channels, e)
        self.mid2 = DoubleConv(cfg.bottleneck_channels, c2, e)
        attn = SelfAttention(c1, cfg.attention_heads) if s // 2 in cfg.attention_resolutions else None
        # 16^2 condition features join the bottleneck before the first upsampling block
        self.up1 = UpBlock(2 * c2, c1, c1, e, attention=attn)
        self.up2 = UpBlock(c1, c0, c0, e)
        self.decode = nn.Linear(c0 * s * s, d)

    def encode_joints_to_grid(self, joints: torch.Tensor) -> torch.Tensor:
        s = self.cfg.image_size
        if joints.shape[-1] != self.cfg.diffusion_dim:
            raise ValueError(f"expected {self.cfg.diffusion_dim} joint values, got {joints.shape[-1]}")
        return self.encode(joints).reshape(-1, self.cfg.in_channels, s, s)

    def forward(self, noisy: torch.Tensor, condition: torch.Tensor, t: torch.Tensor, trace: list | None = None):
        """Predict the clean diffusion vector.

        Args:
            noisy: (B, diffusion_dim) noised normalised joints.
            condition: (B, 3, S, S) RGB in [0, 1].
            t: (B,) integer noise levels in [0, num_timesteps].
            trace: optional list that receives (name, shape) of intermediate activations.
        """
        cfg = self.cfg
        s = cfg.image_size
        if condition.shape[1:] != (cfg.in_channels, s, s):
            raise ValueError(f"condition must be (B, {cfg.in_channels}, {s}, {s}), got {tuple(condition.shape)}")
        if noisy.shape[0] != condition.shape[0]:
            raise ValueError("batch size mismatch between noisy input and condition")
        t = torch.as_tensor(t, device=noisy.device)
        if t.ndim == 0:
            t = t.expand(noisy.shape[0])
        if (t < 0).any() or (t > cfg.num_timesteps).any():
            raise ValueError(f"noise level outside [0, {cfg.num_timesteps}]")
        emb = self.time_mlp(sinusoidal_embedding(t, cfg.timestep_embed_dim))

        grid = self.encode_joints_to_grid(noisy)
        n0, n1, n2 = self.noisy_path(grid, emb)
        c0, c1, c2 = self.cond_path(condition, emb)
        x = self.mid2(self.mid1(n2, emb), emb)
        x = torch.cat([x, c2], dim=1)
        u1 = self.up1(x, c1, emb)
        u2 = self.up2(u1, c0, emb)
        if trace is not None:
            for name, a in (("grid", grid), ("contract0", n0), ("contract1", n1), ("contract2", n2),
                            ("cond0", c0), ("cond1", c1), ("cond2", c2), ("bottleneck", x),
                            ("expand1", u1), ("expand2", u2)):
                trace.append((name, tuple(a.shape)))
        return self.decode(u2.flatten(1))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
