"""Attention-gated U-Net over stained tissue patches.

Seven spatial levels by default, with downsampled copies of the input
joined at every encoder level, additive attention on the skip
connections, and a class map produced at every decoder resolution so
each level can be trained directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_FILTERS = (16, 32, 32, 64, 64, 128, 128)


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture knobs; the defaults are the desk-scale operating point."""

    levels: int = 7
    filters: tuple[int, ...] = DEFAULT_FILTERS
    classes: int = 4
    input_size: int = 128
    multiscale_input: bool = True
    deep_supervision: bool = True
    attention_gates: bool = True

    def __post_init__(self) -> None:
        if self.levels < 2:
            raise ValueError("need at least two spatial levels")
        if len(self.filters) != self.levels:
            raise ValueError(
                f"filters must list one width per level: "
                f"{len(self.filters)} widths for {self.levels} levels"
            )
        if any(f < 1 for f in self.filters):
            raise ValueError("filter widths must be positive")
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.input_size % self.divisor:
            raise ValueError(
                f"input_size must be divisible by {self.divisor}, got {self.input_size}"
            )

    @property
    def divisor(self) -> int:
        # each level below the first halves the grid once
        return 2 ** (self.levels - 1)


@dataclass
class NetworkOutput:
    """One forward pass: the full-resolution class distribution, the
    coarser trained maps (finest first, dims halving down the list),
    and the attention coefficients from every gate."""

    final: torch.Tensor
    aux: tuple[torch.Tensor, ...] = ()
    attention: tuple[torch.Tensor, ...] = ()


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by group norm and ReLU.

    Group norm keeps the block independent of batch composition, so
    train and eval passes compute the same function.
    """

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        groups = 8 if c_out % 8 == 0 else 1
        self.a = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.na = nn.GroupNorm(groups, c_out)
        self.b = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.nb = nn.GroupNorm(groups, c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.nb(self.b(F.relu(self.na(self.a(x))))))


class AttentionGate(nn.Module):
    """Additive attention: the coarser decoder feature decides, pixel by
    pixel, how much of the skip connection passes through.  Coefficients
    come out of a sigmoid, so they sit in [0, 1] by construction."""

    def __init__(self, c_skip: int, c_gate: int, c_mid: int):
        super().__init__()
        self.w_skip = nn.Conv2d(c_skip, c_mid, 1)
        self.w_gate = nn.Conv2d(c_gate, c_mid, 1)
        self.psi = nn.Conv2d(c_mid, 1, 1)

    def forward(self, skip: torch.Tensor, gate: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # the gate arrives one level coarser; align it before adding
        g = F.interpolate(self.w_gate(gate), size=skip.shape[2:], mode="nearest")
        alpha = torch.sigmoid(self.psi(F.relu(self.w_skip(skip) + g)))
        return skip * alpha, alpha


class AguNet(nn.Module):
    """U-shaped segmentation network parameterized by NetworkConfig.

    forward() accepts (batch, 3, h, w) floats in [0, 1] with h and w
    divisible by cfg.divisor, and returns a NetworkOutput whose class
    planes are softmax-normalized.
    """

    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg if cfg is not None else NetworkConfig()
        f = cfg.filters
        enc = []
        for i in range(cfg.levels):
            extra = 3 if (cfg.multiscale_input and i > 0) else 0
            enc.append(ConvBlock(3 if i == 0 else f[i - 1] + extra, f[i]))
        self.encoder = nn.ModuleList(enc)
        # decoder stage j rebuilds the level-j grid from level j+1
        self.decoder = nn.ModuleList(
            ConvBlock(f[j + 1] + f[j], f[j]) for j in range(cfg.levels - 1)
        )
        if cfg.attention_gates:
            self.gates = nn.ModuleList(
                AttentionGate(f[j], f[j + 1], f[j]) for j in range(cfg.levels - 1)
            )
        n_heads = cfg.levels - 1 if cfg.deep_supervision else 1
        self.heads = nn.ModuleList(
            nn.Conv2d(f[j], cfg.classes, 1) for j in range(n_heads)
        )

    def forward(self, x: torch.Tensor) -> NetworkOutput:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a (batch, 3, h, w) tensor, got {tuple(x.shape)}")
        h, w = int(x.shape[2]), int(x.shape[3])
        if h % cfg.divisor or w % cfg.divisor:
            raise ValueError(
                f"input dims must be divisible by {cfg.divisor}, got {h}x{w}"
            )
        feats = []
        cur, scaled = x, x
        for i, block in enumerate(self.encoder):
            if i > 0:
                cur = F.max_pool2d(cur, 2)
                if cfg.multiscale_input:
                    scaled = F.avg_pool2d(scaled, 2)
                    cur = torch.cat([cur, scaled], dim=1)
            cur = block(cur)
            feats.append(cur)
        z = feats[-1]
        aux: list[torch.Tensor] = []
        attention: list[torch.Tensor] = []
        for j in range(cfg.levels - 2, -1, -1):
            up = F.interpolate(z, scale_factor=2, mode="nearest")
            skip = feats[j]
            if cfg.attention_gates:
                skip, alpha = self.gates[j](skip, z)
                attention.append(alpha)
            z = self.decoder[j](torch.cat([up, skip], dim=1))
            if j > 0 and cfg.deep_supervision:
                aux.append(torch.softmax(self.heads[j](z), dim=1))
        final = torch.softmax(self.heads[0](z), dim=1)
        aux.reverse()
        return NetworkOutput(final=final, aux=tuple(aux), attention=tuple(attention))


def build_network(cfg: NetworkConfig | None = None, seed: int | None = None) -> AguNet:
    """Construct the network; pass a seed for reproducible initial weights."""
    if seed is not None:
        torch.manual_seed(seed)
    return AguNet(cfg)
