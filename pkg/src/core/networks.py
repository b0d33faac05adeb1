"""Encoder backbone and projection heads."""

from collections.abc import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


def norm_groups(channels: int, max_groups: int = 8) -> int:
    """Largest group count <= max_groups that divides ``channels``."""
    for g in range(min(max_groups, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


class ResidualBlock(nn.Module):
    """conv3x3-GN-ReLU-conv3x3-GN plus a (strided 1x1) shortcut."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(norm_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(norm_groups(out_channels), out_channels)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.GroupNorm(norm_groups(out_channels), out_channels),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Encoder(nn.Module):
    """Small residual CNN mapping 3xHxW images to a feature vector in R^d.

    GroupNorm keeps every sample's activations independent of the rest of the
    batch, so query and key paths never share batch statistics.
    Each stage halves the resolution; ``d`` is the width of the last stage.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128)):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if not widths:
            raise ValueError("an encoder needs at least one stage")
        self.widths = widths
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, padding=1, bias=False),
            nn.GroupNorm(norm_groups(widths[0]), widths[0]),
            nn.ReLU(),
        )
        stages = []
        in_channels = widths[0]
        for width in widths:
            stages.append(ResidualBlock(in_channels, width, stride=2))
            in_channels = width
        self.stages = nn.ModuleList(stages)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def forward_stages(self, x: torch.Tensor, include_stem: bool = False) -> list[torch.Tensor]:
        """Feature maps after every downsampling stage, finest first.

        With ``include_stem`` the full-resolution stem output leads the list.
        """
        out = self.stem(x)
        maps = [out] if include_stem else []
        for stage in self.stages:
            out = stage(out)
            maps.append(out)
        return maps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_stages(x)[-1].mean(dim=(-2, -1))


class ProjectionHead(nn.Module):
    """Linear(d, d) -> ReLU -> Linear(d, d'), output renormalised to unit length."""

    def __init__(self, in_dim: int, out_dim: int = 128, hidden_dim: int | None = None):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, out_dim),
        )

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(v), dim=-1)
