"""Global pooling: activation tensor -> unit-norm descriptor.

Supported kinds: channelwise spatial max (MAC), channelwise sum (SPoC),
generalized mean with exponent p (GeM), regional max aggregation over a
3-scale ~40%-overlap grid (R-MAC), and spatially/channel-weighted sum (CroW).
l2 normalization is part of every kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .backends import ActivationTensor
from .descriptor import Descriptor, l2_normalize
from .errors import UndefinedDirectionError

GEM_EPS = 1e-6  # activations are clamped here before the p-th power
_NORM_EPS = 1e-12


@dataclass(frozen=True)
class PoolingKind:
    name: str
    p: float = 3.0  # GeM exponent, ignored by other kinds

    def __post_init__(self):
        if self.name not in ("mac", "spoc", "gem", "rmac", "crow"):
            raise ValueError(f"unknown pooling kind {self.name!r}")
        if self.name == "gem" and not self.p > 0:
            raise ValueError(f"GeM exponent must be positive, got {self.p}")

    def label(self) -> str:
        if self.name == "gem":
            p = self.p
            return f"gem{p:g}" if p != 3.0 else "gem"
        return self.name

    @classmethod
    def parse(cls, text: str) -> "PoolingKind":
        text = text.strip().lower().replace("-", "")
        if text.startswith("gem") and len(text) > 3:
            return cls("gem", p=float(text[3:]))
        return cls(text)


MAC = PoolingKind("mac")
SPOC = PoolingKind("spoc")
RMAC = PoolingKind("rmac")
CROW = PoolingKind("crow")


def gem(p: float = 3.0) -> PoolingKind:
    return PoolingKind("gem", p=p)


def _gem_pool(x: torch.Tensor, p: float) -> torch.Tensor:
    # max-factored power mean: stable for large p (no underflow of x**p)
    x = x.clamp(min=GEM_EPS)
    m = x.amax(dim=(1, 2), keepdim=True)
    return (m.squeeze() * ((x / m) ** p).mean(dim=(1, 2)) ** (1.0 / p)).reshape(-1)


def rmac_regions(h: int, w: int, levels: int = 3, overlap: float = 0.4):
    """Square region grid: `levels` scales, ~`overlap` between neighbours."""
    short, long_ = min(h, w), max(h, w)
    overplus = 0
    if h != w:
        # extra regions along the long side so base-scale squares overlap ~40%
        steps = np.arange(2, 8, dtype=np.float64)
        b = (long_ - short) / (steps - 1)
        overplus = int(np.argmin(np.abs((short**2 - short * b) / short**2 - overlap))) + 1
    wd = overplus if w > h else 0
    hd = overplus if h > w else 0
    regions = []
    for level in range(1, levels + 1):
        side = int(math.floor(2 * short / (level + 1)))
        if side < 1:
            continue
        half = int(math.floor(side / 2.0 - 1))
        nx, ny = level + wd, level + hd
        bx = (w - side) / (nx - 1) if nx > 1 else 0.0
        by = (h - side) / (ny - 1) if ny > 1 else 0.0
        lefts = [int(math.floor(half + i * bx)) - half for i in range(nx)]
        tops = [int(math.floor(half + i * by)) - half for i in range(ny)]
        for top in tops:
            for left in lefts:
                regions.append((top, left, side))
    return regions


def _rmac_pool(x: torch.Tensor) -> torch.Tensor:
    _, h, w = x.shape
    acc = None
    for top, left, side in rmac_regions(h, w):
        v = x[:, top : top + side, left : left + side].amax(dim=(1, 2))
        v = v / (v.norm() + _NORM_EPS)
        acc = v if acc is None else acc + v
    return acc


def _crow_pool(x: torch.Tensor) -> torch.Tensor:
    d, h, w = x.shape
    s = x.sum(dim=0)
    alpha = (s / (s.norm() + _NORM_EPS)).clamp(min=0.0) ** 0.5
    nonzero = (x > 0).to(x.dtype).mean(dim=(1, 2))
    total = nonzero.sum()
    weights = torch.where(
        nonzero > 0,
        torch.log(total / nonzero.clamp(min=_NORM_EPS)),
        torch.zeros_like(nonzero),
    )
    return (x * alpha).sum(dim=(1, 2)) * weights


def pool_tensor(x: torch.Tensor, kind: PoolingKind) -> torch.Tensor:
    """(d, h, w) nonnegative tensor -> unit-norm (d,) descriptor tensor."""
    if float(x.detach().max()) <= 0.0:
        raise UndefinedDirectionError(
            "all-zero activation tensor has no descriptor direction"
        )
    if kind.name == "mac":
        v = x.amax(dim=(1, 2))
    elif kind.name == "spoc":
        v = x.sum(dim=(1, 2))
    elif kind.name == "gem":
        v = _gem_pool(x, kind.p)
    elif kind.name == "rmac":
        v = _rmac_pool(x)
    else:
        v = _crow_pool(x)
    n = v.norm()
    if float(n.detach()) < _NORM_EPS:
        raise UndefinedDirectionError(f"{kind.label()} descriptor has zero norm")
    return v / n


def pool(tensor: ActivationTensor, kind: PoolingKind) -> Descriptor:
    v = pool_tensor(tensor.values, kind)
    return Descriptor(l2_normalize(v.detach().cpu().numpy()))
