"""Adaptive Graph Convolution: gated axial/logarithmic max-relative aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import ConvBlock
from .tensor import Tensor

GATE_EPS = 1e-6
GATE_KINDS = ("exp_decay", "sigmoid")
DISTANCE_KINDS = ("L1", "L2")


@dataclass
class GatingParams:
    """Learnable temperature; the gate uses ``|T| + eps`` so it stays positive."""

    T: Tensor = field(default_factory=lambda: Tensor(1.0, requires_grad=True))
    eps: float = GATE_EPS

    def __post_init__(self):
        if not isinstance(self.T, Tensor):
            self.T = Tensor(float(self.T), requires_grad=True)
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def value(self) -> float:
        return self.T.item()

    def effective(self) -> Tensor:
        return T.absolute(self.T) + self.eps


@dataclass(frozen=True)
class AGCConfig:
    k: int = 1
    gate_kind: str = "exp_decay"
    distance_kind: str = "L1"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")
        if self.gate_kind not in GATE_KINDS:
            raise ValueError(f"gate_kind must be one of {GATE_KINDS}")
        if self.distance_kind not in DISTANCE_KINDS:
            raise ValueError(f"distance_kind must be one of {DISTANCE_KINDS}")


@dataclass(frozen=True)
class Shift:
    axis: str
    offset: int
    gated: bool


def floor_log2(n: int) -> int:
    return n.bit_length() - 1


def scaffold_shifts(h: int, w: int, k: int) -> list[Shift]:
    """Neighbour offsets in evaluation order: local K on height then width,
    then gated powers of two on height, then on width."""
    if not 1 <= k < min(h, w):
        raise ValueError(f"K={k} must satisfy 1 <= K < min(H, W) = {min(h, w)}")
    shifts = [Shift("height", k, False), Shift("width", k, False)]
    shifts += [Shift("height", 2**i, True) for i in range(1, floor_log2(h) + 1)]
    shifts += [Shift("width", 2**i, True) for i in range(1, floor_log2(w) + 1)]
    return shifts


def shift_count(h: int, w: int) -> int:
    return 2 + floor_log2(h) + floor_log2(w)


def distance_map(x: Tensor, x_shifted: Tensor, kind: str = "L1") -> Tensor:
    """Per-pixel feature distance, shape (n,1,h,w)."""
    if x.shape != x_shifted.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_shifted.shape}")
    diff = x - x_shifted
    if kind == "L1":
        return T.reduce_abs_sum_channels(diff)
    if kind == "L2":
        return T.reduce_l2_channels(diff)
    raise ValueError(f"unknown distance kind {kind!r}")


def l1_distance_map(x: Tensor, x_shifted: Tensor) -> Tensor:
    return distance_map(x, x_shifted, "L1")


def gate_map(d: Tensor, params: GatingParams, kind: str = "exp_decay") -> Tensor:
    """exp(-d / (|T|+eps)); the sigmoid variant is 2*sigmoid(-d / (|T|+eps))."""
    if np.any(d.data < 0):
        raise ValueError("distances must be non-negative")
    z = d / params.effective()
    if kind == "exp_decay":
        return T.exp(-z)
    if kind == "sigmoid":
        return T.sigmoid(-z) * 2.0
    raise ValueError(f"unknown gate kind {kind!r}")


def agc_aggregate(x: Tensor, cfg: AGCConfig, params: GatingParams, stats: dict | None = None) -> Tensor:
    """Running max over (neighbour - self) differences, gated on long-range edges."""
    T.check_nchw(x)
    _, _, h, w = x.shape
    shifts = scaffold_shifts(h, w, cfg.k)
    xj = T.zeros_like(x)
    for s in shifts:
        xn = T.roll(x, -s.offset, s.axis)
        diff = xn - x
        if s.gated:
            g = gate_map(distance_map(x, xn, cfg.distance_kind), params, cfg.gate_kind)
            diff = T.elementwise(diff, g, "mul")
        xj = T.maximum(xj, diff)
    if stats is not None:
        stats["steps"] = stats.get("steps", 0) + len(shifts)
    return xj


def agc_forward(x: Tensor, cfg: AGCConfig, params: GatingParams, proj: ConvBlock) -> Tensor:
    c = x.shape[1]
    if proj.conv.weight.shape[:2] != (c, 2 * c):
        raise ValueError(f"projection must map {2 * c} -> {c} channels, has weight {proj.conv.weight.shape}")
    xj = agc_aggregate(x, cfg, params)
    return proj(T.concat_channels(x, xj))


def temperature_grad_closed_form(g: float, d: float, t_eff: float) -> float:
    """d gate / d T for the exponential gate at positive T."""
    if t_eff <= 0:
        raise ValueError("effective temperature must be positive")
    return g * d / t_eff**2


def gate_heatmap(x, ref: tuple[int, int], params: GatingParams | float) -> np.ndarray:
    """Gate strength between pixel ``ref`` and every pixel of sample 0."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise ValueError(f"expected NCHW input, got {arr.shape}")
    h, w = arr.shape[2:]
    r, c = ref
    if not (0 <= r < h and 0 <= c < w):
        raise ValueError(f"reference pixel {ref} outside {h}x{w} grid")
    if isinstance(params, GatingParams):
        t_eff = abs(params.value) + params.eps
    else:
        t_eff = abs(float(params)) + GATE_EPS
    feats = arr[0]
    d = np.abs(feats - feats[:, r : r + 1, c : c + 1]).sum(axis=0)
    return np.exp(-d / t_eff)

