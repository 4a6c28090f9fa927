"""Moving-average trend/seasonality split with residual linear refinement."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

RESIDUAL_MODES = ("none", "trend", "season", "both")
_MODE_ALIASES = {"trend_only": "trend", "season_only": "season"}


def canonical_residual_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in RESIDUAL_MODES:
        raise ValueError(f"unknown residual mode {mode!r}; expected one of {RESIDUAL_MODES}")
    return mode


@dataclass
class DecompPair:
    trend: Tensor
    seasonality: Tensor


@dataclass
class RefineParams:
    trend_weight: Tensor
    trend_bias: Tensor
    season_weight: Tensor
    season_bias: Tensor
    residual_mode: str = "both"

    def __post_init__(self):
        self.residual_mode = canonical_residual_mode(self.residual_mode)


@lru_cache(maxsize=64)
def averaging_matrix(length: int, kernel: int) -> np.ndarray:
    """Row ``i`` averages positions ``i-k//2 .. i+k//2`` with edge replication."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"moving-average kernel must be odd and positive, got {kernel}")
    if kernel > 2 * length - 1:
        raise ValueError(f"kernel {kernel} too long for a series of length {length}")
    half = kernel // 2
    mat = np.zeros((length, length))
    for i in range(length):
        for j in range(i - half, i + half + 1):
            mat[i, min(max(j, 0), length - 1)] += 1.0 / kernel
    mat.setflags(write=False)
    return mat


def moving_average(x, kernel: int) -> Tensor:
    """Centered moving average along the time axis (-2) of ``(..., L_H, V)``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return tc.matmul(Tensor(averaging_matrix(x.shape[-2], kernel)), x)


def st_decompose(x, kernel: int) -> DecompPair:
    x = x if isinstance(x, Tensor) else Tensor(x)
    trend = moving_average(x, kernel)
    return DecompPair(trend, tc.sub(x, trend))


def _time_linear(comp: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    # (..., L_H, V) -> per-variate map over time, weights shared across variates
    axes = tuple(range(comp.ndim - 2)) + (comp.ndim - 1, comp.ndim - 2)
    out = tc.linear(tc.transpose(comp, axes), weight, bias)
    return tc.transpose(out, axes)


def refine(pair: DecompPair, params: RefineParams) -> DecompPair:
    length = pair.trend.shape[-2]
    for w in (params.trend_weight, params.season_weight):
        if w.shape != (length, length):
            raise tc.ShapeError(f"refine: weight {w.shape} does not match lookback {length}")
    mode = canonical_residual_mode(params.residual_mode)
    trend = _time_linear(pair.trend, params.trend_weight, params.trend_bias)
    season = _time_linear(pair.seasonality, params.season_weight, params.season_bias)
    if mode in ("trend", "both"):
        trend = tc.add(pair.trend, trend)
    if mode in ("season", "both"):
        season = tc.add(pair.seasonality, season)
    return DecompPair(trend, season)
