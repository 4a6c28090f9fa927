"""Temporal patching, patch embedding and sinusoidal positional encoding."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


def patch_count(lookback: int, patch_len: int, stride: int) -> int:
    return (lookback - patch_len) // stride + 1


def patch_starts(lookback: int, patch_len: int, stride: int) -> np.ndarray:
    if patch_len < 1 or stride < 1:
        raise ValueError("patch length and stride must be positive")
    if patch_len > lookback:
        raise ValueError(f"patch length {patch_len} exceeds lookback {lookback}")
    return np.arange(patch_count(lookback, patch_len, stride)) * stride


def patch(x, patch_len: int, stride: int) -> Tensor:
    """``(..., L_H, V) -> (..., L_N, V, L_P)``; a trailing remainder is dropped."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    lookback = x.shape[-2]
    starts = patch_starts(lookback, patch_len, stride)
    idx = starts[:, None] + np.arange(patch_len)[None, :]  # L_N x L_P
    p = tc.gather(x, idx, axis=x.ndim - 2)  # (..., L_N, L_P, V)
    nd = p.ndim
    return tc.transpose(p, tuple(range(nd - 3)) + (nd - 3, nd - 1, nd - 2))


@lru_cache(maxsize=32)
def _pe_table(n_patches: int, dim: int) -> np.ndarray:
    pos = np.arange(n_patches, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.empty((n_patches, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    pe.setflags(write=False)
    return pe


def positional_encoding(n_patches: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal table ``L_N x D`` over the patch axis."""
    if dim < 2 or dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    return _pe_table(n_patches, dim).copy()


@dataclass
class EmbedParams:
    weight: Tensor  # L_P x D
    bias: Tensor  # D
    pos_encoding: np.ndarray  # L_N x D, not trained


def embed(patches: Tensor, params: EmbedParams) -> Tensor:
    """Linear patch embedding plus positional encoding broadcast over variates."""
    if patches.shape[-1] != params.weight.shape[0]:
        raise tc.ShapeError(
            f"embed: patch length {patches.shape[-1]} does not match weight {params.weight.shape}")
    n_patches = patches.shape[-3]
    pe = np.asarray(params.pos_encoding)
    if pe.shape != (n_patches, params.weight.shape[1]):
        raise tc.ShapeError(f"embed: positional table {pe.shape} does not match tokens")
    tokens = tc.linear(patches, params.weight, params.bias)
    return tc.add(tokens, Tensor(pe[:, None, :]))
