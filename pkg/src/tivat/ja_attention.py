"""Joint-Axis attention: offset guidelines, candidate pools, DTV sampling.

Tokens live on an ``L_N x V`` grid (patch x variate) and are flattened to
``n = p * V + v``. For every query token the block

1. maps the query to ``n_t`` temporal and ``n_v`` variate offsets, squashes them
   with a sigmoid onto the axis range and rounds to grid coordinates;
2. builds the cross-axis pool (the full variate rows at the chosen patches and
   the full patch columns at the chosen variates) and the self-axis pool (the
   query's own row and column);
3. keeps the ``K`` candidates of each pool closest to the query in a learned
   2D projection (DTV sampling), or a random subset;
4. runs single-head scaled dot-product cross-attention from the query to the
   kept candidates.

Candidate selection is a hard, integer-valued choice. The offset and 2D
projections therefore get no gradient unless ``soft_scores`` is enabled, in
which case gathered values are weighted by ``softmax(-distance)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit

from . import tensorcore as tc
from .tensorcore import Tensor

OFFSET_MODES = ("points", "guidelines_no_sampling", "guidelines_with_sampling")
SAMPLING_MODES = ("separate", "common", "none")
SAMPLERS = ("dtv", "random")
ATTENTION_MODES = ("ja", "full")


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def offset_count(fraction: float, axis_len: int) -> int:
    """Number of offset slots: ``max(1, round(fraction * axis_len))``, capped at the axis."""
    return int(min(axis_len, max(1, int(_round_half_up(fraction * axis_len)))))


# ------------------------------------------------------------- parameters


@dataclass
class OffsetParams:
    t_weight: Tensor  # D x n_t
    t_bias: Tensor
    v_weight: Tensor  # D x n_v
    v_bias: Tensor


@dataclass
class JABlockParams:
    offset_t_weight: Tensor
    offset_t_bias: Tensor
    offset_v_weight: Tensor
    offset_v_bias: Tensor
    proj2d_weight: Tensor  # D x 2
    proj2d_bias: Tensor
    q_weight: Tensor
    q_bias: Tensor
    k_weight: Tensor
    k_bias: Tensor
    v_weight: Tensor
    v_bias: Tensor
    ffn1_weight: Tensor
    ffn1_bias: Tensor
    ffn2_weight: Tensor
    ffn2_bias: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor

    @classmethod
    def init(cls, dim: int, ffn_dim: int, n_t: int, n_v: int, rng: np.random.Generator
             ) -> "JABlockParams":
        def w(fan_in, fan_out):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)

        def zeros(n):
            return Tensor(np.zeros(n), requires_grad=True)

        def ones(n):
            return Tensor(np.ones(n), requires_grad=True)

        return cls(
            w(dim, n_t), zeros(n_t), w(dim, n_v), zeros(n_v),
            w(dim, 2), zeros(2),
            w(dim, dim), zeros(dim), w(dim, dim), zeros(dim), w(dim, dim), zeros(dim),
            w(dim, ffn_dim), zeros(ffn_dim), w(ffn_dim, dim), zeros(dim),
            ones(dim), zeros(dim), ones(dim), zeros(dim),
        )

    def named(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def offsets(self) -> OffsetParams:
        return OffsetParams(self.offset_t_weight, self.offset_t_bias,
                            self.offset_v_weight, self.offset_v_bias)


@dataclass(frozen=True)
class AttentionSettings:
    n_patches: int
    n_vars: int
    n_t: int
    n_v: int
    k_self: int
    k_cross: int
    attention_mode: str = "ja"
    offset_mode: str = "guidelines_with_sampling"
    sampling_mode: str = "separate"
    sampler_self: str = "dtv"
    sampler_cross: str = "dtv"
    soft_scores: bool = False
    cross_pool: bool = True

    def __post_init__(self):
        checks = (("attention_mode", ATTENTION_MODES), ("offset_mode", OFFSET_MODES),
                  ("sampling_mode", SAMPLING_MODES), ("sampler_self", SAMPLERS),
                  ("sampler_cross", SAMPLERS))
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name}={getattr(self, name)!r}; expected one of {allowed}")
        if not 1 <= self.n_t <= self.n_patches or not 1 <= self.n_v <= self.n_vars:
            raise ValueError("offset counts must lie within the grid axes")
        if self.k_self < 1 or self.k_cross < 1:
            raise ValueError("K values must be positive")

    @property
    def n_tokens(self) -> int:
        return self.n_patches * self.n_vars


# ------------------------------------------------------- single-query API


def extract_offsets(q, params: OffsetParams):
    """Raw (unconstrained) temporal and variate offsets for one query vector."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    raw_t = q @ params.t_weight.data + params.t_bias.data
    raw_v = q @ params.v_weight.data + params.v_bias.data
    return raw_t, raw_v


def normalize_discretize(raw, axis_len: int):
    """Map raw offsets onto ``[0, axis_len - 1]`` with a sigmoid, then round to the nearest index."""
    if axis_len < 1:
        raise ValueError("axis length must be at least 1")
    idx = _round_half_up(expit(np.asarray(raw, dtype=np.float64)) * (axis_len - 1))
    idx = np.clip(idx, 0, axis_len - 1)
    return int(idx) if idx.ndim == 0 else idx


def _dedupe(items):
    seen, out = set(), []
    for it in items:
        if it not in seen:
            seen.add(it)
            out.append(it)
    return out


def build_cross_axis_pool(ref, t_idx, v_idx, n_patches: int, n_vars: int) -> list:
    """Full variate rows at each temporal offset, then full patch columns at each variate offset."""
    del ref  # offsets are absolute grid coordinates
    cells = [(int(t), u) for t in t_idx for u in range(n_vars)]
    cells += [(p, int(v)) for v in v_idx for p in range(n_patches)]
    return _dedupe(cells)


def build_offset_points(ref, t_idx, v_idx) -> list:
    """Only the offset points: (t, v_ref) per temporal offset, (p_ref, v) per variate offset."""
    p0, v0 = ref
    return _dedupe([(int(t), v0) for t in t_idx] + [(p0, int(v)) for v in v_idx])


def build_self_axis_pool(ref, n_patches: int, n_vars: int) -> list:
    """The query's own column (all patches) followed by its row (all variates)."""
    p0, v0 = ref
    if not (0 <= p0 < n_patches and 0 <= v0 < n_vars):
        raise ValueError(f"reference {ref} outside the {n_patches}x{n_vars} grid")
    return [(p, v0) for p in range(n_patches)] + [(p0, v) for v in range(n_vars) if v != v0]


def project_2d(x, weight, bias) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    w = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    b = bias.data if isinstance(bias, Tensor) else np.asarray(bias)
    return x @ w + b


def dtv_sample(q, pool_features, proj_weight, proj_bias, k: int):
    """Indices and rows of the ``k`` pool members nearest to ``q`` in the 2D projection.

    Ties go to the lower pool index. ``k`` is clamped to the pool size.
    """
    feats = np.asarray(pool_features.data if isinstance(pool_features, Tensor) else pool_features,
                       dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("dtv_sample: empty candidate pool")
    q2 = project_2d(q, proj_weight, proj_bias)
    p2 = project_2d(feats, proj_weight, proj_bias)
    dist = np.sqrt(((p2 - q2) ** 2).sum(axis=-1))
    k = min(int(k), feats.shape[0])
    order = np.argsort(dist, kind="stable")[:k]
    return order, feats[order]


def cross_attend(q: Tensor, keys_values: Tensor, params: JABlockParams) -> Tensor:
    """``softmax(Q K^T / sqrt(D)) V`` for one query row against ``N`` key/value rows."""
    if keys_values.shape[0] == 0:
        raise ValueError("cross_attend: no keys")
    dim = q.shape[-1]
    qm = tc.linear(tc.reshape(q, (1, dim)), params.q_weight, params.q_bias)
    k = tc.linear(keys_values, params.k_weight, params.k_bias)
    v = tc.linear(keys_values, params.v_weight, params.v_bias)
    scores = tc.scale(tc.matmul(qm, tc.transpose(k)), 1.0 / math.sqrt(dim))
    return tc.reshape(tc.matmul(tc.softmax(scores, axis=-1), v), (dim,))


# --------------------------------------------------- batched selection


def first_occurrence(ids: np.ndarray) -> np.ndarray:
    """Boolean mask marking the first appearance of each id along the last axis."""
    order = np.argsort(ids, axis=-1, kind="stable")
    srt = np.take_along_axis(ids, order, axis=-1)
    first_sorted = np.ones(ids.shape, dtype=bool)
    first_sorted[..., 1:] = srt[..., 1:] != srt[..., :-1]
    mask = np.empty_like(first_sorted)
    np.put_along_axis(mask, order, first_sorted, axis=-1)
    return mask


def self_pool_ids(n_patches: int, n_vars: int) -> np.ndarray:
    """``N x (L_N + V - 1)`` flat token ids of every query's self-axis pool."""
    rows = []
    for n in range(n_patches * n_vars):
        p0, v0 = divmod(n, n_vars)
        rows.append([p * n_vars + c for p, c in build_self_axis_pool((p0, v0), n_patches, n_vars)])
    return np.array(rows, dtype=np.int64)


@dataclass
class Selection:
    """Per-query candidate ids (flat token indices) and the chosen keys."""

    cross_ids: np.ndarray  # B x N x Mc
    cross_valid: np.ndarray
    self_ids: np.ndarray  # B x N x Ms
    key_ids: np.ndarray  # B x N x Kt
    key_valid: np.ndarray
    emb2d: np.ndarray  # B x N x 2


def _rank(ids, valid, k, sampler, dist, rng):
    k = min(k, ids.shape[-1])
    if sampler == "dtv":
        key = np.where(valid, dist, np.inf)
    else:
        if rng is None:
            raise ValueError("random sampling needs a generator")
        key = np.where(valid, rng.random(ids.shape), np.inf)
    order = np.argsort(key, axis=-1, kind="stable")[..., :k]
    return np.take_along_axis(ids, order, -1), np.take_along_axis(valid, order, -1)


def select_keys(x: np.ndarray, params: JABlockParams, s: AttentionSettings,
                rng: np.random.Generator | None = None) -> Selection:
    """Build pools and pick key tokens for every query of ``x`` (``B x N x D``)."""
    b, n, _ = x.shape
    lp, nv = s.n_patches, s.n_vars
    tok = np.arange(n)
    p_ref, v_ref = tok // nv, tok % nv

    emb = x @ params.proj2d_weight.data + params.proj2d_bias.data  # B x N x 2
    b_idx = np.arange(b)[:, None, None]

    def distances(ids):
        diff = emb[b_idx, ids] - emb[:, :, None, :]
        return np.sqrt((diff * diff).sum(axis=-1))

    t_idx = normalize_discretize(x @ params.offset_t_weight.data + params.offset_t_bias.data, lp)
    v_idx = normalize_discretize(x @ params.offset_v_weight.data + params.offset_v_bias.data, nv)

    if s.offset_mode == "points":
        cross = np.concatenate([t_idx * nv + v_ref[None, :, None],
                                p_ref[None, :, None] * nv + v_idx], axis=-1)
    else:
        rows = (t_idx[..., :, None] * nv + np.arange(nv)).reshape(b, n, -1)
        cols = (np.arange(lp) * nv + v_idx[..., :, None]).reshape(b, n, -1)
        cross = np.concatenate([rows, cols], axis=-1)
    cross_valid = first_occurrence(cross)
    self_ids = np.broadcast_to(self_pool_ids(lp, nv), (b, n, lp + nv - 1))
    self_valid = np.ones(self_ids.shape, dtype=bool)

    mode = s.sampling_mode
    if s.offset_mode != "guidelines_with_sampling":
        mode = "none"

    pools = [(cross, cross_valid)] if s.cross_pool else []
    if mode == "none":
        pools.append((self_ids, self_valid))
        key_ids = np.concatenate([p[0] for p in pools], axis=-1)
        key_valid = np.concatenate([p[1] for p in pools], axis=-1)
    elif mode == "separate":
        chosen = []
        if s.cross_pool:
            chosen.append(_rank(cross, cross_valid, s.k_cross, s.sampler_cross,
                                distances(cross) if s.sampler_cross == "dtv" else None, rng))
        chosen.append(_rank(self_ids, self_valid, s.k_self, s.sampler_self,
                            distances(self_ids) if s.sampler_self == "dtv" else None, rng))
        key_ids = np.concatenate([c[0] for c in chosen], axis=-1)
        key_valid = np.concatenate([c[1] for c in chosen], axis=-1)
    else:  # common: one top-(K_self + K_cross) over the union of both pools
        union = np.concatenate([cross, self_ids], axis=-1) if s.cross_pool else np.array(self_ids)
        union_valid = first_occurrence(union)
        sampler = s.sampler_cross
        key_ids, key_valid = _rank(union, union_valid, s.k_self + s.k_cross, sampler,
                                   distances(union) if sampler == "dtv" else None, rng)
    return Selection(cross, cross_valid, np.asarray(self_ids), key_ids, key_valid, emb)


# --------------------------------------------------------------- attention


def ja_attention(x: Tensor, params: JABlockParams, s: AttentionSettings,
                 rng: np.random.Generator | None = None, return_selection: bool = False):
    """Joint-axis cross-attention for every token of ``x`` (``B x N x D``)."""
    b, n, dim = x.shape
    sel = select_keys(x.data, params, s, rng)
    q = tc.linear(x, params.q_weight, params.q_bias)
    k = tc.linear(x, params.k_weight, params.k_bias)
    v = tc.linear(x, params.v_weight, params.v_bias)
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dim))
    picked = tc.take_along(scores, sel.key_ids, axis=-1)
    weights = tc.softmax(picked, axis=-1, mask=sel.key_valid)
    if s.soft_scores:
        emb = tc.linear(x, params.proj2d_weight, params.proj2d_bias)
        cand = tc.batch_gather(emb, sel.key_ids)  # B x N x Kt x 2
        dist = tc.pairwise_distance(tc.reshape(emb, (b, n, 1, 2)), cand)  # B x N x 1 x Kt
        closeness = tc.softmax(tc.scale(tc.reshape(dist, sel.key_ids.shape), -1.0),
                               axis=-1, mask=sel.key_valid)
        weights = tc.mul(weights, closeness)
    dense = tc.scatter_add(weights, sel.key_ids, n, axis=-1)  # B x N x N
    out = tc.matmul(dense, v)
    return (out, sel) if return_selection else out


def full_attention(x: Tensor, params: JABlockParams) -> Tensor:
    """Plain single-head self-attention over all ``N`` tokens."""
    dim = x.shape[-1]
    q = tc.linear(x, params.q_weight, params.q_bias)
    k = tc.linear(x, params.k_weight, params.k_bias)
    v = tc.linear(x, params.v_weight, params.v_bias)
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dim))
    return tc.matmul(tc.softmax(scores, axis=-1), v)


def ja_block_forward(z: Tensor, params: JABlockParams, s: AttentionSettings,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm encoder block over ``(B, L_N, V, D)`` with JA (or full) attention."""
    shape = z.shape
    b, dim = shape[0], shape[-1]
    flat = tc.reshape(z, (b, -1, dim))
    h = tc.layer_norm(flat, params.ln1_gamma, params.ln1_beta)
    if s.attention_mode == "full":
        att = full_attention(h, params)
    else:
        att = ja_attention(h, params, s, rng)
    z1 = tc.add(flat, att)
    h2 = tc.layer_norm(z1, params.ln2_gamma, params.ln2_beta)
    ffn = tc.linear(tc.gelu(tc.linear(h2, params.ffn1_weight, params.ffn1_bias)),
                    params.ffn2_weight, params.ffn2_bias)
    return tc.reshape(tc.add(z1, ffn), shape)
