"""Full forecaster: normalise, decompose, two patch/JA-encoder branches, summed heads."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .data import instance_normalize
from .decompose import RefineParams, canonical_residual_mode, refine, st_decompose
from .ja_attention import (
    ATTENTION_MODES,
    OFFSET_MODES,
    SAMPLERS,
    SAMPLING_MODES,
    AttentionSettings,
    JABlockParams,
    ja_block_forward,
    offset_count,
)
from .patchembed import EmbedParams, embed, patch, patch_count, positional_encoding
from .tensorcore import Tensor

CHECKPOINT_FORMAT = "tivat-checkpoint/1"

# Per-dataset hyperparameters of the reference configuration table.
DATASET_PRESETS = {
    "ECL": dict(num_blocks=3, patch=16, stride=8, model_dim=512, ffn_dim=512, learning_rate=5e-4,
                per_delta_t=0.2, per_delta_v=0.2, num_rq_self=40, num_rq=40),
    "ETTh1": dict(num_blocks=2, patch=8, stride=4, model_dim=128, ffn_dim=1024, learning_rate=1e-4,
                  per_delta_t=0.2, per_delta_v=0.2, num_rq_self=40, num_rq=20),
    "ETTh2": dict(num_blocks=2, patch=8, stride=4, model_dim=128, ffn_dim=256, learning_rate=1e-4,
                  per_delta_t=0.6, per_delta_v=0.4, num_rq_self=20, num_rq=20),
    "ETTm1": dict(num_blocks=2, patch=8, stride=4, model_dim=128, ffn_dim=1024, learning_rate=1e-4,
                  per_delta_t=0.6, per_delta_v=0.2, num_rq_self=40, num_rq=40),
    "ETTm2": dict(num_blocks=2, patch=8, stride=4, model_dim=128, ffn_dim=256, learning_rate=1e-4,
                  per_delta_t=0.2, per_delta_v=0.2, num_rq_self=20, num_rq=40),
    "Exchange": dict(num_blocks=2, patch=8, stride=4, model_dim=128, ffn_dim=256, learning_rate=1e-4,
                     per_delta_t=0.2, per_delta_v=0.2, num_rq_self=40, num_rq=40),
    "Traffic": dict(num_blocks=4, patch=16, stride=8, model_dim=128, ffn_dim=512, learning_rate=1e-3,
                    per_delta_t=0.1, per_delta_v=0.2, num_rq_self=40, num_rq=40),
    "Weather": dict(num_blocks=3, patch=16, stride=8, model_dim=512, ffn_dim=1024, learning_rate=1e-4,
                    per_delta_t=0.4, per_delta_v=0.8, num_rq_self=40, num_rq=40),
}


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_blocks: int
    patch: int
    stride: int
    model_dim: int
    ffn_dim: int
    learning_rate: float
    per_delta_t: float
    per_delta_v: float
    num_rq_self: int
    num_rq: int
    lookback: int = 96
    horizon: int = 96
    n_vars: int = 1
    ma_kernel: int = 25
    batch_size: int = 32
    attention_mode: str = "ja"
    offset_mode: str = "guidelines_with_sampling"
    sampler_self: str = "dtv"
    sampler_cross: str = "dtv"
    sampling_mode: str = "separate"
    residual_mode: str = "both"
    soft_scores: bool = False
    cross_pool: bool = True
    seed: int = 0

    def __post_init__(self):
        self.residual_mode = canonical_residual_mode(self.residual_mode)
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        for name in ("num_blocks", "patch", "stride", "model_dim", "ffn_dim", "num_rq_self",
                     "num_rq", "lookback", "horizon", "n_vars", "ma_kernel", "batch_size"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 1,
                 f"{name} must be a positive integer")
        need(self.patch <= self.lookback, f"patch={self.patch} exceeds lookback={self.lookback}")
        need(self.model_dim % 2 == 0, "model_dim must be even")
        need(self.ma_kernel % 2 == 1, "ma_kernel must be odd")
        need(self.ma_kernel <= 2 * self.lookback - 1, "ma_kernel too long for the lookback")
        need(self.learning_rate >= 0, "learning_rate must be non-negative")
        for name in ("per_delta_t", "per_delta_v"):
            need(0 < getattr(self, name) <= 1, f"{name} must lie in (0, 1]")
        for name, allowed in (("attention_mode", ATTENTION_MODES), ("offset_mode", OFFSET_MODES),
                              ("sampler_self", SAMPLERS), ("sampler_cross", SAMPLERS),
                              ("sampling_mode", SAMPLING_MODES)):
            need(getattr(self, name) in allowed,
                 f"{name}={getattr(self, name)!r} not in {allowed}")

    @property
    def n_patches(self) -> int:
        return patch_count(self.lookback, self.patch, self.stride)

    def attention_settings(self) -> AttentionSettings:
        return AttentionSettings(
            n_patches=self.n_patches,
            n_vars=self.n_vars,
            n_t=offset_count(self.per_delta_t, self.n_patches),
            n_v=offset_count(self.per_delta_v, self.n_vars),
            k_self=self.num_rq_self,
            k_cross=self.num_rq,
            attention_mode=self.attention_mode,
            offset_mode=self.offset_mode,
            sampling_mode=self.sampling_mode,
            sampler_self=self.sampler_self,
            sampler_cross=self.sampler_cross,
            soft_scores=self.soft_scores,
            cross_pool=self.cross_pool,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class BranchParams:
    embed_weight: Tensor
    embed_bias: Tensor
    blocks: list
    proj_weight: Tensor  # (L_N * D) x L_F
    proj_bias: Tensor


@dataclass
class TiVaTParams:
    refine: RefineParams
    trend: BranchParams
    season: BranchParams

    def named(self) -> dict:
        out = {
            "refine.trend_weight": self.refine.trend_weight,
            "refine.trend_bias": self.refine.trend_bias,
            "refine.season_weight": self.refine.season_weight,
            "refine.season_bias": self.refine.season_bias,
        }
        for bname, br in (("trend", self.trend), ("season", self.season)):
            out[f"{bname}.embed_weight"] = br.embed_weight
            out[f"{bname}.embed_bias"] = br.embed_bias
            for i, blk in enumerate(br.blocks):
                for k, v in blk.named().items():
                    out[f"{bname}.blocks.{i}.{k}"] = v
            out[f"{bname}.proj_weight"] = br.proj_weight
            out[f"{bname}.proj_bias"] = br.proj_bias
        return out

    def parameters(self) -> list:
        return list(self.named().values())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named().items()}

    def load_state_dict(self, state: dict) -> None:
        named = self.named()
        missing = sorted(set(named) - set(state))
        extra = sorted(set(state) - set(named))
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, t in named.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(f"checkpoint tensor {k} has shape {arr.shape}, model expects {t.shape}")
            t.data = arr.copy()


def init_params(config: ModelConfig, seed: int | None = None) -> TiVaTParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    lh, d, ln = config.lookback, config.model_dim, config.n_patches
    s = config.attention_settings()

    def w(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    ref = RefineParams(w(lh, lh), zeros(lh), w(lh, lh), zeros(lh), config.residual_mode)

    def branch():
        blocks = [JABlockParams.init(d, config.ffn_dim, s.n_t, s.n_v, rng)
                  for _ in range(config.num_blocks)]
        return BranchParams(w(config.patch, d), zeros(d), blocks,
                            w(ln * d, config.horizon), zeros(config.horizon))

    return TiVaTParams(ref, branch(), branch())


def project(tokens: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Flatten each variate's ``L_N x D`` tokens and map them to ``L_F`` steps.

    ``(..., L_N, V, D) -> (..., L_F, V)``; the map is shared across variates.
    """
    nd = tokens.ndim
    ln, v, d = tokens.shape[-3:]
    if weight.shape[0] != ln * d:
        raise tc.ShapeError(f"project: weight {weight.shape} expects {weight.shape[0]} inputs, "
                            f"tokens give {ln * d}")
    lead = tokens.shape[:-3]
    perm = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    flat = tc.reshape(tc.transpose(tokens, perm), lead + (v, ln * d))
    out = tc.linear(flat, weight, bias)  # (..., V, L_F)
    nd2 = out.ndim
    return tc.transpose(out, tuple(range(nd2 - 2)) + (nd2 - 1, nd2 - 2))


def encode_branch(component: Tensor, br: BranchParams, config: ModelConfig,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Patch, embed (+PE) and run the encoder blocks: ``(B, L_H, V) -> (B, L_N, V, D)``."""
    settings = config.attention_settings()
    patches = patch(component, config.patch, config.stride)
    pe = positional_encoding(config.n_patches, config.model_dim)
    z = embed(patches, EmbedParams(br.embed_weight, br.embed_bias, pe))
    for blk in br.blocks:
        z = ja_block_forward(z, blk, settings, rng)
    return z


def forward(x, params: TiVaTParams, config: ModelConfig, rng: np.random.Generator | None = None,
            return_branches: bool = False):
    """Forecast ``(B, L_F, V)`` from lookback windows ``(B, L_H, V)`` (original scale)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (config.lookback, config.n_vars):
        raise ConfigError(f"input shape {x.shape} does not match (B, {config.lookback}, "
                          f"{config.n_vars})")
    if rng is None and "random" in (config.sampler_self, config.sampler_cross):
        rng = np.random.default_rng(config.seed)
    xn, (mu, sd) = instance_normalize(x)
    pair = refine(st_decompose(Tensor(xn), config.ma_kernel), params.refine)
    y_trend = project(encode_branch(pair.trend, params.trend, config, rng),
                      params.trend.proj_weight, params.trend.proj_bias)
    y_season = project(encode_branch(pair.seasonality, params.season, config, rng),
                       params.season.proj_weight, params.season.proj_bias)
    pred = tc.add(tc.mul(tc.add(y_trend, y_season), Tensor(sd)), Tensor(mu))
    if return_branches:
        return pred, y_trend, y_season, (mu, sd)
    return pred


def block_inputs(x, params: TiVaTParams, config: ModelConfig, block: int = 0,
                 rng: np.random.Generator | None = None) -> dict:
    """Layer-normed tokens entering the attention of encoder ``block``, per branch.

    Returns ``{"trend": (B, N, D) array, "season": ...}`` with tokens flattened
    as ``n = p * V + v``.
    """
    if not 0 <= block < config.num_blocks:
        raise ConfigError(f"block {block} outside 0..{config.num_blocks - 1}")
    x = np.asarray(x, dtype=np.float64)
    settings = config.attention_settings()
    with tc.no_grad():
        xn, _ = instance_normalize(x)
        pair = refine(st_decompose(Tensor(xn), config.ma_kernel), params.refine)
        out = {}
        for name, comp, br in (("trend", pair.trend, params.trend),
                               ("season", pair.seasonality, params.season)):
            pe = positional_encoding(config.n_patches, config.model_dim)
            z = embed(patch(comp, config.patch, config.stride),
                      EmbedParams(br.embed_weight, br.embed_bias, pe))
            for blk in br.blocks[:block]:
                z = ja_block_forward(z, blk, settings, rng)
            b, dim = z.shape[0], z.shape[-1]
            blk = br.blocks[block]
            out[name] = tc.layer_norm(tc.reshape(z, (b, -1, dim)), blk.ln1_gamma, blk.ln1_beta).data
    return out


def full_attention_variant(z: Tensor, block: JABlockParams, config: ModelConfig) -> Tensor:
    """The same encoder block with dense self-attention over all ``L_N * V`` tokens."""
    return ja_block_forward(z, block, config.replace(attention_mode="full").attention_settings())


def loss_mse(pred: Tensor, target) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise tc.ShapeError(f"loss_mse: prediction {pred.shape} vs target {target.shape}")
    diff = tc.sub(pred, target)
    return tc.mean(tc.mul(diff, diff))


class TiVaT:
    """Config plus parameters, with a deterministic ``predict``."""

    def __init__(self, config: ModelConfig, params: TiVaTParams | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def forward(self, x, rng: np.random.Generator | None = None):
        return forward(x, self.params, self.config, rng)

    def predict(self, x) -> np.ndarray:
        # fresh generator per call keeps random-sampler evaluation reproducible
        rng = np.random.default_rng(self.config.seed + 1)
        with tc.no_grad():
            return forward(x, self.params, self.config, rng).data

    def parameters(self) -> list:
        return self.params.parameters()

    def save(self, path) -> None:
        save_checkpoint(path, self.config, self.params)

    @classmethod
    def load(cls, path) -> "TiVaT":
        config, params = load_checkpoint(path)
        return cls(config, params)


def save_checkpoint(path, config: ModelConfig, params: TiVaTParams) -> None:
    """JSON document with the config and every tensor as ``{shape, data}``."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": config.to_dict(),
        "params": {k: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                   for k, t in params.named().items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a checkpoint file")
    config = ModelConfig.from_dict(doc["config"])
    params = init_params(config)
    state = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
             for k, v in doc["params"].items()}
    params.load_state_dict(state)
    return config, params
