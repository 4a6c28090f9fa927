"""Adam training loop with early stopping, evaluation and ablation sweeps."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorcore as tc
from .data import WindowBatch, iterate_batches
from .model import ModelConfig, TiVaT, loss_mse

log = logging.getLogger(__name__)

ABLATION_AXES = {
    "attention": {
        "full_attention": dict(attention_mode="full"),
        "ja_attention": dict(attention_mode="ja"),
    },
    "offset": {
        "points": dict(offset_mode="points"),
        "guidelines_no_sampling": dict(offset_mode="guidelines_no_sampling"),
        "guidelines_with_sampling": dict(offset_mode="guidelines_with_sampling"),
    },
    "sampler": {
        "self_random+cross_random": dict(sampler_self="random", sampler_cross="random"),
        "self_random+cross_dtv": dict(sampler_self="random", sampler_cross="dtv"),
        "self_dtv+cross_random": dict(sampler_self="dtv", sampler_cross="random"),
        "self_dtv+cross_dtv": dict(sampler_self="dtv", sampler_cross="dtv"),
    },
    "sampling_mode": {
        "no_sampling": dict(sampling_mode="none"),
        "common_sampling": dict(sampling_mode="common"),
        "separate_sampling": dict(sampling_mode="separate"),
    },
    "residual": {
        "none": dict(residual_mode="none"),
        "trend": dict(residual_mode="trend"),
        "season": dict(residual_mode="season"),
        "both": dict(residual_mode="both"),
    },
}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    best_val_mse: float = float("inf")
    patience_counter: int = 0
    seed: int = 0


@dataclass
class EvalReport:
    mse: float
    mae: float
    horizon: int
    dataset: str
    config_fingerprint: str

    def to_dict(self) -> dict:
        return asdict(self)


def adam_step(params, state: TrainState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place to ``param.data``."""
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            raise TrainingError(f"parameter {i} with shape {p.shape} has no gradient")
        g = p.grad
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * factor
    return total


def train_step(model: TiVaT, batch: WindowBatch, state: TrainState, rng, clip: float = 5.0) -> float:
    params = model.parameters()
    for p in params:
        p.grad = None
    try:
        loss = loss_mse(model.forward(batch.inputs, rng), batch.targets)
        tc.backward(loss, params)
    except tc.NonFiniteError as exc:
        raise TrainingError(f"non-finite value at step {state.step + 1}: {exc}") from None
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"loss diverged at step {state.step + 1}")
    if clip:
        clip_grad_norm(params, clip)
    adam_step(params, state, model.config.learning_rate)
    return value


def evaluate(model: TiVaT, data: WindowBatch, dataset: str = "", batch_size: int | None = None
             ) -> EvalReport:
    """MSE/MAE over every element of every window, on the scale of the inputs."""
    if len(data) == 0:
        raise ValueError("evaluate: empty window set")
    bs = batch_size or model.config.batch_size
    sq = ab = 0.0
    count = 0
    for batch in iterate_batches(data, bs):
        err = model.predict(batch.inputs) - batch.targets
        sq += float((err * err).sum())
        ab += float(np.abs(err).sum())
        count += err.size
    return EvalReport(sq / count, ab / count, model.config.horizon, dataset,
                      model.config.fingerprint())


def fit(model: TiVaT, train: WindowBatch, val: WindowBatch, max_epochs: int = 10,
        patience: int = 3, clip: float = 5.0, max_steps_per_epoch: int | None = None,
        dataset: str = "") -> list:
    """Train with shuffled mini-batches; stop after ``patience`` epochs without a
    validation improvement and restore the best parameters.

    Returns the per-epoch history as a list of dicts.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("fit: train and validation sets must be non-empty")
    cfg = model.config
    state = TrainState(seed=cfg.seed)
    data_rng = np.random.default_rng(cfg.seed)
    sample_rng = np.random.default_rng(cfg.seed + 2)
    best = model.params.state_dict()
    history = []
    for epoch in range(1, max_epochs + 1):
        losses = []
        for i, batch in enumerate(iterate_batches(train, cfg.batch_size, data_rng)):
            if max_steps_per_epoch is not None and i >= max_steps_per_epoch:
                break
            losses.append(train_step(model, batch, state, sample_rng, clip))
        report = evaluate(model, val, dataset)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                        "val_mse": report.mse, "val_mae": report.mae, "steps": state.step})
        log.info("epoch %d train %.6f val mse %.6f mae %.6f", epoch, history[-1]["train_loss"],
                 report.mse, report.mae)
        if report.mse < state.best_val_mse:
            state.best_val_mse = report.mse
            state.patience_counter = 0
            best = model.params.state_dict()
        else:
            state.patience_counter += 1
            if state.patience_counter >= patience:
                break
    model.params.load_state_dict(best)
    return history


def ablation_variants(axis: str) -> dict:
    try:
        return ABLATION_AXES[axis]
    except KeyError:
        raise ValueError(f"unknown ablation axis {axis!r}; valid axes: "
                         f"{', '.join(ABLATION_AXES)}") from None


def run_ablation(base: ModelConfig, axis: str, train: WindowBatch, val: WindowBatch,
                 test: WindowBatch, dataset: str = "", **fit_kwargs) -> dict:
    """Train one model per variant of ``axis`` from identical seeds and data.

    Returns ``{variant: EvalReport}`` on the test windows, in table order.
    """
    results = {}
    for name, change in ablation_variants(axis).items():
        cfg = base.replace(**change)
        model = TiVaT(cfg)
        fit(model, train, val, dataset=dataset, **fit_kwargs)
        results[name] = evaluate(model, test, dataset)
        log.info("ablation %s/%s: mse %.6f", axis, name, results[name].mse)
    return results
