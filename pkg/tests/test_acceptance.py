"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 7 needs a real ETTh1 CSV; point ``TIVAT_ETTH1_CSV`` at it to enable.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from tivat import tensorcore as tc
from tivat.cli import main as cli_main
from tivat.data import (
    SplitSpec,
    chronological_split,
    load_csv,
    make_windows,
    standardize,
    synth_leadlag,
    window_count,
)
from tivat.decompose import st_decompose
from tivat.ja_attention import AttentionSettings, JABlockParams, cross_attend, dtv_sample, ja_block_forward
from tivat.model import DATASET_PRESETS, ModelConfig, TiVaT, forward, init_params, loss_mse
from tivat.patchembed import patch_count
from tivat.tensorcore import Tensor
from tivat.trainer import ABLATION_AXES, evaluate, fit


@pytest.fixture
def report(capsys):
    """Print ``[PASS|FAIL] criterion N: detail`` straight to the terminal."""

    def emit(number, ok, detail, start):
        status = "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"\n[{status}] criterion {number}: {detail} ({time.perf_counter() - start:.1f} s)")
        return ok

    return emit


def test_criterion_1_decomposition_identity(report):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(1000):
        lh, v = int(rng.integers(1, 129)), int(rng.integers(1, 17))
        k = 2 * int(rng.integers(0, lh)) + 1  # any odd kernel up to 2*L_H - 1
        x = rng.standard_normal((lh, v)) * rng.uniform(0.1, 100)
        pair = st_decompose(x, k)
        worst = max(worst, float(np.abs(pair.trend.data + pair.seasonality.data - x).max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 10
    assert report(1, ok, f"max |trend+season-x| = {worst:.2e} over 1000 windows", start)


def test_criterion_2_dtv_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    mismatches = 0
    for trial in range(1000):
        m = int(rng.integers(1, 65))
        k = int(rng.integers(1, m + 1))
        d = int(rng.integers(2, 9))
        if trial % 3 == 0:
            feats = rng.integers(-2, 3, size=(m, d)).astype(float)  # heavy ties
            q = rng.integers(-2, 3, size=d).astype(float)
            w = rng.integers(-1, 2, size=(d, 2)).astype(float)
            b = np.zeros(2)
        else:
            feats, q = rng.standard_normal((m, d)), rng.standard_normal(d)
            w, b = rng.standard_normal((d, 2)), rng.standard_normal(2)
        idx, rows = dtv_sample(q, feats, w, b, k)
        q2, p2 = q @ w + b, feats @ w + b
        dist = [math.sqrt(sum((p2[i, j] - q2[j]) ** 2 for j in range(2))) for i in range(m)]
        oracle = sorted(range(m), key=lambda i: (dist[i], i))[:k]
        if list(idx) != oracle or not np.array_equal(rows, feats[oracle]):
            mismatches += 1
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    assert report(2, ok, f"{mismatches} mismatches in 1000 instances", start)


def _fd_ok(f, leaves, tol=1e-4):
    for t in leaves:
        t.grad = None
    tc.backward(f(), leaves)
    errs = []
    for t in leaves:
        num = tc.numerical_grad(f, t, 1e-5)
        if max(np.abs(t.grad).max(), np.abs(num).max()) < 1e-10:
            continue
        errs.append(tc.relative_error(t.grad, num))
    return max(errs) if errs else 0.0


def test_criterion_3_gradient_suite(report):
    start = time.perf_counter()
    rng = np.random.default_rng(303)

    def leaf(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    ops = {
        "add": (tc.add, [(3, 4), (4,)]), "sub": (tc.sub, [(2, 3), (2, 1)]),
        "mul": (tc.mul, [(3, 4), (3, 4)]), "scale": (lambda a: tc.scale(a, 1.7), [(3,)]),
        "matmul": (tc.matmul, [(2, 3, 4), (4, 5)]), "sum": (lambda a: tc.sum(a, axis=1), [(3, 4)]),
        "mean": (lambda a: tc.mean(a, axis=0), [(3, 4)]),
        "concat": (lambda a, b: tc.concat([a, b], 0), [(2, 3), (1, 3)]),
        "reshape": (lambda a: tc.reshape(a, (6, 2)), [(3, 4)]),
        "transpose": (lambda a: tc.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
        "linear": (tc.linear, [(3, 4), (4, 2), (2,)]), "layer_norm": (tc.layer_norm, [(3, 5), (5,), (5,)]),
        "gelu": (tc.gelu, [(4, 3)]), "softmax": (lambda a: tc.softmax(a, -1), [(3, 4)]),
        "gather": (lambda a: tc.gather(a, [0, 2, 2]), [(3, 4)]),
        "take_along": (lambda a: tc.take_along(a, np.array([[1, 1, 0]]), -1), [(1, 3)]),
        "scatter_add": (lambda a: tc.scatter_add(a, np.array([[2, 0, 2]]), 4, -1), [(1, 3)]),
        "batch_gather": (lambda a: tc.batch_gather(a, np.array([[[0, 2], [1, 1]]])), [(1, 3, 4)]),
        "pairwise_distance": (tc.pairwise_distance, [(3, 2), (4, 2)]),
    }
    worst = {}
    for name, (fn, shapes) in ops.items():
        leaves = [leaf(*s) for s in shapes]
        w = Tensor(rng.standard_normal(fn(*leaves).shape))
        worst[name] = _fd_ok(lambda: tc.sum(tc.mul(fn(*leaves), w)), leaves)

    s = AttentionSettings(n_patches=3, n_vars=2, n_t=1, n_v=1, k_self=3, k_cross=2)
    blk = JABlockParams.init(4, 8, 1, 1, rng)
    z = leaf(1, 3, 2, 4)
    wz = Tensor(rng.standard_normal((1, 3, 2, 4)))
    block_leaves = [z] + list(blk.named().values())
    block_f = lambda: tc.sum(tc.mul(ja_block_forward(z, blk, s), wz))  # noqa: E731
    worst["ja_block"] = _fd_ok(block_f, block_leaves)
    hard_zero = all(not np.any(t.grad) for t in (blk.offset_t_weight, blk.offset_t_bias,
                                                  blk.offset_v_weight, blk.offset_v_bias,
                                                  blk.proj2d_weight, blk.proj2d_bias))

    cfg = ModelConfig(num_blocks=1, patch=4, stride=2, model_dim=4, ffn_dim=6, learning_rate=1e-3,
                      per_delta_t=0.4, per_delta_v=0.5, num_rq_self=3, num_rq=2, lookback=8,
                      horizon=3, n_vars=2, ma_kernel=3)
    params = init_params(cfg, seed=7)
    x = rng.standard_normal((2, 8, 2))
    y = rng.standard_normal((2, 3, 2))
    worst["end_to_end"] = _fd_ok(lambda: loss_mse(forward(x, params, cfg), y), params.parameters())
    for br in (params.trend, params.season):
        for b in br.blocks:
            hard_zero &= all(not np.any(t.grad) for t in (b.offset_t_weight, b.offset_v_weight,
                                                          b.proj2d_weight, b.proj2d_bias))
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and hard_zero and elapsed < 120
    assert report(3, ok, f"worst rel. err {worst[top]:.1e} ({top}) over {len(worst)} checks; "
                         f"hard-selection grads zero: {hard_zero}", start)


def test_criterion_4_count_formulas(report):
    start = time.perf_counter()
    bad = checked = 0
    for lh in range(1, 257):
        lps = np.arange(1, lh + 1)
        for s in range(1, lh + 1):
            starts = np.arange(0, lh, s)  # enumerate every candidate start
            brute = np.searchsorted(starts, lh - lps, side="right")
            for lp in range(s, lh + 1):  # S <= L_P
                checked += 1
                bad += patch_count(lh, lp, s) != brute[lp - 1]
    for length in range(1, 65):
        for lh in range(1, 65):
            for lf in range(1, 65):
                brute = sum(1 for st in range(length) if st + lh + lf <= length)
                checked += 1
                bad += max(window_count(length, lh, lf), 0) != brute
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < 30
    assert report(4, ok, f"{bad} mismatches over {checked} grid points", start)


def test_criterion_5_attention_properties(report):
    start = time.perf_counter()
    rng = np.random.default_rng(505)
    worst_row = 0.0
    outside = 0
    for _ in range(1000):
        d, n = int(rng.integers(1, 9)), int(rng.integers(1, 33))
        scale = rng.choice([1.0, 10.0, 100.0])
        logits = rng.standard_normal((4, n)) * scale
        worst_row = max(worst_row, float(np.abs(tc.softmax(Tensor(logits), -1).data.sum(-1) - 1).max()))
        blk = JABlockParams.init(d, 2, 1, 1, rng)
        kv = rng.standard_normal((n, d)) * scale
        out = cross_attend(Tensor(rng.standard_normal(d) * scale), Tensor(kv), blk).data
        vals = kv @ blk.v_weight.data + blk.v_bias.data
        tol = 1e-12 * max(1.0, np.abs(vals).max())
        outside += int(np.any(out < vals.min(0) - tol) or np.any(out > vals.max(0) + tol))
    elapsed = time.perf_counter() - start
    ok = worst_row <= 1e-12 and outside == 0 and elapsed < 10
    assert report(5, ok, f"max |row sum - 1| = {worst_row:.1e}; {outside}/1000 outside hull", start)


LEADLAG_MODEL = dict(num_blocks=1, patch=16, stride=8, model_dim=32, ffn_dim=64, learning_rate=3e-3,
                     per_delta_t=0.2, per_delta_v=0.5, num_rq_self=8, num_rq=8, lookback=96,
                     horizon=8, n_vars=4, ma_kernel=25, batch_size=32,
                     offset_mode="guidelines_with_sampling", sampler_self="dtv", sampler_cross="dtv",
                     sampling_mode="separate")


@pytest.mark.slow
def test_criterion_6_lead_lag(report):
    start = time.perf_counter()
    frame = synth_leadlag(4, 4000, 8, 0.8, 0.1, seed=0)
    parts = standardize(*chronological_split(frame, SplitSpec(2800, 400, 800)))
    train, val, _ = (make_windows(p, 96, 8) for p in parts)
    val_mse = {True: [], False: []}
    for seed in (0, 1, 2):
        for cross in (True, False):
            model = TiVaT(ModelConfig(**LEADLAG_MODEL, cross_pool=cross, seed=seed))
            fit(model, train, val, max_epochs=10, patience=3)
            val_mse[cross].append(evaluate(model, val).mse)
    ja, self_only = float(np.mean(val_mse[True])), float(np.mean(val_mse[False]))
    gain = 1.0 - ja / self_only
    elapsed = time.perf_counter() - start
    ok = gain >= 0.10 and elapsed < 600
    assert report(6, ok, f"val MSE JA {ja:.5f} vs self-only {self_only:.5f}: "
                         f"{100 * gain:.1f}% lower (need >= 10%)", start)


@pytest.mark.skipif(not os.environ.get("TIVAT_ETTH1_CSV"),
                    reason="set TIVAT_ETTH1_CSV to an ETTh1 CSV to run")
def test_criterion_7_etth1(report):
    start = time.perf_counter()
    frame = load_csv(os.environ["TIVAT_ETTH1_CSV"])
    parts = standardize(*chronological_split(frame, SplitSpec.for_dataset("ETTh1")))
    train, val, test = (make_windows(p, 96, 96) for p in parts)
    model = TiVaT(ModelConfig(**DATASET_PRESETS["ETTh1"], n_vars=frame.n_vars))
    fit(model, train, val, max_epochs=10, patience=3, dataset="ETTh1")
    rep = evaluate(model, test, "ETTh1")
    ok = rep.mse <= 0.45 and rep.mae <= 0.46
    assert report(7, ok, f"ETTh1 test MSE {rep.mse:.4f} (<= 0.45), MAE {rep.mae:.4f} (<= 0.46)",
                  start)


def _synth_config(tmp_path, **extra):
    doc = {
        "num_blocks": 1, "patch": 8, "stride": 4, "model_dim": 16, "ffn_dim": 32,
        "learning_rate": 0.003, "per_delta_t": 0.2, "per_delta_v": 0.5, "num_rq_self": 6,
        "num_rq": 6, "lookback": 48, "horizon": 12, "ma_kernel": 13, "batch_size": 32, "seed": 3,
        "data": {"synth": {"v": 4, "len": 1200, "lag": 4, "coupling": 0.8, "noise": 0.1, "seed": 0},
                 "split": [800, 200, 200], "dataset_name": "synth"},
        "output_dir": str(tmp_path / "out"),
        **extra,
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_criterion_8_determinism(report, tmp_path):
    start = time.perf_counter()
    cfg = _synth_config(tmp_path, train={"max_epochs": 2}, sampler_self="random")
    blobs = []
    for run in ("a", "b"):
        assert cli_main(["train", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
        blobs.append((tmp_path / run / "history.json").read_bytes())
    model = TiVaT.load(tmp_path / "a" / "checkpoint.json")
    frame = synth_leadlag(4, 1200, 4, 0.8, 0.1, seed=0)
    _, val, _ = (make_windows(p, 48, 12)
                 for p in standardize(*chronological_split(frame, SplitSpec(800, 200, 200))))
    r1, r2 = evaluate(model, val), evaluate(model, val)
    ok = blobs[0] == blobs[1] and r1 == r2
    assert report(8, ok, f"history.json identical: {blobs[0] == blobs[1]}; "
                         f"evaluate repeatable: {r1 == r2}", start)


EXPECTED_ROWS = {
    "attention": ["full_attention", "ja_attention"],
    "offset": ["points", "guidelines_no_sampling", "guidelines_with_sampling"],
    "sampler": ["self_random+cross_random", "self_random+cross_dtv", "self_dtv+cross_random",
                "self_dtv+cross_dtv"],
    "sampling_mode": ["no_sampling", "common_sampling", "separate_sampling"],
    "residual": ["none", "trend", "season", "both"],
}


@pytest.mark.slow
def test_criterion_9_ablation_harness(report, tmp_path):
    start = time.perf_counter()
    cfg = _synth_config(tmp_path, train={"max_epochs": 10, "patience": 3})
    problems = []
    for axis, rows in EXPECTED_ROWS.items():
        if cli_main(["ablate", "--config", str(cfg), "--axis", axis]) != 0:
            problems.append(f"{axis}: exit status")
            continue
        lines = (tmp_path / "out" / f"ablation_{axis}.csv").read_text().splitlines()
        got = [line.split(",")[0] for line in lines[1:]]
        if lines[0] != "variant,mse,mae" or got != rows or list(ABLATION_AXES[axis]) != rows:
            problems.append(f"{axis}: rows {got}")
        if not all(math.isfinite(float(line.split(",")[1])) for line in lines[1:]):
            problems.append(f"{axis}: non-finite mse")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 1800
    n_variants = sum(len(r) for r in EXPECTED_ROWS.values())
    detail = "; ".join(problems) if problems else f"{n_variants} variants over 5 axes trained"
    assert report(9, ok, detail, start)
