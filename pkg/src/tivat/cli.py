"""Command-line entry point: train, eval, ablate, synth and export.

Run configs are JSON documents::

    {
      "patch": 16, "stride": 8, ...,            # model keys (see MODEL_KEYS)
      "data": {"csv_path": "x.csv" | "synth": {...},
               "split": [train, val, test], "dataset_name": "ETTh1"},
      "output_dir": "runs/a",
      "train": {"max_epochs": 10, "patience": 3}
    }

A known ``dataset_name`` supplies default split lengths and hyperparameters.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import (
    DATASET_SPLITS,
    SplitSpec,
    chronological_split,
    load_csv,
    make_windows,
    standardize,
    synth_leadlag,
    write_csv,
)
from .ja_attention import select_keys
from .model import DATASET_PRESETS, ConfigError, ModelConfig, TiVaT, block_inputs, load_checkpoint
from .trainer import TrainingError, ablation_variants, evaluate, fit, run_ablation

REQUIRED_KEYS = ("num_blocks", "patch", "stride", "model_dim", "ffn_dim", "learning_rate",
                 "per_delta_t", "per_delta_v", "num_rq_self", "num_rq")
OPTIONAL_KEYS = ("lookback", "horizon", "ma_kernel", "batch_size", "attention_mode", "offset_mode",
                 "sampler_self", "sampler_cross", "sampling_mode", "residual_mode", "soft_scores",
                 "seed", "cross_pool")
MODEL_KEYS = REQUIRED_KEYS + OPTIONAL_KEYS
RUN_KEYS = ("data", "output_dir", "train")
DATA_KEYS = ("csv_path", "synth", "split", "dataset_name", "standardize")
SYNTH_KEYS = ("v", "len", "lag", "coupling", "noise", "seed")
TRAIN_KEYS = ("max_epochs", "patience", "clip", "max_steps_per_epoch")


class CLIError(Exception):
    """Reported as a single ``error:`` line with a nonzero exit status."""


# ------------------------------------------------------------------ config


def _check_keys(d: dict, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise CLIError(f"{where}: expected a JSON object")
    for key in d:
        if key not in allowed:
            raise CLIError(f"{where}: unknown key {key!r}")


def read_run_config(path) -> dict:
    """Parse and validate a run config; returns the resolved document."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return resolve_run_config(doc, str(path))


def resolve_run_config(doc: dict, where: str = "config") -> dict:
    _check_keys(doc, MODEL_KEYS + RUN_KEYS, where)
    data = dict(doc.get("data") or {})
    _check_keys(data, DATA_KEYS, f"{where}: data")
    train = dict(doc.get("train") or {})
    _check_keys(train, TRAIN_KEYS, f"{where}: train")
    if ("csv_path" in data) == ("synth" in data):
        raise CLIError(f"{where}: data needs exactly one of 'csv_path' or 'synth'")
    if "synth" in data:
        _check_keys(data["synth"], SYNTH_KEYS, f"{where}: data.synth")
        missing = [k for k in SYNTH_KEYS if k not in data["synth"]]
        if missing:
            raise CLIError(f"{where}: data.synth missing key {missing[0]!r}")

    name = data.get("dataset_name", "")
    model = dict(DATASET_PRESETS.get(name, {}))
    model.update({k: doc[k] for k in MODEL_KEYS if k in doc})
    for key in REQUIRED_KEYS:
        if key not in model:
            raise CLIError(f"{where}: missing required key {key!r}")
    if "split" not in data:
        if name not in DATASET_SPLITS:
            raise CLIError(f"{where}: missing required key 'data.split'")
        data["split"] = list(DATASET_SPLITS[name])
    split = data["split"]
    if not (isinstance(split, list) and len(split) == 3):
        raise CLIError(f"{where}: data.split must be [train, val, test]")
    data.setdefault("standardize", True)
    resolved = {**model, "data": data, "train": train}
    if "output_dir" in doc:
        resolved["output_dir"] = doc["output_dir"]
    return resolved


def load_frames(run: dict):
    """Return standardized (train, val, test) frames described by ``run['data']``."""
    data = run["data"]
    if "synth" in data:
        s = data["synth"]
        frame = synth_leadlag(s["v"], s["len"], s["lag"], s["coupling"], s["noise"], s["seed"])
    else:
        frame = load_csv(data["csv_path"])
    frames = chronological_split(frame, SplitSpec(*data["split"]))
    if data["standardize"]:
        frames = standardize(*frames)
    return frames


def model_config(run: dict, n_vars: int) -> ModelConfig:
    try:
        return ModelConfig(n_vars=n_vars, **{k: run[k] for k in MODEL_KEYS if k in run})
    except ConfigError as exc:
        raise CLIError(f"config: {exc}") from None


def _windows(run: dict, cfg: ModelConfig):
    return [make_windows(f, cfg.lookback, cfg.horizon) for f in load_frames(run)]


def _dump(path: Path, obj, sort_keys: bool = True) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=sort_keys) + "\n", encoding="utf-8")


def _output_dir(run: dict, override=None) -> Path:
    out = override or run.get("output_dir")
    if not out:
        raise CLIError("no output directory: set 'output_dir' in the config or pass --out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fit_kwargs(run: dict) -> dict:
    return {k: run["train"][k] for k in TRAIN_KEYS if k in run["train"]}


def _dataset(run: dict) -> str:
    return run["data"].get("dataset_name", "")


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    run = read_run_config(args.config)
    frames = load_frames(run)
    cfg = model_config(run, frames[0].n_vars)
    train, val, _ = (make_windows(f, cfg.lookback, cfg.horizon) for f in frames)
    out = _output_dir(run, args.out)
    model = TiVaT(cfg)
    history = fit(model, train, val, dataset=_dataset(run), **_fit_kwargs(run))
    report = evaluate(model, val, _dataset(run))
    model.save(out / "checkpoint.json")
    _dump(out / "history.json", history)
    _dump(out / "val_report.json", report.to_dict())
    _dump(out / "config.json", {**run, "output_dir": str(out)})
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    run = read_run_config(args.config)
    ckpt_cfg, params = _load_checkpoint(args.checkpoint)
    cfg = model_config(run, ckpt_cfg.n_vars)
    if args.horizon is not None:
        cfg = cfg.replace(horizon=args.horizon)
    # the checkpoint's tensors must fit the requested config exactly
    model = TiVaT(cfg)
    try:
        model.params.load_state_dict(params.state_dict())
    except ConfigError as exc:
        raise CLIError(f"checkpoint incompatible with config: {exc}") from None
    _, _, test = _windows(run, cfg)
    report = evaluate(model, test, _dataset(run)).to_dict()
    text = json.dumps(report, sort_keys=True)
    print(text)
    out = Path(args.out) if args.out else _output_dir(run) / "eval_report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_ablate(args) -> int:
    run = read_run_config(args.config)
    try:
        ablation_variants(args.axis)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    frames = load_frames(run)
    cfg = model_config(run, frames[0].n_vars)
    train, val, test = (make_windows(f, cfg.lookback, cfg.horizon) for f in frames)
    out = _output_dir(run, args.out)
    results = run_ablation(cfg, args.axis, train, val, test, dataset=_dataset(run),
                           **_fit_kwargs(run))
    with (out / f"ablation_{args.axis}.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "mse", "mae"])
        for name, rep in results.items():
            w.writerow([name, repr(rep.mse), repr(rep.mae)])
    _dump(out / f"ablation_{args.axis}.json", {k: r.to_dict() for k, r in results.items()},
          sort_keys=False)
    for name, rep in results.items():
        print(f"{name},{rep.mse:.6f},{rep.mae:.6f}")
    return 0


def cmd_synth(args) -> int:
    frame = synth_leadlag(args.v, args.len, args.lag, args.coupling, args.noise, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(frame, out)
    return 0


def _parse_ref(text: str):
    try:
        p, v = (int(part) for part in text.split(","))
    except ValueError:
        raise CLIError(f"--ref expects 'p,v' integers, got {text!r}") from None
    return p, v


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_export(args) -> int:
    cfg, params = _load_checkpoint(args.checkpoint)
    p_ref, v_ref = _parse_ref(args.ref)
    if not (0 <= p_ref < cfg.n_patches and 0 <= v_ref < cfg.n_vars):
        raise CLIError(f"reference ({p_ref},{v_ref}) outside the {cfg.n_patches}x{cfg.n_vars} "
                       "token grid")
    config_path = Path(args.config) if args.config else Path(args.checkpoint).parent / "config.json"
    run = read_run_config(config_path)
    _, _, test = _windows(run, cfg)
    if not 0 <= args.window < len(test):
        raise CLIError(f"--window {args.window} outside 0..{len(test) - 1}")
    x = test.inputs[args.window:args.window + 1]
    feats = block_inputs(x, params, cfg, args.block, np.random.default_rng(cfg.seed + 1))
    ref = p_ref * cfg.n_vars + v_ref

    def grid(n):
        return [int(n) // cfg.n_vars, int(n) % cfg.n_vars]

    doc = {}
    for name, h in feats.items():
        blk = getattr(params, name).blocks[args.block]
        if args.what == "embeddings":
            xy = h[0] @ blk.proj2d_weight.data + blk.proj2d_bias.data
            norms = np.linalg.norm(h[0], axis=-1)
            cos = h[0] @ h[0, ref] / np.maximum(norms * norms[ref], 1e-12)
            doc[name] = [{"grid": grid(n), "xy": [float(a) for a in xy[n]],
                          "cosine_to_ref": float(cos[n])} for n in range(len(h[0]))]
        else:
            sel = select_keys(h, blk, cfg.attention_settings(), np.random.default_rng(cfg.seed + 1))
            cross = sel.cross_ids[0, ref][sel.cross_valid[0, ref]]
            chosen = sel.key_ids[0, ref][sel.key_valid[0, ref]]
            doc[name] = {
                "reference": [p_ref, v_ref],
                "cross_axis": [grid(n) for n in cross] if cfg.cross_pool else [],
                "self_axis": [grid(n) for n in sel.self_ids[0, ref]],
                "selected": [grid(n) for n in chosen],
            }
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"export_{args.what}.json"
    _dump(out, doc)
    return 0


# ------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tivat", description="TiVaT forecaster")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", help="report path (default: <output_dir>/eval_report.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every variant of one ablation axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic lead-lag CSV")
    p.add_argument("--v", type=int, required=True)
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--lag", type=int, required=True)
    p.add_argument("--coupling", type=float, required=True)
    p.add_argument("--noise", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("export", help="dump 2D embeddings or JA guidelines for one token")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--what", choices=("embeddings", "guidelines"), required=True)
    p.add_argument("--ref", required=True, help="reference token as 'p,v'")
    p.add_argument("--window", type=int, default=0, help="test window index")
    p.add_argument("--block", type=int, default=0, help="encoder block to inspect")
    p.add_argument("--config", help="run config (default: config.json beside the checkpoint)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return args.func(args)
    except (CLIError, ValueError, TrainingError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
