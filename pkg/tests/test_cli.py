import csv
import json

import numpy as np
import pytest

from tivat.cli import main, read_run_config
from tivat.data import load_csv
from tivat.model import ModelConfig

BASE = {
    "num_blocks": 1, "patch": 8, "stride": 4, "model_dim": 8, "ffn_dim": 16, "learning_rate": 0.003,
    "per_delta_t": 0.2, "per_delta_v": 0.5, "num_rq_self": 4, "num_rq": 4,
    "lookback": 32, "horizon": 8, "ma_kernel": 5, "batch_size": 32,
    "data": {"synth": {"v": 3, "len": 300, "lag": 4, "coupling": 0.8, "noise": 0.1, "seed": 0},
             "split": [180, 60, 60], "dataset_name": "synth"},
    "train": {"max_epochs": 2},
}


def write_config(tmp_path, name="cfg.json", **changes):
    doc = json.loads(json.dumps(BASE))
    doc["output_dir"] = str(tmp_path / "run")
    for k, v in changes.items():
        if v is None:
            doc.pop(k, None)
        else:
            doc[k] = v
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: ")
    return err[0]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    cfg = write_config(tmp)
    assert run("train", "--config", cfg) == 0
    return tmp, cfg


class TestTrain:
    def test_outputs(self, trained):
        tmp, _ = trained
        for name in ("checkpoint.json", "history.json", "val_report.json", "config.json"):
            assert (tmp / "run" / name).is_file()
        hist = json.loads((tmp / "run" / "history.json").read_text())
        assert [h["epoch"] for h in hist] == [1, 2]

    def test_history_bytes_identical(self, trained, tmp_path):
        tmp, _ = trained
        cfg = write_config(tmp_path)
        assert run("train", "--config", cfg) == 0
        assert (tmp_path / "run" / "history.json").read_bytes() == \
            (tmp / "run" / "history.json").read_bytes()

    def test_config_echo_roundtrip(self, trained):
        tmp, cfg = trained
        a = read_run_config(cfg)
        b = read_run_config(tmp / "run" / "config.json")
        keys = [k for k in a if k not in ("data", "train", "output_dir")]
        assert ModelConfig(n_vars=3, **{k: a[k] for k in keys}) == \
            ModelConfig(n_vars=3, **{k: b[k] for k in keys})
        assert a["data"] == b["data"]

    def test_missing_required_key(self, tmp_path, capsys):
        assert run("train", "--config", write_config(tmp_path, patch=None)) != 0
        assert "'patch'" in error_line(capsys)

    def test_unknown_key(self, tmp_path, capsys):
        assert run("train", "--config", write_config(tmp_path, heads=2)) != 0
        assert "'heads'" in error_line(capsys)

    def test_bad_json_names_line(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "patch": 8,\n  "stride": ,\n}')
        assert run("train", "--config", p) != 0
        assert "line 3" in error_line(capsys)

    def test_preset_fills_defaults(self, tmp_path):
        doc = {"data": {"csv_path": "x.csv", "dataset_name": "ETTh1"}, "output_dir": "o"}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(doc))
        run_cfg = read_run_config(p)
        assert run_cfg["patch"] == 8 and run_cfg["num_rq"] == 20
        assert run_cfg["data"]["split"] == [8545, 2881, 2881]

    def test_missing_data_file(self, tmp_path, capsys):
        p = write_config(tmp_path, data={"csv_path": str(tmp_path / "none.csv"), "split": [1, 1, 1]})
        assert run("train", "--config", p) != 0
        assert "not found" in error_line(capsys)


class TestEval:
    def test_report(self, trained, tmp_path, capsys):
        tmp, cfg = trained
        out = tmp_path / "r.json"
        assert run("eval", "--config", cfg, "--checkpoint", tmp / "run" / "checkpoint.json",
                   "--out", out) == 0
        rep = json.loads(out.read_text())
        assert set(rep) == {"mse", "mae", "horizon", "dataset", "config_fingerprint"}
        assert rep["horizon"] == 8 and rep["dataset"] == "synth"
        assert run("eval", "--config", cfg, "--checkpoint", tmp / "run" / "checkpoint.json",
                   "--out", tmp_path / "r2.json") == 0
        assert (tmp_path / "r2.json").read_bytes() == out.read_bytes()

    def test_horizon_override_mismatch(self, trained, capsys):
        tmp, cfg = trained
        assert run("eval", "--config", cfg, "--checkpoint", tmp / "run" / "checkpoint.json",
                   "--horizon", 16) != 0
        assert "proj_weight" in error_line(capsys)


class TestAblate:
    def test_offset_axis(self, tmp_path):
        cfg = write_config(tmp_path, train={"max_epochs": 1, "max_steps_per_epoch": 2})
        assert run("ablate", "--config", cfg, "--axis", "offset") == 0
        with open(tmp_path / "run" / "ablation_offset.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["variant", "mse", "mae"]
        assert [r[0] for r in rows[1:]] == ["points", "guidelines_no_sampling", "guidelines_with_sampling"]
        table = json.loads((tmp_path / "run" / "ablation_offset.json").read_text())
        assert list(table) == [r[0] for r in rows[1:]]

    def test_unknown_axis(self, tmp_path, capsys):
        assert run("ablate", "--config", write_config(tmp_path), "--axis", "heads") != 0
        assert "valid axes" in error_line(capsys)


class TestSynth:
    def test_roundtrip_and_bytes(self, tmp_path):
        args = ["synth", "--v", 4, "--len", 120, "--lag", 3, "--coupling", 0.8, "--noise", 0.1,
                "--seed", 7]
        assert run(*args, "--out", tmp_path / "a.csv") == 0
        assert run(*args, "--out", tmp_path / "b.csv") == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        header = (tmp_path / "a.csv").read_text().splitlines()[0].split(",")
        assert len(header) == 5
        frame = load_csv(tmp_path / "a.csv")
        from tivat.data import synth_leadlag
        np.testing.assert_allclose(frame.values, synth_leadlag(4, 120, 3, 0.8, 0.1, 7).values,
                                   atol=1e-12, rtol=0)

    def test_invalid_params(self, tmp_path, capsys):
        assert run("synth", "--v", 4, "--len", 10, "--lag", 5, "--coupling", 1, "--noise", 0,
                   "--seed", 0, "--out", tmp_path / "x.csv") != 0
        error_line(capsys)


class TestExport:
    def test_embeddings(self, trained, tmp_path):
        tmp, _ = trained
        out = tmp_path / "e.json"
        assert run("export", "--checkpoint", tmp / "run" / "checkpoint.json", "--what", "embeddings",
                   "--ref", "2,1", "--window", 3, "--out", out) == 0
        doc = json.loads(out.read_text())
        assert set(doc) == {"trend", "season"}
        for rows in doc.values():
            assert len(rows) == 7 * 3
            ref = [r for r in rows if r["grid"] == [2, 1]]
            assert ref[0]["cosine_to_ref"] == pytest.approx(1.0, abs=1e-12)
            assert all(len(r["xy"]) == 2 for r in rows)

    def test_guidelines(self, trained, tmp_path):
        tmp, _ = trained
        out = tmp_path / "g.json"
        assert run("export", "--checkpoint", tmp / "run" / "checkpoint.json", "--what", "guidelines",
                   "--ref", "4,0", "--out", out) == 0
        for g in json.loads(out.read_text()).values():
            assert g["reference"] == [4, 0]
            pool = {tuple(c) for c in g["cross_axis"]} | {tuple(c) for c in g["self_axis"]}
            assert {tuple(c) for c in g["selected"]} <= pool
            assert len(g["self_axis"]) == 7 + 3 - 1

    def test_out_of_grid(self, trained, capsys):
        tmp, _ = trained
        assert run("export", "--checkpoint", tmp / "run" / "checkpoint.json", "--what", "guidelines",
                   "--ref", "7,0") != 0
        assert "outside" in error_line(capsys)


def test_usage_error_is_one_line(capsys):
    assert run("train") != 0
    error_line(capsys)
