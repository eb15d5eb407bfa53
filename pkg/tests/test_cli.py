import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from subpool import cli, gradcheck
from subpool.config import PRESETS, ConfigError, RunConfig, load_config, parse_config
from subpool.data_io import load_dataset, save_dataset
from subpool.model import init_params
from subpool.synthetic import generate_synthetic
from subpool.training import load_checkpoint


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


@pytest.fixture
def dataset(tmp_path, capsys):
    out = tmp_path / "data"
    code, summary, _ = run(capsys, "synth", "--ids", "20", "--per-id", "8", "--seed", "7",
                           "--out", str(out))
    assert code == 0
    return out, summary


def test_synth_counts(dataset):
    out, summary = dataset
    assert summary["num_images"] == 160 and summary["seed"] == 7
    assert len(list(out.glob("*.sptf"))) == 160
    with open(out / "manifest.csv") as fh:
        assert len(list(csv.reader(fh))) == 161


def test_synth_is_byte_deterministic(dataset, tmp_path, capsys):
    out, _ = dataset
    again = tmp_path / "again"
    run(capsys, "synth", "--ids", "20", "--per-id", "8", "--seed", "7", "--out", str(again))
    for f in out.iterdir():
        assert f.read_bytes() == (again / f.name).read_bytes()


def test_synth_rejects_zero_ids(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "subpool.cli", "synth", "--ids", "0",
                           "--out", str(tmp_path / "x")], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stdout == "" and "--ids" in proc.stderr


def test_synth_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, out, err = run(capsys, "synth", "--ids", "2", "--out", str(blocker / "sub"))
    assert code == 2 and out is None and "cannot write" in err


def test_train_zero_epochs_is_init(dataset, tmp_path, capsys):
    data, _ = dataset
    code, summary, _ = run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "ck"),
                           "--epochs", "0", "--seed", "4")
    assert code == 0 and summary["steps"] == 0
    params, _, model_cfg = load_checkpoint(tmp_path / "ck")
    expected = init_params(model_cfg, int(np.random.default_rng(4).integers(2**31)))
    for name in expected:
        np.testing.assert_array_equal(params[name], expected[name].astype(np.float32))
    assert (tmp_path / "ck" / "train_log.csv").read_text() == "epoch,loss_id,loss_tl,lr\n"


def test_train_deterministic_with_config(dataset, tmp_path, capsys):
    data, _ = dataset
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# short run\nepochs = 2\nsteps_per_epoch = 3  # batches\nloss_mode = id+tl\n")
    logs = []
    for name in ("a", "b"):
        code, summary, _ = run(capsys, "train", "--config", str(cfg), "--data", str(data),
                               "--out", str(tmp_path / name), "--seed", "1")
        assert code == 0 and summary["steps"] == 6
        logs.append((tmp_path / name / "train_log.csv").read_text())
    assert logs[0] == logs[1]
    assert logs[0].splitlines()[0] == "epoch,loss_id,loss_tl,lr"
    assert len(logs[0].splitlines()) == 3
    for f in (tmp_path / "a" / "params").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "params" / f.name).read_bytes()
    echoed = load_config(tmp_path / "a" / "run.cfg")
    assert echoed.epochs == 2 and echoed.loss_mode == "id+tl" and echoed.seed == 1


def test_train_config_error(dataset, tmp_path, capsys):
    data, _ = dataset
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 2\nwarmup = 5\n")
    code, out, err = run(capsys, "train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp_path / "ck"))
    assert code == 2 and out is None and "bad.cfg:2" in err and "warmup" in err
    cfg.write_text("rank = 40\n")
    code, _, err = run(capsys, "train", "--config", str(cfg), "--data", str(data),
                       "--out", str(tmp_path / "ck"))
    assert code == 2 and "rank" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numeric_failure(dataset, tmp_path, capsys):
    data, _ = dataset
    cfg = tmp_path / "nan.cfg"
    cfg.write_text("lr = inf\nepochs = 1\nsteps_per_epoch = 1\n")
    code, out, err = run(capsys, "train", "--config", str(cfg), "--data", str(data),
                         "--out", str(tmp_path / "ck"))
    assert code == 3 and out is None and "numeric failure" in err


def test_eval_noiseless_map_one(tmp_path, capsys):
    data = tmp_path / "clean"
    run(capsys, "synth", "--ids", "10", "--per-id", "4", "--noise", "0", "--camera-shift", "0",
        "--out", str(data))
    code, report, _ = run(capsys, "eval", "--data", str(data))
    assert code == 0 and report["map"] == 1.0
    assert set(report) == {"map", "cmc", "f_score", "num_queries", "num_skipped"}


def test_eval_checkpoint_and_ranking(dataset, tmp_path, capsys):
    data, _ = dataset
    run(capsys, "train", "--data", str(data), "--out", str(tmp_path / "ck"), "--epochs", "1",
        "--no-eval")
    ranking = tmp_path / "r.csv"
    code, report, _ = run(capsys, "eval", "--data", str(data), "--checkpoint", str(tmp_path / "ck"),
                          "--export-ranking", "5", "--ranking-out", str(ranking),
                          "--eval-threads", "3")
    assert code == 0 and 0 <= report["map"] <= 1
    rows = list(csv.reader(ranking.open()))
    assert rows[0] == ["query", "rank", "gallery", "distance", "person_id", "camera_id", "relevant"]
    assert len(rows) - 1 == 5 * report["num_queries"]
    code, again, _ = run(capsys, "rank", "--data", str(data), "--checkpoint", str(tmp_path / "ck"),
                         "--depth", "5", "--ranking-out", str(tmp_path / "r2.csv"))
    assert again == report and (tmp_path / "r2.csv").read_text() == ranking.read_text()


def test_eval_errors(dataset, tmp_path, capsys):
    data, _ = dataset
    code, _, err = run(capsys, "eval", "--data", str(tmp_path / "missing"))
    assert code == 2
    code, _, err = run(capsys, "eval", "--data", str(data), "--export-ranking", "3")
    assert code == 2 and "--ranking-out" in err
    code, _, err = run(capsys, "eval", "--data", str(data), "--checkpoint", str(tmp_path))
    assert code == 2


def test_eval_multi_on_duplicated_queries(tmp_path, capsys):
    ds = generate_synthetic(num_ids=8, images_per_id=6, seed=3)
    for pid in range(8):
        for cam in range(2):
            group = np.flatnonzero((ds.person_ids == pid) & (ds.camera_ids == cam))
            ds.tensors[group] = ds.tensors[group[0]]
    save_dataset(ds, tmp_path / "dup")
    cfg = tmp_path / "q2.cfg"
    cfg.write_text("queries_per_group = 2\n")
    args = ["eval", "--data", str(tmp_path / "dup"), "--config", str(cfg)]
    _, single, _ = run(capsys, *args)
    _, multi, _ = run(capsys, *args, "--mode", "multi")
    assert multi["num_queries"] * 2 == single["num_queries"]
    assert multi["map"] == single["map"] and multi["cmc"] == single["cmc"]


def test_gradcheck_single_stage(capsys):
    code, report, err = run(capsys, "gradcheck", "--stage", "crossentropy")
    assert code == 0 and report["passed"]
    assert [s["stage"] for s in report["stages"]] == ["crossentropy"]
    assert "crossentropy: ok" in err


def test_gradcheck_failure_exit_code(monkeypatch, capsys):
    monkeypatch.setitem(gradcheck.STAGES, "crossentropy",
                        lambda: gradcheck.StageResult("crossentropy", 0.5, 1e-5))
    code, report, err = run(capsys, "gradcheck", "--stage", "crossentropy")
    assert code == 1 and not report["passed"] and "FAIL" in err


def test_config_text_round_trip():
    cfg = RunConfig(seed=3).replace(conv_widths=(4, 8), frozen=("conv0", "conv1"), lr=1e-3,
                                    cross_camera=False)
    back = RunConfig(seed=0).replace(**parse_config(cfg.to_text()))
    assert back == cfg
    for line in cfg.to_text().splitlines():
        assert line.startswith("# ") or " = " in line


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("nope = 1")
    with pytest.raises(ConfigError, match=":1:"):
        parse_config("epochs = many")
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("epochs 3")
    with pytest.raises(ConfigError, match="preset"):
        load_config(preset="huge")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("SUBPOOL_SEED", "42")
    assert RunConfig().seed == 42
    assert load_config(overrides={"seed": 5}).seed == 5
    monkeypatch.setenv("SUBPOOL_SEED", "x")
    with pytest.raises(ConfigError):
        RunConfig()


def test_full_scale_preset():
    cfg = load_config(preset="paper")
    assert (cfg.lr, cfg.decay_start, cfg.epochs, cfg.P, cfg.K) == (2e-4, 150, 300, 32, 4)
    assert set(PRESETS["paper"]) <= set(vars(cfg))
