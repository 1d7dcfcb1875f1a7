import json

import pytest
from hypothesis import given, settings, strategies as st

from arrul.config import read_config
from arrul.cli import TRAIN_DEFAULTS, build_parser, main, resolve, train_config_from, _flag_values
from arrul.errors import ConfigError

TRAIN_FLAGS = ["--k", "5", "--n", "2", "--epochs", "1", "--bg", "30", "--channel-scale", "0.25",
               "--fusion-hidden", "32"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--count", "3", "--seed", "7", "--acquisitions", "120", "--points", "64",
                 "--growth-rate", "0.03", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--seed", "2",
                 *TRAIN_FLAGS]) == 0
    return root


def test_gen_data_outputs_and_determinism(workspace, tmp_path):
    data = workspace / "data"
    assert sorted(p.name for p in data.glob("*.csv")) == ["syn1.csv", "syn2.csv", "syn3.csv"]
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seed"] == 7
    assert "syn1.meta" in manifest["outputs"]
    assert main(["gen-data", "--count", "3", "--seed", "7", "--acquisitions", "120", "--points", "64",
                 "--growth-rate", "0.03", "--out", str(tmp_path)]) == 0
    for name in ("syn1.csv", "syn3.meta"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--count", "1", "--out", str(blocker / "sub")]) != 0


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("weights.arrul", "epoch_1.arrul", "model.txt", "train.cfg", "train_report.json", "manifest.json"):
        assert (run / name).is_file(), name
    report = json.loads((run / "train_report.json").read_text())
    assert len(report["epoch_loss"]) == 1
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["config"]["k"] == 5 and manifest["config"]["points"] == 64
    assert set(manifest["versions"]) >= {"arrul", "numpy", "python"}


def test_train_bg_not_divisible(workspace, tmp_path, capsys):
    code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--k", "5", "--n", "2",
                 "--bg", "31", "--z", "3"])
    assert code != 0
    err = capsys.readouterr().err
    assert "bg" in err and "z" in err


def test_train_unknown_config_field(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("k = 5\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(cfg), "--data", str(workspace / "data"), "--out", str(tmp_path)]) != 0
    assert "learning_rate" in capsys.readouterr().err


def test_predict_writes_csv_and_svg(workspace, tmp_path):
    out = tmp_path / "pred"
    assert main(["predict", "--model", str(workspace / "run"), "--bearing", str(workspace / "data/syn1.csv"),
                 "--out", str(out), "--clamp"]) == 0
    lines = (out / "syn1_pred.csv").read_text().splitlines()
    assert lines[0] == "acq_index,predicted_hi,true_hi" and len(lines) == 1 + 115
    assert all(0.0 <= float(row.split(",")[1]) <= 1.0 for row in lines[1:])
    svg = (out / "syn1_pred.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    assert main(["predict", "--model", str(workspace / "run"), "--bearing", str(workspace / "data/syn1.csv"),
                 "--out", str(tmp_path / "again"), "--clamp"]) == 0
    assert (tmp_path / "again/syn1_pred.svg").read_bytes() == svg.encode()


def test_predict_missing_checkpoint(workspace, tmp_path):
    assert main(["predict", "--model", str(tmp_path), "--bearing", str(workspace / "data/syn1.csv"),
                 "--out", str(tmp_path)]) != 0


def test_predict_geometry_mismatch(workspace, tmp_path):
    assert main(["gen-data", "--count", "1", "--points", "128", "--acquisitions", "60",
                 "--out", str(tmp_path)]) == 0
    assert main(["predict", "--model", str(workspace / "run"), "--bearing", str(tmp_path / "syn1.csv"),
                 "--out", str(tmp_path)]) != 0


def test_evaluate_outputs_and_aggregate(workspace, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "--model", str(workspace / "run"), "--bearing", str(workspace / "data"),
                 "--out", str(out)]) == 0
    per = [json.loads((out / f"syn{i}_metrics.json").read_text()) for i in (1, 2, 3)]
    for m in per:
        assert set(m) == {"rmse", "mae", "score", "n"} and m["mae"] <= m["rmse"]
    agg = json.loads((out / "summary.json").read_text())["aggregate"]
    for key in ("rmse", "mae", "score"):
        assert agg[key] == pytest.approx(sum(m[key] for m in per) / 3, rel=1e-12)
    assert main(["evaluate", "--model", str(workspace / "run"), "--bearing", str(workspace / "data/syn1.csv"),
                 "--ablation", "non-ar", "--out", str(tmp_path / "nar")]) == 0


def test_evaluate_unknown_ablation(workspace, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--model", str(workspace / "run"), "--bearing", "x", "--ablation", "frozen"])
    assert exc.value.code != 0
    err = capsys.readouterr().err
    assert "none" in err and "non-ar" in err


def test_fpt_commands(workspace, capsys):
    assert main(["fpt", "--table", "B1-3"]) == 0
    assert "9600" in capsys.readouterr().out
    assert main(["fpt", "--table", "B1-1"]) == 0
    assert "11420" in capsys.readouterr().out
    assert main(["fpt", "--table", "B9-9"]) != 0
    assert main(["fpt", "--bearing", str(workspace / "data/syn1.csv"), "--baseline", "30"]) == 0
    assert "FPT index" in capsys.readouterr().out


def test_replay_reproduces_training(workspace, tmp_path):
    assert main(["replay", str(workspace / "run/manifest.json"), "--out", str(tmp_path)]) == 0
    for name in ("weights.arrul", "train_report.json", "train.cfg"):
        assert (tmp_path / name).read_bytes() == (workspace / "run" / name).read_bytes()


def test_every_train_field_has_a_flag():
    parser = build_parser()
    for name, default in TRAIN_DEFAULTS.items():
        if name in ("iters_schedule", "init_mode", "ablation"):
            continue
        value = "7" if name != "seed" else "11"
        args = parser.parse_args(["train", "--data", "d", "--" + name.replace("_", "-"), value])
        assert float(_flag_values(args, [name])[name]) == float(value)


@settings(max_examples=100, deadline=None)
@given(data=st.data())
def test_precedence_flag_over_config_over_default(data):
    names = sorted(TRAIN_DEFAULTS)
    in_config = data.draw(st.sets(st.sampled_from(names)))
    in_flags = data.draw(st.sets(st.sampled_from(names)))
    config = {n: ("cfg", n) for n in in_config}
    flags = {n: (("flag", n) if n in in_flags else None) for n in names}
    out = resolve(TRAIN_DEFAULTS, config, flags)
    for n in names:
        if n in in_flags:
            assert out[n] == ("flag", n)
        elif n in in_config:
            assert out[n] == ("cfg", n)
        else:
            assert out[n] == TRAIN_DEFAULTS[n]


def test_precedence_end_to_end(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("lr = 0.002\nepochs = 4\niters_schedule = [2,2,2, 2,1,1]\n")
    args = build_parser().parse_args(["train", "--config", str(cfg), "--data", "d", "--epochs", "9"])
    opts = resolve(TRAIN_DEFAULTS, read_config(cfg), _flag_values(args, TRAIN_DEFAULTS))
    opts["points"] = 64
    tc = train_config_from(opts)
    assert (tc.lr, tc.epochs, tc.k) == (0.002, 9, 45)
    assert tc.schedule == [(2, 2, 2), (2, 1, 1)]
    with pytest.raises(ConfigError):
        resolve(TRAIN_DEFAULTS, {"nope": 1}, {})
