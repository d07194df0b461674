import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from emcaps.cli import main
from emcaps.network import NetworkConfig

SMALL = ["--set", "A=4", "--set", "B=2", "--set", "C=2", "--set", "D=2", "--batch-size", "8",
         "--classes", "2", "--n-train", "32", "--n-test", "16"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def summary(out):
    line = [l for l in out.splitlines() if l.startswith("SUMMARY ")]
    assert len(line) == 1
    return json.loads(line[0][len("SUMMARY "):])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("run") / "a"
    assert main(["train", *SMALL, "--out", str(d), "--epochs", "2", "--seed", "3"]) == 0
    return d


def test_inspect_prints_layer_table(capsys):
    code, out, _ = run(capsys, "inspect")
    assert code == 0
    for token in ("relu_conv1", "primary_caps", "class_caps", "(?, 1, 1, 5)", "72", "2.61", "400", "80.0"):
        assert token in out


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "emcaps", "inspect", "--iterations", "2"], capture_output=True,
                       text=True, check=True)
    assert "(?, 16, 16, 64)" in r.stdout


@pytest.mark.parametrize("argv", [
    ["inspect", "--set", "A=eight"],
    ["inspect", "--set", "gamma=1"],
    ["inspect", "--set", "noequals"],
    ["inspect", "--iterations", "5"],
    ["frobnicate"],
    ["train"],
])
def test_usage_errors_exit_one(capsys, argv):
    with pytest.raises(SystemExit) as e:
        raise SystemExit(main(argv))
    assert e.value.code == 1


def test_train_echoes_defaults(capsys, tmp_path):
    code, out, _ = run(capsys, "train", "--set", "A=4", "--set", "B=2", "--set", "C=2", "--set", "D=2",
                       "--n-train", "64", "--n-test", "8", "--steps", "1", "--out", str(tmp_path / "r"))
    assert code == 0
    assert "batch=64 lr=0.003 weight_decay=2e-07 iterations=2" in out


def test_train_writes_run_directory(trained):
    cfg = json.loads((trained / "config.json").read_text())
    assert cfg["network"]["A"] == 4 and cfg["digest"] == NetworkConfig.from_dict(cfg["network"]).digest()
    with open(trained / "steps.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["step", "epoch", "loss", "spread_loss", "accuracy", "lr", "margin",
                             "lambda_0", "lambda_1"]
    assert [int(r["step"]) for r in rows] == list(range(8))
    assert float(rows[0]["lambda_1"]) == pytest.approx(0.000975, abs=1e-12)
    with open(trained / "epochs.csv") as f:
        epochs = list(csv.DictReader(f))
    assert [(int(e["epoch"]), int(e["step"])) for e in epochs] == [(1, 4), (2, 8)]
    assert (trained / "last.npz").exists()
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == ["epoch-0001.npz", "epoch-0002.npz"]
    assert not (trained / "train.lock").exists()


def test_training_is_deterministic(capsys, tmp_path, trained):
    code, out, _ = run(capsys, "train", *SMALL, "--out", str(tmp_path / "b"), "--epochs", "2", "--seed", "3")
    assert code == 0
    for name in ("steps.csv", "epochs.csv"):
        assert (tmp_path / "b" / name).read_text() == (trained / name).read_text()
    s = summary(out)
    assert s["steps"] == 8 and s["epoch"] == 2 and 0.0 <= s["test_accuracy"] <= 1.0


def test_iterations_flag_changes_digest_only_in_routing(capsys, tmp_path, trained):
    code, out, _ = run(capsys, "train", *SMALL, "--iterations", "3", "--steps", "1", "--out", str(tmp_path / "c"))
    assert code == 0
    a = json.loads((trained / "config.json").read_text())
    b = json.loads((tmp_path / "c" / "config.json").read_text())
    assert a["digest"] != b["digest"]
    assert {k for k in a["network"] if a["network"][k] != b["network"][k]} == {"iterations"}
    assert (tmp_path / "c" / "steps.csv").read_text().splitlines()[0].endswith("lambda_1,lambda_2")


def test_locked_directory_is_refused(capsys, tmp_path):
    d = tmp_path / "locked"
    d.mkdir()
    (d / "train.lock").write_text("123")
    code, _, err = run(capsys, "train", *SMALL, "--steps", "1", "--out", str(d))
    assert code == 1 and "lock" in err


def test_resume_from_checkpoint(capsys, tmp_path, trained):
    code, out, _ = run(capsys, "train", *SMALL, "--steps", "2", "--out", str(tmp_path / "r"),
                       "--checkpoint", str(trained / "last.npz"))
    assert code == 0 and summary(out)["steps"] == 10
    code, _, err = run(capsys, "train", *SMALL, "--iterations", "1", "--steps", "1", "--out", str(tmp_path / "s"),
                       "--checkpoint", str(trained / "last.npz"))
    assert code == 1 and "different network config" in err


def test_eval_is_repeatable(capsys, trained):
    args = ["eval", "--checkpoint", str(trained / "last.npz"), "--n-test", "16", "--json"]
    code, a, _ = run(capsys, *args)
    code2, b, _ = run(capsys, *args)
    assert code == code2 == 0 and a == b
    rep = json.loads(a)
    cm = np.array(rep["confusion"])
    assert cm.shape == (2, 2) and cm.sum() == 16 == rep["examples"]
    assert rep["accuracy"] == pytest.approx(np.trace(cm) / 16) and rep["iterations"] == 2
    code, text, _ = run(capsys, "eval", "--checkpoint", str(trained / "last.npz"), "--n-test", "16")
    assert "iterations 2" in text and "confusion" in text


def test_untrained_five_class_network_is_at_chance(capsys, tmp_path):
    d = tmp_path / "init"
    args = ["--set", "A=8", "--set", "B=4", "--set", "C=4", "--set", "D=4", "--batch-size", "25",
            "--n-train", "25", "--n-test", "200"]
    assert run(capsys, "train", *args, "--steps", "0", "--out", str(d))[0] == 0
    code, out, _ = run(capsys, "eval", "--checkpoint", str(d / "last.npz"), "--n-test", "200", "--json")
    assert code == 0 and abs(json.loads(out)["accuracy"] - 0.2) <= 0.05


def test_missing_and_corrupt_checkpoints(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "nope.npz"))
    assert code == 1 and "no such file" in err
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"\x00garbage")
    code, _, err = run(capsys, "eval", "--checkpoint", str(bad))
    assert code == 1 and "corrupt" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_two(capsys, tmp_path):
    code, _, err = run(capsys, "train", *SMALL, "--set", "base_lr=1e300", "--steps", "3",
                       "--out", str(tmp_path / "nan"))
    assert code == 2 and (tmp_path / "nan" / "failure.npz").exists()


def test_diagnose_live_warns_but_exits_zero(capsys):
    code, out, _ = run(capsys, "diagnose", "--n-test", "2", "--batch-size", "2")
    assert code == 0
    assert "RESULT status=WARN iterations=2" in out
    assert out.count("monitor layer=") == 3
    assert "status=FAIL" not in out


def test_diagnose_types_only_fails(capsys):
    code, out, _ = run(capsys, "diagnose", "--n-test", "2", "--batch-size", "2", "--ablate-normalization",
                       "types-only")
    assert code == 3
    assert "layer=conv_caps1 iter=1 status=FAIL signature=positions-not-normalized" in out
    assert [l for l in out.splitlines() if "check=normalization layer=class_caps iter=1" in l][0].count("PASS") == 1


def test_diagnose_adversarial_and_epsilon_ablation(capsys):
    code, out, _ = run(capsys, "diagnose", "--adversarial", "--iterations", "3")
    assert code == 0 and "signature=single-child-parents" in out and "floor_binding=True" in out
    code, out, _ = run(capsys, "diagnose", "--adversarial", "--iterations", "3", "--ablate-epsilon", "0")
    assert code == 3 and "signature=variance-collapse" in out


def test_diagnose_dump_round_trip(capsys, tmp_path):
    dump = tmp_path / "snap.npz"
    code, live, _ = run(capsys, "diagnose", "--n-test", "2", "--batch-size", "2", "--dump", str(dump))
    code2, again, _ = run(capsys, "diagnose", "--from-dump", str(dump))
    assert code == code2 == 0 and live.splitlines() == again.splitlines()


def test_diagnose_checkpoint(capsys, trained):
    code, out, _ = run(capsys, "diagnose", "--checkpoint", str(trained / "last.npz"), "--n-test", "16")
    assert code == 0 and "RESULT" in out


def test_prep_data_then_train(capsys, tmp_path):
    d = tmp_path / "data"
    code, out, _ = run(capsys, "prep-data", "--out", str(d), "--n-train", "32", "--n-test", "16", "--classes", "2")
    assert code == 0
    rep = json.loads(out)
    assert rep["train"]["examples"] == 32 and rep["test"]["examples"] == 16
    assert rep["train"]["labels"] == [16, 16]
    assert sorted(p.name for p in d.iterdir()) == ["synthetic-test-cat.mat", "synthetic-test-dat.mat",
                                                  "synthetic-train-cat.mat", "synthetic-train-dat.mat"]
    code, out, _ = run(capsys, "train", *SMALL, "--data-dir", str(d), "--steps", "2", "--out", str(tmp_path / "t"))
    assert code == 0 and summary(out)["steps"] == 2


def test_smallnorb_prep_without_files_is_a_usage_error(capsys, tmp_path):
    code, _, err = run(capsys, "prep-data", "--source", "smallnorb", "--data-dir", str(tmp_path))
    assert code == 1 and err


def test_plot_writes_svg(capsys, tmp_path, trained):
    pytest.importorskip("matplotlib")
    out = tmp_path / "curve.svg"
    code, _, _ = run(capsys, "plot", str(trained), "--out", str(out))
    assert code == 0 and out.read_text().lstrip().startswith("<?xml") and "<svg" in out.read_text()
    assert run(capsys, "plot", str(tmp_path / "none"), "--out", str(out))[0] == 1
