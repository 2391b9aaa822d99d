import csv
import json
import subprocess
import sys

import pytest

from maskscalar.cli import main


@pytest.fixture
def cfg_file(tiny_cfg, tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_cfg.to_dict()))
    return str(path)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--out", "x", "--bogus"])
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_command_and_required_flag():
    for argv in ([], ["train"], ["sweep-alpha"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 1


def test_validation_errors_exit_1(tmp_path, cfg_file):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["simulate", "--out", str(tmp_path / "a"), "--config", str(bad)]) == 1
    assert main(["simulate", "--out", str(tmp_path / "a"), "--config", str(tmp_path / "none.json")]) == 1
    assert main(["simulate", "--out", str(tmp_path / "a"), "--set", "model.units"]) == 1
    assert main(["simulate", "--out", str(tmp_path / "a"), "--set", "model.unknown=3"]) == 1
    assert main(["sweep-alpha", "--out", str(tmp_path / "s"), "--config", cfg_file]) == 1
    assert main(["sweep-alpha", "--out", str(tmp_path / "s"), "--oracle", "--alphas", "0,1", "--config", cfg_file]) == 1
    assert main(["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(tmp_path / "none.ckpt")]) == 1
    assert main(["train", "--out", str(tmp_path / "t"), "--config", cfg_file, "--steps", "0"]) == 1


def test_runtime_failure_exit_2(tmp_path, cfg_file):
    broken = tmp_path / "broken.ckpt"
    broken.write_bytes(b"not a zip")
    assert main(["eval", "--out", str(tmp_path / "e"), "--checkpoint", str(broken)]) == 2


def test_gradcheck_command(tmp_path, cfg_file, capsys):
    assert main(["gradcheck", "--config", cfg_file, "--out", str(tmp_path / "g")]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out and out.count("max_rel_error=") == 4
    report = json.loads((tmp_path / "g" / "gradcheck.json").read_text())
    assert report["max_rel_error"] < 1e-4 and len(report["results"]) == 4
    # an impossible tolerance turns into a failed check
    assert main(["gradcheck", "--config", cfg_file, "--topology", "aec", "--variant", "e2",
                 "--set", "gradcheck.tolerance=0"]) == 2


def test_sweep_oracle_csv(tmp_path, cfg_file):
    assert main(["sweep-alpha", "--oracle", "--out", str(tmp_path), "--config", cfg_file]) == 0
    with open(tmp_path / "sweep.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["alpha", "beta", "distortion", "residual", "l_asr_proxy", "snr_impr_db", "n"]
    assert [float(r[0]) for r in rows[1:]] == [1e-6, 0.25, 0.5, 0.75, 1.0]


def _run_everything(root, cfg_file):
    sim, run = root / "sim", root / "run"
    assert main(["simulate", "--out", str(sim), "--config", cfg_file, "--count", "2"]) == 0
    assert main(["simulate", "--out", str(root / "aec"), "--config", cfg_file, "--count", "1", "--mode", "aec",
                 "--level-db", "-5"]) == 0
    assert main(["train", "--out", str(run), "--config", cfg_file]) == 0
    ckpt = str(run / "ckpt_000012.ckpt")
    assert main(["eval", "--out", str(root / "eval"), "--checkpoint", ckpt]) == 0
    assert main(["eval", "--out", str(root / "eval_fixed"), "--checkpoint", ckpt, "--alpha", "0.5"]) == 0
    assert main(["sweep-alpha", "--out", str(root / "sweep"), "--checkpoint", ckpt, "--config", cfg_file,
                 "--include-predicted"]) == 0
    assert main(["sweep-alpha", "--out", str(root / "oracle"), "--oracle", "--config", cfg_file, "--beta", "0.05"]) == 0
    assert main(["features", "--out", str(root / "feat"), "--wav", str(sim / "scene_0000_mic.wav"),
                 "--config", cfg_file]) == 0
    assert main(["features", "--out", str(root / "feat_ckpt"), "--wav", str(sim / "scene_0000_mic.wav"),
                 "--config", cfg_file, "--checkpoint", ckpt]) == 0
    assert main(["gradcheck", "--out", str(root / "grad"), "--config", cfg_file, "--variant", "e2"]) == 0


def test_every_command_is_byte_deterministic(tmp_path, cfg_file):
    _run_everything(tmp_path / "a", cfg_file)
    _run_everything(tmp_path / "b", cfg_file)
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys()
    assert len(a) > 20
    assert [k for k in a if a[k] != b[k]] == []


def test_simulate_outputs(tmp_path, cfg_file):
    assert main(["simulate", "--out", str(tmp_path), "--config", cfg_file, "--count", "2"]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["scenes"] == ["scene_0000.json", "scene_0001.json"]
    scene = json.loads((tmp_path / "scene_0001.json").read_text())
    assert set(scene["files"]) == {"clean", "context", "mic", "noise"}
    assert all((tmp_path / f["file"]).exists() for f in scene["files"].values())


def test_module_entry_point(tmp_path, cfg_file):
    proc = subprocess.run([sys.executable, "-m", "maskscalar", "sweep-alpha", "--oracle", "--out", str(tmp_path),
                           "--config", cfg_file, "--alphas", "0.5"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "maskscalar", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1


@pytest.mark.slow
def test_desk_training_writes_five_checkpoints(tmp_path):
    assert main(["train", "--preset", "desk", "--out", str(tmp_path)]) == 0
    ckpts = sorted(p.name for p in tmp_path.glob("ckpt_*.ckpt"))
    assert len(ckpts) >= 5 and ckpts[-1] == "ckpt_005000.ckpt"
