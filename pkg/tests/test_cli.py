import json
import subprocess
import sys

import numpy as np
import pytest

from talkfield.audio import AudioClip, write_wav
from talkfield.cli import main
from talkfield.selftest import run_selftest

TINY = "feature_size = 4\nnum_samples = 8\nlipaint_steps = 5\nrefine_steps = 10\n"


@pytest.fixture
def setup(tmp_path):
    sr = 16000
    x = np.random.default_rng(0).standard_normal(sr // 5) * 0.02
    write_wav(tmp_path / "a.wav", AudioClip(x, sr))
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY + f"audio = {tmp_path / 'a.wav'}\n", encoding="utf-8")
    return tmp_path, cfg


def test_selftest_passes(capsys):
    assert all(ok for _, ok, _ in run_selftest(3))
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5 and all(line.startswith("PASS") for line in lines)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "talkfield", "selftest", "--seed", "1"], capture_output=True, text=True)
    assert res.returncode == 0 and "FAIL" not in res.stdout


def test_animate_flags(setup, capsys):
    tmp, cfg = setup
    out = tmp / "out"
    assert main(["animate", "--config", str(cfg), "--out", str(out), "--frames", "3", "--dump-masks", "--seed", "4"]) == 0
    assert sorted(p.name for p in out.glob("frame_*.png")) == [f"frame_{i:05d}.png" for i in range(3)]
    assert len(list((out / "masks").iterdir())) == 3
    summary = json.loads((out / "report.json").read_text())["summary"]
    assert "seed = 4" in summary["config"] and summary["frames"] == 3
    assert "3 frames written" in capsys.readouterr().out


def test_prepare_then_animate(setup):
    tmp, cfg = setup
    prep = tmp / "prep"
    assert main(["prepare", "--config", str(cfg), "--out", str(prep), "--no-gan"]) == 0
    assert {"bundle.nfsp", "basis.nfsb", "probe.nfsp", "lipaint.nfsp"} <= {p.name for p in prep.iterdir()}
    cfg2 = tmp / "run2.cfg"
    cfg2.write_text(cfg.read_text() + f"prepared = {prep}\n", encoding="utf-8")
    assert main(["animate", "--config", str(cfg2), "--out", str(tmp / "out"), "--frames", "2"]) == 0
    assert len(list((tmp / "out").glob("frame_*.png"))) == 2


def test_iddiff_command(setup, capsys):
    tmp, cfg = setup
    assert main(["iddiff", "--config", str(cfg), "--out", str(tmp / "id"), "--frames", "2"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["yaw"] == 0.0 and res["deformed"]["psnr_cap"] == 99.0
    assert (tmp / "id" / "iddiff.json").exists()


def test_config_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("alpha_m = 2.0\n", encoding="utf-8")
    assert main(["animate", "--config", str(bad)]) == 2
    assert "alpha_m" in capsys.readouterr().err
    assert main(["animate", "--config", str(tmp_path / "nope.cfg")]) == 2


def test_missing_audio_exits_two(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY, encoding="utf-8")
    assert main(["animate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "setup" in capsys.readouterr().err


def test_seed_must_fit_u64():
    with pytest.raises(SystemExit):
        main(["animate", "--seed", str(2**64)])
    with pytest.raises(SystemExit):
        main(["animate", "--seed", "-1"])
