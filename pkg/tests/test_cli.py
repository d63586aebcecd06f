import json
import subprocess
import sys

import numpy as np
import pytest

from omnilab import pairminer as pm
from omnilab.cli import main

import corpora as C

TINY = {
    "model": {"dim": 16, "heads": 2, "layers": 1},
    "image_size": 4,
    "batch_size": 4,
    "max_steps": 8,
    "smoothing_window": 4,
    "seeds": [0, 1],
    "schemes": ["omni_rope", "lumina_accum"],
}


@pytest.fixture
def cfg(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def _csvs(d):
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))}


def test_compare_writes_artifacts_and_is_reproducible(tmp_path, cfg):
    for name in ("a", "b"):
        assert main(["toybench", "compare", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    a = tmp_path / "a"
    for f in ("metrics.csv", "summary.csv", "loss_curves.svg", "manifest.json"):
        assert (a / f).exists()
    assert _csvs(a) == _csvs(tmp_path / "b") and len(_csvs(a)) == 2
    man = json.loads((a / "manifest.json").read_text())
    assert man["seeds"] == [0, 1] and len(man["config_hash"]) == 64
    assert man["config"]["model"]["dim"] == 16


def test_flag_overrides(tmp_path, cfg):
    out = tmp_path / "o"
    assert main(["toybench", "compare", "--config", cfg, "--out", str(out), "--schemes", "qwen_accum", "--seeds", "4", "--max-steps", "5", "--lr", "0.01"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["schemes"] == ["qwen_accum"] and man["config"]["max_steps"] == 5 and man["config"]["lr"] == 0.01
    assert man["seeds"] == [4]


def test_run_single(tmp_path, cfg):
    out = tmp_path / "r"
    assert main(["toybench", "run", "--config", cfg, "--out", str(out), "--scheme", "omni_rope+index_emb", "--seed", "2"]) == 0
    assert _csvs(out)["metrics.csv"].startswith(b"scheme,seed,step,smoothed_loss\nomni_rope+index_emb,2,1,")


def test_bogus_scheme_exit_2(tmp_path, cfg, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["toybench", "run", "--config", cfg, "--out", str(tmp_path), "--scheme", "bogus"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert all(s in err for s in ("omni_rope", "qwen_accum", "lumina_accum"))


@pytest.mark.parametrize("argv", [["nope"], ["toybench"], ["toybench", "compare", "--bogus-flag"], []])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


@pytest.mark.parametrize(
    "bad,path",
    [({"model": {"dim": "x"}}, "model.dim"), ({"model": {"rope": {"theta": 0.5}}}, "model.rope"), ({"lr": None}, "lr"), ({"oops": 1}, "oops")],
)
def test_invalid_config_exit_2(tmp_path, capsys, bad, path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    assert main(["toybench", "compare", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert path in capsys.readouterr().err


def test_malformed_json_exit_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{nope")
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_runtime_failure_exit_1(tmp_path, capsys):
    assert main(["sample", "--checkpoint", str(tmp_path / "missing.bin"), "--out", str(tmp_path / "s")]) == 1
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["direct", "flow"])
def test_train_then_sample(tmp_path, cfg, mode):
    t = tmp_path / "t"
    assert main(["train", "--config", cfg, "--out", str(t), "--mode", mode, "--scheme", "qwen_accum", "--seed", "1"]) == 0
    assert (t / "model.bin").exists()
    for name in ("s1", "s2"):
        assert main(["sample", "--checkpoint", str(t / "model.bin"), "--out", str(tmp_path / name), "--steps", "3"]) == 0
    assert _csvs(tmp_path / "s1") == _csvs(tmp_path / "s2")
    assert pm.read_ppm(tmp_path / "s1" / "prediction.ppm").shape == (4, 4, 3)


def _video(tmp_path):
    frames, cuts = C.hard_cut_sequence(3)
    pm.write_frames(tmp_path / "frames", frames)
    return frames, cuts


def test_pairmine_scenes(tmp_path):
    frames, cuts = _video(tmp_path)
    for name in ("a", "b"):
        assert main(["pairmine", "scenes", "--frames", str(tmp_path / "frames"), "--out", str(tmp_path / name)]) == 0
    doc = json.loads((tmp_path / "a" / "scenes.json").read_text())
    assert [s["start"] for s in doc["scenes"]][1:] == cuts
    assert doc["scenes"][-1]["end"] == len(frames)
    assert _csvs(tmp_path / "a") == _csvs(tmp_path / "b")


def test_pairmine_scenes_threshold_flag(tmp_path):
    _video(tmp_path)
    assert main(["pairmine", "scenes", "--frames", str(tmp_path / "frames"), "--out", str(tmp_path / "o"), "--t-rgb", "255"]) == 0
    assert len(json.loads((tmp_path / "o" / "scenes.json").read_text())["scenes"]) == 1


def test_pairmine_pairs(tmp_path):
    frames, cuts = _video(tmp_path)
    scores = {(0, 1): 0.1, (0, 2): 0.9, (1, 2): 0.01, (cuts[0], cuts[0] + 1): 0.2}
    pm.write_scores(tmp_path / "s.txt", scores)
    args = ["pairmine", "pairs", "--frames", str(tmp_path / "frames"), "--scores", str(tmp_path / "s.txt")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    doc = json.loads((tmp_path / "a" / "pairs.json").read_text())
    assert [(p["i"], p["j"]) for p in doc["pairs"]] == [(0, 1), (cuts[0], cuts[0] + 1)]
    assert all(p["consistent"] for p in doc["pairs"])
    assert set(doc["pairs"][0]) == {"i", "j", "score", "proportion", "consistent"}
    assert _csvs(tmp_path / "a") == _csvs(tmp_path / "b")
    assert main(args + ["--out", str(tmp_path / "c"), "--band-lo", "0.5", "--band-hi", "1.0"]) == 0
    assert [(p["i"], p["j"]) for p in json.loads((tmp_path / "c" / "pairs.json").read_text())["pairs"]] == [(0, 2)]
    assert main(args + ["--out", str(tmp_path / "d"), "--all-pairs"]) == 1  # most pairs have no score


def test_pairmine_bad_band(tmp_path):
    _video(tmp_path)
    pm.write_scores(tmp_path / "s.txt", {(0, 1): 0.1})
    rc = main(["pairmine", "pairs", "--frames", str(tmp_path / "frames"), "--scores", str(tmp_path / "s.txt"),
               "--out", str(tmp_path / "o"), "--band-lo", "0.5", "--band-hi", "0.1"])
    assert rc == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "omnilab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "toybench" in res.stdout
