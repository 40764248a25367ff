import json
import subprocess
import sys

import pytest

from minidream.cli import main

TINY = """\
seed: 3
model: {d_model: 16, n_blocks: 1, n_heads: 1, enc_heads: 2, d_byte: 8, glyph_heads: 2, freq_dim: 16}
stages:
  - {stage: pretrain, steps: 6, log_every: 3}
  - {stage: sft, steps: 3, log_every: 3}
eval: {steps: 2}
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out.strip().splitlines()[-1]) if out.strip() else None), err


def test_gen_train_sample_eval(tmp_path, cfg_path, capsys):
    run = tmp_path / "run"
    code, out, _ = _run(capsys, "--run-dir", run, "--config", cfg_path, "gen-data")
    assert code == 0 and out["status"] == "ok" and out["items"] == 8
    code, out, _ = _run(capsys, "--run-dir", run, "train", "--stage", "pretrain")
    assert code == 0 and (run / "ckpt" / "pretrain.ckpt").exists()
    code, out, _ = _run(capsys, "--run-dir", run, "train", "--stage", "pretrain")
    assert code == 0 and out["status"] == "already_complete"
    code, out, _ = _run(capsys, "--run-dir", run, "train", "--stage", "sft")
    assert code == 0 and (run / "ckpt" / "sft.ckpt").exists()
    code, out, _ = _run(capsys, "--run-dir", run, "sample", "--prompt", 'text "AB" in red', "--n", 2, "--steps", 2)
    assert code == 0 and len(out["images"]) == 2
    assert all(open(p, "rb").read(8) == b"\x89PNG\r\n\x1a\n" for p in out["images"])
    code, out, _ = _run(capsys, "--run-dir", run, "eval")
    assert code == 0 and out["overall"]["n"] == 8
    assert (run / "eval" / "sft" / "metrics.csv").exists()


def test_exit_codes(tmp_path, cfg_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("data: {n_itemz: 3}\n")
    code, _, err = _run(capsys, "--run-dir", tmp_path / "r1", "--config", bad, "gen-data")
    assert code == 2 and json.loads(err)["error"] == "schema"
    code, _, err = _run(capsys, "--run-dir", tmp_path / "r2", "--config", cfg_path, "train")
    assert code == 3 and "gen-data" in json.loads(err)["message"]
    code, _, _ = _run(capsys, "--run-dir", tmp_path / "r3", "--config", tmp_path / "nope.yaml", "gen-data")
    assert code == 3


def test_locked_run_dir(tmp_path, cfg_path, capsys):
    import fcntl

    run = tmp_path / "run"
    run.mkdir()
    with open(run / ".lock", "w") as f:
        fcntl.flock(f, fcntl.LOCK_EX | fcntl.LOCK_NB)
        # flock locks are per open file, so a second process is needed to see the conflict
        proc = subprocess.run([sys.executable, "-m", "minidream.cli", "--run-dir", str(run), "--config",
                               str(cfg_path), "gen-data"], capture_output=True, text=True)
    assert proc.returncode == 5
    assert json.loads(proc.stderr)["error"] == "locked"


def test_config_conflict(tmp_path, cfg_path, capsys):
    run = tmp_path / "run"
    assert _run(capsys, "--run-dir", run, "--config", cfg_path, "gen-data")[0] == 0
    other = tmp_path / "other.yaml"
    other.write_text(TINY.replace("seed: 3", "seed: 4"))
    code, _, err = _run(capsys, "--run-dir", run, "--config", other, "gen-data")
    assert code == 2 and json.loads(err)["error"] == "config_conflict"


def test_rank(tmp_path, capsys):
    log = tmp_path / "prefs.jsonl"
    rows = [{"source_a": a, "source_b": b, "winner": "A" if "A" in (a, b) else "a"}
            for a, b in [("A", "B"), ("B", "A"), ("A", "C"), ("C", "A"), ("B", "C"), ("C", "B")]]
    log.write_text("".join(json.dumps(r) + "\n" for r in rows))
    code, out, _ = _run(capsys, "--run-dir", tmp_path / "run", "rank", "--log", log)
    assert code == 0
    assert out["standings"][0]["model"] == "A"
    assert sum(r["elo"] for r in out["standings"]) == pytest.approx(3000)
    log.write_text(json.dumps({"source_a": "A", "source_b": "B", "winner": "Z"}) + "\n")
    assert _run(capsys, "--run-dir", tmp_path / "run", "rank", "--log", log)[0] == 2
    assert _run(capsys, "--run-dir", tmp_path / "run", "rank", "--log", tmp_path / "none.jsonl")[0] == 3
