import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from encfree.cli import main
from encfree.numerics import save_elvt


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_plan_prints_exact_count(capsys):
    for preset in ("table5", "low224"):
        code, out, _ = run(capsys, "plan", "--frames", "40", "--high", "8", "--low", "32", "--preset", preset)
        assert code == 0 and out.strip() == "7144"
    code, out, _ = run(capsys, "plan", "--high", "2", "--low", "1", "--json")
    assert json.loads(out)["n_high"] == 2


def test_plan_bad_counts_exit_1_with_json_error(capsys):
    code, _, err = run(capsys, "plan", "--frames", "5", "--high", "2", "--low", "2")
    assert code == 1
    assert json.loads(err)["type"] == "ContractError"


def test_tokenize_missing_and_empty_input(capsys, tmp_path):
    code, _, err = run(capsys, "tokenize", str(tmp_path / "missing"))
    assert code == 1 and json.loads(err)["error"]
    (tmp_path / "empty").mkdir()
    code, _, err = run(capsys, "tokenize", str(tmp_path / "empty"))
    assert code == 1 and json.loads(err)["error"]


def test_tokenize_writes_stream(capsys, tmp_path, monkeypatch):
    save_elvt(tmp_path / "clip.elvt", np.random.default_rng(0).uniform(0, 1, (2, 3, 56, 56)))
    code, out, _ = run(capsys, "tokenize", str(tmp_path / "clip.elvt"), "--out", str(tmp_path / "t.jsonl"))
    info = json.loads(out)
    assert code == 0 and info["tokens"] == 2 * (4 + 2 + 1)
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == info["tokens"]
    monkeypatch.setenv("ENCFREE_OUT", str(tmp_path / "env"))
    code, out, _ = run(capsys, "tokenize", str(tmp_path / "clip.elvt"), "--no-payload")
    assert code == 0 and json.loads(out)["output"].startswith(str(tmp_path / "env"))


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["plan", "--high", "1", "--low", "1", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--n", "2", "--stage", "1"])  # no --out and no ENCFREE_OUT
    assert exc.value.code == 2


def test_gradcheck_tiny(capsys):
    code, out, _ = run(capsys, "gradcheck", "--tiny", "--instances", "1")
    assert code == 0
    assert float(out.split(":")[1].split()[0]) < 1e-4


def test_profile_formats(capsys, tmp_path):
    code, out, _ = run(capsys, "profile", "--frames", "8", "32", "--emit", "csv", "--out", str(tmp_path / "p.csv"))
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == 8
    assert (tmp_path / "p.csv").read_text().strip() == out.strip()
    code, out, _ = run(capsys, "profile", "--frames", "4", "--emit", "json", "--preset", "toy")
    assert [json.loads(l)["frames"] for l in out.splitlines()] == [4] * 4


def test_synth_train_eval_sweep_flow(capsys, tmp_path):
    for stage, n in ((1, 4), (2, 4), (3, 4)):
        code, _, _ = run(capsys, "--seed", "3", "synth", "--n", str(n), "--stage", str(stage),
                         "--out", str(tmp_path / f"c{stage}"))
        assert code == 0
    code, out, _ = run(capsys, "train", "--stage", "1", "--corpus", str(tmp_path / "c1" / "manifest.jsonl"),
                       "--steps", "2", "--batch-size", "2", "--out", str(tmp_path / "run"))
    assert code == 0
    ck1 = json.loads(out)["checkpoint"]
    code, _, err = run(capsys, "train", "--stage", "3", "--corpus", str(tmp_path / "c3" / "manifest.jsonl"),
                       "--init", ck1, "--steps", "1", "--out", str(tmp_path / "run"))
    assert code == 1 and "stage" in json.loads(err)["message"]
    cfg_file = tmp_path / "s2.cfg"
    cfg_file.write_text("stage = 2\nsteps = 1\nbatch_size = 2\n")
    code, out, _ = run(capsys, "train", "--stage", "2", "--corpus", str(tmp_path / "c2" / "manifest.jsonl"),
                       "--init", ck1, "--config", str(cfg_file), "--out", str(tmp_path / "run"))
    assert code == 0 and json.loads(out)["steps"] == 1
    ck2 = json.loads(out)["checkpoint"]
    code, out, _ = run(capsys, "eval", "--checkpoint", ck2, "--corpus", str(tmp_path / "c3" / "manifest.jsonl"),
                       "--out", str(tmp_path / "preds.jsonl"))
    assert code == 0 and json.loads(out)["n"] == 4
    assert len((tmp_path / "preds.jsonl").read_text().splitlines()) == 4
    code, out, _ = run(capsys, "merge-sweep", "--ratios", "1.0", "0.5", "0.25", "--checkpoint", ck2)
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and [float(r["ratio"]) for r in rows] == [1.0, 0.5, 0.25]
    assert list(rows[0]) == ["ratio", "visual_tokens_in", "visual_tokens_out", "per_layer", "macs", "flops",
                             "accuracy"]
    outs = [int(r["visual_tokens_out"]) for r in rows]
    assert outs == sorted(outs, reverse=True)


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "encfree.cli", "plan", "--high", "32", "--low", "0",
                           "--preset", "low224"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "19232"
