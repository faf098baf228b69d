import json
import math

import numpy as np
import pytest

from encfree import numerics as nx
from encfree.errors import ContractError
from encfree.numerics import Tensor
from encfree.synth import load_corpus, make_corpus
from encfree.trainer import (AdamW, ModelState, StageConfig, caption_io, evaluate_toy, lr_at, qa_io,
                             run_stage, warmup_steps)
from encfree.videotok import text_ids


@pytest.fixture(scope="module")
def corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    return {s: load_corpus(make_corpus(root / f"s{s}", n, stage=s, seed=11)) for s, n in ((1, 4), (2, 4), (3, 4))}


def test_lr_schedule_examples():
    cfg = StageConfig.full_scale(1)
    total = 1000
    w = warmup_steps(total, cfg.warmup_ratio)
    assert w == 30
    assert lr_at(0, total, cfg) == 0.0
    assert lr_at(w, total, cfg) == pytest.approx(4e-5, abs=1e-15)
    last = 4e-5 * 0.5 * (1 + math.cos(math.pi * (total - 1 - w) / (total - w)))
    assert abs(lr_at(total - 1, total, cfg) - last) < 1e-9
    assert all(lr_at(s, total, cfg) <= 4e-5 for s in range(total))
    with pytest.raises(ContractError):
        lr_at(0, 0, cfg)
    assert warmup_steps(10, 0.01) == 1


def test_stage_presets_and_invariants():
    assert [StageConfig.full_scale(s).lr for s in (1, 2, 3)] == [4e-5, 4e-5, 2e-5]
    assert StageConfig.toy(3).lr == pytest.approx(2e-3)
    assert StageConfig.toy(3).losses == ("gen",) and StageConfig.toy(3).merge_enabled
    with pytest.raises(ContractError):
        StageConfig(stage=1, lr=1e-3, warmup_ratio=0.0, frames=4)
    with pytest.raises(ContractError):
        StageConfig(stage=3, lr=1e-3, warmup_ratio=0.0, frames=4, merge_enabled=True, losses=("gen", "mse"))
    with pytest.raises(ContractError):
        StageConfig(stage=2, lr=1e-3, warmup_ratio=0.0, frames=4, merge_enabled=True)


def test_config_text_roundtrip():
    cfg = StageConfig.toy(2, steps=7, seed=3)
    assert StageConfig.from_text(cfg.to_text()) == cfg
    parsed = StageConfig.from_text("# toy override\nstage = 1\nsteps = 5\n")
    assert parsed.steps == 5 and parsed.frames == 1
    with pytest.raises(ContractError):
        StageConfig.from_text("stage = 1\nbogus = 2\n")
    with pytest.raises(ContractError):
        StageConfig.from_text("steps = 5\n")


def test_text_io_masks_the_question():
    text, tgt = qa_io("q?", "red")
    assert len(text) == len(tgt)
    assert tgt[:3] == [-1, -1, -1]
    assert tgt[3:6] == text_ids("red")
    text, tgt = caption_io("ab")
    assert text[1:] == tgt[:-1]


def test_adamw_first_step_moves_by_lr_times_sign():
    with nx.precision("float64"):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        q = Tensor(np.array([5.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 1e-3])
    opt = AdamW({"p": p, "q": q})
    opt.step(0.1)
    assert np.allclose(p.data, [0.9, -1.9, 2.9], atol=1e-6)
    assert q.data.tolist() == [5.0]  # no gradient, no update
    decayed = AdamW({"q": q}, weight_decay=0.5)
    q.grad = np.zeros(1)
    decayed.step(0.1)
    assert q.data == pytest.approx([5.0 - 0.1 * 0.5 * 5.0])


def test_stage_order_is_enforced(corpora):
    state = ModelState.fresh(seed=0)
    with pytest.raises(ContractError):
        run_stage(StageConfig.toy(2, steps=1), corpora[2], state)
    with pytest.raises(ContractError):
        run_stage(StageConfig.toy(1, steps=1), corpora[2], state)


def test_stage3_logs_only_caption_loss(corpora, tmp_path):
    state = ModelState.fresh(seed=1)
    state.stage_completed = 2
    state, log = run_stage(StageConfig.toy(3, steps=2, batch_size=2), corpora[3], state, tmp_path)
    assert all(r["l_mse"] == 0.0 and r["l_con"] == 0.0 for r in log.records)
    assert state.stage_completed == 3
    lines = (tmp_path / "stage3_log.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [0, 1]
    assert ModelState.load(tmp_path / "stage3").hash() == state.hash()


def test_stage1_records_every_loss(corpora):
    state, log = run_stage(StageConfig.toy(1, steps=2, batch_size=2), corpora[1], ModelState.fresh(seed=2))
    rec = log.records[0]
    assert rec["l_mse"] > 0 and rec["l_con"] > 0
    assert rec["temperature"] == pytest.approx(10.0, rel=1e-5)
    assert rec["lr"] == 0.0 and log.records[1]["lr"] > 0


def test_checkpoint_roundtrip_and_tamper_detection(tmp_path):
    state = ModelState.fresh(seed=3)
    digest = state.save(tmp_path / "ck")
    back = ModelState.load(tmp_path / "ck")
    assert back.hash() == digest
    assert set(back.parameters()) == set(state.parameters())
    bias = tmp_path / "ck" / "embed.bias.elvt"
    nx.save_elvt(bias, nx.load_elvt(bias) + 1.0)
    with pytest.raises(ContractError):
        ModelState.load(tmp_path / "ck")


def test_evaluation_is_deterministic(corpora):
    state = ModelState.fresh(seed=4)
    a, b = evaluate_toy(state, corpora[3]), evaluate_toy(state, corpora[3])
    assert a == b and a["n"] == 4
    with pytest.raises(ContractError):
        evaluate_toy(state, corpora[2])
