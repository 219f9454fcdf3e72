import math
import os

import numpy as np
import pytest

from duovision import data as D
from duovision.config import LMConfig, RunConfig, StageConfig, VisionConfig
from duovision.errors import CheckpointError, ConfigurationError
from duovision.model import LanguageModel
from duovision.encoders import VisionSystem
from duovision.nn import AdamW
from duovision.training import (build_batch, draw_tasks, load_checkpoint, load_model,
                                lr_at, read_blobs, run_stage, save_checkpoint,
                                train_step, write_blobs)


def test_lr_closed_form_constant():
    total, peak = 700, 3e-4
    warm = math.ceil(0.03 * total)  # 21
    assert lr_at(0, total, peak, "constant_warmup") == 0.0
    assert lr_at(7, total, peak, "constant_warmup") == pytest.approx(peak * 7 / warm)
    for step in (warm, warm + 1, total - 1):
        assert lr_at(step, total, peak, "constant_warmup") == peak


def test_lr_closed_form_cosine():
    total, peak = 400, 1e-3
    warm = math.ceil(0.03 * total)  # 12
    assert lr_at(warm, total, peak, "cosine_warmup") == peak
    mid = warm + (total - warm) // 2
    frac = (mid - warm) / (total - warm)
    want = peak * 0.5 * (1 + math.cos(math.pi * frac))
    assert lr_at(mid, total, peak, "cosine_warmup") == pytest.approx(want, rel=1e-12)
    assert lr_at(total, total, peak, "cosine_warmup") == pytest.approx(0.0, abs=1e-18)


def test_lr_rejects_bad_schedule():
    with pytest.raises(ConfigurationError):
        lr_at(0, 10, 1e-3, "linear")
    with pytest.raises(ConfigurationError):
        lr_at(0, 0, 1e-3, "constant_warmup")


def test_draw_tasks_deterministic_and_weighted():
    mix = {"gen_short": 0.75, "und_qa": 0.25}
    a = draw_tasks(mix, seed=3, tag="s", step=11, batch=400)
    b = draw_tasks(mix, seed=3, tag="s", step=11, batch=400)
    assert a == b
    c = draw_tasks(mix, seed=3, tag="s", step=12, batch=400)
    assert a != c
    frac = sum(1 for t in a if t == "gen_short") / len(a)
    assert 0.6 < frac < 0.9


def test_blob_file_round_trip(tmp_path):
    path = str(tmp_path / "x.pscs")
    blobs = {"meta": b'{"k": 1}', "param/a": b"\x00\x01rawbytes", "empty": b""}
    write_blobs(path, blobs)
    back = read_blobs(path)
    assert back == blobs


def test_blob_file_rejects_garbage(tmp_path):
    path = str(tmp_path / "bad.pscs")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError):
        read_blobs(path)


def small_setup(seed=0):
    vc = VisionConfig()
    lc = LMConfig(d_model=32, n_layers=2, n_heads=2, context=256)
    vision = VisionSystem(vc, seed)
    vision.freeze_all()
    lm = LanguageModel(lc, vc, seed)
    return lm, vision


def test_checkpoint_round_trip_bitwise(tmp_path):
    lm, vision = small_setup()
    opt = AdamW(lm.params, lr=1e-3)
    stage = StageConfig(name="s", steps=4, batch=2, lr=1e-3,
                        mix={"gen_short": 0.5, "und_qa": 0.5})
    for step in range(2):
        train_step(lm, vision, stage, opt, seed=0, step=step)
    path = str(tmp_path / "ck.pscs")
    save_checkpoint(path, lm, vision, opt, {"stage": "s", "next_step": 2})

    lm2, vision2 = small_setup(seed=1)  # different init, then load over it
    opt2 = AdamW(lm2.params, lr=1e-3)
    meta = load_checkpoint(path, lm2, vision2, opt2)
    assert meta["stage"] == "s" and meta["next_step"] == 2
    assert meta["_opt_loaded"] is True
    for name, p in lm.params.items():
        np.testing.assert_array_equal(p.data, lm2.params[name].data)
    assert vision2.digests() == vision.digests()
    # one more step on both must stay bitwise identical
    r1, g1, _ = train_step(lm, vision, stage, opt, seed=0, step=2)
    r2, g2, _ = train_step(lm2, vision2, stage, opt2, seed=0, step=2)
    assert r1.objective == r2.objective and g1 == g2
    for name, p in lm.params.items():
        np.testing.assert_array_equal(p.data, lm2.params[name].data)


def test_checkpoint_without_opt_flags_it(tmp_path):
    lm, vision = small_setup()
    path = str(tmp_path / "b.pscs")
    save_checkpoint(path, lm, vision, meta={"stage": "s", "next_step": 4})
    lm2, vision2 = small_setup(seed=1)
    opt2 = AdamW(lm2.params, lr=1e-3)
    meta = load_checkpoint(path, lm2, vision2, opt2)
    assert meta["_opt_loaded"] is False


def test_build_batch_deterministic_and_kinds():
    lm, vision = small_setup()
    stage = StageConfig(name="mix", steps=10, batch=6, lr=1e-3,
                        mix={"gen_short": 0.34, "gen_long": 0.33, "und_qa": 0.33})
    b1 = build_batch(vision, stage, seed=0, step=3)
    b2 = build_batch(vision, stage, seed=0, step=3)
    assert len(b1) == 6
    for s1, s2 in zip(b1, b2):
        assert s1.kind == s2.kind
        np.testing.assert_array_equal(s1.tokens, s2.tokens)
        np.testing.assert_array_equal(s1.feats, s2.feats)
    kinds = {s.kind for s in b1}
    assert kinds <= {"und", "gen"} and kinds


def test_run_stage_writes_metrics(tmp_path):
    lm, vision = small_setup()
    stage = StageConfig(name="tiny", steps=3, batch=2, lr=1e-3,
                        mix={"gen_short": 1.0}, eval_every=0, ckpt_every=0)
    stats = run_stage(lm, vision, stage, seed=0, out_dir=str(tmp_path))
    assert stats["final_objective"] is not None
    lines = (tmp_path / "metrics_tiny.csv").read_text().splitlines()
    assert lines[0].startswith("step,")
    assert len(lines) == 4


def test_load_model_rebuilds_from_embedded_config(tmp_path):
    lm, vision = small_setup()
    cfg = RunConfig()
    cfg.lm = LMConfig(d_model=32, n_layers=2, n_heads=2, context=256)
    from duovision.config import to_dict
    path = str(tmp_path / "m.pscs")
    save_checkpoint(path, lm, vision, meta={"stage": "final", "config": to_dict(cfg)})
    lm2, vision2, meta = load_model(path)
    assert meta["stage"] == "final"
    assert lm2.config.d_model == 32
    for name, p in lm.params.items():
        np.testing.assert_array_equal(p.data, lm2.params[name].data)
    assert not any(t.requires_grad for t in vision2.params.tensors())
