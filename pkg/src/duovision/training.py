"""Stage-based training: batch synthesis, the update step, checkpoints,
and the three-stage pipeline.

Determinism is structural rather than snapshotted: every random choice
(task mix, scene draws, pixel noise, caption dropout) comes from a
counter-based stream keyed by (run seed, stage name, step, slot), so a
resumed run replays the exact batches the uninterrupted run would have
seen. Checkpoints therefore only need parameters, optimizer moments,
and the (stage, step) cursor to be bitwise-resumable.

Stages own their optimizer: moments reset at each stage boundary, and
the learning-rate schedule (linear warmup into constant or cosine) is
computed in closed form from the step index.
"""

import csv
import io
import json
import math
import os
import struct
import time

import numpy as np

from . import data as D
from .config import RunConfig, StageConfig, config_from_dict, to_dict
from .encoders import VisionSystem, pretrain_all
from .errors import CheckpointError, ConfigurationError, DataError
from .model import LanguageModel, MixedSequence, assemble_generation, assemble_understanding, unified_loss
from .nn import AdamW, clip_grad_norm, lr_at
from .rng import stream_key, substream

TASKS = ("und_long", "und_qa", "gen_short", "gen_long")


def draw_tasks(mix: dict, seed: int, tag: str, step: int, batch: int):
    names = sorted(mix)
    weights = np.array([mix[n] for n in names], dtype=np.float64)
    cum = np.cumsum(weights) / weights.sum()
    u = substream(seed, tag + "/mix", step).uniform(size=batch)
    return [names[int(np.searchsorted(cum, x, side="right"))] for x in u]


def build_batch(vision: VisionSystem, stage: StageConfig, seed: int, step: int,
                split: str = "train"):
    """Assemble one deterministic batch of mixed sequences.

    Understanding samples see noise-augmented renders; generation
    targets come from clean renders so the regression target for a
    caption is a pure function of the frozen tower.
    """
    tag = stage.name
    tasks = draw_tasks(stage.mix, seed, tag, step, stage.batch)
    pool = D.split_range(split)
    idx = substream(seed, tag + "/scenes", step).integers(0, len(pool), size=stage.batch)
    scenes = [D.gen_scene(int(pool[i])) for i in idx]
    drop = substream(seed, tag + "/drop", step).uniform(size=stage.batch)

    und_slots = [i for i, t in enumerate(tasks) if t.startswith("und")]
    gen_slots = [i for i, t in enumerate(tasks) if t.startswith("gen")]
    samples = [None] * stage.batch

    if und_slots:
        images = np.stack([
            D.noisy_render(scenes[i], stream_key(seed, tag + "/px", step, i), stage.noise_amp)
            for i in und_slots])
        feats = vision.encode_und(images).data
        for row, i in enumerate(und_slots):
            if tasks[i] == "und_long":
                prompt, answer = D.UND_DESCRIBE_PROMPT, D.caption_long(scenes[i])
            else:
                prompt, answer = D.make_qa(scenes[i], int(pool[idx[i]]))
            samples[i] = assemble_understanding(prompt, answer, feats[row])

    if gen_slots:
        images = np.stack([D.render_scene(scenes[i]) for i in gen_slots])
        pooled = vision.encode_gen_pooled(images).data
        for row, i in enumerate(gen_slots):
            caption = D.caption_short(scenes[i]) if tasks[i] == "gen_short" else D.caption_long(scenes[i])
            if drop[i] < stage.caption_dropout:
                caption = ""
            samples[i] = assemble_generation(caption, pooled[row], D.GEN_INSTRUCTION)

    return samples


def train_step(lm: LanguageModel, vision: VisionSystem, stage: StageConfig,
               opt: AdamW, seed: int, step: int):
    """One optimization step; returns (LossReport, grad_norm, lr)."""
    from . import tensor as T

    batch = build_batch(vision, stage, seed, step)
    lm.params.zero_grad()
    with T.Tape() as tape:
        loss, report = unified_loss(lm, batch)
        tape.backward(loss)
    grad_norm = clip_grad_norm(lm.params, 1.0)
    rate = lr_at(step, stage.steps, stage.lr, stage.schedule, stage.warmup_ratio)
    opt.step(lr=rate)
    return report, grad_norm, rate


def held_out_loss(lm: LanguageModel, vision: VisionSystem, stage: StageConfig, seed: int):
    """Validation-loss probe on a fixed batch of val-split scenes (no update)."""
    probe = StageConfig(name=stage.name + "/val", steps=1, batch=stage.batch,
                        mix=stage.mix, caption_dropout=0.0, noise_amp=0.0)
    val_seed = stream_key(seed, "valprobe")
    batch = build_batch(vision, probe, val_seed, 0, split="val")
    _, report = unified_loss(lm, batch)
    return report


# ------------------------------------------------------------- checkpoints


CKPT_MAGIC = b"PSCS"
CKPT_VERSION = 1


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _npy_load(blob: bytes) -> np.ndarray:
    return np.load(io.BytesIO(blob), allow_pickle=False)


def write_blobs(path, entries: dict) -> None:
    """Length-prefixed key/blob container, little-endian."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for key, blob in entries.items():
            kb = key.encode()
            fh.write(struct.pack("<I", len(kb)))
            fh.write(kb)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def read_blobs(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    count = struct.unpack_from("<I", raw, 8)[0]
    off = 12
    entries = {}
    for _ in range(count):
        klen = struct.unpack_from("<I", raw, off)[0]
        off += 4
        key = raw[off:off + klen].decode()
        off += klen
        blen = struct.unpack_from("<Q", raw, off)[0]
        off += 8
        entries[key] = raw[off:off + blen]
        off += blen
    if off != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - off} trailing bytes")
    return entries


def save_checkpoint(path, lm: LanguageModel, vision: VisionSystem,
                    opt: AdamW = None, meta: dict = None) -> None:
    entries = {"meta": json.dumps(meta or {}, sort_keys=True).encode()}
    for name, t in lm.params.items():
        entries["lm/" + name] = _npy_bytes(t.data)
    for name, t in vision.params.items():
        entries["vision/" + name] = _npy_bytes(t.data)
    if opt is not None:
        for key, value in opt.state().items():
            entries["opt/" + key] = _npy_bytes(np.asarray(value))
    write_blobs(path, entries)


def load_checkpoint(path, lm: LanguageModel, vision: VisionSystem, opt: AdamW = None) -> dict:
    """Restore parameters (and optimizer moments, when stored) in place.

    Returns meta with an extra `_opt_loaded` flag; stage-boundary
    checkpoints legitimately carry no optimizer state because the next
    stage starts with fresh moments.
    """
    entries = read_blobs(path)
    meta = json.loads(entries.pop("meta").decode())
    lm_state = {k[3:]: _npy_load(v) for k, v in entries.items() if k.startswith("lm/")}
    vi_state = {k[7:]: _npy_load(v) for k, v in entries.items() if k.startswith("vision/")}
    lm.params.load_state(lm_state)
    vision.params.load_state(vi_state)
    meta["_opt_loaded"] = False
    if opt is not None:
        opt_state = {k[4:]: _npy_load(v) for k, v in entries.items() if k.startswith("opt/")}
        if opt_state:
            opt.load_state(opt_state)
            meta["_opt_loaded"] = True
    return meta


# ------------------------------------------------------------------ stages


def run_stage(lm: LanguageModel, vision: VisionSystem, stage: StageConfig,
              seed: int, out_dir: str, start_step: int = 0, opt: AdamW = None,
              log=None, meta_base: dict = None) -> dict:
    """Train one stage from start_step; returns summary stats.

    A fresh optimizer is created unless one is passed in (mid-stage
    resume). Metrics go to metrics_<stage>.csv; optional held-out probes
    to eval_<stage>.jsonl; checkpoints to ckpt_<stage>_<step>.pscs.
    """
    os.makedirs(out_dir, exist_ok=True)
    if opt is None:
        opt = AdamW(lm.params, lr=stage.lr)
    metrics_path = os.path.join(out_dir, f"metrics_{stage.name}.csv")
    mode = "a" if start_step > 0 and os.path.exists(metrics_path) else "w"
    last = None
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "lr", "objective", "ce_mean", "mse_mean",
                             "grad_norm", "seconds"])
        for step in range(start_step, stage.steps):
            t0 = time.time()
            report, grad_norm, rate = train_step(lm, vision, stage, opt, seed, step)
            writer.writerow([step, f"{rate:.3e}", f"{report.objective:.6f}",
                             f"{report.ce_mean:.6f}", f"{report.mse_mean:.6f}",
                             f"{grad_norm:.4f}", f"{time.time() - t0:.3f}"])
            last = report
            if log and (step % 50 == 0 or step == stage.steps - 1):
                log(f"{stage.name} step {step}/{stage.steps} obj {report.objective:.4f} "
                    f"ce {report.ce_mean:.4f} mse {report.mse_mean:.4f}")
            if stage.eval_every and (step + 1) % stage.eval_every == 0:
                probe = held_out_loss(lm, vision, stage, seed)
                with open(os.path.join(out_dir, f"eval_{stage.name}.jsonl"), "a") as ef:
                    ef.write(json.dumps({"step": step + 1, "objective": probe.objective,
                                         "ce_mean": probe.ce_mean, "mse_mean": probe.mse_mean},
                                        sort_keys=True) + "\n")
            if stage.ckpt_every and (step + 1) % stage.ckpt_every == 0 and step + 1 < stage.steps:
                meta = dict(meta_base or {}, stage=stage.name, next_step=step + 1)
                save_checkpoint(os.path.join(out_dir, f"ckpt_{stage.name}_{step + 1}.pscs"),
                                lm, vision, opt, meta)
    return {"final_objective": last.objective if last else None,
            "final_ce": last.ce_mean if last else None,
            "final_mse": last.mse_mean if last else None}


def run_pipeline(cfg: RunConfig, log=None, resume: str = None) -> dict:
    """Pretrain towers, then run every stage in order; returns a summary.

    With `resume`, parameters and the (stage, step) cursor come from the
    checkpoint and training continues bitwise-identically to a run that
    was never interrupted.
    """
    os.makedirs(cfg.out_dir, exist_ok=True)
    vision = VisionSystem(cfg.vision, cfg.seed)
    lm = LanguageModel(cfg.lm, cfg.vision, cfg.seed)
    summary = {"stages": {}, "seed": cfg.seed}
    stage_names = [s.name for s in cfg.stages]
    cfg_doc = to_dict(cfg)

    start_stage, start_step, resume_opt = 0, 0, None
    if resume is None:
        pre = pretrain_all(vision, cfg.pretrain, cfg.seed, log=log)
        summary["pretrain"] = {"psnr_db": pre["gen"]["psnr_db"],
                               "probe_acc": pre["und"]["probe_acc"]}
        save_checkpoint(os.path.join(cfg.out_dir, "pretrained.pscs"), lm, vision,
                        meta={"stage": "pretrained", "config": cfg_doc})
    else:
        resume_opt = AdamW(lm.params, lr=0.0)
        meta = load_checkpoint(resume, lm, vision, opt=resume_opt)
        vision.freeze_all()
        if meta.get("stage") not in stage_names:
            raise CheckpointError(f"checkpoint stage {meta.get('stage')!r} not in pipeline")
        start_stage = stage_names.index(meta["stage"])
        start_step = int(meta.get("next_step", 0))
        mid_stage = start_step < cfg.stages[start_stage].steps
        if mid_stage and not meta["_opt_loaded"]:
            raise CheckpointError(f"{resume} lacks optimizer state for a mid-stage resume")
        if not mid_stage:
            resume_opt = None  # stage boundary: the next stage gets fresh moments
        if log:
            log(f"resuming at {meta['stage']} step {start_step}")

    digests = vision.digests()
    summary["frozen_digests"] = {"initial": digests}

    for si in range(start_stage, len(cfg.stages)):
        stage = cfg.stages[si]
        opt = resume_opt if si == start_stage and resume_opt is not None else None
        step0 = start_step if si == start_stage else 0
        stats = run_stage(lm, vision, stage, cfg.seed, cfg.out_dir,
                          start_step=step0, opt=opt, log=log,
                          meta_base={"seed": cfg.seed, "config": cfg_doc})
        summary["stages"][stage.name] = stats
        after = vision.digests()
        if after != digests:
            raise DataError(f"frozen tower digests changed during {stage.name}")
        summary["frozen_digests"][f"after_{stage.name}"] = after
        save_checkpoint(os.path.join(cfg.out_dir, f"after_{stage.name}.pscs"),
                        lm, vision, meta={"stage": stage.name, "next_step": stage.steps,
                                          "seed": cfg.seed, "config": cfg_doc})

    save_checkpoint(os.path.join(cfg.out_dir, "final.pscs"), lm, vision,
                    meta={"stage": "final", "seed": cfg.seed, "config": cfg_doc})
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def load_model(path):
    """Rebuild (lm, vision, meta) from a checkpoint that embeds its config."""
    entries = read_blobs(path)
    meta = json.loads(entries["meta"].decode())
    if "config" not in meta:
        raise CheckpointError(f"{path} does not embed a config; cannot rebuild models")
    cfg = config_from_dict(meta["config"])
    vision = VisionSystem(cfg.vision, cfg.seed)
    lm = LanguageModel(cfg.lm, cfg.vision, cfg.seed)
    meta = load_checkpoint(path, lm, vision)
    vision.freeze_all()
    return lm, vision, meta
