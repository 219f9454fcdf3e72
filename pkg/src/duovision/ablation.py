"""Four controlled ablations probing what the architecture claims.

Each experiment runs every variant under equal step budgets, identical
scene streams (the stream key depends on the experiment tag and step,
never the variant), and identical language-model initializations, over
several seeds; conclusions compare per-variant medians across seeds.

1. token_count   how hard the generation grid is pooled (64/16/4 vectors)
                 trades regression loss against decodable detail.
2. synergy       joint understanding+generation training versus
                 single-task specialists, matched for total steps.
3. caption_length generation supervision with positional long captions
                 versus bare short captions, from a shared early
                 checkpoint.
4. decoupling    a dedicated understanding tower versus reusing the
                 generation tower's (unpooled) features for both roles.
"""

import csv
import dataclasses
import json
import os
import statistics

import numpy as np

from . import tensor as T
from .config import LMConfig, PretrainConfig, StageConfig, VisionConfig
from .encoders import VisionSystem, pretrain_all, train_decoder_only
from .errors import UsageError
from .evaluation import fid_score, qa_accuracy, toy_geneval
from .model import LanguageModel, unified_loss
from .nn import AdamW, clip_grad_norm
from .training import build_batch, lr_at

ABLATIONS = ("token_count", "synergy", "caption_length", "decoupling")


@dataclasses.dataclass
class AblationConfig:
    seeds: tuple = (0, 1, 2)
    lm_steps: int = 250
    lm_batch: int = 8
    lm_lr: float = 3e-4
    schedule: str = "cosine_warmup"
    dec_steps: int = 500
    dec_denoise: int = 250
    fid_n: int = 64
    qa_n: int = 64
    geneval_per_category: int = 12
    cfg_scale: float = 1.0
    tail_frac: float = 0.1  # final-loss window
    pretrain: PretrainConfig = dataclasses.field(default_factory=PretrainConfig)


@dataclasses.dataclass
class AblationResult:
    name: str
    seeds: list
    metrics: dict   # variant -> metric -> {"per_seed": {...}, "median": float}
    verdicts: dict  # claim -> bool
    details: dict

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())


def _metric_table(per_variant: dict) -> dict:
    out = {}
    for variant, metric_map in per_variant.items():
        out[variant] = {}
        for metric, by_seed in metric_map.items():
            out[variant][metric] = {
                "per_seed": {str(s): v for s, v in by_seed.items()},
                "median": float(statistics.median(by_seed.values())),
            }
    return out


def _median(table, variant, metric):
    return table[variant][metric]["median"]


def pretrained_vision(seed: int, pc: PretrainConfig, cache: dict = None,
                      log=None) -> VisionSystem:
    """Standard-config pretrained towers, memoized per seed."""
    if cache is not None and seed in cache:
        return cache[seed]
    vision = VisionSystem(VisionConfig(), seed)
    pretrain_all(vision, pc, seed, log=log)
    if cache is not None:
        cache[seed] = vision
    return vision


def _train_lm(lm: LanguageModel, vision, stage: StageConfig, seed: int,
              tail_frac: float) -> dict:
    """Plain training loop; returns tail-averaged loss statistics."""
    opt = AdamW(lm.params, lr=stage.lr)
    tail = max(1, int(round(stage.steps * tail_frac)))
    objectives, ces, mses = [], [], []
    for step in range(stage.steps):
        batch = build_batch(vision, stage, seed, step)
        lm.params.zero_grad()
        with T.Tape() as tape:
            loss, report = unified_loss(lm, batch)
            tape.backward(loss)
        clip_grad_norm(lm.params, 1.0)
        opt.step(lr=lr_at(step, stage.steps, stage.lr, stage.schedule, stage.warmup_ratio))
        objectives.append(report.objective)
        ces.append(report.ce_mean)
        mses.append(report.mse_mean)
    return {"final_loss": float(np.mean(objectives[-tail:])),
            "final_ce": float(np.mean(ces[-tail:])),
            "final_mse": float(np.mean([m for m in mses[-tail:]]))}


def _fresh_lm(seed: int, vc: VisionConfig) -> LanguageModel:
    return LanguageModel(LMConfig(), vc, seed)


# --------------------------------------------------------------- 1: tokens


TOKEN_COUNT_STRIDES = (1, 2, 4)  # 64, 16, and 4 vectors per image


def run_token_count(cfg: AblationConfig, cache: dict = None, log=None) -> AblationResult:
    """Pooling ladder on a shared frozen tower with per-variant decoders."""
    per_variant = {f"m{(24 // VisionConfig().gen_patch // s) ** 2}": {"final_loss": {}, "final_mse": {},
                                                                      "geneval_overall": {}, "psnr_db": {}}
                   for s in TOKEN_COUNT_STRIDES}
    lm_digests = {}
    for seed in cfg.seeds:
        base = pretrained_vision(seed, cfg.pretrain, cache, log=log)
        for stride in TOKEN_COUNT_STRIDES:
            vc = VisionConfig(pool_stride=stride)
            variant = f"m{vc.gen_tokens}"
            vision = VisionSystem(vc, seed)
            vision.params.copy_from(base.params, "gen_enc")
            vision.params.copy_from(base.params, "und_enc")
            vision.params.freeze("und_enc")
            dec_stats = train_decoder_only(vision, cfg.pretrain, seed,
                                           steps=cfg.dec_steps, denoise_steps=cfg.dec_denoise)
            vision.freeze_all()
            lm = _fresh_lm(seed, vc)
            lm_digests.setdefault(seed, set()).add(lm.params.digest())
            stage = StageConfig(name="abl_tok", steps=cfg.lm_steps, batch=cfg.lm_batch,
                                lr=cfg.lm_lr, schedule=cfg.schedule, mix={"gen_long": 1.0})
            stats = _train_lm(lm, vision, stage, seed, cfg.tail_frac)
            probe = toy_geneval(lm, vision, seed=seed, per_category=cfg.geneval_per_category,
                                cfg_scale=cfg.cfg_scale)
            per_variant[variant]["final_loss"][seed] = stats["final_loss"]
            per_variant[variant]["final_mse"][seed] = stats["final_mse"]
            per_variant[variant]["geneval_overall"][seed] = probe["overall"]
            per_variant[variant]["psnr_db"][seed] = dec_stats["psnr_db"]
            if log:
                log(f"token_count seed {seed} {variant}: loss {stats['final_loss']:.4f} "
                    f"geneval {probe['overall']:.3f} psnr {dec_stats['psnr_db']:.1f}")
    table = _metric_table(per_variant)
    verdicts = {
        "more vectors are harder to regress (loss m64 > m16)":
            _median(table, "m64", "final_loss") > _median(table, "m16", "final_loss"),
        "heaviest pooling is easiest to regress (loss m4 lowest)":
            _median(table, "m4", "final_loss") < min(_median(table, "m16", "final_loss"),
                                                     _median(table, "m64", "final_loss")),
        "heaviest pooling generates worst (geneval m4 lowest)":
            _median(table, "m4", "geneval_overall") <= min(_median(table, "m16", "geneval_overall"),
                                                           _median(table, "m64", "geneval_overall")),
    }
    details = {"lm_init_digests_identical_per_seed": all(len(v) == 1 for v in lm_digests.values())}
    return AblationResult("token_count", list(cfg.seeds), table, verdicts, details)


# -------------------------------------------------------------- 2: synergy


SYNERGY_MIXES = {
    "joint": {"und_long": 0.4, "gen_long": 0.4, "und_qa": 0.2},
    "gen_only": {"gen_long": 1.0},
    "und_only": {"und_long": 0.8, "und_qa": 0.2},
}


def run_synergy(cfg: AblationConfig, cache: dict = None, log=None) -> AblationResult:
    """Joint training versus specialist training at equal total budget."""
    per_variant = {v: {"fid": {}, "qa": {}, "final_loss": {}} for v in SYNERGY_MIXES}
    digests = {}
    for seed in cfg.seeds:
        vision = pretrained_vision(seed, cfg.pretrain, cache, log=log)
        for variant, mix in SYNERGY_MIXES.items():
            lm = _fresh_lm(seed, vision.config)
            digests.setdefault(seed, set()).add(lm.params.digest())
            stage = StageConfig(name="abl_syn", steps=cfg.lm_steps, batch=cfg.lm_batch,
                                lr=cfg.lm_lr, schedule=cfg.schedule, mix=mix)
            stats = _train_lm(lm, vision, stage, seed, cfg.tail_frac)
            per_variant[variant]["final_loss"][seed] = stats["final_loss"]
            if "gen_long" in mix:
                per_variant[variant]["fid"][seed] = fid_score(
                    lm, vision, n=cfg.fid_n, cfg_scale=cfg.cfg_scale)
            if any(t.startswith("und") for t in mix):
                per_variant[variant]["qa"][seed] = qa_accuracy(
                    lm, vision, n=cfg.qa_n)["accuracy"]
            if log:
                shown = {m: f"{by[seed]:.4f}" for m, by in per_variant[variant].items()
                         if seed in by}
                log(f"synergy seed {seed} {variant}: {shown}")
    for variant in list(per_variant):
        per_variant[variant] = {m: by for m, by in per_variant[variant].items() if by}
    table = _metric_table(per_variant)
    verdicts = {
        "joint matches or beats the generation specialist (fid)":
            _median(table, "joint", "fid") <= _median(table, "gen_only", "fid"),
        "joint matches or beats the understanding specialist (qa)":
            _median(table, "joint", "qa") >= _median(table, "und_only", "qa"),
    }
    details = {"lm_init_digests_identical_per_seed": all(len(v) == 1 for v in digests.values())}
    return AblationResult("synergy", list(cfg.seeds), table, verdicts, details)


# ------------------------------------------------------- 3: caption length


def run_caption_length(cfg: AblationConfig, cache: dict = None, log=None) -> AblationResult:
    """Long positional captions versus short ones for generation training.

    Both variants resume from one shared first-phase checkpoint per seed
    and spend the same number of additional steps.
    """
    per_variant = {v: {"fid": {}} for v in ("long_captions", "short_captions")}
    for seed in cfg.seeds:
        vision = pretrained_vision(seed, cfg.pretrain, cache, log=log)
        lm = _fresh_lm(seed, vision.config)
        warm = StageConfig(name="abl_cap1", steps=cfg.lm_steps, batch=cfg.lm_batch,
                           lr=cfg.lm_lr, schedule=cfg.schedule,
                           mix={"gen_short": 0.5, "und_long": 0.5})
        _train_lm(lm, vision, warm, seed, cfg.tail_frac)
        shared = lm.params.state()
        for variant, gen_task in (("long_captions", "gen_long"),
                                  ("short_captions", "gen_short")):
            lm.params.load_state(shared)
            stage = StageConfig(name="abl_cap2", steps=cfg.lm_steps, batch=cfg.lm_batch,
                                lr=cfg.lm_lr, schedule=cfg.schedule,
                                mix={gen_task: 0.5, "und_long": 0.5})
            _train_lm(lm, vision, stage, seed, cfg.tail_frac)
            fid = fid_score(lm, vision, n=cfg.fid_n, cfg_scale=cfg.cfg_scale)
            per_variant[variant]["fid"][seed] = fid
            if log:
                log(f"caption_length seed {seed} {variant}: fid {fid:.4f}")
    table = _metric_table(per_variant)
    verdicts = {
        "positional captions improve generation (fid long < short)":
            _median(table, "long_captions", "fid") < _median(table, "short_captions", "fid"),
    }
    return AblationResult("caption_length", list(cfg.seeds), table, verdicts,
                          {"shared_first_phase": True})


# ----------------------------------------------------------- 4: decoupling


class SharedTowerView:
    """Vision facade that serves the generation tower's unpooled features
    wherever understanding features are requested."""

    def __init__(self, vision: VisionSystem):
        self._vision = vision
        self.config = vision.config
        self.params = vision.params

    def encode_und(self, images):
        return self._vision.gen(images)

    def encode_gen_pooled(self, images):
        return self._vision.encode_gen_pooled(images)

    def decode_image(self, pooled):
        return self._vision.decode_image(pooled)

    def digests(self):
        return self._vision.digests()


def run_decoupling(cfg: AblationConfig, cache: dict = None, log=None) -> AblationResult:
    """Dedicated understanding tower versus one tower for both roles."""
    mix = {"und_long": 0.3, "und_qa": 0.3, "gen_long": 0.4}
    per_variant = {v: {"fid": {}, "qa": {}} for v in ("decoupled", "shared_tower")}
    digests = {}
    for seed in cfg.seeds:
        vision = pretrained_vision(seed, cfg.pretrain, cache, log=log)
        for variant in ("decoupled", "shared_tower"):
            view = vision if variant == "decoupled" else SharedTowerView(vision)
            lm = _fresh_lm(seed, vision.config)
            digests.setdefault(seed, set()).add(lm.params.digest())
            stage = StageConfig(name="abl_dec", steps=cfg.lm_steps, batch=cfg.lm_batch,
                                lr=cfg.lm_lr, schedule=cfg.schedule, mix=mix)
            _train_lm(lm, view, stage, seed, cfg.tail_frac)
            qa = qa_accuracy(lm, view, n=cfg.qa_n)["accuracy"]
            fid = fid_score(lm, vision, n=cfg.fid_n, cfg_scale=cfg.cfg_scale)
            per_variant[variant]["qa"][seed] = qa
            per_variant[variant]["fid"][seed] = fid
            if log:
                log(f"decoupling seed {seed} {variant}: qa {qa:.3f} fid {fid:.4f}")
    table = _metric_table(per_variant)
    fid_dec = _median(table, "decoupled", "fid")
    fid_shared = _median(table, "shared_tower", "fid")
    verdicts = {
        "dedicated tower answers better (qa decoupled > shared)":
            _median(table, "decoupled", "qa") > _median(table, "shared_tower", "qa"),
        "generation quality stays comparable (relative fid gap <= 25%)":
            abs(fid_dec - fid_shared) / max(fid_dec, 1e-12) <= 0.25,
    }
    details = {"lm_init_digests_identical_per_seed": all(len(v) == 1 for v in digests.values()),
               "qa_eval_uses_each_variant_feature_path": True}
    return AblationResult("decoupling", list(cfg.seeds), table, verdicts, details)


# ----------------------------------------------------------------- runner


_RUNNERS = {
    "token_count": run_token_count,
    "synergy": run_synergy,
    "caption_length": run_caption_length,
    "decoupling": run_decoupling,
}


def run_ablation(name: str, cfg: AblationConfig = None, cache: dict = None,
                 log=None) -> AblationResult:
    if name not in _RUNNERS:
        raise UsageError(f"unknown ablation {name!r}; expected one of {sorted(_RUNNERS)}")
    return _RUNNERS[name](cfg or AblationConfig(), cache=cache, log=log)


def run_all(cfg: AblationConfig = None, cache: dict = None, log=None):
    cfg = cfg or AblationConfig()
    cache = {} if cache is None else cache
    return [run_ablation(name, cfg, cache, log) for name in ABLATIONS]


def write_reports(results, out_dir) -> None:
    """ablations.json (full nested) and ablations.csv (long format)."""
    os.makedirs(out_dir, exist_ok=True)
    doc = {r.name: {"seeds": r.seeds, "metrics": r.metrics, "verdicts": r.verdicts,
                    "passed": r.passed, "details": r.details} for r in results}
    with open(os.path.join(out_dir, "ablations.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "ablations.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ablation", "variant", "metric", "seed", "value"])
        for r in results:
            for variant, metric_map in r.metrics.items():
                for metric, cell in metric_map.items():
                    for seed, value in cell["per_seed"].items():
                        writer.writerow([r.name, variant, metric, seed, value])
                    writer.writerow([r.name, variant, metric, "median", cell["median"]])
