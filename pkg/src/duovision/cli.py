"""Command-line front end.

Subcommands: synth, pretrain-encoders, train, generate, eval, ablate,
gradcheck. Every run writes a run_manifest.json into its output
directory at start (status "running") and finalizes it on exit.

Exit codes: 0 success; 2 usage or configuration problems (bad flags,
bad config values, malformed inputs); 3 numerical failures (non-finite
values, gradient-check or pretraining quality below floor).
"""

import argparse
import dataclasses
import datetime
import json
import os
import sys
import time

import numpy as np
import scipy

from . import __version__
from . import data as D
from . import tensor as T
from .ablation import ABLATIONS, AblationConfig, run_ablation, write_reports
from .config import RunConfig, apply_overrides, load_toml, to_dict
from .encoders import VisionSystem, pretrain_all
from .errors import (CheckpointError, ConfigurationError, DataError, DimensionError,
                     DuovisionError, NumericalError, PretrainingError, TruncationError,
                     UsageError)
from .evaluation import fid_score, qa_accuracy, toy_geneval
from .inference import append_transcript, generate_image, write_png, write_ppm
from .training import load_model, run_pipeline

USAGE_ERRORS = (UsageError, ConfigurationError, DataError, DimensionError,
                CheckpointError, TruncationError)
NUMERIC_ERRORS = (NumericalError, PretrainingError)


class Manifest:
    def __init__(self, out_dir: str, command: str, config: dict = None):
        os.makedirs(out_dir, exist_ok=True)
        self.path = os.path.join(out_dir, "run_manifest.json")
        self.doc = {
            "command": command,
            "argv": sys.argv[1:],
            "config": config,
            "package_version": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "started_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "status": "running",
            "outputs": [],
        }
        self._write()

    def _write(self):
        with open(self.path, "w") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)

    def add_output(self, path):
        self.doc["outputs"].append(str(path))
        self._write()

    def finish(self, status: str, **extra):
        self.doc["status"] = status
        self.doc["finished_at"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        self.doc.update(extra)
        self._write()


def _load_config(args) -> RunConfig:
    cfg = load_toml(args.config) if args.config else RunConfig()
    if args.set:
        apply_overrides(cfg, args.set)
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    return cfg


def _log(msg):
    print(msg, flush=True)


def cmd_synth(args) -> int:
    out_dir = args.out_dir or "runs/synth"
    manifest = Manifest(out_dir, "synth")
    path = os.path.join(out_dir, f"{args.split}.jsonl")
    n = D.write_manifest(path, args.split, limit=args.limit)
    manifest.add_output(path)
    if args.png_count:
        seeds = list(D.split_range(args.split))[:args.png_count]
        for seed in seeds:
            img_path = os.path.join(out_dir, f"scene_{seed}.png")
            write_png(img_path, D.render_scene(D.gen_scene(seed)))
            manifest.add_output(img_path)
    manifest.finish("ok", rows=n)
    _log(f"wrote {n} records to {path}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    manifest = Manifest(cfg.out_dir, "pretrain-encoders", to_dict(cfg))
    try:
        vision = VisionSystem(cfg.vision, cfg.seed)
        stats = pretrain_all(vision, cfg.pretrain, cfg.seed, log=_log)
        from .model import LanguageModel
        from .training import save_checkpoint
        lm = LanguageModel(cfg.lm, cfg.vision, cfg.seed)
        path = os.path.join(cfg.out_dir, "pretrained.pscs")
        save_checkpoint(path, lm, vision, meta={"stage": "pretrained", "config": to_dict(cfg)})
        manifest.add_output(path)
        stats_path = os.path.join(cfg.out_dir, "pretrain_stats.json")
        with open(stats_path, "w") as fh:
            json.dump({"gen": {k: v for k, v in stats["gen"].items()},
                       "und": {k: v for k, v in stats["und"].items()},
                       "digests": stats["digests"]}, fh, indent=2, sort_keys=True, default=float)
        manifest.add_output(stats_path)
        manifest.finish("ok", psnr_db=stats["gen"]["psnr_db"], probe_acc=stats["und"]["probe_acc"])
        _log(f"pretraining done: psnr {stats['gen']['psnr_db']:.2f} dB, "
             f"probe acc {stats['und']['probe_acc']:.3f}")
        return 0
    except Exception:
        manifest.finish("error")
        raise


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = Manifest(cfg.out_dir, "train", to_dict(cfg))
    try:
        summary = run_pipeline(cfg, log=_log, resume=args.resume)
        for name in ("final.pscs", "summary.json"):
            manifest.add_output(os.path.join(cfg.out_dir, name))
        manifest.finish("ok", stages={k: v for k, v in summary["stages"].items()})
        return 0
    except Exception:
        manifest.finish("error")
        raise


def cmd_generate(args) -> int:
    out_dir = args.out_dir or "runs/generate"
    manifest = Manifest(out_dir, "generate")
    try:
        lm, vision, _ = load_model(args.ckpt)
        img = generate_image(lm, vision, args.caption, cfg_scale=args.cfg_scale)
        stem = args.name or "generated"
        written = []
        png_path = os.path.join(out_dir, stem + ".png")
        write_png(png_path, img)
        written.append(png_path)
        if args.ppm:
            ppm_path = os.path.join(out_dir, stem + ".ppm")
            write_ppm(ppm_path, img)
            written.append(ppm_path)
        record = {"kind": "generate_image", "caption": args.caption,
                  "cfg_scale": args.cfg_scale,
                  "n_vectors": lm.vision_config.gen_tokens,
                  "outputs": written, "checkpoint": args.ckpt,
                  "parsed": dataclasses.asdict(D.parse_scene(img))}
        append_transcript(os.path.join(out_dir, "transcript.jsonl"), record)
        for p in written:
            manifest.add_output(p)
        manifest.finish("ok")
        _log(f"wrote {', '.join(written)}")
        return 0
    except Exception:
        manifest.finish("error")
        raise


def cmd_eval(args) -> int:
    out_dir = args.out_dir or "runs/eval"
    manifest = Manifest(out_dir, "eval")
    try:
        lm, vision, meta = load_model(args.ckpt)
        suites = args.suite.split(",") if args.suite else ["fid", "geneval", "qa"]
        report = {"checkpoint": args.ckpt, "stage": meta.get("stage")}
        if "fid" in suites:
            report["fid"] = fid_score(lm, vision, n=args.fid_n, cfg_scale=args.cfg_scale)
            _log(f"fid {report['fid']:.4f}")
        if "geneval" in suites:
            probe = toy_geneval(lm, vision, per_category=args.geneval_n,
                                cfg_scale=args.cfg_scale)
            report["geneval"] = {"categories": probe["categories"],
                                 "overall": probe["overall"]}
            _log("geneval " + json.dumps(probe["categories"], sort_keys=True))
        if "qa" in suites:
            qa = qa_accuracy(lm, vision, n=args.qa_n)
            report["qa_accuracy"] = qa["accuracy"]
            _log(f"qa accuracy {qa['accuracy']:.3f}")
        path = os.path.join(out_dir, "eval.json")
        with open(path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        manifest.add_output(path)
        manifest.finish("ok")
        return 0
    except Exception:
        manifest.finish("error")
        raise


def cmd_ablate(args) -> int:
    out_dir = args.out_dir or "runs/ablations"
    manifest = Manifest(out_dir, "ablate")
    try:
        cfg = AblationConfig()
        if args.seeds:
            cfg.seeds = tuple(int(s) for s in args.seeds.split(","))
        if args.steps:
            cfg.lm_steps = args.steps
        names = list(ABLATIONS) if args.name == "all" else [args.name]
        cache = {}
        results = [run_ablation(name, cfg, cache, log=_log) for name in names]
        write_reports(results, out_dir)
        manifest.add_output(os.path.join(out_dir, "ablations.json"))
        manifest.add_output(os.path.join(out_dir, "ablations.csv"))
        ok = all(r.passed for r in results)
        for r in results:
            for claim, passed in r.verdicts.items():
                _log(f"[{'pass' if passed else 'FAIL'}] {r.name}: {claim}")
        manifest.finish("ok" if ok else "verdicts_failed")
        return 0 if ok else 3
    except Exception:
        manifest.finish("error")
        raise


def _gradcheck_battery(n_extra: int = 0):
    """Composite graphs over the op set, checked in float64."""
    rng = np.random.default_rng(7)

    def leaf(*shape):
        return T.Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)

    checks = []

    def mlp_case():
        x, w1, b1, w2 = leaf(3, 5), leaf(5, 7), leaf(7), leaf(7, 2)
        def f(x, w1, b1, w2):
            return T.mean_(T.mul(T.matmul(T.gelu(T.add(T.matmul(x, w1), b1)), w2),
                                 T.matmul(T.gelu(T.add(T.matmul(x, w1), b1)), w2)))
        return f, [x, w1, b1, w2]
    checks.append(("mlp", mlp_case))

    def norm_softmax_case():
        x, g, b = leaf(4, 6), leaf(6), leaf(6)
        def f(x, g, b):
            return T.sum_(T.mul(T.softmax(T.layer_norm(x, g, b), axis=-1),
                                T.log_softmax(x, axis=-1))) / 24.0
        return f, [x, g, b]
    checks.append(("norm_softmax", norm_softmax_case))

    def pool_case():
        x = leaf(2, 4, 4, 3)
        def f(x):
            y = T.avg_pool2d(x, 2)
            return T.mean_(T.mul(y, y))
        return f, [x]
    checks.append(("pool", pool_case))

    def gather_place_case():
        tab, rows = leaf(9, 4), leaf(2, 2, 4)
        ids = np.array([[0, 2, 4, 6], [1, 3, 5, 7]])
        pos = np.array([[0, 2], [1, 3]])
        def f(tab, rows):
            e = T.place_rows(T.gather(tab, ids), rows, pos)
            return T.mean_(T.take_along_last(T.log_softmax(e, axis=-1),
                                             np.array([[0, 1, 2, 3], [3, 2, 1, 0]])))
        return f, [tab, rows]
    checks.append(("gather_place", gather_place_case))

    def shapes_case():
        a, b = leaf(3, 4), leaf(3, 4)
        def f(a, b):
            c = T.concat([a, b], axis=1)
            d = T.narrow(T.transpose(c), 0, 1, 5)
            return T.mean_(T.mul(T.reshape(d, (15,)), T.reshape(d, (15,))))
        return f, [a, b]
    checks.append(("shapes", shapes_case))

    for i in range(n_extra):
        def attn_case(i=i):
            q = leaf(2, 3, 4)
            k = leaf(2, 3, 4)
            v = leaf(2, 3, 4)
            def f(q, k, v):
                scores = T.scale(T.matmul(q, T.transpose(k)), 0.5)
                return T.mean_(T.matmul(T.softmax(scores, axis=-1), v))
            return f, [q, k, v]
        checks.append((f"attention_{i}", attn_case))
    return checks


def cmd_gradcheck(args) -> int:
    t0 = time.time()
    worst_overall = 0.0
    for name, case in _gradcheck_battery(args.extra):
        fn, leaves = case()
        worst = T.gradcheck(fn, leaves, tol=args.tol)
        worst_overall = max(worst_overall, worst)
        _log(f"gradcheck {name}: worst rel err {worst:.3e}")
    _log(f"all gradchecks passed in {time.time() - t0:.1f}s (max {worst_overall:.3e})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duovision",
                                     description="Train and probe a small two-tower "
                                                 "multimodal language model on synthetic scenes.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write scene dataset manifests (and sample images)")
    p.add_argument("--split", default="train", choices=sorted(D.SPLIT_RANGES))
    p.add_argument("--limit", type=int, default=1000)
    p.add_argument("--png-count", type=int, default=0)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_synth)

    for name, fn in (("pretrain-encoders", cmd_pretrain), ("train", cmd_train)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML config path")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out-dir", default=None)
        if name == "train":
            p.add_argument("--resume", default=None, help="checkpoint to resume from")
        p.set_defaults(fn=fn)

    p = sub.add_parser("generate", help="caption to image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--cfg-scale", type=float, default=1.5)
    p.add_argument("--name", default=None)
    p.add_argument("--ppm", action="store_true", help="also write a PPM copy")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("eval", help="fid / generation probe / qa")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", default=None, help="comma list: fid,geneval,qa")
    p.add_argument("--fid-n", type=int, default=200)
    p.add_argument("--geneval-n", type=int, default=25)
    p.add_argument("--qa-n", type=int, default=200)
    p.add_argument("--cfg-scale", type=float, default=1.5)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate")
    p.add_argument("--name", default="all", choices=list(ABLATIONS) + ["all"])
    p.add_argument("--seeds", default=None, help="comma list, default 0,1,2")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--extra", type=int, default=1, help="extra attention-shaped cases")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except AssertionError as exc:  # gradcheck tolerance failures
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
