"""The three evaluation instruments, each pinned by an oracle before any
model output touches it:

  toy-FID      Fréchet distance between Gaussian fits of frozen-encoder
               features (checked against closed forms).
  gen probe    six compositional categories scored by the exact scene
               parser (ground-truth renders must score 1.0).
  QA accuracy  exact-match answers on held-out scenes.

Run:  python3 demos/06_evaluate.py [--ckpt runs/default/final.pscs]
"""

import argparse
import os

import numpy as np

from duovision import data as D
from duovision.config import VisionConfig
from duovision.encoders import VisionSystem
from duovision.evaluation import (FeatureSet, fid_score, frechet_distance,
                                  geneval_prompts, geneval_score_images,
                                  qa_accuracy, reference_scene, toy_fid,
                                  toy_geneval)
from duovision.training import load_model

parser = argparse.ArgumentParser()
parser.add_argument("--ckpt", default="runs/default/final.pscs")
args = parser.parse_args()

# 1. Fréchet closed form: diagonal Gaussians have an analytic distance.
mu_a, mu_b = np.zeros(3), np.array([1.0, 0.0, 2.0])
sd_a, sd_b = np.array([1.0, 2.0, 1.0]), np.array([2.0, 1.0, 1.0])
a = FeatureSet(mu=mu_a, sigma=np.diag(sd_a ** 2), n=100)
b = FeatureSet(mu=mu_b, sigma=np.diag(sd_b ** 2), n=100)
want = np.sum((mu_a - mu_b) ** 2) + np.sum((sd_a - sd_b) ** 2)
got = frechet_distance(a, b, ridge=0.0)
print(f"diagonal closed form: analytic {want:.6f}, computed {got:.6f}")

# 2. toy-FID sanity ladder on real renders through a frozen tower.
vision_probe = VisionSystem(VisionConfig(), seed=9)
vision_probe.freeze_all()
real = np.stack([D.render_scene(D.gen_scene(s)) for s in range(64)])
other = np.stack([D.render_scene(D.gen_scene(s)) for s in range(2000, 2064)])
print(f"toy-FID  same set:      {toy_fid(vision_probe, real, real):.6f}")
print(f"toy-FID  disjoint real: {toy_fid(vision_probe, real, other):.4f}")
print(f"toy-FID  shifted fake:  "
      f"{toy_fid(vision_probe, real, np.clip(other + 0.4, 0, 1)):.4f}")

# 3. Scorer ceiling: ground-truth renders ace every category.
items = geneval_prompts(seed=0, per_category=10)
renders = np.stack([D.render_scene(reference_scene(i)) for i in items])
report = geneval_score_images(items, renders)
print("\nground-truth generation probe:",
      {c: v for c, v in report["categories"].items()})

# 4. With a trained model, run the real thing.
if os.path.exists(args.ckpt):
    lm, vision, _ = load_model(args.ckpt)
    fid = fid_score(lm, vision, n=64, cfg_scale=1.0)
    probe = toy_geneval(lm, vision, per_category=10, cfg_scale=1.0)
    qa = qa_accuracy(lm, vision, n=100)
    print(f"\nmodel eval [{args.ckpt}]")
    print(f"  toy-FID {fid:.4f}")
    print(f"  gen probe overall {probe['overall']:.3f} "
          f"(single_object {probe['categories']['single_object']:.2f})")
    print(f"  QA accuracy {qa['accuracy']:.3f}")
else:
    print(f"\nno checkpoint at {args.ckpt}; train one with `duovision train` "
          f"or demos/04_training_pipeline.py")
