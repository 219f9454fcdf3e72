"""Pretrain the two vision towers at a small budget and inspect what they
learned: the generation tower by round-tripping held-out scenes through
encode -> pool -> decode, the understanding tower by its probe accuracy.

The budgets here are cut to about a third of the defaults so the demo
finishes in a couple of minutes; the quality floors are disabled to
match. The default budgets (and their calibrated floors) live in
configs/default.toml.

Run:  python3 demos/03_pretrain_encoders.py
"""

import numpy as np

from duovision import data as D
from duovision.config import PretrainConfig, VisionConfig
from duovision.encoders import VisionSystem, pretrain_all, psnr

pc = PretrainConfig(gen_steps=400, denoise_steps=200, und_steps=300,
                    psnr_floor=0.0, acc_floor=0.0, eval_n=32)
vision = VisionSystem(VisionConfig(), seed=0)
stats = pretrain_all(vision, pc, seed=0, log=print)

print(f"\ngeneration tower: held-out PSNR {stats['gen']['psnr_db']:.2f} dB")
print(f"understanding tower: color probe {stats['und']['color_acc']:.3f}, "
      f"shape probe {stats['und']['shape_acc']:.3f}")
print(f"digests: {stats['digests']}")

# Auto-encode a few held-out scenes and re-parse the reconstructions.
# The pooled bottleneck is 16 vectors of 32 dims for 1728 pixels, so the
# reconstruction is lossy but should stay semantically exact.
seeds = list(D.split_range("val"))[:24]
scenes = [D.gen_scene(s) for s in seeds]
images = np.stack([D.render_scene(s) for s in scenes])
recon = vision.decode_image(vision.encode_gen_pooled(images).data)
exact = sum(D.parse_scene(r) == s for r, s in zip(recon, scenes))
print(f"\nencode->pool->decode on {len(seeds)} held-out scenes:")
print(f"  per-image PSNR {psnr(images, recon):.2f} dB")
print(f"  semantic round trip {exact}/{len(seeds)} parse back exactly")

# Freezing is permanent: the digests cannot change after pretrain_all.
digests = vision.digests()
assert not any(t.requires_grad for _, t in vision.params.items())
print(f"\nencoders frozen; digests und_enc={digests['und_enc']} "
      f"gen_enc={digests['gen_enc']}")
