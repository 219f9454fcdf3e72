"""Evaluation: a Fréchet feature distance for generated images, a
six-category compositional generation probe, and QA accuracy.

The Fréchet metric fits Gaussians to mean-pooled frozen understanding
features (one 32-d vector per image) of a real and a generated set and
computes d^2 = |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
Both covariance matrices get a small ridge before the matrix square
roots, and the square roots are taken through symmetric
eigendecompositions with eigenvalues clamped at zero.

The generation probe renders nothing itself: it asks the model for
pixels, then re-parses them with the same scene parser the dataset uses
and checks a per-category predicate. Ground-truth renders must score
1.0 everywhere, which pins the scorer before any model touches it.
"""

import dataclasses

import numpy as np

from . import data as D
from .errors import DimensionError, UsageError
from .inference import answer_questions, generate_images
from .rng import substream


def scene_features(vision, images: np.ndarray, batch: int = 64) -> np.ndarray:
    """Mean-pooled understanding features, one row per image."""
    rows = []
    for lo in range(0, len(images), batch):
        feats = vision.encode_und(images[lo:lo + batch]).data
        rows.append(feats.mean(axis=1))
    return np.concatenate(rows, axis=0).astype(np.float64)


@dataclasses.dataclass
class FeatureSet:
    mu: np.ndarray
    sigma: np.ndarray
    n: int


def fit_features(features: np.ndarray) -> FeatureSet:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise DimensionError(f"need [n>=2, d] features, got {x.shape}")
    mu = x.mean(axis=0)
    xc = x - mu
    sigma = xc.T @ xc / (len(x) - 1)
    return FeatureSet(mu=mu, sigma=sigma, n=len(x))


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(mat)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureSet, b: FeatureSet, ridge: float = 1e-6) -> float:
    """Squared Fréchet distance between Gaussian fits, ridge-stabilized."""
    if a.mu.shape != b.mu.shape:
        raise DimensionError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    eye = np.eye(len(a.mu))
    sa = a.sigma + ridge * eye
    sb = b.sigma + ridge * eye
    root_a = _psd_sqrt(sa)
    inner = root_a @ sb @ root_a
    w = np.linalg.eigvalsh(inner)
    tr_geo = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))
    diff = a.mu - b.mu
    d2 = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_geo)
    return max(d2, 0.0)


def toy_fid(vision, real_images: np.ndarray, fake_images: np.ndarray,
            ridge: float = 1e-6) -> float:
    real = fit_features(scene_features(vision, real_images))
    fake = fit_features(scene_features(vision, fake_images))
    return frechet_distance(real, fake, ridge)


def fid_prompt_set(n: int, split: str = "val"):
    """Held-out scenes with their long captions as generation prompts."""
    seeds = list(D.split_range(split))[:n]
    scenes = [D.gen_scene(s) for s in seeds]
    real = np.stack([D.render_scene(s) for s in scenes])
    prompts = [D.caption_long(s) for s in scenes]
    return real, prompts


def fid_score(lm, vision, n: int = 200, cfg_scale: float = 1.0,
              split: str = "val", batch: int = 32) -> float:
    real, prompts = fid_prompt_set(n, split)
    fake = generate_images(lm, vision, prompts, cfg_scale, batch=batch)
    return toy_fid(vision, real, fake)


# ------------------------------------------------------- generation probe


GENEVAL_CATEGORIES = ("single_object", "colors", "two_object", "counting",
                      "position", "color_attribution")


@dataclasses.dataclass
class GenEvalItem:
    category: str
    prompt: str
    spec: dict


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def geneval_prompts(seed: int = 0, per_category: int = 25):
    """Deterministic prompt list covering all six categories."""
    items = []
    for ci, category in enumerate(GENEVAL_CATEGORIES):
        rng = substream(seed, "geneval", ci)
        for _ in range(per_category):
            if category in ("single_object", "colors"):
                shape, color = _pick(rng, D.SHAPE_NAMES), _pick(rng, D.COLOR_NAMES)
                prompt = f"a {color} {shape}"
                spec = {"shape": shape, "color": color}
            elif category in ("two_object", "color_attribution"):
                s1 = _pick(rng, D.SHAPE_NAMES)
                s2 = _pick(rng, [s for s in D.SHAPE_NAMES if s != s1])
                c1 = _pick(rng, D.COLOR_NAMES)
                c2 = _pick(rng, [c for c in D.COLOR_NAMES if c != c1])
                prompt = f"a {c1} {s1} and a {c2} {s2}"
                spec = {"shape1": s1, "color1": c1, "shape2": s2, "color2": c2}
            elif category == "counting":
                shape = _pick(rng, D.SHAPE_NAMES)
                n = int(rng.integers(2, 5))
                prompt = f"{n} {D.SHAPE_PLURALS[shape]}"
                spec = {"shape": shape, "n": n}
            else:  # position
                shape, color = _pick(rng, D.SHAPE_NAMES), _pick(rng, D.COLOR_NAMES)
                row, col = _pick(rng, D.ROW_NAMES), _pick(rng, D.COL_NAMES)
                prompt = f"a {color} {shape} in the {row} {col}"
                spec = {"shape": shape, "color": color, "row": row, "col": col}
            items.append(GenEvalItem(category, prompt, spec))
    return items


def geneval_score_scene(item: GenEvalItem, scene: D.Scene) -> bool:
    """Predicate per category over a parsed scene."""
    s, objs = item.spec, scene.objects
    if item.category == "single_object":
        return any(o.shape == s["shape"] for o in objs)
    if item.category == "colors":
        return any(o.shape == s["shape"] and o.color == s["color"] for o in objs)
    if item.category == "two_object":
        return (any(o.shape == s["shape1"] for o in objs)
                and any(o.shape == s["shape2"] for o in objs))
    if item.category == "counting":
        return sum(o.shape == s["shape"] for o in objs) == s["n"]
    if item.category == "position":
        return any(o.shape == s["shape"] and o.color == s["color"]
                   and o.row == D.ROW_NAMES.index(s["row"])
                   and o.col == D.COL_NAMES.index(s["col"]) for o in objs)
    if item.category == "color_attribution":
        return (any(o.shape == s["shape1"] and o.color == s["color1"] for o in objs)
                and any(o.shape == s["shape2"] and o.color == s["color2"] for o in objs))
    raise UsageError(f"unknown category {item.category!r}")


def geneval_score_images(items, images: np.ndarray) -> dict:
    """Pure re-scoring: parse each image and apply its item's predicate."""
    if len(items) != len(images):
        raise UsageError(f"{len(items)} items vs {len(images)} images")
    per_cat = {c: [] for c in GENEVAL_CATEGORIES}
    results = []
    for item, img in zip(items, images):
        ok = geneval_score_scene(item, D.parse_scene(img))
        per_cat[item.category].append(ok)
        results.append(ok)
    categories = {c: float(np.mean(v)) if v else 0.0 for c, v in per_cat.items()}
    present = [c for c, v in per_cat.items() if v]
    return {"categories": categories,
            "overall": float(np.mean([categories[c] for c in present])),
            "per_item": results}


def reference_scene(item: GenEvalItem, seed: int = 0) -> D.Scene:
    """A scene that satisfies the item's predicate by construction."""
    rng = substream(seed, "geneval_ref/" + item.prompt)
    s = item.spec
    if item.category == "counting":
        colors = [_pick(rng, D.COLOR_NAMES) for _ in range(s["n"])]
        wanted = [(s["shape"], c) for c in colors]
    elif item.category in ("two_object", "color_attribution"):
        wanted = [(s["shape1"], s["color1"]), (s["shape2"], s["color2"])]
    elif item.category == "position":
        wanted = [(s["shape"], s["color"])]
    else:
        wanted = [(s["shape"], s["color"])]
    background = _pick(rng, [c for c in D.COLOR_NAMES
                             if c not in {color for _, color in wanted}])
    cells = rng.choice(D.GRID * D.GRID, size=len(wanted), replace=False)
    if item.category == "position":
        cells = [D.ROW_NAMES.index(s["row"]) * D.GRID + D.COL_NAMES.index(s["col"])]
    objects = [D.SceneObject(int(cell) // D.GRID, int(cell) % D.GRID, shape, color)
               for cell, (shape, color) in zip(sorted(int(c) for c in cells), wanted)]
    return D.Scene(background, tuple(objects))


def toy_geneval(lm, vision, seed: int = 0, per_category: int = 25,
                cfg_scale: float = 1.0, batch: int = 32) -> dict:
    items = geneval_prompts(seed, per_category)
    images = generate_images(lm, vision, [i.prompt for i in items], cfg_scale, batch=batch)
    report = geneval_score_images(items, images)
    report["per_category_n"] = per_category
    report["cfg_scale"] = cfg_scale
    return report


# ------------------------------------------------------------ QA accuracy


def qa_accuracy(lm, vision, n: int = 200, split: str = "test", batch: int = 32,
                max_tokens: int = 8) -> dict:
    """Exact-match accuracy on held-out scene questions."""
    seeds = list(D.split_range(split))[:n]
    scenes = [D.gen_scene(s) for s in seeds]
    images = np.stack([D.render_scene(s) for s in scenes])
    qa = [D.make_qa(scene, seed) for scene, seed in zip(scenes, seeds)]
    correct, records = [], []
    for lo in range(0, n, batch):
        hi = min(lo + batch, n)
        prompts = [q for q, _ in qa[lo:hi]]
        answers = answer_questions(lm, vision, images[lo:hi], prompts, max_tokens=max_tokens)
        for (question, truth), predicted in zip(qa[lo:hi], answers):
            ok = predicted.strip() == truth
            correct.append(ok)
            records.append({"question": question, "truth": truth,
                            "predicted": predicted, "correct": ok})
    return {"accuracy": float(np.mean(correct)), "n": n, "records": records}
