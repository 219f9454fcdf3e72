"""Synthetic scene world: rendering, parsing, captions, QA, and the vocabulary.

A scene is a 3x3 grid of 8x8-pixel cells on a 24x24 RGB canvas. Each cell
holds at most one object (square, circle, or triangle) drawn in one of
eight palette colors with a one-pixel margin, so the outermost pixel ring
of the image is always pure background. The palette sits on the corners
of the RGB cube, which keeps nearest-palette classification immune to
amplitude-0.05 pixel noise (the closest pair of colors is a full channel
apart).

Everything downstream consumes this module: pretraining labels, caption
and QA supervision, generation targets, and both evaluators' scoring
(which re-parses generated pixels with `parse_scene`).
"""

import dataclasses
import json

import numpy as np

from .errors import DataError
from .rng import substream

IMAGE_SIDE = 24
GRID = 3
CELL = 8

COLOR_NAMES = ["red", "green", "blue", "yellow", "cyan", "magenta", "white", "black"]
COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
PALETTE = np.array([COLOR_RGB[name] for name in COLOR_NAMES], dtype=np.float32)

SHAPE_NAMES = ["square", "circle", "triangle"]
SHAPE_PLURALS = {"square": "squares", "circle": "circles", "triangle": "triangles"}
ROW_NAMES = ["top", "middle", "bottom"]
COL_NAMES = ["left", "center", "right"]

MAX_OBJECTS = 4
_COUNT_WEIGHTS = np.array([0.06, 0.30, 0.28, 0.22, 0.14])


def _build_masks():
    sq = np.zeros((CELL, CELL), dtype=bool)
    sq[1:7, 1:7] = True  # 36 px

    ci = np.zeros((CELL, CELL), dtype=bool)
    ii, jj = np.mgrid[0:CELL, 0:CELL]
    ci[(ii - 3.5) ** 2 + (jj - 3.5) ** 2 <= 9.0] = True  # 32 px disk

    tr = np.zeros((CELL, CELL), dtype=bool)
    for k, width in enumerate((2, 2, 4, 4, 6, 6)):  # 24 px wedge
        lo = (CELL - width) // 2
        tr[1 + k, lo:lo + width] = True
    return {"square": sq, "circle": ci, "triangle": tr}


SHAPE_MASKS = _build_masks()


@dataclasses.dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    shape: str
    color: str


@dataclasses.dataclass(frozen=True)
class Scene:
    background: str
    objects: tuple

    @property
    def count(self):
        return len(self.objects)


def gen_scene(seed: int) -> Scene:
    """Deterministic scene draw; object order is row-major by cell."""
    rng = substream(seed, "scene")
    background = COLOR_NAMES[rng.integers(len(COLOR_NAMES))]
    n = int(rng.choice(MAX_OBJECTS + 1, p=_COUNT_WEIGHTS))
    cells = sorted(rng.choice(GRID * GRID, size=n, replace=False).tolist())
    others = [c for c in COLOR_NAMES if c != background]
    objects = []
    for cell in cells:
        shape = SHAPE_NAMES[rng.integers(len(SHAPE_NAMES))]
        color = others[rng.integers(len(others))]
        objects.append(SceneObject(cell // GRID, cell % GRID, shape, color))
    return Scene(background, tuple(objects))


def render_scene(scene: Scene) -> np.ndarray:
    """Exact palette-valued render, float32 [24, 24, 3] in [0, 1]."""
    img = np.empty((IMAGE_SIDE, IMAGE_SIDE, 3), dtype=np.float32)
    img[:] = COLOR_RGB[scene.background]
    for obj in scene.objects:
        mask = SHAPE_MASKS[obj.shape]
        r0, c0 = obj.row * CELL, obj.col * CELL
        img[r0:r0 + CELL, c0:c0 + CELL][mask] = COLOR_RGB[obj.color]
    return img


def noisy_render(scene: Scene, seed: int, amp: float = 0.05) -> np.ndarray:
    """Render plus uniform pixel noise, clipped to [0, 1].

    Amplitude must stay below half the minimum palette separation (0.5)
    or nearest-palette votes could flip.
    """
    rng = substream(seed, "noise")
    img = render_scene(scene) + rng.uniform(-amp, amp, size=(IMAGE_SIDE, IMAGE_SIDE, 3)).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def nearest_palette(img: np.ndarray) -> np.ndarray:
    """Index of the closest palette color per pixel, int array [H, W]."""
    d2 = np.sum((img[..., None, :] - PALETTE[None, None]) ** 2, axis=-1)
    return np.argmin(d2, axis=-1)


_MASK_NORMS = {name: np.sqrt(float(m.sum())) for name, m in SHAPE_MASKS.items()}
SHAPE_SCORE_FLOOR = 0.6


def _classify_mask(mask: np.ndarray):
    """Normalized overlap against the three templates; None below floor."""
    n = float(mask.sum())
    if n == 0.0:
        return None
    best, best_score = None, -1.0
    for name, tmpl in SHAPE_MASKS.items():
        score = float(np.logical_and(mask, tmpl).sum()) / (np.sqrt(n) * _MASK_NORMS[name])
        if score > best_score:
            best, best_score = name, score
    return best if best_score >= SHAPE_SCORE_FLOOR else "unknown"


MIN_OBJECT_PIXELS = 12  # half the smallest template (triangle, 24 px)


def parse_scene(img: np.ndarray) -> Scene:
    """Recover a Scene from pixels.

    Background is the border-ring majority; a cell holds an object when
    at least MIN_OBJECT_PIXELS of it disagree with the background, its
    color is the majority non-background vote, and its shape is the best
    template above the score floor (else "unknown").
    """
    if img.shape != (IMAGE_SIDE, IMAGE_SIDE, 3):
        raise DataError(f"expected image [24, 24, 3], got {img.shape}")
    idx = nearest_palette(img)
    ring = np.concatenate([idx[0], idx[-1], idx[1:-1, 0], idx[1:-1, -1]])
    bg_idx = int(np.bincount(ring, minlength=len(COLOR_NAMES)).argmax())
    objects = []
    for r in range(GRID):
        for c in range(GRID):
            cell = idx[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL]
            mask = cell != bg_idx
            if int(mask.sum()) < MIN_OBJECT_PIXELS:
                continue
            votes = np.bincount(cell[mask], minlength=len(COLOR_NAMES))
            color = COLOR_NAMES[int(votes.argmax())]
            shape = _classify_mask(mask)
            objects.append(SceneObject(r, c, shape, color))
    return Scene(COLOR_NAMES[bg_idx], tuple(objects))


# ------------------------------------------------------------------ language


def caption_short(scene: Scene) -> str:
    if not scene.objects:
        return f"an empty {scene.background} image"
    return " and ".join(f"a {o.color} {o.shape}" for o in scene.objects)


def caption_long(scene: Scene) -> str:
    if not scene.objects:
        return f"an empty {scene.background} image with no objects"
    noun = "object" if scene.count == 1 else "objects"
    parts = [f"a {o.color} {o.shape} in the {ROW_NAMES[o.row]} {COL_NAMES[o.col]}"
             for o in scene.objects]
    return f"a {scene.background} image with {scene.count} {noun} : " + " and ".join(parts)


GEN_INSTRUCTION = "please generate an image based on the following caption :"
UND_DESCRIBE_PROMPT = "provide a detailed description of the given image ."


def _unique_shapes(scene: Scene):
    counts = {}
    for o in scene.objects:
        counts[o.shape] = counts.get(o.shape, 0) + 1
    return [s for s, n in counts.items() if n == 1]


def make_qa(scene: Scene, seed: int):
    """One deterministic question/answer pair about the scene."""
    rng = substream(seed, "qa")
    kind = int(rng.integers(4))
    unique = _unique_shapes(scene)
    if kind == 0 and unique:
        shape = unique[int(rng.integers(len(unique)))]
        color = next(o.color for o in scene.objects if o.shape == shape)
        return f"what color is the {shape} ?", color
    if kind == 2:
        color = COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
        shape = SHAPE_NAMES[int(rng.integers(len(SHAPE_NAMES)))]
        present = any(o.color == color and o.shape == shape for o in scene.objects)
        return f"is there a {color} {shape} ?", "yes" if present else "no"
    if kind == 3 and unique:
        shape = unique[int(rng.integers(len(unique)))]
        obj = next(o for o in scene.objects if o.shape == shape)
        return f"where is the {shape} ?", f"{ROW_NAMES[obj.row]} {COL_NAMES[obj.col]}"
    return "how many objects are there ?", str(scene.count)


class TokenVocab:
    """Closed word-level vocabulary; every template word is enumerated here."""

    SPECIALS = ["[BOS]", "[EOS]", "[PAD]", "[IMG]", "[/IMG]"]

    def __init__(self):
        words = list(self.SPECIALS)
        words += COLOR_NAMES
        words += SHAPE_NAMES
        words += [SHAPE_PLURALS[s] for s in SHAPE_NAMES]
        words += ROW_NAMES + COL_NAMES
        words += [str(i) for i in range(MAX_OBJECTS + 1)]
        words += ["a", "an", "and", "with", "image", "empty", "no",
                  "objects", "object", "the", "in", "is"]
        words += ["what", "color", "how", "many", "are", "there", "where", "yes", "?"]
        words += ["please", "generate", "based", "on", "following", "caption", ":"]
        words += ["provide", "detailed", "description", "of", "given", "."]
        if len(set(words)) != len(words):
            raise DataError("vocabulary has duplicate words")
        if len(words) > 256:
            raise DataError(f"vocabulary too large: {len(words)}")
        self.words = words
        self._ids = {w: i for i, w in enumerate(words)}
        self.bos, self.eos, self.pad = self._ids["[BOS]"], self._ids["[EOS]"], self._ids["[PAD]"]
        self.img, self.img_end = self._ids["[IMG]"], self._ids["[/IMG]"]

    def __len__(self):
        return len(self.words)

    def encode(self, text: str):
        ids = []
        for word in text.split():
            if word not in self._ids:
                raise DataError(f"word {word!r} not in vocabulary")
            ids.append(self._ids[word])
        return ids

    def decode(self, ids, keep_specials: bool = False) -> str:
        out = []
        for i in ids:
            word = self.words[int(i)]
            if not keep_specials and word in self.SPECIALS:
                continue
            out.append(word)
        return " ".join(out)


VOCAB = TokenVocab()


# ----------------------------------------------------------------- manifests


SPLIT_RANGES = {
    "train": range(0, 50_000),
    "val": range(1_000_000, 1_000_500),
    "test": range(2_000_000, 2_000_500),
}


def split_range(name: str) -> range:
    if name not in SPLIT_RANGES:
        raise DataError(f"unknown split {name!r}; expected one of {sorted(SPLIT_RANGES)}")
    return SPLIT_RANGES[name]


def scene_record(seed: int, split: str) -> dict:
    scene = gen_scene(seed)
    question, answer = make_qa(scene, seed)
    return {
        "seed": seed,
        "split": split,
        "background": scene.background,
        "objects": [dataclasses.asdict(o) for o in scene.objects],
        "caption_short": caption_short(scene),
        "caption_long": caption_long(scene),
        "question": question,
        "answer": answer,
    }


def write_manifest(path, split: str, limit: int = None) -> int:
    """Write one JSON object per line; returns the number of rows."""
    seeds = split_range(split)
    if limit is not None:
        seeds = list(seeds)[:limit]
    n = 0
    with open(path, "w") as fh:
        for seed in seeds:
            fh.write(json.dumps(scene_record(seed, split), sort_keys=True) + "\n")
            n += 1
    return n
