"""Decoding: answer questions about images, and synthesize images from
captions with classifier-free guidance.

There is no KV cache; every emitted token or vector re-runs the full
prefix. At this scale that costs milliseconds, and both decoders batch
across prompts, which is where the real throughput comes from.

Guidance runs two streams per caption: one conditioned on the caption
tokens, one starting from the bare [BOS][IMG] layout the model learned
through caption dropout. Each step predicts a vector in both streams
and feeds the guided combination v_u + s * (v_c - v_u) back into both.
The endpoints s == 1.0 and s == 0.0 skip the second stream and the
arithmetic entirely, so they are bitwise the plain conditional (or
unconditional) decode, not merely close to it. Exactly m vectors are
emitted regardless of caption, scale, or content.
"""

import json
import os
import struct
import zlib

import numpy as np

from . import data as D
from . import tensor as T
from .data import VOCAB
from .errors import UsageError
from .model import LanguageModel
from .rng import substream


def _pad_rows(rows, fill):
    length = max(len(r) for r in rows)
    out = np.full((len(rows), length), fill, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def answer_questions(lm: LanguageModel, vision, images: np.ndarray, prompts,
                     max_tokens: int = 8, top_k: int = 0, seed: int = 0):
    """Decode an answer per (image, prompt) pair; greedy unless top_k > 0.

    Returns the decoded strings (specials stripped). Rows stop at [EOS]
    or after max_tokens; unfinished rows keep whatever they emitted.
    """
    if images.ndim == 3:
        images = images[None]
    if len(images) != len(prompts):
        raise UsageError(f"{len(images)} images vs {len(prompts)} prompts")
    feats = vision.encode_und(images).data
    n_vec = feats.shape[1]
    vec_pos = np.broadcast_to(np.arange(2, 2 + n_vec), (len(prompts), n_vec))

    prefixes = []
    for prompt in prompts:
        prefixes.append([VOCAB.bos, VOCAB.img] + [VOCAB.img] * n_vec + [VOCAB.img_end]
                        + VOCAB.encode(prompt))
    cursors = np.array([len(p) for p in prefixes])
    tokens = np.full((len(prompts), int(cursors.max()) + max_tokens), VOCAB.pad, dtype=np.int64)
    for i, p in enumerate(prefixes):
        tokens[i, :len(p)] = p
    finished = np.zeros(len(prompts), dtype=bool)

    for t in range(max_tokens):
        length = int(cursors.max())
        hidden = lm.hidden_states(tokens[:, :length], T.Tensor(feats), vec_pos, "und")
        rows = hidden.data[np.arange(len(prompts)), cursors - 1]
        logits = lm.text_logits(T.Tensor(rows)).data
        if top_k > 0:
            nxt = np.empty(len(prompts), dtype=np.int64)
            for i in range(len(prompts)):
                top = np.argpartition(logits[i], -top_k)[-top_k:]
                z = logits[i, top] - logits[i, top].max()
                p = np.exp(z) / np.exp(z).sum()
                u = substream(seed, "textgen", i, t).uniform()
                nxt[i] = top[np.searchsorted(np.cumsum(p), u, side="right").clip(0, top_k - 1)]
        else:
            nxt = np.argmax(logits, axis=-1)
        nxt = np.where(finished, VOCAB.pad, nxt)
        tokens[np.arange(len(prompts)), cursors] = nxt
        finished |= nxt == VOCAB.eos
        cursors = cursors + 1
        if finished.all():
            break

    answers = []
    for i, p in enumerate(prefixes):
        span = tokens[i, len(p):]
        ids = []
        for tok in span:
            if tok in (VOCAB.eos, VOCAB.pad):
                break
            ids.append(int(tok))
        answers.append(VOCAB.decode(ids))
    return answers


def _gen_step(lm: LanguageModel, prefix_tokens: np.ndarray, cursors: np.ndarray,
              vecs: np.ndarray, j: int):
    """Hidden-state pass of one stream with j vectors placed; returns the
    vector predictions at each row's current position [B, d_gen]."""
    bsz = len(prefix_tokens)
    length = int(cursors.max()) + j
    tokens = prefix_tokens[:, :length]
    if j > 0:
        vec_pos = cursors[:, None] + np.arange(j)[None]
        hidden = lm.hidden_states(tokens, T.Tensor(vecs[:, :j]), vec_pos, "gen")
    else:
        hidden = lm.hidden_states(tokens)
    rows = hidden.data[np.arange(bsz), cursors + j - 1]
    return lm.image_preds(T.Tensor(rows)).data


def sample_image_vectors(lm: LanguageModel, captions, cfg_scale: float = 1.0,
                         instruction: str = D.GEN_INSTRUCTION):
    """Autoregressively decode m pooled-feature vectors per caption.

    cfg_scale 1.0 is the pure conditional stream and 0.0 the pure
    unconditional one (single-stream paths, no guidance arithmetic);
    anything else runs both streams and mixes their predictions.
    """
    m = lm.vision_config.gen_tokens
    d_gen = lm.vision_config.d_gen
    bsz = len(captions)

    cond_rows = []
    for caption in captions:
        text = f"{instruction} {caption}" if (caption and instruction) else caption
        ids = VOCAB.encode(text) if text else []
        cond_rows.append([VOCAB.bos] + ids + [VOCAB.img])
    uncond_rows = [[VOCAB.bos, VOCAB.img]] * bsz

    def prep(rows):
        cursors = np.array([len(r) for r in rows])
        tokens = np.full((bsz, int(cursors.max()) + m), VOCAB.pad, dtype=np.int64)
        for i, r in enumerate(rows):
            tokens[i, :len(r)] = r
            tokens[i, len(r):len(r) + m] = VOCAB.img  # vector slots
        return tokens, cursors

    need_cond = cfg_scale != 0.0
    need_uncond = cfg_scale != 1.0
    if need_cond:
        cond_tokens, cond_cur = prep(cond_rows)
        cond_vecs = np.zeros((bsz, m, d_gen), dtype=np.float32)
    if need_uncond:
        un_tokens, un_cur = prep(uncond_rows)
        un_vecs = np.zeros((bsz, m, d_gen), dtype=np.float32)

    for j in range(m):
        if need_cond:
            v_c = _gen_step(lm, cond_tokens, cond_cur, cond_vecs, j)
        if need_uncond:
            v_u = _gen_step(lm, un_tokens, un_cur, un_vecs, j)
        if cfg_scale == 1.0:
            v = v_c
        elif cfg_scale == 0.0:
            v = v_u
        else:
            v = v_u + np.float32(cfg_scale) * (v_c - v_u)
        if need_cond:
            cond_vecs[:, j] = v
        if need_uncond:
            un_vecs[:, j] = v
    return cond_vecs if need_cond else un_vecs


def generate_image(lm: LanguageModel, vision, caption: str, cfg_scale: float = 1.0,
                   instruction: str = D.GEN_INSTRUCTION) -> np.ndarray:
    """Caption to pixels for a single prompt; [24, 24, 3] in [0, 1]."""
    vecs = sample_image_vectors(lm, [caption], cfg_scale, instruction)
    return vision.decode_image(vecs)[0]


def generate_images(lm: LanguageModel, vision, captions, cfg_scale: float = 1.0,
                    batch: int = 32, instruction: str = D.GEN_INSTRUCTION) -> np.ndarray:
    """Batched caption-to-pixels; returns [N, 24, 24, 3]."""
    out = []
    for lo in range(0, len(captions), batch):
        vecs = sample_image_vectors(lm, captions[lo:lo + batch], cfg_scale, instruction)
        out.append(vision.decode_image(vecs))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------- image io


def to_rgb8(img01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img01) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img01: np.ndarray) -> None:
    """Binary PPM (P6), 8 bits per channel."""
    rgb = to_rgb8(img01)
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def write_png(path, img01: np.ndarray) -> None:
    """Minimal 8-bit RGB PNG: one IDAT, filter 0 rows, zlib-compressed."""
    rgb = to_rgb8(img01)
    h, w = rgb.shape[:2]
    raw = b"".join(b"\x00" + rgb[row].tobytes() for row in range(h))

    def chunk(tag, payload):
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", header))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(chunk(b"IEND", b""))


def append_transcript(path, record: dict) -> None:
    """One JSON object per line; creates the file on first use."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
