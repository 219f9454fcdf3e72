"""The autoregressive core: one decoder-only transformer over mixed
token/vector sequences, with a text head and an image-vector head.

Sequence layouts (positions left to right):

  understanding:  [BOS] [IMG] f_1 .. f_n [/IMG] prompt... answer... [EOS]
  generation:     [BOS] caption-tokens... [IMG] v_1 .. v_m [/IMG] [EOS]

Encoder features enter the token stream through small trainable MLP
projections (the encoders themselves are frozen); the stored sequences
carry raw encoder features so projector gradients flow through every
forward. Supervision is positional: cross-entropy on the answer tokens
plus [EOS] for understanding, and for generation exactly m regression
targets (each vector is predicted from the position before it) plus
cross-entropy on [IMG], [/IMG], and [EOS]. The per-sample objective is
mean cross-entropy plus `mse_weight` times mean squared error, and the
batch objective is the plain average of per-sample objectives.
"""

import dataclasses

import numpy as np

from . import tensor as T
from .config import LMConfig, VisionConfig
from .data import VOCAB
from .errors import TruncationError, UsageError
from .nn import Linear, LayerNorm, MLP, ParamSet, TransformerBlock, trunc_normal
from .rng import substream

NEG_INF = -1e9  # additive mask value; keeps softmax finite while the
                # masked weights underflow to exactly zero


class LanguageModel:
    def __init__(self, lc: LMConfig, vc: VisionConfig, seed: int):
        self.config = lc
        self.vision_config = vc
        self.params = ParamSet()
        p = self.params
        tok = trunc_normal((len(VOCAB), lc.d_model), 0.02, substream(seed, "init/lm/tok"))
        pos = trunc_normal((lc.context, lc.d_model), 0.02, substream(seed, "init/lm/pos"))
        self.tok_embed = p.add("lm/tok", T.Tensor(tok, requires_grad=True))
        self.pos_embed = p.add("lm/pos", T.Tensor(pos, requires_grad=True))
        self.blocks = [TransformerBlock(p, f"lm/block{i}", lc.d_model, lc.n_heads, seed)
                       for i in range(lc.n_layers)]
        self.ln = LayerNorm(p, "lm/ln", lc.d_model)
        self.text_head = Linear(p, "lm/text_head", lc.d_model, len(VOCAB), seed)
        self.image_head = MLP(p, "lm/image_head", lc.d_model, lc.d_model, vc.d_gen, seed)
        self.und_proj = MLP(p, "lm/und_proj", vc.d_und, lc.d_model, lc.d_model, seed)
        self.gen_proj = MLP(p, "lm/gen_proj", vc.d_gen, lc.d_model, lc.d_model, seed)

    def project(self, kind: str, feats: T.Tensor) -> T.Tensor:
        return (self.und_proj if kind == "und" else self.gen_proj)(feats)

    def hidden_states(self, tokens: np.ndarray, feats: T.Tensor = None,
                      vec_pos: np.ndarray = None, kind: str = None) -> T.Tensor:
        """Causal transformer pass over [B, L] tokens; feature vectors
        (already raw, projected here) overwrite the embeddings at vec_pos."""
        bsz, length = tokens.shape
        if length > self.config.context:
            raise TruncationError(f"sequence length {length} exceeds context {self.config.context}")
        x = T.add(T.gather(self.tok_embed, tokens), T.narrow(self.pos_embed, 0, 0, length))
        if feats is not None:
            x = T.place_rows(x, self.project(kind, feats), vec_pos)
        mask = causal_pad_mask(tokens)
        for block in self.blocks:
            x = block(x, mask)
        return self.ln(x)

    def text_logits(self, hidden: T.Tensor) -> T.Tensor:
        return self.text_head(hidden)

    def image_preds(self, hidden: T.Tensor) -> T.Tensor:
        return self.image_head(hidden)


def causal_pad_mask(tokens: np.ndarray) -> T.Tensor:
    """Additive [B, 1, L, L] mask: strict upper triangle plus PAD keys.

    Masked logits sit 1e9 below the live ones, so after max subtraction
    their exponentials underflow to exactly zero; causality holds
    bitwise without any infinities entering the graph.
    """
    bsz, length = tokens.shape
    causal = np.triu(np.full((length, length), NEG_INF, dtype=np.float32), k=1)
    pad_keys = np.where(tokens == VOCAB.pad, np.float32(NEG_INF), np.float32(0.0))
    mask = causal[None, None] + pad_keys[:, None, None, :]
    return T.Tensor(mask)


@dataclasses.dataclass
class MixedSequence:
    """One unpadded training sample with positional supervision tags."""

    kind: str                 # "und" or "gen"
    tokens: np.ndarray        # [L] int64; vector slots hold a placeholder id
    vec_pos: np.ndarray       # [K] positions of the feature vectors
    feats: np.ndarray         # [K, d_raw] raw (pre-projection) encoder features
    ce_logit_pos: np.ndarray  # positions whose output is CE-supervised
    ce_targets: np.ndarray    # token ids predicted at those positions
    mse_logit_pos: np.ndarray # positions whose output regresses a vector
    mse_targets: np.ndarray   # [len(mse_logit_pos), d_gen]

    @property
    def length(self):
        return len(self.tokens)


def assemble_understanding(prompt: str, answer: str, und_feats: np.ndarray) -> MixedSequence:
    """Image block, then prompt, then the supervised answer."""
    n = len(und_feats)
    prompt_ids = VOCAB.encode(prompt)
    answer_ids = VOCAB.encode(answer)
    tokens = np.asarray([VOCAB.bos, VOCAB.img] + [VOCAB.img] * n + [VOCAB.img_end]
                        + prompt_ids + answer_ids + [VOCAB.eos], dtype=np.int64)
    answer_start = 3 + n + len(prompt_ids)
    target_pos = np.arange(answer_start, len(tokens))  # answer tokens and [EOS]
    return MixedSequence(
        kind="und",
        tokens=tokens,
        vec_pos=np.arange(2, 2 + n),
        feats=np.asarray(und_feats, dtype=np.float32),
        ce_logit_pos=target_pos - 1,
        ce_targets=tokens[target_pos],
        mse_logit_pos=np.empty(0, dtype=np.int64),
        mse_targets=np.empty((0, und_feats.shape[-1]), dtype=np.float32),
    )


def assemble_generation(caption: str, gen_feats: np.ndarray, instruction: str = None) -> MixedSequence:
    """Caption (optionally with instruction prefix), then the image block.

    An empty caption produces the unconditional layout [BOS][IMG]...[/IMG][EOS]
    used by caption dropout and the guidance baseline stream.
    """
    m = len(gen_feats)
    if caption:
        text = f"{instruction} {caption}" if instruction else caption
        caption_ids = VOCAB.encode(text)
    else:
        caption_ids = []
    tokens = np.asarray([VOCAB.bos] + caption_ids + [VOCAB.img] + [VOCAB.img] * m
                        + [VOCAB.img_end, VOCAB.eos], dtype=np.int64)
    img_pos = 1 + len(caption_ids)
    vec_pos = np.arange(img_pos + 1, img_pos + 1 + m)
    ce_target_pos = np.array([img_pos, img_pos + 1 + m, img_pos + 2 + m])  # [IMG], [/IMG], [EOS]
    return MixedSequence(
        kind="gen",
        tokens=tokens,
        vec_pos=vec_pos,
        feats=np.asarray(gen_feats, dtype=np.float32),
        ce_logit_pos=ce_target_pos - 1,
        ce_targets=tokens[ce_target_pos],
        mse_logit_pos=vec_pos - 1,  # each vector predicted from the slot before it
        mse_targets=np.asarray(gen_feats, dtype=np.float32),
    )


@dataclasses.dataclass
class LossReport:
    """Pooled diagnostics for one batch. `objective` is the optimized value
    (mean of per-sample ce_mean + mse_weight * mse_mean); the pooled means
    here aggregate raw sums over every supervised position instead."""

    objective: float
    ce_sum: float
    ce_count: int
    mse_sum: float
    mse_count: int
    n_samples: int

    @property
    def ce_mean(self):
        return self.ce_sum / self.ce_count if self.ce_count else 0.0

    @property
    def mse_mean(self):
        return self.mse_sum / self.mse_count if self.mse_count else 0.0


def _pad_group(samples):
    length = max(s.length for s in samples)
    tokens = np.full((len(samples), length), VOCAB.pad, dtype=np.int64)
    for i, s in enumerate(samples):
        tokens[i, :s.length] = s.tokens
    return tokens


def _forward_group(lm: LanguageModel, samples):
    """All samples must share a kind (vector layouts differ otherwise)."""
    kind = samples[0].kind
    if any(s.kind != kind for s in samples):
        raise UsageError("forward group mixes sequence kinds")
    tokens = _pad_group(samples)
    feats = T.Tensor(np.stack([s.feats for s in samples]))
    vec_pos = np.stack([s.vec_pos for s in samples])
    hidden = lm.hidden_states(tokens, feats, vec_pos, kind)
    return hidden


def unified_loss(lm: LanguageModel, samples, mse_weight: float = None):
    """Batch objective over a mixed list of samples.

    Returns (scalar loss Tensor, LossReport). Groups samples by kind so
    short generation rows are not padded out to understanding length.
    """
    if not samples:
        raise UsageError("empty batch")
    if mse_weight is None:
        mse_weight = lm.config.mse_weight
    n_total = len(samples)
    pieces = []
    ce_sum = mse_sum = 0.0
    ce_count = mse_count = 0
    for kind in ("und", "gen"):
        group = [s for s in samples if s.kind == kind]
        if not group:
            continue
        hidden = _forward_group(lm, group)
        d = hidden.shape[-1]
        flat = T.reshape(hidden, (hidden.shape[0] * hidden.shape[1], d))
        length = hidden.shape[1]

        ce_rows, ce_ids, ce_w = [], [], []
        for i, s in enumerate(group):
            ce_rows.extend(i * length + s.ce_logit_pos)
            ce_ids.extend(s.ce_targets)
            ce_w.extend([1.0 / (len(s.ce_targets) * n_total)] * len(s.ce_targets))
        ce_rows = np.asarray(ce_rows, dtype=np.int64)
        picked = T.gather(flat, ce_rows)
        logits = lm.text_logits(picked)
        nll = T.scale(T.take_along_last(T.log_softmax(logits, axis=-1),
                                        np.asarray(ce_ids, dtype=np.int64)), -1.0)
        pieces.append(T.sum_(T.mul(nll, T.Tensor(np.asarray(ce_w, dtype=np.float32)))))
        ce_sum += float(np.sum(nll.data))
        ce_count += len(ce_rows)

        if kind == "gen":
            mse_rows, targets = [], []
            for i, s in enumerate(group):
                mse_rows.extend(i * length + s.mse_logit_pos)
                targets.append(s.mse_targets)
            mse_rows = np.asarray(mse_rows, dtype=np.int64)
            target = np.concatenate(targets, axis=0)
            preds = lm.image_preds(T.gather(flat, mse_rows))
            diff = T.sub(preds, T.Tensor(target))
            sq = T.mul(diff, diff)
            per_sample = 1.0 / (lm.vision_config.gen_tokens * target.shape[-1] * n_total)
            pieces.append(T.scale(T.sum_(sq), mse_weight * per_sample))
            mse_sum += float(np.sum(sq.data))
            mse_count += target.size

    loss = pieces[0]
    for piece in pieces[1:]:
        loss = T.add(loss, piece)
    report = LossReport(objective=float(loss.data), ce_sum=ce_sum, ce_count=ce_count,
                        mse_sum=mse_sum, mse_count=mse_count, n_samples=n_total)
    return loss, report
