import numpy as np
import pytest
from scipy.special import logsumexp

from duovision import tensor as T
from duovision.config import LMConfig, VisionConfig
from duovision.data import VOCAB
from duovision.errors import TruncationError, UsageError
from duovision.model import (LanguageModel, assemble_generation, assemble_understanding,
                             causal_pad_mask, unified_loss)


def tiny_lm(seed=0, **kw):
    lm_kw = dict(d_model=32, n_layers=2, n_heads=2, context=256)
    lm_kw.update(kw)
    return LanguageModel(LMConfig(**lm_kw), VisionConfig(), seed)


def rand_und(rng, prompt="provide a detailed description of the given image .",
             answer="a red square"):
    feats = rng.normal(size=(144, 32)).astype(np.float32)
    return assemble_understanding(prompt, answer, feats)


def rand_gen(rng, caption="a red square"):
    feats = rng.normal(size=(16, 32)).astype(np.float32)
    return assemble_generation(caption, feats)


def test_understanding_layout():
    rng = np.random.default_rng(0)
    s = rand_und(rng, answer="a red square")
    assert s.kind == "und"
    assert s.tokens[0] == VOCAB.bos and s.tokens[-1] == VOCAB.eos
    assert s.tokens[1] == VOCAB.img
    np.testing.assert_array_equal(s.vec_pos, np.arange(2, 146))
    assert s.tokens[146] == VOCAB.img_end
    # supervised positions: the three answer words plus [EOS]
    assert len(s.ce_targets) == 4
    assert s.ce_targets[-1] == VOCAB.eos
    np.testing.assert_array_equal(s.ce_logit_pos + 1,
                                  np.arange(len(s.tokens) - 4, len(s.tokens)))
    assert len(s.mse_logit_pos) == 0


def test_generation_layout():
    rng = np.random.default_rng(1)
    s = rand_gen(rng, caption="a red square")
    assert s.kind == "gen"
    assert len(s.mse_logit_pos) == 16
    np.testing.assert_array_equal(s.mse_logit_pos, s.vec_pos - 1)
    assert len(s.ce_targets) == 3
    assert s.ce_targets[0] == VOCAB.img
    assert s.ce_targets[1] == VOCAB.img_end
    assert s.ce_targets[2] == VOCAB.eos
    # unconditional layout drops the caption entirely
    u = assemble_generation("", np.zeros((16, 32), dtype=np.float32))
    assert u.tokens[0] == VOCAB.bos and u.tokens[1] == VOCAB.img
    assert len(u.tokens) == 1 + 1 + 16 + 2


def test_uniform_logits_give_log_vocab_ce():
    lm = tiny_lm()
    lm.params["lm/text_head/w"].data[:] = 0.0
    lm.params["lm/text_head/b"].data[:] = 0.0
    rng = np.random.default_rng(2)
    _, report = unified_loss(lm, [rand_und(rng)])
    assert report.ce_mean == pytest.approx(np.log(len(VOCAB)), abs=1e-5)
    assert report.mse_count == 0


def test_matched_vectors_give_zero_mse():
    lm = tiny_lm()
    rng = np.random.default_rng(3)
    sample = rand_gen(rng)
    hidden = lm.hidden_states(sample.tokens[None], T.Tensor(sample.feats[None]),
                              sample.vec_pos[None], "gen")
    preds = lm.image_preds(T.Tensor(hidden.data[0, sample.mse_logit_pos])).data
    sample.mse_targets = preds.copy()
    _, report = unified_loss(lm, [sample])
    assert report.mse_sum == 0.0


def test_batch_objective_is_mean_of_singletons():
    lm = tiny_lm()
    rng = np.random.default_rng(4)
    u, g = rand_und(rng), rand_gen(rng)
    _, ru = unified_loss(lm, [u])
    _, rg = unified_loss(lm, [g])
    _, rug = unified_loss(lm, [u, g])
    assert rug.objective == pytest.approx((ru.objective + rg.objective) / 2, rel=1e-6)


def test_loss_matches_numpy_recompute():
    lm = tiny_lm()
    rng = np.random.default_rng(5)
    samples = [rand_und(rng, answer="a blue circle"), rand_gen(rng, caption="a blue circle")]
    loss, report = unified_loss(lm, samples)

    total = 0.0
    for s in samples:
        hidden = lm.hidden_states(s.tokens[None], T.Tensor(s.feats[None]),
                                  s.vec_pos[None], s.kind).data[0]
        logits = lm.text_logits(T.Tensor(hidden[s.ce_logit_pos])).data.astype(np.float64)
        nll = logsumexp(logits, axis=-1) - logits[np.arange(len(s.ce_targets)), s.ce_targets]
        total += float(np.mean(nll)) / len(samples)
        if s.kind == "gen":
            preds = lm.image_preds(T.Tensor(hidden[s.mse_logit_pos])).data.astype(np.float64)
            mse = float(np.mean((preds - s.mse_targets) ** 2))
            total += lm.config.mse_weight * mse / len(samples)
    assert report.objective == pytest.approx(total, abs=1e-6)


def test_empty_batch_rejected():
    with pytest.raises(UsageError):
        unified_loss(tiny_lm(), [])


def test_mixed_kind_group_rejected():
    from duovision.model import _forward_group
    rng = np.random.default_rng(6)
    with pytest.raises(UsageError):
        _forward_group(tiny_lm(), [rand_und(rng), rand_gen(rng)])


def test_context_overflow_raises():
    lm = tiny_lm(context=64)
    rng = np.random.default_rng(7)
    with pytest.raises(TruncationError):
        unified_loss(lm, [rand_und(rng)])  # 144 feature slots exceed context 64


def test_causal_pad_mask_values():
    tokens = np.array([[5, 6, VOCAB.pad]])
    mask = causal_pad_mask(tokens).data
    assert mask.shape == (1, 1, 3, 3)
    assert mask[0, 0, 0, 0] == 0.0
    assert mask[0, 0, 0, 1] <= -1e9   # future key blocked
    assert mask[0, 0, 1, 0] == 0.0
    assert mask[0, 0, 0, 2] <= -1e9   # PAD key blocked everywhere
    assert mask[0, 0, 2, 2] <= -1e9


def test_suffix_perturbation_leaves_prefix_hidden_states():
    lm = tiny_lm()
    rng = np.random.default_rng(8)
    s = rand_gen(rng, caption="a green triangle")
    h1 = lm.hidden_states(s.tokens[None], T.Tensor(s.feats[None]),
                          s.vec_pos[None], "gen").data
    cut = int(s.vec_pos[4])
    tokens2 = s.tokens.copy()
    tokens2[-2] = VOCAB.img  # tamper past the cut
    feats2 = s.feats.copy()
    feats2[5:] = rng.normal(size=feats2[5:].shape)
    h2 = lm.hidden_states(tokens2[None], T.Tensor(feats2[None]),
                          s.vec_pos[None], "gen").data
    np.testing.assert_array_equal(h1[0, :cut + 1], h2[0, :cut + 1])


def test_gradients_reach_projections_and_heads():
    lm = tiny_lm()
    rng = np.random.default_rng(9)
    lm.params.zero_grad()
    with T.Tape() as tape:
        loss, _ = unified_loss(lm, [rand_und(rng), rand_gen(rng)])
        tape.backward(loss)
    for name in ("lm/und_proj/fc1/w", "lm/gen_proj/fc1/w", "lm/text_head/w",
                 "lm/image_head/fc1/w", "lm/tok", "lm/pos"):
        assert lm.params[name].grad is not None, name


def test_placeholder_token_is_not_pad():
    rng = np.random.default_rng(10)
    for s in (rand_und(rng), rand_gen(rng)):
        assert not np.any(s.tokens[s.vec_pos] == VOCAB.pad)
        assert np.all(s.tokens[s.vec_pos] == VOCAB.img)
