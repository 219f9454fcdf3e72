import numpy as np
import pytest

from duovision import data as D
from duovision.config import LMConfig, VisionConfig
from duovision.encoders import VisionSystem
from duovision.errors import DimensionError, UsageError
from duovision.evaluation import (GENEVAL_CATEGORIES, FeatureSet, fit_features,
                                  frechet_distance, geneval_prompts,
                                  geneval_score_images, geneval_score_scene,
                                  qa_accuracy, reference_scene, scene_features,
                                  toy_fid)
from duovision.model import LanguageModel


@pytest.fixture(scope="module")
def vision():
    v = VisionSystem(VisionConfig(), 5)
    v.freeze_all()
    return v


def test_fit_features_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 6))
    fs = fit_features(x)
    np.testing.assert_allclose(fs.mu, x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(fs.sigma, np.cov(x, rowvar=False), atol=1e-12)
    assert fs.n == 40


def test_fit_features_rejects_degenerate():
    with pytest.raises(DimensionError):
        fit_features(np.zeros((1, 4)))
    with pytest.raises(DimensionError):
        fit_features(np.zeros(8))


def test_frechet_identical_is_zero():
    rng = np.random.default_rng(1)
    fs = fit_features(rng.normal(size=(60, 5)))
    assert frechet_distance(fs, fs) < 1e-8


def test_frechet_diagonal_closed_form():
    # for diagonal Gaussians d^2 = |mu_a - mu_b|^2 + sum_i (s_a,i - s_b,i)^2
    mu_a = np.array([0.0, 1.0, -2.0])
    mu_b = np.array([3.0, 1.0, 0.0])
    sd_a = np.array([2.0, 1.0, 0.5])
    sd_b = np.array([1.0, 3.0, 0.5])
    a = FeatureSet(mu=mu_a, sigma=np.diag(sd_a ** 2), n=10)
    b = FeatureSet(mu=mu_b, sigma=np.diag(sd_b ** 2), n=10)
    want = float(np.sum((mu_a - mu_b) ** 2) + np.sum((sd_a - sd_b) ** 2))
    got = frechet_distance(a, b, ridge=0.0)
    assert abs(got - want) < 1e-9


def test_frechet_symmetric_and_rotation_invariant():
    rng = np.random.default_rng(2)
    a = fit_features(rng.normal(size=(80, 4)))
    b = fit_features(rng.normal(loc=0.5, size=(80, 4)))
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-10

    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    ra = FeatureSet(mu=q @ a.mu, sigma=q @ a.sigma @ q.T, n=a.n)
    rb = FeatureSet(mu=q @ b.mu, sigma=q @ b.sigma @ q.T, n=b.n)
    assert abs(frechet_distance(ra, rb) - frechet_distance(a, b)) < 1e-6


def test_frechet_dim_mismatch():
    a = FeatureSet(mu=np.zeros(3), sigma=np.eye(3), n=5)
    b = FeatureSet(mu=np.zeros(4), sigma=np.eye(4), n=5)
    with pytest.raises(DimensionError):
        frechet_distance(a, b)


def test_scene_features_shape(vision):
    images = np.stack([D.render_scene(D.gen_scene(s)) for s in range(6)])
    feats = scene_features(vision, images, batch=4)
    assert feats.shape == (6, vision.config.d_und)
    assert feats.dtype == np.float64


def test_toy_fid_self_and_shifted(vision):
    images = np.stack([D.render_scene(D.gen_scene(s)) for s in range(30)])
    other = np.stack([D.render_scene(D.gen_scene(s)) for s in range(1000, 1030)])
    assert toy_fid(vision, images, images) < 1e-8
    same_dist = toy_fid(vision, images, other)
    far = toy_fid(vision, images, np.clip(other + 0.5, 0.0, 1.0))
    assert far > same_dist  # gross pixel shift reads as a larger distance


def test_geneval_prompts_deterministic():
    a = geneval_prompts(0, 5)
    b = geneval_prompts(0, 5)
    assert [i.prompt for i in a] == [i.prompt for i in b]
    assert len(a) == 5 * len(GENEVAL_CATEGORIES)
    counts = {}
    for item in a:
        counts[item.category] = counts.get(item.category, 0) + 1
        assert D.VOCAB.encode(item.prompt)  # every prompt tokenizes
    assert counts == {c: 5 for c in GENEVAL_CATEGORIES}


def test_geneval_predicates_hand_cases():
    scene = D.Scene("white", (D.SceneObject(0, 0, "square", "red"),
                              D.SceneObject(2, 1, "circle", "blue")))
    from duovision.evaluation import GenEvalItem
    yes = [
        GenEvalItem("single_object", "", {"shape": "square"}),
        GenEvalItem("colors", "", {"shape": "circle", "color": "blue"}),
        GenEvalItem("two_object", "", {"shape1": "square", "shape2": "circle"}),
        GenEvalItem("counting", "", {"shape": "square", "n": 1}),
        GenEvalItem("position", "", {"shape": "square", "color": "red",
                                     "row": D.ROW_NAMES[0], "col": D.COL_NAMES[0]}),
        GenEvalItem("color_attribution", "", {"shape1": "square", "color1": "red",
                                              "shape2": "circle", "color2": "blue"}),
    ]
    no = [
        GenEvalItem("single_object", "", {"shape": "triangle"}),
        GenEvalItem("colors", "", {"shape": "circle", "color": "red"}),
        GenEvalItem("two_object", "", {"shape1": "square", "shape2": "triangle"}),
        GenEvalItem("counting", "", {"shape": "square", "n": 2}),
        GenEvalItem("position", "", {"shape": "square", "color": "red",
                                     "row": D.ROW_NAMES[1], "col": D.COL_NAMES[0]}),
        GenEvalItem("color_attribution", "", {"shape1": "square", "color1": "blue",
                                              "shape2": "circle", "color2": "red"}),
    ]
    for item in yes:
        assert geneval_score_scene(item, scene), item.category
    for item in no:
        assert not geneval_score_scene(item, scene), item.category
    with pytest.raises(UsageError):
        geneval_score_scene(GenEvalItem("nope", "", {}), scene)


def test_reference_scenes_score_perfectly():
    items = geneval_prompts(0, 4)
    images = np.stack([D.render_scene(reference_scene(i)) for i in items])
    report = geneval_score_images(items, images)
    assert report["overall"] == 1.0
    for category in GENEVAL_CATEGORIES:
        assert report["categories"][category] == 1.0


def test_geneval_score_images_mismatch():
    items = geneval_prompts(0, 1)
    with pytest.raises(UsageError):
        geneval_score_images(items, np.zeros((1, 24, 24, 3)))


def test_qa_accuracy_structure(vision):
    lm = LanguageModel(LMConfig(d_model=32, n_layers=2, n_heads=2, context=256),
                       VisionConfig(), 5)
    report = qa_accuracy(lm, vision, n=4, batch=2, max_tokens=4)
    assert 0.0 <= report["accuracy"] <= 1.0
    assert report["n"] == 4
    assert len(report["records"]) == 4
    for rec in report["records"]:
        assert set(rec) == {"question", "truth", "predicted", "correct"}
