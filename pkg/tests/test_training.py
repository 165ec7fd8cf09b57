import math

import numpy as np
import pytest

from msa2net import training as TR
from msa2net.errors import ConfigError, DataError, NumericalError
from msa2net.network import NetworkConfig, build_model
from msa2net.tensor import Tensor, backward

from oracles import gradcheck_fn, hd95_brute


# ---------------------------------------------------------------------------
# optimizers against scalar re-derivations

def test_sgd_matches_scalar_oracle():
    theta, grads = [0.5, -1.0], [[0.1, -0.2], [0.3, 0.05], [-0.4, 0.2]]
    lr, mu, wd = 0.1, 0.9, 0.01
    p = np.array(theta)
    st = TR.sgd_state(lr, mu, wd)
    ref, vel = list(theta), [None, None]
    for g in grads:
        TR.sgd_update([p], [np.array(g)], st)
        for i in range(2):
            d = g[i] + wd * ref[i]
            vel[i] = d if vel[i] is None else mu * vel[i] + d
            ref[i] -= lr * vel[i]
    np.testing.assert_allclose(p, ref, rtol=1e-15)


def test_adam_matches_scalar_oracle():
    theta, grads = [0.5, -1.0], [[0.1, -0.2], [0.3, 0.05], [-0.4, 0.2], [0.0, 1.0]]
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    p = np.array(theta)
    st = TR.adam_state(lr)
    ref, m, v = list(theta), [0.0, 0.0], [0.0, 0.0]
    for t, g in enumerate(grads, 1):
        TR.adam_update([p], [np.array(g)], st)
        for i in range(2):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh, vh = m[i] / (1 - b1 ** t), v[i] / (1 - b2 ** t)
            ref[i] -= lr * mh / (math.sqrt(vh) + eps)
    np.testing.assert_allclose(p, ref, rtol=1e-12)
    # the first Adam step moves every coordinate by ~lr
    q = np.array([3.0, -7.0])
    TR.adam_update([q], [np.array([1e-3, -50.0])], TR.adam_state(0.01))
    np.testing.assert_allclose(q, [2.99, -6.99], rtol=1e-6)


def test_optimizer_skips_missing_grads():
    p = np.ones(2)
    TR.sgd_update([p], [None], TR.sgd_state())
    np.testing.assert_array_equal(p, 1.0)


# ---------------------------------------------------------------------------
# loss

def test_uniform_logits_cross_entropy_is_ln2():
    logits = Tensor(np.zeros((2, 2, 4, 4)))
    mask = np.zeros((2, 4, 4), dtype=np.int64)
    mask[:, :2] = 1
    loss = TR.dice_ce_loss(logits, mask).item()
    # dice per class: (2 * 0.5 * n_c + 1) / (0.5 * 32 + n_c + 1), n_c = 16 for both classes
    dice = (2 * 0.5 * 16 + 1) / (16 + 16 + 1)
    assert loss == pytest.approx(0.5 * (1 - dice) + 0.5 * math.log(2), abs=1e-12)


def test_loss_near_zero_for_confident_correct_logits():
    mask = np.random.default_rng(0).integers(0, 3, (2, 4, 4))
    logits = 60.0 * TR.one_hot(mask, 3, np.float64)
    assert TR.dice_ce_loss(Tensor(logits), mask).item() < 1e-12


def test_loss_gradient():
    rng = np.random.default_rng(1)
    mask = rng.integers(0, 3, (2, 3, 3))
    err = gradcheck_fn(lambda z: TR.dice_ce_loss(z, mask), [rng.standard_normal((2, 3, 3, 3))])
    assert err <= 1e-3


def test_loss_label_errors():
    with pytest.raises(DataError):
        TR.dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))
    with pytest.raises(DataError):
        TR.dice_ce_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 3), dtype=np.int64))


# ---------------------------------------------------------------------------
# metrics

def test_dsc_cases():
    t = np.zeros((4, 4), dtype=int)
    t[0, :2] = 1
    p = np.zeros((4, 4), dtype=int)
    p[0, 1:3] = 1
    assert TR.dsc(p, t, 1) == 0.5
    assert TR.dsc(t, t, 1) == 1.0
    assert TR.dsc(np.zeros((3, 3)), np.zeros((3, 3)), 1) == 1.0
    assert TR.dsc(p, np.zeros((4, 4)), 1) == 0.0


def test_hd95_single_pixels():
    p = np.zeros((8, 8), dtype=int)
    t = np.zeros((8, 8), dtype=int)
    p[0, 0] = 1
    t[3, 4] = 1
    assert TR.hd95(p, t, 1) == 5.0
    assert TR.hd95(p, p, 1) == 0.0
    assert TR.hd95(p, np.zeros_like(p), 1) is None


def test_hd95_exactly_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(40):
        h, w = rng.integers(4, 14, 2)
        p = (rng.random((h, w)) < rng.uniform(0.1, 0.7)).astype(int)
        t = (rng.random((h, w)) < rng.uniform(0.1, 0.7)).astype(int)
        assert TR.hd95(p, t, 1) == hd95_brute(p, t, 1)


def test_score_masks_excludes_empty_hd95():
    t = np.zeros((1, 6, 6), dtype=int)
    t[0, 1:3, 1:3] = 1
    rep = TR.score_masks(t, t, 3)      # class 2 empty in both
    assert rep.classes == [1, 2]
    assert rep.dsc == {1: 1.0, 2: 1.0}
    assert rep.hd95 == {1: 0.0, 2: None}
    assert rep.hd95_excluded == 1
    assert rep.mean_hd95 == 0.0


# ---------------------------------------------------------------------------
# data

def test_generator_properties():
    data = TR.generate_synthetic_dataset(3, 12, 32, 3)
    assert len(data) == 12
    bands = TR.intensity_bands(3)
    lo, hi = TR.FG_FRACTION_RANGE
    for s in data:
        assert s.image.shape == (1, 1, 32, 32) and s.image.dtype == np.float32
        assert s.mask.shape == (32, 32)
        assert s.image.min() >= 0 and s.image.max() <= 1
        frac = np.bincount(s.mask.ravel(), minlength=3)[1:] / s.mask.size
        assert np.all((frac >= lo) & (frac <= hi))
        for c, (blo, bhi) in enumerate(bands):
            mean = s.image[0, 0][s.mask == c].mean()
            assert blo - 0.03 <= mean <= bhi + 0.03
    again = TR.generate_synthetic_dataset(3, 12, 32, 3)
    assert all(np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
               for a, b in zip(data, again))


def test_generator_rejects_bad_config():
    with pytest.raises(ConfigError):
        TR.generate_synthetic_dataset(0, 1, 48, 3)
    with pytest.raises(ConfigError):
        TR.generate_synthetic_dataset(0, 1, 32, 1)


def test_dataset_round_trip(tmp_path):
    data = TR.generate_synthetic_dataset(4, 3, 32, 3)
    TR.save_dataset(data, tmp_path / "d", {"num_classes": 3, "seed": 4})
    back, index = TR.load_dataset(tmp_path / "d")
    assert index["num_classes"] == 3 and len(back) == 3
    for a, b in zip(data, back):
        assert np.array_equal(a.mask, b.mask)
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-7


def test_dataset_bad_label(tmp_path):
    data = TR.generate_synthetic_dataset(4, 1, 32, 3)
    TR.save_dataset(data, tmp_path / "d", {"num_classes": 2})
    with pytest.raises(DataError):
        TR.load_dataset(tmp_path / "d")


# ---------------------------------------------------------------------------
# loop

TINY = NetworkConfig(stage_channels=(4, 8, 12, 16), image_size=32, seed=1)


def test_overfit_single_sample():
    data = TR.generate_synthetic_dataset(5, 1, 64, 3)
    m = build_model(NetworkConfig(stage_channels=(8, 16, 24, 32), seed=1))
    _, curve = TR.train(m, data, 200, TR.adam_state(3e-3), seed=0, batch_size=1)
    assert curve[-1] < 0.05 * curve[0]
    pred = TR.predict(m, data[0].image)[0]
    # logits live at stride 4, so exact pixel agreement along curved edges is not expected
    assert np.mean(pred == data[0].mask) >= 0.95
    assert TR.evaluate(m, data).mean_dsc > 0.9


def test_training_is_deterministic():
    data = TR.generate_synthetic_dataset(6, 4, 32, 3)
    runs = []
    for _ in range(2):
        m = build_model(TINY)
        _, curve = TR.train(m, data, 2, TR.adam_state(1e-3), seed=7, batch_size=2)
        runs.append((curve, [p.data.copy() for p in m.parameters()]))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_nan_is_reported():
    data = TR.generate_synthetic_dataset(6, 2, 32, 3)
    m = build_model(TINY)
    m.encoder.stem1.weight.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="logits"):
        TR.train(m, data, 1, TR.adam_state(1e-3))


def test_empty_dataset():
    with pytest.raises(DataError):
        TR.train(build_model(TINY), [], 1, TR.adam_state())
