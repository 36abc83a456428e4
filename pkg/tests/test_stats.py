import math

import mpmath
import numpy as np
import pytest

from uhrsample.errors import DataError
from uhrsample.raster import LabeledRaster, Tile
from uhrsample.stats import (
    ClassHistogram,
    balance_residual,
    ce_logit_grad,
    ce_loss_and_grad,
    log_softmax,
    pixel_histogram,
    softmax,
    tail_classes,
    uniform_probe_diagnostics,
)
from uhrsample.synth import synth_longtail

mpmath.mp.dps = 50


def mp_softmax(row):
    ex = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
    s = mpmath.fsum(ex)
    return [float(e / s) for e in ex]


def onehot(labels, c):
    y = np.zeros((len(labels), c))
    for n, lab in enumerate(labels):
        if lab is not None:
            y[n, lab] = 1
    return y


# --- histograms -----------------------------------------------------------


def test_histogram_matches_naive_count():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 6, size=(70, 45)).astype(np.uint16)
    labels[rng.random(labels.shape) < 0.1] = 65535
    r = LabeledRaster(np.zeros((70, 45, 1), np.uint8), labels)
    naive = [0] * 6
    for v in labels.ravel().tolist():
        if v != 65535:
            naive[v] += 1
    h = pixel_histogram(r, 6)
    assert h.counts.tolist() == naive
    assert h.total == sum(naive)


def test_all_ignore_gives_empty_histogram():
    r = LabeledRaster(np.zeros((4, 4, 1), np.uint8), np.full((4, 4), 9, np.uint16), ignore_id=9)
    h = pixel_histogram(r, 3)
    assert h.total == 0
    assert h.shares().tolist() == [0, 0, 0]


def test_out_of_range_label_names_value():
    labels = np.zeros((3, 3), np.uint16)
    labels[1, 1] = 7
    with pytest.raises(DataError, match="7"):
        pixel_histogram(labels, 4)


def test_histogram_additivity():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 4, size=(10, 12)).astype(np.uint16)
    b = rng.integers(0, 4, size=(5, 12)).astype(np.uint16)
    joint = pixel_histogram(np.vstack([a, b]), 4)
    assert joint == pixel_histogram(a, 4) + pixel_histogram(b, 4)
    assert joint == pixel_histogram([a, b], 4)


def test_histogram_over_tiles_uses_tile_ignore():
    t = Tile(None, np.zeros((2, 2, 1), np.uint8), np.array([[0, 3], [3, 1]], np.uint16), ignore_id=3)
    assert pixel_histogram([t, t], 2).counts.tolist() == [2, 2]


def test_half_half_synth_shares():
    r = synth_longtail(2, 512, 512, [0.5, 0.5])
    assert np.allclose(pixel_histogram(r, 2).shares(), 0.5, atol=0.02)


def test_tail_classes_long_tail():
    h = ClassHistogram([700, 200, 70, 30])
    assert tail_classes(h) == [3, 2]
    assert tail_classes(h, threshold=0.01) == [3]
    assert tail_classes(ClassHistogram([50, 50])) == []
    assert tail_classes(ClassHistogram([90, 0, 10])) == [2]


# --- softmax --------------------------------------------------------------


def test_softmax_symmetric_and_stable():
    assert np.allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    p = softmax([5.0, 1005.0])
    assert np.all(np.isfinite(p))
    assert p[1] == pytest.approx(1.0) and p[0] < 1e-300


def test_softmax_against_extended_precision():
    rng = np.random.default_rng(3)
    for _ in range(200):
        row = rng.normal(scale=rng.uniform(0.1, 30), size=int(rng.integers(2, 9)))
        assert np.max(np.abs(softmax(row) - mp_softmax(row))) <= 1e-12
        assert abs(softmax(row).sum() - 1) <= 1e-12


def test_softmax_shift_invariant():
    rng = np.random.default_rng(4)
    z = rng.normal(size=6)
    assert np.allclose(softmax(z), softmax(z + 123.25), atol=1e-15)


@pytest.mark.parametrize("bad", [[0.0, np.nan], [np.inf, 0.0]])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(FloatingPointError):
        softmax(bad)
    with pytest.raises(FloatingPointError):
        log_softmax(bad)


# --- cross-entropy --------------------------------------------------------


def test_ce_two_class_hand_example():
    # p = (1/2, 1/2), y = (1, 0): loss ln 2, per-class p - y = (-1/2, +1/2)
    loss, grad = ce_loss_and_grad(np.array([[0.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    assert grad.tolist() == [-0.5, 0.5]


def test_ce_confident_limit():
    loss, grad = ce_loss_and_grad(np.array([[60.0, 0.0, 0.0]]), np.array([[1.0, 0, 0]]))
    assert loss < 1e-20
    assert np.max(np.abs(grad)) < 1e-20


def test_ce_gradient_finite_differences():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(4, 5))
    y = onehot([0, 3, 3, 1], 5)
    _, g = ce_logit_grad(z, y)
    eps = 1e-6
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        num[idx] = (ce_logit_grad(zp, y)[0] - ce_logit_grad(zm, y)[0]) / (2 * eps)
    assert np.linalg.norm(g - num) / np.linalg.norm(num) <= 1e-6


def test_ce_loss_against_extended_precision():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(3, 4)) * 10
    labels = [1, 0, 3]
    loss, grad = ce_loss_and_grad(z, onehot(labels, 4))
    probs = [mp_softmax(row) for row in z]
    ref = -sum(math.log(probs[n][labels[n]]) for n in range(3)) / 3
    assert loss == pytest.approx(ref, rel=1e-12)
    ref_grad = [sum(probs[n][i] - (labels[n] == i) for n in range(3)) / 3 for i in range(4)]
    assert np.allclose(grad, ref_grad, atol=1e-14)


def test_ce_ignored_rows_do_not_count():
    z = np.array([[0.0, 0.0], [3.0, -1.0]])
    with_ignored = ce_loss_and_grad(z, onehot([0, None], 2))
    alone = ce_loss_and_grad(z[:1], onehot([0], 2))
    assert with_ignored[0] == alone[0]
    assert np.array_equal(with_ignored[1], alone[1])
    assert ce_loss_and_grad(z, np.zeros((2, 2)))[0] == 0.0


@pytest.mark.parametrize(
    "z, y",
    [(np.zeros((2, 3)), np.zeros((2, 2))), (np.zeros((2, 2)), np.array([[1, 1], [0, 1.0]]))],
)
def test_ce_rejects_bad_shapes(z, y):
    with pytest.raises(ValueError):
        ce_loss_and_grad(z, y)


# --- balance --------------------------------------------------------------


def test_balance_residual_examples():
    assert balance_residual(np.full((2, 2), 0.5), onehot([0, 1], 2)).tolist() == [0.0, 0.0]
    assert balance_residual(np.full((4, 2), 0.5), onehot([0] * 4, 2)).tolist() == [-2.0, 2.0]


def test_balance_residual_sums_to_zero():
    rng = np.random.default_rng(7)
    for _ in range(50):
        b, c = rng.integers(1, 20), rng.integers(2, 8)
        p = softmax(rng.normal(size=(b, c)) * 3)
        r = balance_residual(p, onehot(rng.integers(0, c, size=b).tolist(), c))
        assert abs(math.fsum(r)) <= 1e-12


def test_uniform_probe_grad_monotone_in_count():
    grads = []
    for n0 in range(0, 11):
        d = uniform_probe_diagnostics(ClassHistogram([n0, 10 - n0, 5]))
        grads.append(d.grad[0])
    assert all(a > b for a, b in zip(grads, grads[1:]))


def test_uniform_probe_matches_explicit_batch():
    counts = [3, 1, 0, 2]
    d = uniform_probe_diagnostics(ClassHistogram(counts))
    labels = [c for c, n in enumerate(counts) for _ in range(n)]
    _, grad = ce_loss_and_grad(np.zeros((len(labels), 4)), onehot(labels, 4))
    assert np.allclose(d.grad, grad, atol=1e-15)
    assert np.allclose(d.residual, balance_residual(np.full((6, 4), 0.25), onehot(labels, 4)))
    assert d.imbalance_ratio == 3.0
