import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcl import autodiff as ad
from mcl import losses as L
from conftest import central_difference, max_rel_error


def value(node):
    return float(node.value)


def loop_intra(p_a, p_b, floor=1e-8, sample_wise=False):
    """Independent reference: explicit loops over the correlation matrix."""
    if sample_wise:
        p_a, p_b = p_a.T, p_b.T
    k = p_a.shape[1]
    corr = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            corr[i, j] = sum(p_a[s, i] * p_b[s, j] for s in range(p_a.shape[0]))
    total = 0.0
    for m in (corr, corr.T):
        for i in range(k):
            rs = sum(m[i]) + floor
            for j in range(k):
                total += abs(m[i, j] / rs - (1.0 if i == j else 0.0))
    return total / (2 * k)


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- cross entropy

def test_ce_examples():
    assert value(L.cross_entropy(ad.constant([[1.0, 0.0]]), [0])) == 0.0
    assert value(L.cross_entropy(ad.constant([[0.5, 0.5]]), [1])) == pytest.approx(0.6931, abs=5e-5)
    assert value(L.cross_entropy(ad.constant([[1.0, 0.0], [0.5, 0.5]]), [0, 1])) == pytest.approx(0.3466, abs=5e-5)


def test_ce_bad_labels():
    with pytest.raises(ad.ParameterError):
        L.cross_entropy(ad.constant([[0.5, 0.5]]), [2])


def test_ce_zero_probability_is_finite():
    assert np.isfinite(value(L.cross_entropy(ad.constant([[1.0, 0.0]]), [1])))


# ---------------------------------------------------------------- intra, class-wise

def test_intra_identical_balanced_one_hot():
    p = np.eye(3)[[0, 1, 2, 0, 1, 2]]
    assert value(L.intra_loss(p, p)) <= 1e-6


@pytest.mark.parametrize("n", [2, 5, 64])
def test_intra_uniform_two_classes(n):
    p = np.full((n, 2), 0.5)
    assert value(L.intra_loss(p, p)) == pytest.approx(1.0, abs=1e-6)


def test_intra_collapsed_three_classes():
    p = np.eye(3)[np.zeros(10, dtype=int)]
    assert value(L.intra_loss(p, p)) == pytest.approx(2 / 3, abs=1e-6)


def test_intra_matches_loop(rng):
    for _ in range(5):
        p_a, p_b = softmax(rng.normal(size=(8, 3))), softmax(rng.normal(size=(8, 3)))
        assert abs(value(L.intra_loss(p_a, p_b)) - loop_intra(p_a, p_b)) <= 1e-12


def test_intra_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        L.intra_loss(np.ones((3, 2)) / 2, np.ones((4, 2)) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16), st.integers(2, 5), st.integers(2, 12))
def test_intra_nonnegative(seed, c, n):
    rng = np.random.default_rng(seed)
    p_a, p_b = softmax(rng.normal(size=(n, c)) * 3), softmax(rng.normal(size=(n, c)) * 3)
    assert value(L.intra_loss(p_a, p_b)) >= 0


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(1, 6))
def test_intra_sharpness_monotone(c, reps):
    hard = np.eye(c)[np.tile(np.arange(c), reps)]
    vals = []
    for s in (0.0, 0.25, 0.5, 0.75, 1.0):
        p = (1 - s) / c + s * hard
        vals.append(value(L.intra_loss(p, p)))
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 4))
def test_intra_anti_collapse(c, extra):
    n = c + extra
    collapsed = np.eye(c)[np.zeros(n, dtype=int)]
    covering = np.eye(c)[np.arange(n) % c]
    got = value(L.intra_loss(collapsed, collapsed))
    assert got == pytest.approx((c - 1) / c, abs=1e-6)
    assert got > value(L.intra_loss(covering, covering))


# ---------------------------------------------------------------- intra, sample-wise

def test_samplewise_distinct_one_hot():
    p = np.eye(4)[[2, 0, 3]]
    assert value(L.intra_loss_samplewise(p, p)) <= 1e-6


def test_samplewise_uniform_two_samples():
    p = np.full((2, 3), 1 / 3)
    assert value(L.intra_loss_samplewise(p, p)) == pytest.approx(1.0, abs=1e-6)


def test_samplewise_matches_loop(rng):
    p_a, p_b = softmax(rng.normal(size=(5, 3))), softmax(rng.normal(size=(5, 3)))
    got = value(L.intra_loss(p_a, p_b, L.IntraConfig(variant="sample_wise")))
    assert abs(got - loop_intra(p_a, p_b, sample_wise=True)) <= 1e-12


# ---------------------------------------------------------------- pseudo labels

def test_pl_below_threshold_is_zero():
    p_a = np.array([[0.9, 0.1], [0.6, 0.4]])
    assert value(L.pseudo_label_loss(p_a, np.array([[0.5, 0.5], [0.3, 0.7]]))) == 0.0


def test_pl_confident_uniform_b():
    assert value(L.pseudo_label_loss(np.array([[0.96, 0.04]]), np.array([[0.5, 0.5]]))) == pytest.approx(0.6931, abs=5e-5)


def test_pl_confident_matching_b():
    assert value(L.pseudo_label_loss(np.array([[0.96, 0.04]]), np.array([[0.96, 0.04]]))) == pytest.approx(0.0408, abs=5e-5)


def test_pl_mask_takes_single_argmax_class():
    mask = L.confidence_mask(np.array([[0.5, 0.5, 0.0]]), 0.5)
    assert mask.sum() == 1.0


def test_pl_no_gradient_to_view_a(rng):
    a = ad.variable(softmax(rng.normal(size=(6, 3)) * 5))
    b = ad.variable(softmax(rng.normal(size=(6, 3))))
    ad.backward(L.pseudo_label_loss(a, b, L.PseudoLabelConfig(threshold=0.5)))
    assert np.array_equal(a.grad, np.zeros_like(a.value))
    assert np.any(b.grad != 0)


# ---------------------------------------------------------------- total

def test_total_examples():
    zero = ad.constant(0.0)
    assert value(L.total_loss(zero, zero, zero, zero)) == 0.0
    one, two, three, four = (ad.constant(v) for v in (1.0, 2.0, 3.0, 4.0))
    assert value(L.total_loss(one, two, three, four, 0.0, 0.0)) == 3.0
    assert value(L.total_loss(one, two, three, four, 1.0, 0.2)) == pytest.approx(6.8, abs=1e-12)


def test_total_rejects_negative_weights():
    with pytest.raises(ad.ParameterError):
        L.total_loss(None, None, None, None, -1.0, 1.0)


# ---------------------------------------------------------------- gradients on logits

@pytest.mark.parametrize("variant", ["class_wise", "sample_wise"])
def test_intra_gradient_on_logits(rng, variant):
    cfg = L.IntraConfig(variant=variant)
    for _ in range(3):
        za, zb = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))

        def f(zb_node):
            return L.intra_loss(ad.softmax_rows(ad.constant(za)), ad.softmax_rows(zb_node), cfg)

        leaf = ad.variable(zb)
        ad.backward(f(leaf))
        numeric = central_difference(lambda v: value(f(ad.constant(v))), zb)
        assert max_rel_error(leaf.grad, numeric) <= 1e-4


def test_ce_and_pl_gradients_on_logits(rng):
    z, y = rng.normal(size=(8, 3)), rng.integers(0, 3, size=8)
    p_a = softmax(rng.normal(size=(8, 3)) * 4)
    for fn in (lambda n: L.cross_entropy(ad.softmax_rows(n), y),
               lambda n: L.pseudo_label_loss(p_a, ad.softmax_rows(n), L.PseudoLabelConfig(threshold=0.6))):
        leaf = ad.variable(z)
        ad.backward(fn(leaf))
        numeric = central_difference(lambda v: value(fn(ad.constant(v))), z)
        assert max_rel_error(leaf.grad, numeric) <= 1e-4
