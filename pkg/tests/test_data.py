import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcl.data import (MOONS_CENTROID, AugmentationConfig, DomainDataset, ParameterError, ShotSplit, SplitError,
                      augment, gen_gauss_blobs_shift, gen_two_moons_shift, read_csv, rng_streams, select_shots,
                      write_csv)

NO_AUG = AugmentationConfig(weak_noise_sigma=0.0, strong_noise_sigma=0.0, strong_dropout_prob=0.0,
                            strong_scale_low=1.0, strong_scale_high=1.0)


def class_means(ds):
    return np.array([ds.x[ds.y == c].mean(axis=0) for c in range(ds.n_classes)])


def mean_gap_bound(a, b):
    """3 sigma / sqrt(n) for the difference of two per-class empirical means."""
    out = []
    for c in range(a.n_classes):
        xa, xb = a.x[a.y == c], b.x[b.y == c]
        sigma = np.sqrt(xa.var(axis=0) + xb.var(axis=0))
        out.append(3 * sigma / np.sqrt(min(len(xa), len(xb))))
    return np.array(out)


def test_moons_shapes_and_roles():
    src, tgt = gen_two_moons_shift(100, seed=0)
    assert src.x.shape == (100, 2) and tgt.x.shape == (100, 2)
    assert src.labeled.all() and not tgt.labeled.any()
    assert set(src.y) == {0, 1}


def test_moons_zero_rotation_same_distribution():
    src, tgt = gen_two_moons_shift(2000, 0.1, 0.0, seed=1)
    assert np.all(np.abs(class_means(src) - class_means(tgt)) <= mean_gap_bound(src, tgt))


def test_moons_half_turn_reflects_means():
    src, tgt = gen_two_moons_shift(2000, 0.1, 180.0, seed=2)
    reflected = 2 * MOONS_CENTROID - class_means(src)
    assert np.all(np.abs(class_means(tgt) - reflected) <= mean_gap_bound(src, tgt))


def test_moons_deterministic():
    a, b = gen_two_moons_shift(50, seed=7), gen_two_moons_shift(50, seed=7)
    assert np.array_equal(a[0].x, b[0].x) and np.array_equal(a[1].x, b[1].x)


@pytest.mark.parametrize("kw", [{"n_per_domain": 3}, {"rotation_degrees": 360.0}, {"rotation_degrees": -1.0},
                                {"noise": -0.1}])
def test_moons_invalid(kw):
    with pytest.raises(ParameterError):
        gen_two_moons_shift(**{"n_per_domain": 40, **kw})


def test_blobs_identity_shift_same_distribution():
    src, tgt = gen_gauss_blobs_shift(3, 1000, 2, seed=3)
    assert np.all(np.abs(class_means(src) - class_means(tgt)) <= mean_gap_bound(src, tgt))


def test_blobs_translation():
    bias = np.array([2.0, -1.0, 0.5])
    src, tgt = gen_gauss_blobs_shift(3, 1000, 3, np.eye(3), bias, seed=4)
    assert np.all(np.abs(class_means(tgt) - (class_means(src) + bias)) <= mean_gap_bound(src, tgt))


def test_blobs_singular_shift():
    with pytest.raises(ParameterError):
        gen_gauss_blobs_shift(2, 10, 2, np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_weak_identity_when_sigma_zero(rng):
    x = rng.normal(size=(5, 2))
    assert np.array_equal(augment(x, "A", NO_AUG, rng), x)


def test_strong_identity_when_disabled(rng):
    x = rng.normal(size=(5, 2))
    assert np.array_equal(augment(x, "B", NO_AUG, rng), x)


def test_weak_noise_variance():
    rng = np.random.default_rng(0)
    x = np.zeros((10_000, 2))
    var = (augment(x, "A", AugmentationConfig(), rng) - x).var(axis=0)
    np.testing.assert_allclose(var, 0.03 ** 2, rtol=0.05)


def test_augment_bad_view(rng):
    with pytest.raises(ParameterError):
        augment(np.zeros((2, 2)), "C", AugmentationConfig(), rng)


def test_shots_three_per_class():
    _, tgt = gen_two_moons_shift(100, seed=0)
    out = select_shots(tgt, ShotSplit(3, 0))
    assert out.labeled.sum() == 6
    assert [int(out.labeled[out.y == c].sum()) for c in (0, 1)] == [3, 3]


def test_one_shot():
    _, tgt = gen_gauss_blobs_shift(4, 10, 2, seed=1)
    assert select_shots(tgt, ShotSplit(1, 0)).labeled.sum() == 4


def test_shot_selection_deterministic():
    _, tgt = gen_two_moons_shift(100, seed=0)
    assert np.array_equal(select_shots(tgt, ShotSplit(3, 9)).labeled, select_shots(tgt, ShotSplit(3, 9)).labeled)


def test_too_few_samples_for_shots():
    _, tgt = gen_gauss_blobs_shift(2, 2, 2, seed=0)
    with pytest.raises(SplitError):
        select_shots(tgt, ShotSplit(3, 0))


def test_csv_round_trip(tmp_path):
    _, tgt = gen_two_moons_shift(40, seed=5)
    tgt = select_shots(tgt, ShotSplit(2, 5))
    write_csv(tmp_path / "t.csv", tgt)
    back = read_csv(tmp_path / "t.csv")
    assert np.array_equal(back.x, tgt.x) and np.array_equal(back.y, tgt.y)
    assert np.array_equal(back.labeled, tgt.labeled) and back.domain == "target"
    raw = (tmp_path / "t.csv").read_bytes()
    assert b"\r" not in raw and raw.startswith(b"x0,x1,label,domain,role\n")


def test_streams_are_independent_and_reproducible():
    a, b = rng_streams(3), rng_streams(3)
    draws = {k: a[k].random(4) for k in a}
    assert all(np.array_equal(draws[k], b[k].random(4)) for k in b)
    assert len({tuple(v) for v in draws.values()}) == len(draws)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.sampled_from(["A", "B"]))
def test_augment_preserves_shape_and_is_pure(seed, view):
    x = np.random.default_rng(seed).normal(size=(7, 3))
    out1 = augment(x, view, AugmentationConfig(), np.random.default_rng(seed))
    out2 = augment(x, view, AugmentationConfig(), np.random.default_rng(seed))
    assert out1.shape == x.shape and np.array_equal(out1, out2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.integers(1, 5))
def test_partition_exact_and_disjoint(seed, shots):
    _, tgt = gen_gauss_blobs_shift(3, 8, 2, seed=seed)
    out = select_shots(tgt, ShotSplit(shots, seed))
    labeled, unlabeled = np.flatnonzero(out.labeled), np.flatnonzero(~out.labeled)
    assert len(set(labeled) & set(unlabeled)) == 0
    assert len(labeled) + len(unlabeled) == len(tgt) and len(labeled) == 3 * shots
    assert np.array_equal(out.y, tgt.y)


def test_dataset_validation():
    with pytest.raises(ParameterError):
        DomainDataset(np.zeros((2, 2)), np.zeros(2), "source", np.array([True, False]))
