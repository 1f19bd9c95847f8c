import warnings
from dataclasses import replace

import numpy as np
import pytest

from mcl import autodiff as ad
from mcl import losses as L
from mcl import trainer as T
from mcl.config import DataConfig, DatasetFactory

SMALL = DataConfig(n_per_domain=120)
QUICK = T.TrainConfig(iterations=30, eval_every=10, seed=1)


@pytest.fixture(scope="module")
def datasets():
    return DatasetFactory(SMALL)(1)


def fresh(cfg, datasets):
    source, target = datasets
    state = T.init_state(cfg, source, target)
    batch = T.draw_batch(state, source, target, cfg, np.flatnonzero(~target.labeled))
    return state, batch


def grads_of(cfg, datasets):
    state, batch = fresh(cfg, datasets)
    leaves = state.model.leaves()
    terms, _ = T.forward_losses(state.model, leaves, batch, state.bank.snapshot(), cfg)
    ad.backward(T.assemble_total(terms, cfg))
    return {k: n.grad for k, n in leaves.items()}, terms


def test_config_validation():
    for bad in ({"lambda1": -1}, {"tau": 0.0}, {"batch_source": 0}, {"ot_reference": "x"}):
        with pytest.raises(ad.ParameterError):
            T.TrainConfig(**bad)


def test_ce_only_step_is_plain_supervised_step(datasets):
    cfg = replace(QUICK, use_inter=False, use_intra=False, use_pl=False)
    state, batch = fresh(cfg, datasets)
    ref = state.model.copy()
    leaves = ref.leaves()
    x = np.vstack([batch.xs, batch.x_tl_a])
    y = np.concatenate([batch.ys, batch.y_tl])
    ce = L.cross_entropy(ad.softmax_rows(ref.logits(ref.features(x, leaves), leaves)), y)
    ad.backward(ce)
    for k, n in leaves.items():
        ref.params[k] = ref.params[k] - cfg.lr * n.grad
    ref.renormalize_classifier()
    T.train_step(state, batch, cfg)
    for k in ref.params:
        assert np.array_equal(state.model.params[k], ref.params[k]), k


def test_lambda1_zero_removes_inter_gradient_but_bank_updates(datasets):
    g_zero, _ = grads_of(replace(QUICK, lambda1=0.0), datasets)
    g_off, _ = grads_of(replace(QUICK, use_inter=False), datasets)
    for k in g_zero:
        assert np.array_equal(g_zero[k], g_off[k]), k
    state, batch = fresh(replace(QUICK, lambda1=0.0), datasets)
    before = state.bank.snapshot()
    T.train_step(state, batch, replace(QUICK, lambda1=0.0))
    assert not np.array_equal(before, state.bank.prototypes)


def test_lambda2_zero_matches_disabled_intra(datasets):
    g_zero, _ = grads_of(replace(QUICK, lambda2=0.0), datasets)
    g_off, _ = grads_of(replace(QUICK, use_intra=False), datasets)
    for k in g_zero:
        assert np.array_equal(g_zero[k], g_off[k]), k


@pytest.mark.parametrize("flag", ["use_pl", "use_intra", "use_inter"])
def test_each_enabled_term_changes_the_gradient(datasets, flag):
    g_off, _ = grads_of(replace(QUICK, **{flag: False}), datasets)
    g_on, _ = grads_of(QUICK, datasets)
    assert any(not np.array_equal(g_off[k], g_on[k]) for k in g_on)


def test_inter_has_no_gradient_to_view_a_or_prototypes(rng):
    protos = ad.variable(rng.normal(size=(3, 5)))
    protos.value /= np.linalg.norm(protos.value, axis=1, keepdims=True)
    f_a = ad.variable(rng.normal(size=(8, 5)))
    f_a.value /= np.linalg.norm(f_a.value, axis=1, keepdims=True)
    f_b = ad.variable(rng.normal(size=(8, 5)))
    loss, _ = T.alignment_loss(protos, f_a, ad.l2_normalize_rows(f_b), T.TrainConfig().sinkhorn)
    ad.backward(loss)
    assert np.array_equal(f_a.grad, np.zeros((8, 5)))
    assert np.array_equal(protos.grad, np.zeros((3, 5)))
    assert np.any(f_b.grad != 0)


def test_pl_has_no_gradient_to_view_a_logits(rng):
    logits_a = ad.variable(rng.normal(size=(8, 3)) * 20)
    logits_b = ad.variable(rng.normal(size=(8, 3)))
    loss, frac = T.pseudo_label_term(logits_a, ad.softmax_rows(logits_b), L.PseudoLabelConfig())
    ad.backward(loss)
    assert frac > 0
    assert np.array_equal(logits_a.grad, np.zeros((8, 3)))


def test_ce_decreases_over_smoke_run(datasets):
    source, target = datasets
    cfg = replace(QUICK, iterations=50)
    state = T.init_state(cfg, source, target)
    unl = np.flatnonzero(~target.labeled)
    ce = []
    for _ in range(50):
        state, rec = T.train_step(state, T.draw_batch(state, source, target, cfg, unl), cfg)
        ce.append(rec.loss_ce)
    assert ce[-1] < ce[0]


def test_zero_iterations_evaluates_fresh_model(datasets):
    source, target = datasets
    res = T.train_run(replace(QUICK, iterations=0), source, target)
    assert [r.iteration for r in res.history] == [0]
    fresh_eval = T.evaluate(T.init_state(QUICK, source, target).model, target.subset(~target.labeled))
    assert res.evaluation.overall == fresh_eval.overall


def test_run_is_deterministic_and_invariants_hold(datasets):
    source, target = datasets
    a = T.train_run(QUICK, source, target)
    b = T.train_run(QUICK, source, target)
    assert T.metrics_csv(a.history) == T.metrics_csv(b.history)
    assert [r.iteration for r in a.history] == [0, 10, 20, 30]
    np.testing.assert_allclose(np.linalg.norm(a.state.bank.prototypes, axis=1), 1.0, atol=1e-12)
    f = a.state.model.features(target.x).value
    np.testing.assert_allclose(np.linalg.norm(f, axis=1), 1.0, atol=1e-9)
    p = a.state.model.predict_proba(target.x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert all(0 <= r.acc_overall <= 1 for r in a.history)
    assert a.history[-1].acc_overall == a.evaluation.overall


def test_divergence_is_reported(datasets):
    source, target = datasets
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(T.DivergenceError) as info:
            T.train_run(replace(QUICK, lr=1e200), source, target)
    assert info.value.history and info.value.history[0].iteration == 0


def test_evaluate_perfect():
    ev = T.evaluate_predictions(np.array([0, 1, 2, 1]), np.array([0, 1, 2, 1]), 3)
    assert ev.overall == 1.0 and ev.mca == 1.0
    assert np.array_equal(ev.confusion, np.diag([1, 2, 1]))


def test_evaluate_constant_predictor():
    y = np.array([0] * 90 + [1] * 10)
    ev = T.evaluate_predictions(np.zeros(100, dtype=int), y, 2)
    assert ev.overall == pytest.approx(0.9) and ev.mca == pytest.approx(0.5)


def test_evaluate_random_predictor():
    rng = np.random.default_rng(0)
    n, c = 5000, 4
    ev = T.evaluate_predictions(rng.integers(0, c, n), rng.integers(0, c, n), c)
    assert abs(ev.overall - 1 / c) <= 3 * np.sqrt((1 / c) * (1 - 1 / c) / n)


def test_evaluate_empty_class_warns():
    with pytest.warns(RuntimeWarning):
        ev = T.evaluate_predictions(np.array([0, 0]), np.array([0, 0]), 2)
    assert ev.mca == 1.0


def test_ablation_grid_structure(datasets):
    cfg = replace(QUICK, iterations=3, eval_every=3)
    make = DatasetFactory(SMALL)
    cells = T.ablation_grid(cfg, make, [0], "all")
    assert len(cells) == 12
    assert len(T.ablation_grid(cfg, make, [0], "tab5")) == 8
    assert len(T.ablation_grid(cfg, make, [0], "tab4")) == 4
    rows = T.ablation_summary(cells)
    assert [r["config_id"] for r in rows][:2] == ["tab5_a", "tab5_b"]
    assert all(np.isfinite(r["acc_mean"]) for r in rows)


def test_ablation_parallel_matches_serial():
    cfg = replace(QUICK, iterations=3, eval_every=3)
    make = DatasetFactory(SMALL)
    serial = T.ablation_grid(cfg, make, [0, 1], "tab4", jobs=1)
    parallel = T.ablation_grid(cfg, make, [0, 1], "tab4", jobs=2)
    assert T.ablation_csv(serial) == T.ablation_csv(parallel)


def test_inductive_split_is_disjoint(datasets):
    _, target = datasets
    cfg = replace(QUICK, eval_split="inductive")
    train_idx, eval_idx = T.split_unlabeled(target, cfg, np.random.default_rng(0))
    assert not set(train_idx) & set(eval_idx)
    assert len(train_idx) + len(eval_idx) == int((~target.labeled).sum())
