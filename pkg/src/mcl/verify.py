"""Self-contained property suite behind ``mcl verify``.

Checks look operations up through the :mod:`mcl.autodiff` module at call
time, so a patched (e.g. deliberately broken) backward rule is detected and
reported under the op's name.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import ot
from .model import Model, classify, extract_features

GRAD_TOL = 1e-4
FD_STEP = 1e-5


@dataclass
class PropertyResult:
    group: str
    name: str
    passed: bool
    detail: str = ""


# ---------------------------------------------------------------- instances

@dataclass
class LossInstance:
    """Small random problem with every input needed by the four losses."""

    model: Model
    x_lab: np.ndarray
    y_lab: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray
    prototypes: np.ndarray
    plan: np.ndarray
    pl_cfg: L.PseudoLabelConfig

    def forward(self, leaves):
        n_layers = self.model.n_layers
        t = self.model.clf_temperature
        f_lab = extract_features(leaves, self.x_lab, n_layers)
        p_lab = ad.softmax_rows(classify(leaves, f_lab, t), 1.0)
        f_a = extract_features(leaves, self.x_a, n_layers)
        f_b = extract_features(leaves, self.x_b, n_layers)
        logits_a = classify(leaves, f_a, t)
        logits_b = classify(leaves, f_b, t)
        return p_lab, f_a, f_b, logits_a, logits_b

    def losses(self) -> dict[str, Callable]:
        def ce(leaves):
            p_lab, *_ = self.forward(leaves)
            return L.cross_entropy(p_lab, self.y_lab)

        def inter(leaves):
            _, _, f_b, _, _ = self.forward(leaves)
            return ot.inter_loss(self.plan, ot.cost_matrix_node(self.prototypes, f_b))

        def intra(variant):
            def fn(leaves):
                _, _, _, la, lb = self.forward(leaves)
                return L.intra_loss(ad.softmax_rows(la), ad.softmax_rows(lb), L.IntraConfig(variant=variant))
            return fn

        def pl(leaves):
            _, _, _, la, lb = self.forward(leaves)
            sharp = ad.softmax_rows(ad.detach(la), self.pl_cfg.temperature)
            return L.pseudo_label_loss(sharp, ad.softmax_rows(lb), self.pl_cfg)

        def total(leaves):
            return L.total_loss(ce(leaves), pl(leaves), inter(leaves), intra("class_wise")(leaves), 1.0, 0.2)

        return {"ce": ce, "inter": inter, "intra_class_wise": intra("class_wise"),
                "intra_sample_wise": intra("sample_wise"), "pl": pl, "total": total}


def make_loss_instance(rng: np.random.Generator, n: int = 8, n_classes: int = 3, feature_dim: int = 5,
                       input_dim: int = 4, hidden: int = 6, clf_temperature: float = 0.05,
                       threshold: float = 0.95, max_tries: int = 200) -> LossInstance:
    """Random instance whose pseudo-label mask is non-empty and not near the threshold.

    Draws are retried until at least one view-A row is confident and no
    sharpened probability lies within 1e-3 of the threshold, so finite
    differences never flip the mask.
    """
    pl_cfg = L.PseudoLabelConfig(threshold=threshold, temperature=1.0)
    for _ in range(max_tries):
        model = Model(input_dim, n_classes, (hidden,), feature_dim, "cosine", clf_temperature, rng)
        x_a = rng.normal(size=(n, input_dim))
        inst = LossInstance(
            model=model,
            x_lab=rng.normal(size=(n, input_dim)),
            y_lab=rng.integers(0, n_classes, n),
            x_a=x_a,
            x_b=x_a + 0.3 * rng.normal(size=(n, input_dim)),
            prototypes=_unit_rows(rng.normal(size=(n_classes, feature_dim))),
            plan=np.zeros((n_classes, n)),
            pl_cfg=pl_cfg,
        )
        _, f_a, _, la, _ = inst.forward(model.leaves(False))
        sharp = ad.softmax_rows(la, pl_cfg.temperature).value.max(axis=1)
        if not (sharp >= pl_cfg.threshold).any() or np.min(np.abs(sharp - pl_cfg.threshold)) < 1e-3:
            continue
        cost = ot.cost_matrix(inst.prototypes, f_a.value)
        inst.plan = ot.sinkhorn_unbalanced(cost, np.full(n_classes, 1 / n_classes), np.full(n, 1 / n),
                                           ot.SinkhornConfig()).plan
        return inst
    raise RuntimeError("could not draw a loss instance with a usable pseudo-label mask")


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------- groups

def _op_cases(rng):
    pos = lambda *s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    sgn = lambda *s: rng.choice([-1.0, 1.0], s) * rng.uniform(0.2, 1.5, s)  # noqa: E731
    b34, c4, r3 = rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), rng.normal(size=(3, 1))
    w = rng.normal(size=(3, 4))
    m42, w32 = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    return {
        "add": (lambda x: ad.sum(ad.mul(ad.add(x, c4), w)), rng.normal(size=(3, 4))),
        "subtract": (lambda x: ad.sum(ad.mul(ad.subtract(r3, x), w)), rng.normal(size=(3, 4))),
        "scalar_mul": (lambda x: ad.sum(ad.mul(ad.scalar_mul(x, -1.7), w)), rng.normal(size=(3, 4))),
        "mul": (lambda x: ad.sum(ad.mul(x, b34)), rng.normal(size=(3, 4))),
        "matmul": (lambda x: ad.sum(ad.mul(ad.matmul(x, m42), w32)), rng.normal(size=(3, 4))),
        "log": (lambda x: ad.sum(ad.mul(ad.log(x), w)), pos(3, 4)),
        "exp": (lambda x: ad.sum(ad.mul(ad.exp(x), w)), rng.normal(size=(3, 4))),
        "reciprocal": (lambda x: ad.sum(ad.mul(ad.reciprocal(x), w)), pos(3, 4)),
        "abs": (lambda x: ad.sum(ad.mul(ad.abs(x), w)), sgn(3, 4)),
        "relu": (lambda x: ad.sum(ad.mul(ad.relu(x), w)), sgn(3, 4)),
        "tanh": (lambda x: ad.sum(ad.mul(ad.tanh(x), w)), rng.normal(size=(3, 4))),
        "transpose": (lambda x: ad.sum(ad.mul(ad.transpose(x), w.T)), rng.normal(size=(3, 4))),
        "sum": (lambda x: ad.mul(ad.sum(ad.mul(x, x)), 0.5), rng.normal(size=(3, 4))),
        "mean": (lambda x: ad.mean(ad.mul(x, w)), rng.normal(size=(3, 4))),
        "row_sum": (lambda x: ad.sum(ad.mul(ad.row_sum(x), r3)), rng.normal(size=(3, 4))),
        "select_columns": (lambda x: ad.sum(ad.mul(ad.select_columns(x, [2, 0]), w[:, :2])), rng.normal(size=(3, 4))),
        "frobenius_inner": (lambda x: ad.frobenius_inner(w, ad.tanh(x)), rng.normal(size=(3, 4))),
        "softmax_rows": (lambda x: ad.sum(ad.mul(ad.softmax_rows(x, 0.7), w)), rng.normal(size=(3, 4))),
        "l2_normalize_rows": (lambda x: ad.sum(ad.mul(ad.l2_normalize_rows(x), w)), rng.normal(size=(3, 4))),
    }


def check_gradients(seed: int = 0, n_instances: int = 3) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, x) in _op_cases(rng).items():
        rep = ad.grad_check(fn, x, FD_STEP, GRAD_TOL)
        out.append(PropertyResult("gradients", f"op:{name}", rep.passed, f"rel err {rep.max_rel_error:.2e}"))
    worst: dict[str, float] = {}
    for _ in range(n_instances):
        inst = make_loss_instance(rng)
        for name, fn in inst.losses().items():
            rep = ad.grad_check_many(fn, inst.model.params, FD_STEP, GRAD_TOL)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    for name, err in worst.items():
        out.append(PropertyResult("gradients", f"loss:{name}", err <= GRAD_TOL, f"rel err {err:.2e}"))
    return out


def check_sinkhorn(seed: int = 0, n_instances: int = 10) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    cfg = ot.SinkhornConfig(epsilon=1e-3, max_iters=20_000, tolerance=1e-9, mode="balanced",
                            epsilon_scaling=True)
    worst_gap, worst_below, worst_viol = 0.0, 0.0, 0.0
    for _ in range(n_instances):
        n = int(rng.integers(3, 7))
        cost = ot.cost_matrix(_unit_rows(rng.normal(size=(n, 4))), _unit_rows(rng.normal(size=(n, 4))))
        mu = np.full(n, 1.0 / n)
        plan = ot.sinkhorn_balanced(cost, mu, mu, cfg)
        exact = ot.exact_ot_bruteforce(cost)
        gap = plan.transport_cost(cost) - exact
        worst_gap = max(worst_gap, abs(gap))
        worst_below = max(worst_below, -gap)
        worst_viol = max(worst_viol, plan.marginal_violation)
    bal = ot.SinkhornConfig(epsilon=0.05, max_iters=20_000, tolerance=1e-12, mode="balanced")
    unb = ot.SinkhornConfig(epsilon=0.05, max_iters=20_000, tolerance=1e-12, mode="unbalanced", rho=1e6)
    worst_limit = 0.0
    for _ in range(n_instances):
        ns, nt = int(rng.integers(2, 6)), int(rng.integers(2, 8))
        cost = ot.cost_matrix(_unit_rows(rng.normal(size=(ns, 3))), _unit_rows(rng.normal(size=(nt, 3))))
        a, b = np.full(ns, 1 / ns), np.full(nt, 1 / nt)
        diff = np.abs(ot.sinkhorn_balanced(cost, a, b, bal).plan - ot.sinkhorn_unbalanced(cost, a, b, unb).plan)
        worst_limit = max(worst_limit, float(diff.max()))
    return [
        PropertyResult("sinkhorn", "oracle_gap", worst_gap <= 1e-3, f"max |cost - exact| {worst_gap:.2e}"),
        PropertyResult("sinkhorn", "never_below_exact", worst_below <= 1e-9, f"max shortfall {worst_below:.2e}"),
        PropertyResult("sinkhorn", "marginals", worst_viol <= 1e-6, f"max violation {worst_viol:.2e}"),
        PropertyResult("sinkhorn", "unbalanced_limit", worst_limit <= 1e-4, f"max entry diff {worst_limit:.2e}"),
    ]


def check_closed_forms() -> list[PropertyResult]:
    out = []
    n = 64
    for c in (2, 3, 5):
        uni = np.full((n, c), 1.0 / c)
        got = float(L.intra_loss(uni, uni).value)
        want = 2 * (c - 1) / c
        out.append(PropertyResult("closed_form", f"intra_uniform_C{c}", abs(got - want) <= 1e-9,
                                  f"{got:.12f} vs {want:.12f}"))
        onehot = np.eye(c)[np.arange(n) % c]
        got = float(L.intra_loss(onehot, onehot).value)
        out.append(PropertyResult("closed_form", f"intra_balanced_onehot_C{c}", got <= 1e-6, f"{got:.2e}"))
        collapsed = np.eye(c)[np.zeros(n, dtype=int)]
        got = float(L.intra_loss(collapsed, collapsed).value)
        want = (c - 1) / c
        out.append(PropertyResult("closed_form", f"intra_collapsed_C{c}", abs(got - want) <= 1e-6,
                                  f"{got:.9f} vs {want:.9f}"))
    p_a = np.array([[0.9, 0.1], [0.6, 0.4]])
    got = float(L.pseudo_label_loss(p_a, np.array([[0.5, 0.5], [0.3, 0.7]])).value)
    out.append(PropertyResult("closed_form", "pl_below_threshold", got == 0.0, f"{got!r}"))
    return out


def check_determinism() -> list[PropertyResult]:
    from .config import DataConfig, DatasetFactory
    from .trainer import TrainConfig, metrics_csv, train_run

    cfg = TrainConfig(iterations=20, eval_every=10, seed=3)
    runs = []
    for _ in range(2):
        source, target = DatasetFactory(DataConfig(n_per_domain=100))(3)
        runs.append(metrics_csv(train_run(cfg, source, target).history))
    return [PropertyResult("determinism", "metrics_bit_exact", runs[0] == runs[1],
                           f"{len(runs[0])} bytes")]


GROUPS = {
    "gradients": check_gradients,
    "sinkhorn": check_sinkhorn,
    "closed_form": check_closed_forms,
    "determinism": check_determinism,
}


def run_all() -> list[PropertyResult]:
    results = []
    for name, fn in GROUPS.items():
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ot.ConvergenceWarning)
                results.extend(fn())
        except Exception as exc:  # a crashing group is a failing group
            results.append(PropertyResult(name, "crashed", False, f"{type(exc).__name__}: {exc}"))
    return results


def format_report(results: list[PropertyResult]) -> str:
    lines = []
    for r in results:
        lines.append(f"[{'PASS' if r.passed else 'FAIL'}] {r.group}/{r.name}: {r.detail}")
    lines.append("")
    for group in dict.fromkeys(r.group for r in results):
        members = [r for r in results if r.group == group]
        n_pass = sum(r.passed for r in members)
        lines.append(f"{group}: {n_pass}/{len(members)} passed")
    failed = [f"{r.group}/{r.name}" for r in results if not r.passed]
    lines.append("FAILED: " + ", ".join(failed) if failed else "ALL PROPERTIES PASSED")
    return "\n".join(lines)
