"""Cosine transport costs, log-domain Sinkhorn solvers and the alignment loss.

Both solvers parameterize the plan as

    gamma_ij = mu_s[i] * mu_t[j] * exp((f_i + g_j - C_ij) / eps)

and alternate closed-form updates of the dual potentials ``f`` and ``g``.
The unbalanced solver replaces the hard marginal constraints with
``rho * KL(marginal || mu)`` penalties, which damps every potential update by
``rho / (rho + eps)``.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

UNIT_NORM_TOL = 1e-6


class ConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.05
    max_iters: int = 1000
    tolerance: float = 1e-9
    mode: str = "unbalanced"
    rho: float = 1.0
    epsilon_scaling: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ad.ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if not self.rho > 0:
            raise ad.ParameterError(f"rho must be positive, got {self.rho}")
        if self.max_iters < 1:
            raise ad.ParameterError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.mode not in ("balanced", "unbalanced"):
            raise ad.ParameterError(f"unknown Sinkhorn mode {self.mode!r}")


@dataclass
class CouplingPlan:
    plan: np.ndarray
    iterations: int
    marginal_violation: float
    converged: bool
    raw_violation: float = 0.0

    @property
    def mass(self) -> float:
        return float(self.plan.sum())

    def transport_cost(self, cost: np.ndarray) -> float:
        return float(np.sum(self.plan * cost))


def _check_unit_rows(x: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(x, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise ad.ContractError(f"{name} rows must be unit-norm (max deviation "
                               f"{np.max(np.abs(norms - 1.0)):.3g})")


def cost_matrix(reference, targets) -> np.ndarray:
    """``C[i, j] = 1 - <reference_i, targets_j>`` for unit-norm rows, clipped to [0, 2]."""
    reference = np.asarray(reference.value if isinstance(reference, ad.Node) else reference, dtype=np.float64)
    targets = np.asarray(targets.value if isinstance(targets, ad.Node) else targets, dtype=np.float64)
    _check_unit_rows(reference, "reference")
    _check_unit_rows(targets, "targets")
    return np.clip(1.0 - reference @ targets.T, 0.0, 2.0)


def cost_matrix_node(reference: np.ndarray, targets: ad.Node) -> ad.Node:
    """Differentiable cost against ``targets``; ``reference`` is a constant."""
    reference = np.asarray(reference, dtype=np.float64)
    _check_unit_rows(reference, "reference")
    _check_unit_rows(targets.value, "targets")
    sim = ad.matmul(ad.constant(reference), ad.transpose(targets))
    return ad.add_scalar(ad.scalar_mul(sim, -1.0), 1.0)


def _lse_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1)
    return m + np.log(np.exp(z - m[:, None]).sum(axis=1))


def _violation(plan, a, b) -> float:
    return float(max(np.abs(plan.sum(axis=1) - a).sum(), np.abs(plan.sum(axis=0) - b).sum()))


def round_to_marginals(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a near-feasible plan onto exact marginals ``(a, b)``.

    Rows then columns are scaled down to fit, and the missing mass is added
    back as a rank-one correction (Altschuler, Weed & Rigollet, 2017).  The
    result stays non-negative and moves at most the L1 marginal violation.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        r = plan.sum(axis=1)
        x = plan * np.where(r > 0, np.minimum(a / r, 1.0), 1.0)[:, None]
        c = x.sum(axis=0)
        x = x * np.where(c > 0, np.minimum(b / c, 1.0), 1.0)[None, :]
    # non-negative in exact arithmetic; clamp away one-ulp overshoots
    err_r = np.maximum(a - x.sum(axis=1), 0.0)
    err_c = np.maximum(b - x.sum(axis=0), 0.0)
    total = err_c.sum()
    if total > 0:
        x = x + np.outer(err_r, err_c) / total
    return x


def _check_marginal(mu, n, name) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (n,):
        raise ad.ParameterError(f"{name} has shape {mu.shape}, expected ({n},)")
    if np.any(mu <= 0):
        raise ad.ParameterError(f"{name} must be strictly positive")
    return mu


ABSORB_EVERY = 10
SCALING_START = 1.0
SCALING_FACTOR = 3.0
SCALING_STAGE_ITERS = 300


def _plan_shift(df, dg) -> float:
    """Sup-norm change of ``f_i + g_j``; blind to the shift ``(f + c, g - c)``."""
    return float(max(abs(df.max() + dg.max()), abs(df.min() + dg.min())))


def _iterate(cost, a, b, eps, damping, balanced, f, g, max_iters, tolerance):
    """Sinkhorn iterations from potentials ``(f, g)``; returns (f, g, iterations, converged).

    Runs blocks of scaling-form updates on a kernel stabilized by the current
    potentials, absorbing the scalings back into ``f, g`` after each block.  A
    block that under- or overflows is redone with log-domain updates.
    """
    ns, nt = cost.shape
    neg = -cost / eps
    row_kernel = neg + np.log(b)[None, :]
    col_kernel = (neg + np.log(a)[:, None]).T
    scale = damping * eps
    it, converged = 0, False
    while it < max_iters and not converged:
        block = min(ABSORB_EVERY, max_iters - it)
        kern = np.exp(neg + (f[:, None] + g[None, :]) / eps)
        ka, kb = kern.T * a[None, :], kern * b[None, :]
        cf = np.exp((damping - 1.0) * f / eps)
        cg = np.exp((damping - 1.0) * g / eps)
        u, v = np.ones(ns), np.ones(nt)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore", under="ignore"):
            for _ in range(block):
                u_prev, v_prev = u, v
                u = (kb @ v) ** -damping * cf
                v = (ka @ u) ** -damping * cg
            stable = bool(np.isfinite(u).all() and np.isfinite(v).all() and u.min() > 0 and v.min() > 0)
            if stable:
                if balanced:
                    converged = np.abs(a * u * (kb @ v) - a).sum() <= tolerance
                else:
                    converged = _plan_shift(eps * np.log(u / u_prev), eps * np.log(v / v_prev)) <= tolerance
        if stable:
            f, g = f + eps * np.log(u), g + eps * np.log(v)
            it += block
            continue
        for _ in range(block):
            f_new = -scale * _lse_rows(row_kernel + g[None, :] / eps)
            g_new = -scale * _lse_rows(col_kernel + f_new[None, :] / eps)
            it += 1
            if balanced:
                f, g = f_new, g_new
                row = a * np.exp(f / eps + _lse_rows(row_kernel + g[None, :] / eps))
                converged = np.abs(row - a).sum() <= tolerance
            else:
                converged = _plan_shift(f_new - f, g_new - g) <= tolerance
                f, g = f_new, g_new
            if converged:
                break
    return f, g, it, bool(converged)


def _solve(cost, mu_s, mu_t, cfg: SinkhornConfig, damping: float, balanced: bool) -> CouplingPlan:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ad.DimensionError(f"cost must be a matrix, got shape {cost.shape}")
    ns, nt = cost.shape
    a = _check_marginal(mu_s, ns, "mu_s")
    b = _check_marginal(mu_t, nt, "mu_t")
    if balanced and (abs(a.sum() - 1) > 1e-9 or abs(b.sum() - 1) > 1e-9):
        raise ad.ParameterError("balanced Sinkhorn needs marginals summing to 1")
    eps = cfg.epsilon
    f, g = np.zeros(ns), np.zeros(nt)
    used = 0
    if cfg.epsilon_scaling:
        stage = SCALING_START
        while stage > eps * SCALING_FACTOR and used < cfg.max_iters:
            stage_damping = cfg.rho / (cfg.rho + stage) if not balanced else 1.0
            f, g, n, _ = _iterate(cost, a, b, stage, stage_damping, balanced, f, g,
                                  min(SCALING_STAGE_ITERS, cfg.max_iters - used), cfg.tolerance)
            used += n
            stage /= SCALING_FACTOR
    f, g, n, converged = _iterate(cost, a, b, eps, damping, balanced, f, g,
                                  max(cfg.max_iters - used, 1), cfg.tolerance)
    it = used + n
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps) * a[:, None] * b[None, :]
    raw = _violation(plan, a, b)
    if balanced:
        plan = round_to_marginals(plan, a, b)
    violation = _violation(plan, a, b)
    if not converged:
        warnings.warn(f"Sinkhorn stopped after {it} iterations (marginal violation {violation:.3g})",
                      ConvergenceWarning, stacklevel=3)
    return CouplingPlan(plan, it, violation, bool(converged), raw)


def sinkhorn_balanced(cost, mu_s, mu_t, cfg: SinkhornConfig = SinkhornConfig(mode="balanced")) -> CouplingPlan:
    """Entropic OT with exact marginals.

    Stops once the L1 marginal violation drops to ``cfg.tolerance``; hitting
    ``max_iters`` emits a :class:`ConvergenceWarning` and returns the plan
    with ``converged=False``.  The returned plan is passed through
    :func:`round_to_marginals`; ``raw_violation`` records the error before
    rounding.
    """
    return _solve(cost, mu_s, mu_t, cfg, 1.0, balanced=True)


def sinkhorn_unbalanced(cost, mu_s, mu_t, cfg: SinkhornConfig = SinkhornConfig()) -> CouplingPlan:
    """Entropic OT with KL-relaxed marginals of strength ``cfg.rho``.

    Convergence is judged on the sup-norm change of ``f_i + g_j`` (the log
    plan up to scale), since a large ``rho`` pins ``f - g`` only weakly.
    """
    return _solve(cost, mu_s, mu_t, cfg, cfg.rho / (cfg.rho + cfg.epsilon), balanced=False)


def solve(cost, mu_s, mu_t, cfg: SinkhornConfig) -> CouplingPlan:
    if cfg.mode == "balanced":
        return sinkhorn_balanced(cost, mu_s, mu_t, cfg)
    return sinkhorn_unbalanced(cost, mu_s, mu_t, cfg)


def inter_loss(gamma_star, cost_b: ad.Node) -> ad.Node:
    """``<gamma*, C^B>_F`` with the plan held constant."""
    plan = gamma_star.plan if isinstance(gamma_star, CouplingPlan) else gamma_star
    return ad.frobenius_inner(np.asarray(plan, dtype=np.float64), cost_b)


def exact_ot_bruteforce(cost) -> float:
    """Exact uniform-marginal OT cost of a square matrix by permutation search.

    Uniform square OT is optimized at a permutation matrix scaled by 1/n, so
    enumerating all n! permutations is exact.  Refuses n > 7.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ad.DimensionError(f"cost must be square, got {cost.shape}")
    if n > 7:
        raise ad.ParameterError(f"brute force refused for n={n} > 7")
    rows = np.arange(n)
    best = min(cost[rows, list(p)].sum() for p in itertools.permutations(range(n)))
    return float(best / n)
