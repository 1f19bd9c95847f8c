"""Alternating MCL optimization, evaluation and the ablation grid."""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import ot
from .data import AugmentationConfig, DomainDataset, augment, rng_streams
from .model import Model
from .prototypes import PrototypeBank, batch_class_means, ema_update, init_from_source

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "loss_total", "loss_ce", "loss_pl", "loss_inter", "loss_intra",
                  "sinkhorn_iters", "marginal_violation", "acc_overall", "acc_mca", "confident_frac"]
ABLATION_HEADER = ["config_id", "description", "seed", "acc_overall", "acc_mca"]


class DivergenceError(RuntimeError):
    def __init__(self, message, record=None, history=None):
        super().__init__(message)
        self.record = record
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau: float = 0.95
    pl_temperature: float = 1.0
    clf_temperature: float = 0.05
    classifier: str = "cosine"
    hidden_dim: int = 32
    feature_dim: int = 16
    batch_source: int = 32
    batch_labeled: int = 8
    batch_unlabeled: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    iterations: int = 2000
    eval_every: int = 100
    seed: int = 0
    prototype_momentum: float = 0.9
    ot_reference: str = "prototypes"
    intra_variant: str = "class_wise"
    intra_row_floor: float = 1e-8
    intra_include_labeled: bool = False
    ce_target_view: str = "weak"
    use_inter: bool = True
    use_intra: bool = True
    use_pl: bool = True
    eval_split: str = "transductive"
    holdout_fraction: float = 0.3
    sinkhorn: ot.SinkhornConfig = field(default_factory=ot.SinkhornConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ad.ParameterError("lambda1 and lambda2 must be non-negative")
        if not 0 < self.tau <= 1:
            raise ad.ParameterError("tau must lie in (0, 1]")
        if min(self.batch_source, self.batch_labeled, self.batch_unlabeled) < 1:
            raise ad.ParameterError("batch sizes must be >= 1")
        if self.iterations < 0 or self.eval_every < 1:
            raise ad.ParameterError("iterations must be >= 0 and eval_every >= 1")
        choices = {
            "ot_reference": ("prototypes", "source_batch"),
            "intra_variant": ("class_wise", "sample_wise"),
            "ce_target_view": ("weak", "strong", "both"),
            "eval_split": ("transductive", "inductive"),
            "classifier": ("cosine", "linear"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ad.ParameterError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")


@dataclass
class MetricsRecord:
    iteration: int
    loss_total: float = math.nan
    loss_ce: float = math.nan
    loss_pl: float = math.nan
    loss_inter: float = math.nan
    loss_intra: float = math.nan
    sinkhorn_iters: int = 0
    marginal_violation: float = math.nan
    acc_overall: float = math.nan
    acc_mca: float = math.nan
    confident_frac: float = math.nan

    def row(self) -> list[str]:
        vals = [self.iteration, self.loss_total, self.loss_ce, self.loss_pl, self.loss_inter,
                self.loss_intra, self.sinkhorn_iters, self.marginal_violation, self.acc_overall,
                self.acc_mca, self.confident_frac]
        return [str(v) if isinstance(v, int) else format(v, ".17g") for v in vals]


@dataclass
class Batch:
    xs: np.ndarray
    ys: np.ndarray
    x_tl_a: np.ndarray
    x_tl_b: np.ndarray
    y_tl: np.ndarray
    xu_a: np.ndarray
    xu_b: np.ndarray


class BatchStream:
    """Endless index batches over ``n`` items, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ad.ParameterError("cannot batch an empty dataset")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self._queue = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._queue) < self.batch_size:
            self._queue = np.concatenate([self._queue, self.rng.permutation(self.n)])
        out, self._queue = self._queue[:self.batch_size], self._queue[self.batch_size:]
        return out


@dataclass
class TrainState:
    model: Model
    bank: PrototypeBank
    velocity: dict[str, np.ndarray]
    iteration: int
    rngs: dict[str, np.random.Generator]
    streams: dict[str, BatchStream] = field(default_factory=dict)


# ---------------------------------------------------------------- pieces

def build_model(cfg: TrainConfig, input_dim: int, n_classes: int, rng: np.random.Generator) -> Model:
    return Model(input_dim, n_classes, (cfg.hidden_dim,), cfg.feature_dim, cfg.classifier,
                 cfg.clf_temperature, rng)


def init_prototypes(model: Model, source: DomainDataset, n_classes: int, momentum: float) -> PrototypeBank:
    feats = model.features(source.x).value
    return init_from_source(feats, source.y, n_classes, momentum)


def init_state(cfg: TrainConfig, source: DomainDataset, target: DomainDataset,
               n_classes: int | None = None) -> TrainState:
    n_classes = n_classes or max(source.n_classes, target.n_classes)
    rngs = rng_streams(cfg.seed)
    model = build_model(cfg, source.input_dim, n_classes, rngs["init"])
    bank = init_prototypes(model, source, n_classes, cfg.prototype_momentum)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    return TrainState(model, bank, velocity, 0, rngs)


def alignment_loss(reference, f_a, f_b: ad.Node, sink: ot.SinkhornConfig):
    """Step 1 solves the plan on view A (values only); step 2 returns ``<plan, C^B>``.

    ``reference`` and ``f_a`` may be nodes; only their values are read.
    """
    ref = reference.value if isinstance(reference, ad.Node) else np.asarray(reference)
    fa = f_a.value if isinstance(f_a, ad.Node) else np.asarray(f_a)
    cost_a = ot.cost_matrix(ref, fa)
    mu_s = np.full(ref.shape[0], 1.0 / ref.shape[0])
    mu_t = np.full(fa.shape[0], 1.0 / fa.shape[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ot.ConvergenceWarning)
        plan = ot.solve(cost_a, mu_s, mu_t, sink)
    return ot.inter_loss(plan, ot.cost_matrix_node(ref, f_b)), plan


def pseudo_label_term(logits_a: ad.Node, p_b: ad.Node, cfg: L.PseudoLabelConfig):
    sharp = ad.softmax_rows(ad.detach(logits_a), cfg.temperature)
    loss = L.pseudo_label_loss(sharp, p_b, cfg)
    confident = float(np.mean(sharp.value.max(axis=1) >= cfg.threshold))
    return loss, confident


def draw_batch(state: TrainState, source: DomainDataset, target: DomainDataset,
               cfg: TrainConfig, unlabeled_idx: np.ndarray) -> Batch:
    labeled_idx = np.flatnonzero(target.labeled)
    if not state.streams:
        brng = state.rngs["batches"]
        state.streams = {
            "source": BatchStream(len(source), cfg.batch_source, brng),
            "labeled": BatchStream(len(labeled_idx), cfg.batch_labeled, brng),
            "unlabeled": BatchStream(len(unlabeled_idx), cfg.batch_unlabeled, brng),
        }
    si = state.streams["source"].next()
    li = labeled_idx[state.streams["labeled"].next()]
    ui = unlabeled_idx[state.streams["unlabeled"].next()]
    arng, acfg = state.rngs["augment"], cfg.augment
    xtl = target.x[li]
    xu = target.x[ui]
    return Batch(
        xs=source.x[si], ys=source.y[si],
        x_tl_a=augment(xtl, "A", acfg, arng), x_tl_b=augment(xtl, "B", acfg, arng), y_tl=target.y[li],
        xu_a=augment(xu, "A", acfg, arng), xu_b=augment(xu, "B", acfg, arng),
    )


def forward_losses(model: Model, leaves, batch: Batch, bank_snapshot: np.ndarray, cfg: TrainConfig):
    """Build every loss term on one batch.  Returns (terms dict, aux dict)."""
    n_s = len(batch.ys)
    # (1) supervised branch
    if cfg.ce_target_view == "weak":
        x_lab, y_lab = np.vstack([batch.xs, batch.x_tl_a]), np.concatenate([batch.ys, batch.y_tl])
    elif cfg.ce_target_view == "strong":
        x_lab, y_lab = np.vstack([batch.xs, batch.x_tl_b]), np.concatenate([batch.ys, batch.y_tl])
    else:
        x_lab = np.vstack([batch.xs, batch.x_tl_a, batch.x_tl_b])
        y_lab = np.concatenate([batch.ys, batch.y_tl, batch.y_tl])
    f_lab = model.features(x_lab, leaves)
    p_lab = ad.softmax_rows(model.logits(f_lab, leaves), 1.0)
    ce = L.cross_entropy(p_lab, y_lab)
    source_feats = f_lab.value[:n_s].copy()

    # (2) unlabeled views
    xa, xb = batch.xu_a, batch.xu_b
    if cfg.intra_include_labeled:
        xa, xb = np.vstack([xa, batch.x_tl_a]), np.vstack([xb, batch.x_tl_b])
    f_a = model.features(xa, leaves)
    f_b = model.features(xb, leaves)
    logits_a = model.logits(f_a, leaves)
    logits_b = model.logits(f_b, leaves)
    p_a = ad.softmax_rows(logits_a, 1.0)
    p_b = ad.softmax_rows(logits_b, 1.0)
    n_u = len(batch.xu_a)

    # (3)-(4) step 1 on view A, step 2 on view B
    reference = bank_snapshot if cfg.ot_reference == "prototypes" else source_feats
    f_b_u = f_b if n_u == f_b.shape[0] else _rows(f_b, n_u)
    inter, plan = alignment_loss(reference, f_a.value[:n_u], f_b_u, cfg.sinkhorn)

    # (5) class-wise clustering
    intra = L.intra_loss(p_a, p_b, L.IntraConfig(cfg.intra_row_floor, cfg.intra_variant))

    # (6) pseudo labels from sharpened, detached view A
    pl_cfg = L.PseudoLabelConfig(cfg.tau, cfg.pl_temperature)
    la_u = logits_a if n_u == logits_a.shape[0] else _rows(logits_a, n_u)
    pb_u = p_b if n_u == p_b.shape[0] else _rows(p_b, n_u)
    pl, confident = pseudo_label_term(la_u, pb_u, pl_cfg)

    terms = {"ce": ce, "pl": pl, "inter": inter, "intra": intra}
    aux = {"plan": plan, "source_feats": source_feats}
    aux["confident_frac"] = confident
    return terms, aux


def _rows(x: ad.Node, n: int) -> ad.Node:
    # first n rows as a differentiable slice
    sel = np.zeros((n, x.shape[0]))
    sel[np.arange(n), np.arange(n)] = 1.0
    return ad.matmul(ad.constant(sel), x)


def assemble_total(terms, cfg: TrainConfig) -> ad.Node:
    return L.total_loss(
        terms["ce"],
        terms["pl"] if cfg.use_pl else None,
        terms["inter"] if cfg.use_inter else None,
        terms["intra"] if cfg.use_intra else None,
        cfg.lambda1, cfg.lambda2,
    )


def sgd_momentum(model: Model, velocity: dict, grads: dict, lr: float, momentum: float) -> None:
    for k, g in grads.items():
        velocity[k] = momentum * velocity[k] + g
        model.params[k] = model.params[k] - lr * velocity[k]
    model.renormalize_classifier()


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> tuple[TrainState, MetricsRecord]:
    """One alternating MCL iteration.

    The plan is solved on detached view-A features against a snapshot of the
    prototypes (or the source batch), then held fixed while the view-B
    alignment loss, clustering loss, pseudo-label loss and cross-entropy are
    minimized with one SGD-momentum step.  Prototypes are updated afterwards
    from the detached source features.
    """
    model = state.model
    leaves = model.leaves()
    try:
        terms, aux = forward_losses(model, leaves, batch, state.bank.snapshot(), cfg)
    except (ad.ContractError, ad.DegenerateFeatureError) as exc:
        # overflowing parameters surface as broken feature contracts
        raise DivergenceError(f"forward pass failed at iteration {state.iteration + 1}: {exc}",
                              MetricsRecord(iteration=state.iteration + 1)) from exc
    total = assemble_total(terms, cfg)
    plan = aux["plan"]
    rec = MetricsRecord(
        iteration=state.iteration + 1,
        loss_total=float(total.value),
        loss_ce=float(terms["ce"].value),
        loss_pl=float(terms["pl"].value),
        loss_inter=float(terms["inter"].value),
        loss_intra=float(terms["intra"].value),
        sinkhorn_iters=int(plan.iterations),
        marginal_violation=float(plan.marginal_violation),
        confident_frac=aux["confident_frac"],
    )
    if not np.isfinite(rec.loss_total):
        raise DivergenceError(f"non-finite total loss at iteration {rec.iteration}", rec)
    ad.backward(total)
    sgd_momentum(model, state.velocity, {k: n.grad for k, n in leaves.items()}, cfg.lr, cfg.momentum)
    if not all(np.isfinite(v).all() for v in model.params.values()):
        raise DivergenceError(f"non-finite parameters after update {rec.iteration}", rec)
    ema_update(state.bank, batch_class_means(aux["source_feats"], batch.ys))
    state.iteration += 1
    return state, rec


# ---------------------------------------------------------------- evaluation

@dataclass
class Evaluation:
    overall: float
    mca: float
    confusion: np.ndarray


def evaluate_predictions(pred: np.ndarray, y: np.ndarray, n_classes: int) -> Evaluation:
    pred, y = np.asarray(pred), np.asarray(y)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    overall = float(np.mean(pred == y)) if len(y) else math.nan
    support = confusion.sum(axis=1)
    present = support > 0
    if not present.all():
        warnings.warn(f"classes {np.flatnonzero(~present).tolist()} absent from evaluation set; "
                      "excluded from MCA", RuntimeWarning, stacklevel=2)
    recalls = np.diag(confusion)[present] / support[present]
    mca = float(recalls.mean()) if len(recalls) else math.nan
    return Evaluation(overall, mca, confusion)


def evaluate(model: Model, dataset: DomainDataset, n_classes: int | None = None) -> Evaluation:
    """Argmax accuracy, mean class-wise recall and confusion counts (no augmentation)."""
    n_classes = n_classes or model.n_classes
    pred = np.argmax(model.predict_proba(dataset.x), axis=1)
    return evaluate_predictions(pred, dataset.y, n_classes)


# ---------------------------------------------------------------- runs

@dataclass
class RunResult:
    state: TrainState
    history: list[MetricsRecord]
    evaluation: Evaluation


def split_unlabeled(target: DomainDataset, cfg: TrainConfig, rng: np.random.Generator):
    """Indices of unlabeled samples used for training and for evaluation."""
    unl = np.flatnonzero(~target.labeled)
    if cfg.eval_split == "transductive":
        return unl, unl
    perm = rng.permutation(unl)
    n_test = max(1, int(round(cfg.holdout_fraction * len(unl))))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def train_run(cfg: TrainConfig, source: DomainDataset, target: DomainDataset,
              n_classes: int | None = None,
              on_record: Callable[[MetricsRecord], None] | None = None) -> RunResult:
    """Initialize, train for ``cfg.iterations`` steps and evaluate periodically.

    ``target`` must already carry its labeled/unlabeled roles.  Iteration 0 is
    always evaluated, then every ``cfg.eval_every`` steps and at the end.
    """
    n_classes = n_classes or max(source.n_classes, target.n_classes)
    state = init_state(cfg, source, target, n_classes)
    train_idx, eval_idx = split_unlabeled(target, cfg, state.rngs["shots"])
    eval_set = target.subset(eval_idx)
    history: list[MetricsRecord] = []

    def log_eval(rec: MetricsRecord):
        ev = evaluate(state.model, eval_set, n_classes)
        rec.acc_overall, rec.acc_mca = ev.overall, ev.mca
        history.append(rec)
        if on_record:
            on_record(rec)
        log.debug("iter %d total=%.4f acc=%.4f", rec.iteration, rec.loss_total, rec.acc_overall)

    log_eval(MetricsRecord(iteration=0))
    for it in range(1, cfg.iterations + 1):
        batch = draw_batch(state, source, target, cfg, train_idx)
        try:
            state, rec = train_step(state, batch, cfg)
        except DivergenceError as err:
            err.history = history
            raise
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            log_eval(rec)
    final = evaluate(state.model, eval_set, n_classes)
    return RunResult(state, history, final)


def metrics_csv(history: Sequence[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for rec in history:
        w.writerow(rec.row())
    return buf.getvalue()


# ---------------------------------------------------------------- ablations

TAB5_ROWS = [
    ("tab5_a", "S+T (CE only)", False, False, False),
    ("tab5_b", "CE + inter", True, False, False),
    ("tab5_c", "CE + intra", False, True, False),
    ("tab5_d", "CE + PL", False, False, True),
    ("tab5_e", "CE + inter + intra", True, True, False),
    ("tab5_f", "CE + inter + PL", True, False, True),
    ("tab5_g", "CE + intra + PL", False, True, True),
    ("tab5_h", "MCL (all losses)", True, True, True),
]
TAB4_CELLS = [
    ("tab4_standard_sample", "standard OT + sample-wise clustering", "source_batch", "sample_wise"),
    ("tab4_standard_class", "standard OT + class-wise clustering", "source_batch", "class_wise"),
    ("tab4_proto_sample", "prototype OT + sample-wise clustering", "prototypes", "sample_wise"),
    ("tab4_proto_class", "prototype OT + class-wise clustering", "prototypes", "class_wise"),
]


def ablation_configs(base: TrainConfig, grid: str = "all") -> list[tuple[str, str, TrainConfig]]:
    if grid not in ("all", "tab4", "tab5"):
        raise ad.ParameterError(f"grid must be all, tab4 or tab5, got {grid!r}")
    out = []
    if grid in ("all", "tab5"):
        for cid, desc, inter, intra, pl in TAB5_ROWS:
            out.append((cid, desc, replace(base, use_inter=inter, use_intra=intra, use_pl=pl)))
    if grid in ("all", "tab4"):
        for cid, desc, ref, variant in TAB4_CELLS:
            out.append((cid, desc, replace(base, use_inter=True, use_intra=True, use_pl=True,
                                           ot_reference=ref, intra_variant=variant)))
    return out


@dataclass(frozen=True)
class AblationCell:
    config_id: str
    description: str
    seed: int
    acc_overall: float
    acc_mca: float


def _run_cell(args) -> AblationCell:
    cid, desc, cfg, seed, make_datasets = args
    source, target = make_datasets(seed)
    res = train_run(replace(cfg, seed=seed), source, target)
    return AblationCell(cid, desc, seed, res.evaluation.overall, res.evaluation.mca)


def ablation_grid(base: TrainConfig, make_datasets: Callable[[int], tuple[DomainDataset, DomainDataset]],
                  seeds: Iterable[int], grid: str = "all", jobs: int = 1) -> list[AblationCell]:
    """Run every grid configuration for every seed.

    ``make_datasets(seed)`` returns the (source, shot-split target) pair for a
    seed; it must be picklable when ``jobs > 1``.  Cells are independent, so
    the result does not depend on ``jobs``.
    """
    tasks = [(cid, desc, cfg, int(s), make_datasets)
             for cid, desc, cfg in ablation_configs(base, grid) for s in seeds]
    if jobs <= 1:
        return [_run_cell(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, tasks))


def ablation_csv(cells: Sequence[AblationCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for c in cells:
        w.writerow([c.config_id, c.description, c.seed, format(c.acc_overall, ".17g"),
                    format(c.acc_mca, ".17g")])
    return buf.getvalue()


def ablation_summary(cells: Sequence[AblationCell]) -> list[dict]:
    """Mean and population std of accuracy per configuration, in grid order."""
    order: list[str] = []
    groups: dict[str, list[AblationCell]] = {}
    for c in cells:
        if c.config_id not in groups:
            order.append(c.config_id)
            groups[c.config_id] = []
        groups[c.config_id].append(c)
    rows = []
    for cid in order:
        acc = np.array([c.acc_overall for c in groups[cid]])
        mca = np.array([c.acc_mca for c in groups[cid]])
        rows.append({"config_id": cid, "description": groups[cid][0].description, "n_seeds": len(acc),
                     "acc_mean": float(acc.mean()), "acc_std": float(acc.std()),
                     "mca_mean": float(mca.mean()), "mca_std": float(mca.std())})
    return rows

