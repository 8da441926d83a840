"""Training loop with per-modality gradient strategies.

One forward pass per step, two backward passes (classification loss, then
domain loss on cleared buffers). Encoder gradients are extracted per
modality as flat vectors, the domain one scaled by -lambda (gradient
reversal); a strategy then turns each modality's (g_c, g_d) pair into a
total update direction. Heads are always updated with their raw
gradients: the classifier from the classification loss, the discriminator
from the unreversed domain loss.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamSet, backward, cross_entropy
from .data import Dataset, MultimodalBatch
from .model import MODALITIES, forward, unimodal_branch_logits
from .modulation import (ConfidenceStats, ModulationCoefficients,
                         discrepancy_ratios, domain_confidence,
                         modulation_coefficients, semantic_confidence,
                         suppression_coefficient)
from .projection import (ProjectionOutcome, apply_cagp, detect_conflict,
                         project_orthogonal, task_strength)

STRATEGIES = ("base", "igdm_only", "cagp_only", "gmp", "unified_modulation",
              "no_k", "no_p", "fixed_proj_class", "fixed_proj_domain",
              "pcgrad", "reverse_cagp")

METRICS_HEADER = ("step,epoch,strategy,rho_v,rho_a,sigma_v,sigma_a,"
                  "k_v,k_a,p_v,p_a,gamma_v,gamma_a,conflict_v,conflict_a,"
                  "norm_gc_v,norm_gc_a,norm_gd_v,norm_gd_a,"
                  "r_va,R_va,loss_c,loss_d,pred_dL,actual_dL")
EVAL_HEADER = "epoch,source_val_acc,target_acc,branch_acc_v,branch_acc_a"

_TINY = 1e-300


@dataclass
class TrainConfig:
    strategy: str = "gmp"
    lam: float = 0.1
    eta: float = 1e-4
    alpha_k: float = 0.3
    alpha_p: float = 0.3
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.eta <= 0.0:
            raise ValueError("eta must be > 0")
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TaskGradients:
    g_c: dict                    # modality -> flat encoder gradient of L_c
    g_d: dict                    # modality -> flat encoder gradient, carries -lambda
    head_grads: dict             # param id -> raw head gradient


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    strategy: str
    rho: dict
    sigma: dict
    k: dict
    p: dict
    gamma: dict
    conflict: dict
    norm_gc: dict
    norm_gd: dict
    r_va: float
    R_va: float
    loss_c: float
    loss_d: float
    pred_dL: float
    actual_dL: float

    def csv_row(self) -> str:
        cells = [str(self.step), str(self.epoch), self.strategy]
        for d in (self.rho, self.sigma, self.k, self.p, self.gamma):
            cells += [repr(d["v"]), repr(d["a"])]
        cells += [str(int(self.conflict["v"])), str(int(self.conflict["a"]))]
        for d in (self.norm_gc, self.norm_gd):
            cells += [repr(d["v"]), repr(d["a"])]
        cells += [repr(self.r_va), repr(self.R_va), repr(self.loss_c),
                  repr(self.loss_d), repr(self.pred_dL), repr(self.actual_dL)]
        return ",".join(cells)


@dataclass
class EvalRecord:
    epoch: int
    source_val_acc: float
    target_acc: float
    branch_acc_v: float
    branch_acc_a: float

    def csv_row(self) -> str:
        return ",".join([str(self.epoch), repr(self.source_val_acc),
                         repr(self.target_acc), repr(self.branch_acc_v),
                         repr(self.branch_acc_a)])


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    norm_gc_sum: dict = field(default_factory=lambda: {"v": 0.0, "a": 0.0})
    shuffle_rng: np.random.Generator = None
    pcgrad_rng: np.random.Generator = None

    @classmethod
    def from_seed(cls, seed: int) -> "TrainState":
        return cls(
            shuffle_rng=np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(10,))),
            pcgrad_rng=np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(11,))))


def _forward_losses(params: ParamSet, batch: MultimodalBatch):
    outs = forward(params, batch)
    loss_c = cross_entropy(outs.class_logits, batch.y)
    loss_d = cross_entropy(outs.domain_logits, batch.d)
    if not (np.isfinite(loss_c.data) and np.isfinite(loss_d.data)):
        raise FloatingPointError(
            f"non-finite losses: loss_c={float(loss_c.data)}, "
            f"loss_d={float(loss_d.data)}")
    return outs, loss_c, loss_d


def _gradients_from_losses(params, loss_c, loss_d, lam) -> TaskGradients:
    gc_map = backward(loss_c, params)
    gd_map = backward(loss_d, params)
    g_c = {m: params.flatten_grads(gc_map, f"encoder:{m}") for m in MODALITIES}
    g_d = {m: -lam * params.flatten_grads(gd_map, f"encoder:{m}")
           for m in MODALITIES}
    head_grads = {}
    for name in params.names_in("head:classifier"):
        head_grads[name] = gc_map[name]
    for name in params.names_in("head:discriminator"):
        head_grads[name] = gd_map[name]
    return TaskGradients(g_c=g_c, g_d=g_d, head_grads=head_grads)


def compute_task_gradients(params: ParamSet, batch: MultimodalBatch,
                           lam: float) -> TaskGradients:
    """Both task gradients from one forward pass and two backward passes."""
    _, loss_c, loss_d = _forward_losses(params, batch)
    return _gradients_from_losses(params, loss_c, loss_d, lam)


def batch_stats(outs, batch: MultimodalBatch) -> ConfidenceStats:
    """Discrepancy ratios from the forward pass used for the losses."""
    q = {m: semantic_confidence(outs.per_modality_class_logits[m], batch.y)
         for m in MODALITIES}
    c = {m: domain_confidence(outs.per_modality_domain_logits[m], batch.d)
         for m in MODALITIES}
    return discrepancy_ratios(q["v"], q["a"], c["v"], c["a"])


def predicted_loss_change(g_c_total: np.ndarray, g_d_total: np.ndarray,
                          eta: float) -> float:
    """First-order loss change for the update -eta * (g_c + g_d)."""
    g_c_total = np.asarray(g_c_total, dtype=np.float64)
    g_d_total = np.asarray(g_d_total, dtype=np.float64)
    if g_c_total.shape != g_d_total.shape:
        raise ValueError("gradient vectors must have the same length")
    return -eta * (float(g_c_total @ g_c_total) + float(g_d_total @ g_d_total)
                   + 2.0 * float(g_c_total @ g_d_total))


def _project_fixed(g_c, g_d, gamma, modality, projected):
    dot_before = float(g_c @ g_d)
    if dot_before >= 0.0:
        return ProjectionOutcome(modality=modality, conflict=False, gamma=gamma,
                                 projected_task="none", G=g_c + g_d,
                                 dot_before=dot_before, dot_after=dot_before)
    if projected == "classification":
        g_c_proj = project_orthogonal(g_c, g_d)
        return ProjectionOutcome(modality=modality, conflict=True, gamma=gamma,
                                 projected_task="classification",
                                 G=g_c_proj + g_d, dot_before=dot_before,
                                 dot_after=float(g_c_proj @ g_d))
    g_d_proj = project_orthogonal(g_d, g_c)
    return ProjectionOutcome(modality=modality, conflict=True, gamma=gamma,
                             projected_task="domain", G=g_c + g_d_proj,
                             dot_before=dot_before, dot_after=float(g_d_proj @ g_c))


def _project_reverse(g_c, g_d, gamma, modality):
    """Inverted selection: shield the stronger task, project the weaker."""
    dot_before = float(g_c @ g_d)
    if dot_before >= 0.0 or gamma == 1.0:
        return ProjectionOutcome(modality=modality, conflict=dot_before < 0.0,
                                 gamma=gamma, projected_task="none",
                                 G=g_c + g_d, dot_before=dot_before,
                                 dot_after=dot_before)
    projected = "domain" if gamma > 1.0 else "classification"
    return _project_fixed(g_c, g_d, gamma, modality, projected)


def _project_pcgrad(g_c, g_d, gamma, modality, rng):
    """Symmetric surgery: each gradient loses its component along the
    other's original direction. Task order is sampled per step."""
    dot_before = float(g_c @ g_d)
    if dot_before >= 0.0:
        return ProjectionOutcome(modality=modality, conflict=False, gamma=gamma,
                                 projected_task="none", G=g_c + g_d,
                                 dot_before=dot_before, dot_after=dot_before)
    first_is_c = bool(rng.integers(0, 2))
    if first_is_c:
        parts = [project_orthogonal(g_c, g_d), project_orthogonal(g_d, g_c)]
    else:
        parts = [project_orthogonal(g_d, g_c), project_orthogonal(g_c, g_d)]
    total = parts[0] + parts[1]
    return ProjectionOutcome(modality=modality, conflict=True, gamma=gamma,
                             projected_task="both", G=total,
                             dot_before=dot_before,
                             dot_after=float(parts[0] @ parts[1]))


def strategy_table(strategy: str):
    """Per-step gradient transformation for a strategy.

    Returns transform(g_c, g_d, stats, coeffs, rng) -> (outcomes, k_eff,
    p_eff) where outcomes maps each modality to its ProjectionOutcome and
    k_eff/p_eff are the multipliers actually applied to g_c/g_d.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")

    def transform(g_c: dict, g_d: dict, stats: ConfidenceStats,
                  coeffs: ModulationCoefficients, rng=None):
        k_eff, p_eff, outcomes = {}, {}, {}
        for m in MODALITIES:
            gamma = task_strength(stats, m)
            if strategy == "unified_modulation":
                u = suppression_coefficient(stats.rho[m], coeffs.alpha_k)
                k_eff[m], p_eff[m] = u, u
            elif strategy in ("base", "cagp_only"):
                k_eff[m], p_eff[m] = 1.0, 1.0
            elif strategy == "no_k":
                k_eff[m], p_eff[m] = 1.0, coeffs.p[m]
            elif strategy == "no_p":
                k_eff[m], p_eff[m] = coeffs.k[m], 1.0
            else:
                k_eff[m], p_eff[m] = coeffs.k[m], coeffs.p[m]
            gc_hat = k_eff[m] * g_c[m]
            gd_hat = p_eff[m] * g_d[m]
            if strategy in ("base", "igdm_only", "unified_modulation"):
                dot = float(gc_hat @ gd_hat)
                outcomes[m] = ProjectionOutcome(
                    modality=m, conflict=dot < 0.0, gamma=gamma,
                    projected_task="none", G=gc_hat + gd_hat,
                    dot_before=dot, dot_after=dot)
            elif strategy in ("gmp", "cagp_only", "no_k", "no_p"):
                outcomes[m] = apply_cagp(gc_hat, gd_hat, gamma, modality=m)
            elif strategy == "fixed_proj_class":
                outcomes[m] = _project_fixed(gc_hat, gd_hat, gamma, m,
                                             "classification")
            elif strategy == "fixed_proj_domain":
                outcomes[m] = _project_fixed(gc_hat, gd_hat, gamma, m, "domain")
            elif strategy == "reverse_cagp":
                outcomes[m] = _project_reverse(gc_hat, gd_hat, gamma, m)
            elif strategy == "pcgrad":
                outcomes[m] = _project_pcgrad(gc_hat, gd_hat, gamma, m, rng)
        return outcomes, k_eff, p_eff

    return transform


def step(params: ParamSet, batch: MultimodalBatch, cfg: TrainConfig,
         state: TrainState) -> MetricsRecord:
    """One optimization step; atomic (params untouched if anything is
    non-finite)."""
    outs, loss_c_t, loss_d_t = _forward_losses(params, batch)
    loss_c, loss_d = float(loss_c_t.data), float(loss_d_t.data)
    stats = batch_stats(outs, batch)
    coeffs = modulation_coefficients(stats, cfg.alpha_k, cfg.alpha_p)
    grads = _gradients_from_losses(params, loss_c_t, loss_d_t, cfg.lam)

    transform = strategy_table(cfg.strategy)
    outcomes, k_eff, p_eff = transform(grads.g_c, grads.g_d, stats, coeffs,
                                       state.pcgrad_rng)

    # Stage every delta, then validate, then apply: a step never half-updates.
    updates = {}
    for m in MODALITIES:
        for name, delta in params.unflatten(outcomes[m].G,
                                            f"encoder:{m}").items():
            updates[name] = cfg.eta * delta
    for name, grad in grads.head_grads.items():
        updates[name] = cfg.eta * grad
    for name, delta in updates.items():
        if not np.all(np.isfinite(delta)):
            raise FloatingPointError(f"non-finite update for parameter {name!r}")

    norm_gc = {m: float(np.linalg.norm(grads.g_c[m])) for m in MODALITIES}
    norm_gd = {m: float(np.linalg.norm(grads.g_d[m])) for m in MODALITIES}
    g_c_total = np.concatenate([grads.g_c[m] for m in MODALITIES])
    g_d_total = np.concatenate([grads.g_d[m] for m in MODALITIES])
    pred_dl = predicted_loss_change(g_c_total, g_d_total, cfg.eta)
    effective_before = loss_c - cfg.lam * loss_d

    for name, delta in updates.items():
        params[name].data -= delta

    _, loss_c2, loss_d2 = _forward_losses(params, batch)
    effective_after = float(loss_c2.data) - cfg.lam * float(loss_d2.data)

    state.step += 1
    for m in MODALITIES:
        state.norm_gc_sum[m] += norm_gc[m]
    record = MetricsRecord(
        step=state.step, epoch=state.epoch, strategy=cfg.strategy,
        rho=dict(stats.rho), sigma=dict(stats.sigma),
        k=k_eff, p=p_eff,
        gamma={m: task_strength(stats, m) for m in MODALITIES},
        conflict={m: outcomes[m].conflict for m in MODALITIES},
        norm_gc=norm_gc, norm_gd=norm_gd,
        r_va=norm_gc["v"] / max(norm_gc["a"], _TINY),
        R_va=state.norm_gc_sum["v"] / max(state.norm_gc_sum["a"], _TINY),
        loss_c=loss_c, loss_d=loss_d,
        pred_dL=pred_dl, actual_dL=effective_after - effective_before)
    return record


def first_order_check(params: ParamSet, batch: MultimodalBatch, lam: float,
                      etas) -> list:
    """Predicted vs measured loss change for encoder-only updates.

    The prediction covers the encoder update -eta * (g_c + g_d); the
    measured change is of the encoder-side objective L_c - lambda * L_d,
    whose gradient after reversal is exactly g_c + g_d. The gap should
    shrink quadratically in eta.
    """
    _, loss_c_t, loss_d_t = _forward_losses(params, batch)
    grads = _gradients_from_losses(params, loss_c_t, loss_d_t, lam)
    base_loss = float(loss_c_t.data) - lam * float(loss_d_t.data)
    g_c_total = np.concatenate([grads.g_c[m] for m in MODALITIES])
    g_d_total = np.concatenate([grads.g_d[m] for m in MODALITIES])
    results = []
    for eta in etas:
        trial = params.copy()
        for m in MODALITIES:
            deltas = trial.unflatten(grads.g_c[m] + grads.g_d[m], f"encoder:{m}")
            for name, delta in deltas.items():
                trial[name].data -= eta * delta
        _, loss_c2, loss_d2 = _forward_losses(trial, batch)
        actual = float(loss_c2.data) - lam * float(loss_d2.data) - base_loss
        results.append({"eta": eta,
                        "predicted": predicted_loss_change(g_c_total,
                                                           g_d_total, eta),
                        "actual": actual})
    return results


def evaluate(params: ParamSet, split: Dataset) -> dict:
    """Fused and per-branch argmax accuracies on a split."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    batch = split.make_batch()
    outs = forward(params, batch)
    fused = float(np.mean(np.argmax(outs.class_logits.data, axis=1) == batch.y))
    accs = {"accuracy": fused}
    for m in MODALITIES:
        logits = unimodal_branch_logits(params, batch, m)
        accs[f"branch_{m}"] = float(
            np.mean(np.argmax(logits.data, axis=1) == batch.y))
    return accs


@dataclass
class TrainResult:
    params: ParamSet
    best_params: ParamSet
    best_epoch: int
    metrics: list
    eval_rows: list
    summary: dict


def run_training(params: ParamSet, cfg: TrainConfig, train: Dataset,
                 source_val: Dataset, target_test: Dataset) -> TrainResult:
    """Train for cfg.epochs, evaluating once per epoch; keeps the params of
    the best source-validation epoch. epochs=0 degenerates to a single
    evaluation of the initial model."""
    state = TrainState.from_seed(cfg.seed)
    metrics, eval_rows = [], []

    def eval_row(epoch):
        val = evaluate(params, source_val)
        test = evaluate(params, target_test)
        return EvalRecord(epoch=epoch, source_val_acc=val["accuracy"],
                          target_acc=test["accuracy"],
                          branch_acc_v=test["branch_v"],
                          branch_acc_a=test["branch_a"])

    best_params, best_epoch, best_val = params.copy(), 0, -1.0
    if cfg.epochs == 0:
        row = eval_row(0)
        eval_rows.append(row)
        best_val = row.source_val_acc
    n = len(train)
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        order = state.shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = train.make_batch(order[start:start + cfg.batch_size])
            metrics.append(step(params, batch, cfg, state))
        row = eval_row(epoch)
        eval_rows.append(row)
        if row.source_val_acc > best_val:
            best_val = row.source_val_acc
            best_epoch = epoch
            best_params = params.copy()

    last = [rec for rec in metrics if rec.epoch == cfg.epochs]
    if last:
        rho_dev = float(np.mean([abs(rec.rho[m] - 1.0)
                                 for rec in last for m in MODALITIES]))
        sigma_dev = float(np.mean([abs(rec.sigma[m] - 1.0)
                                   for rec in last for m in MODALITIES]))
    else:
        rho_dev = sigma_dev = float("nan")
    best_row = next(r for r in eval_rows if r.epoch == best_epoch)
    summary = {
        "best_source_val_acc": best_val,
        "target_acc_at_best": best_row.target_acc,
        "mean_abs_rho_dev_last_epoch": rho_dev,
        "mean_abs_sigma_dev_last_epoch": sigma_dev,
    }
    return TrainResult(params=params, best_params=best_params,
                       best_epoch=best_epoch, metrics=metrics,
                       eval_rows=eval_rows, summary=summary)


def metrics_csv(records) -> str:
    return "\n".join([METRICS_HEADER] + [r.csv_row() for r in records]) + "\n"


def eval_csv(rows) -> str:
    return "\n".join([EVAL_HEADER] + [r.csv_row() for r in rows]) + "\n"
