"""Empirical H-divergence between domains via an RBF-kernel SVM domain classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics

C_GRID = (0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
KKT_TOL = 1e-3
_TAU = 1e-12


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def rbf_kernel(a, b, gamma: float) -> np.ndarray:
    return np.exp(-gamma * sq_dists(a, b))


def median_gamma(x) -> float:
    """``1 / median`` of squared pairwise distances (distinct pairs)."""
    x = np.asarray(x, dtype=np.float64)
    d = sq_dists(x, x)[np.triu_indices(len(x), k=1)]
    med = float(np.median(d)) if d.size else 0.0
    return 1.0 / med if med > 0 else 1.0


@dataclass
class KernelSvm:
    alpha: np.ndarray  # dual coefficients of the support vectors, in [0, C]
    support: np.ndarray  # support vectors
    support_y: np.ndarray  # their +-1 labels
    bias: float
    gamma: float
    C: float
    converged: bool
    iterations: int
    kkt_violation: float

    def decision_function(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if len(self.alpha) == 0:
            return np.full(len(x), self.bias)
        return rbf_kernel(x, self.support, self.gamma) @ (self.alpha * self.support_y) + self.bias

    def predict(self, x) -> np.ndarray:
        return np.where(self.decision_function(x) >= 0.0, 1, -1)

    def error(self, x, y) -> float:
        return float(np.mean(self.predict(x) != np.asarray(y)))


def train_svm(x, y, C: float, gamma: float, tol: float = KKT_TOL, max_iter: int | None = None) -> KernelSvm:
    """Soft-margin SVM dual by SMO with second-order working-set selection.

    Each iteration picks the maximal violating ``i`` and the ``j`` giving the
    largest second-order decrease, then solves the two-variable problem
    exactly. Stops when the KKT gap ``m - M`` drops below ``tol`` or after
    ``max_iter`` pair updates (default ``10 * n * n // 2``, i.e. ten sweeps
    of n/2 pairs per point); in the latter case the last iterate is returned
    with ``converged=False``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (np.any(y == 1) and np.any(y == -1)) or not np.all(np.abs(y) == 1):
        raise ValueError("train_svm needs +-1 labels with both classes present")
    if C <= 0:
        raise ValueError("C must be > 0")
    n = len(y)
    if max_iter is None:
        max_iter = 10 * n * n // 2
    K = rbf_kernel(x, x, gamma)
    diag = np.diag(K).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a with Q = yy'K
    it = 0
    gap = np.inf
    converged = False
    pos, neg = y > 0, y < 0
    while True:
        at_upper = alpha >= C
        at_lower = alpha <= 0
        up = (pos & ~at_upper) | (neg & ~at_lower)
        low = (pos & ~at_lower) | (neg & ~at_upper)
        minus_yg = -y * grad
        vals_up = np.where(up, minus_yg, -np.inf)
        i = int(np.argmax(vals_up))
        m_val = vals_up[i]
        vals_low = np.where(low, minus_yg, np.inf)
        M_val = float(vals_low.min())
        gap = float(m_val - M_val)
        if gap < tol:
            converged = True
            break
        if it >= max_iter:
            break
        b = m_val - minus_yg
        a = diag[i] + diag - 2.0 * K[i]
        a = np.where(a > 0, a, _TAU)
        cand = low & (b > 0)
        score = np.where(cand, -(b * b) / a, np.inf)
        j = int(np.argmin(score))
        step = b[j] / a[j]
        # box limits for alpha_i += y_i t and alpha_j -= y_j t
        lim_i = C - alpha[i] if y[i] > 0 else alpha[i]
        lim_j = alpha[j] if y[j] > 0 else C - alpha[j]
        step = min(step, lim_i, lim_j)
        alpha[i] = min(max(alpha[i] + y[i] * step, 0.0), C)
        alpha[j] = min(max(alpha[j] - y[j] * step, 0.0), C)
        grad += step * y * (K[i] - K[j])
        it += 1
    rho = _rho(alpha, grad, y, C)
    sv = alpha > 0
    return KernelSvm(alpha[sv], x[sv], y[sv], -rho, gamma, C, converged, it, gap)


def _rho(alpha, grad, y, C) -> float:
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        return float(yg[free].mean())
    at_upper = alpha >= C
    ub_mask = (at_upper & (y < 0)) | (~at_upper & (y > 0))
    lb_mask = (at_upper & (y > 0)) | (~at_upper & (y < 0))
    ub = yg[ub_mask].min() if ub_mask.any() else np.inf
    lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
    if np.isinf(ub) or np.isinf(lb):
        return float(ub if np.isfinite(ub) else lb)
    return float((ub + lb) / 2.0)


@dataclass
class DivergenceTask:
    """Disjoint train/test splits of source vs target samples (labels +1 / -1)."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def make_task(source, target, rng: np.random.Generator, per_split: int = 200) -> DivergenceTask:
    """Draw ``per_split`` samples of each domain for train and another ``per_split`` for test.

    Domains with fewer than ``2 * per_split`` samples use ``floor(n / 2)`` per split.
    """
    source = np.asarray(source, dtype=np.float64).reshape(len(source), -1)
    target = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    parts = []
    for data in (source, target):
        k = min(per_split, len(data) // 2)
        if k < 1:
            raise ValueError("each domain needs at least 2 samples")
        perm = rng.permutation(len(data))
        parts.append((data[perm[:k]], data[perm[k : 2 * k]]))
    (s_tr, s_te), (t_tr, t_te) = parts
    return DivergenceTask(
        np.concatenate([s_tr, t_tr]),
        np.concatenate([np.ones(len(s_tr)), -np.ones(len(t_tr))]),
        np.concatenate([s_te, t_te]),
        np.concatenate([np.ones(len(s_te)), -np.ones(len(t_te))]),
    )


@dataclass
class Selection:
    C: float
    train_error: float
    test_error: float
    gamma: float
    train_errors: dict[float, float] = field(default_factory=dict)


def select_c_and_test(task: DivergenceTask, c_grid=C_GRID, gamma: float | None = None) -> Selection:
    """Fit one SVM per C, keep the lowest training error (ties: smaller C), report its test error."""
    if gamma is None:
        gamma = median_gamma(task.train_x)
    best = None
    errors = {}
    for C in sorted(set(float(c) for c in c_grid)):
        svm = train_svm(task.train_x, task.train_y, C, gamma)
        err = svm.error(task.train_x, task.train_y)
        errors[C] = err
        if best is None or err < best[1]:
            best = (C, err, svm)
    C, err, svm = best
    return Selection(C, err, svm.error(task.test_x, task.test_y), gamma, errors)


def h_divergence(rho: float) -> float:
    """``2 (1 - 2 rho)`` from a domain classifier's test error rho."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    return 2.0 * (1.0 - 2.0 * rho)


def estimate_divergence(source, target, rng: np.random.Generator, c_grid=C_GRID, per_split: int = 200) -> float:
    task = make_task(source, target, rng, per_split)
    return h_divergence(select_c_and_test(task, c_grid).test_error)


@dataclass
class BoundTerms:
    """Source risks, H-divergences and target risk for one trained model."""

    source_names: list[str]
    source_risk: list[float]
    divergence: list[float]
    target_name: str
    target_risk: float

    @property
    def mean_source_risk(self) -> float:
        return float(np.mean(self.source_risk))

    @property
    def mean_divergence(self) -> float:
        return float(np.mean(self.divergence))

    def rows(self) -> list[tuple[str, str, float]]:
        """One ``(source, risk, divergence)`` row per source, then an ``average`` row."""
        out = [(name, r, d) for name, r, d in zip(self.source_names, self.source_risk, self.divergence)]
        out.append(("average", self.mean_source_risk, self.mean_divergence))
        return out


def bound_terms(
    model,
    source_eval: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]],
    target_name: str,
    target_div_x: np.ndarray,
    target_risk_x: np.ndarray,
    target_risk_y: np.ndarray,
    rng: np.random.Generator,
    c_grid=C_GRID,
) -> BoundTerms:
    """Bound terms on a trained model.

    ``source_eval`` maps a source name to ``(all_x, val_x, val_y)``: risk is
    measured on the validation split, divergence on features of all samples
    against features of ``target_div_x``.
    """
    t_feat = model.extract_features(target_div_x)
    names, risks, divs = [], [], []
    for name, (all_x, val_x, val_y) in source_eval.items():
        names.append(name)
        risks.append(metrics.risk(model.predict_proba(val_x), val_y))
        divs.append(estimate_divergence(model.extract_features(all_x), t_feat, rng, c_grid))
    t_risk = metrics.risk(model.predict_proba(target_risk_x), target_risk_y)
    return BoundTerms(names, risks, divs, target_name, t_risk)
