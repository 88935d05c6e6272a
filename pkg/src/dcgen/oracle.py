"""Brute-force verification on tabular instances and gradient checking.

A TabularModel parameterizes every context's logits directly, so the softmax
family is fully expressive and the loss optima can be compared against the
closed-form propensity-ratio target without encoder capacity getting in the
way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np


@dataclass
class ProbTable:
    """Row-stochastic matrix: one conditional distribution per context."""

    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if np.any(self.rows < 0):
            raise ValueError("probabilities must be non-negative")
        sums = self.rows.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise ValueError("each row must sum to 1")

    @property
    def num_contexts(self) -> int:
        return self.rows.shape[0]

    @property
    def num_items(self) -> int:
        return self.rows.shape[1]


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def kl_divergence(p_row: np.ndarray, q_row: np.ndarray) -> float:
    """sum p * ln(p/q) with the 0 * ln 0 = 0 convention."""
    p = np.asarray(p_row, dtype=np.float64)
    q = np.asarray(q_row, dtype=np.float64)
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValueError("KL undefined: q vanishes where p has mass")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def target_distribution_r(p_data_row: np.ndarray,
                          q_row: np.ndarray) -> np.ndarray:
    """Normalized propensity ratio: r(y) = (p_data(y)/q(y)) / Z."""
    p = np.asarray(p_data_row, dtype=np.float64)
    q = np.asarray(q_row, dtype=np.float64)
    if np.any((p > 0) & (q <= 0)):
        raise ValueError("undefined propensity: q = 0 where p_data > 0")
    ratio = np.where(p > 0, p / np.where(q > 0, q, 1.0), 0.0)
    z = ratio.sum()
    if z <= 0:
        raise ValueError("degenerate target: p_data row has no mass")
    return ratio / z


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class IpwFit:
    table: ProbTable  # analytic minimizer (= target r, row-wise)
    descent: ProbTable  # gradient-descent solution of the weighted objective
    kl_to_target: float  # max over rows of KL(r || descent)
    steps_used: int


def fit_tabular_ipw(p_data: ProbTable, q: ProbTable, lr: float = 2.0,
                    max_steps: int = 50000, tol: float = 1e-10) -> IpwFit:
    """Analytic and gradient-descent minimizers of the propensity-weighted
    cross-entropy on a free logit table. Both land on the ratio target."""
    if p_data.rows.shape != q.rows.shape:
        raise ValueError("incompatible table shapes")
    r = np.vstack([target_distribution_r(p_data.rows[x], q.rows[x])
                   for x in range(p_data.num_contexts)])

    # Weighted cross-entropy gradient per row: (sum_y w_y) * softmax - w,
    # with w_y = p_data(y)/q(y). Normalizing by sum w gives softmax - r.
    logits = np.zeros_like(r)
    steps = 0
    kl = np.inf
    for steps in range(1, max_steps + 1):
        p_theta = _softmax_rows(logits)
        logits -= lr * (p_theta - r)
        if steps % 50 == 0:
            p_theta = _softmax_rows(logits)
            kl = max(kl_divergence(r[x], p_theta[x])
                     for x in range(r.shape[0]))
            if kl <= tol:
                break
    p_theta = _softmax_rows(logits)
    kl = max(kl_divergence(r[x], p_theta[x]) for x in range(r.shape[0]))
    return IpwFit(table=ProbTable(r.copy()), descent=ProbTable(p_theta),
                  kl_to_target=kl, steps_used=steps)


@dataclass
class ContrastiveFit:
    table: ProbTable
    tv_to_target: np.ndarray  # per-context TV against the ratio target
    converged: bool
    steps_per_context: int
    tolerance: float


def fit_tabular_contrastive(p_data: ProbTable, q: ProbTable, L: int,
                            steps: int, lr_schedule: Tuple[float, float],
                            seed: int, tolerance: float = 0.02,
                            average_tail: float = 0.25) -> ContrastiveFit:
    """Stochastic minimization of the uncorrected contrastive objective on a
    free logit table, drawing a fresh positive from p_data and L negatives
    from q each step.

    `steps` counts updates per context row; rows are independent and run as
    parallel chains. The returned table is the softmax of the logits averaged
    over the final `average_tail` fraction of steps (each update preserves
    row sums, so the average is well-defined); set average_tail=0 for the raw
    final iterate, which carries the full stationary SGD noise. Non-convergence
    (TV above tolerance) is reported on the result rather than silently
    accepted.
    """
    if p_data.rows.shape != q.rows.shape:
        raise ValueError("incompatible table shapes")
    if L < 1:
        raise ValueError("need at least one negative")
    X, Y = p_data.rows.shape
    if Y > 32:
        raise ValueError("tabular oracle is for small item sets (<= 32)")
    r = np.vstack([target_distribution_r(p_data.rows[x], q.rows[x])
                   for x in range(X)])

    rng = np.random.default_rng(seed)
    lr0, lr1 = lr_schedule
    if lr0 <= 0 or lr1 <= 0:
        raise ValueError("learning rates must be positive")
    lrs = lr0 * (lr1 / lr0) ** (np.arange(steps) / max(steps - 1, 1))

    p_cum = np.cumsum(p_data.rows, axis=1)
    q_cum = np.cumsum(q.rows, axis=1)
    logits = np.zeros((X, Y))
    row_ix = np.arange(X)

    if not (0 <= average_tail < 1):
        raise ValueError("average_tail must lie in [0, 1)")
    tail_start = int(steps * (1.0 - average_tail))
    logit_sum = np.zeros_like(logits)
    n_avg = 0

    chunk = 4096
    done = 0
    while done < steps:
        n = min(chunk, steps - done)
        u_pos = rng.random((n, X, 1))
        u_neg = rng.random((n, X, L))
        # inverse-CDF sampling against per-row cumulative distributions
        pos = (u_pos > p_cum[None, :, :]).sum(axis=2)  # (n, X)
        neg = (u_neg[:, :, :, None] > q_cum[None, :, None, :]).sum(axis=3)
        for k in range(n):
            cand = np.concatenate([pos[k][:, None], neg[k]], axis=1)  # (X, L+1)
            z = logits[row_ix[:, None], cand]
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            g = e / e.sum(axis=1, keepdims=True)
            g[:, 0] -= 1.0
            np.subtract.at(logits, (row_ix.repeat(L + 1), cand.ravel()),
                           lrs[done + k] * g.ravel())
            if done + k >= tail_start:
                logit_sum += logits
                n_avg += 1
        done += n

    final = logit_sum / n_avg if n_avg else logits
    p_theta = _softmax_rows(final)
    tv = np.asarray([total_variation(p_theta[x], r[x]) for x in range(X)])
    return ContrastiveFit(table=ProbTable(p_theta), tv_to_target=tv,
                          converged=bool(np.all(tv <= tolerance)),
                          steps_per_context=steps, tolerance=tolerance)


def random_tabular_instance(num_contexts: int, num_items: int,
                            min_prob: float, rng: np.random.Generator,
                            ) -> Tuple[ProbTable, ProbTable]:
    """A random (p_data, q) pair whose entries are floored at min_prob to
    keep propensity ratios tame."""
    if min_prob * num_items >= 1.0:
        raise ValueError("min_prob too large for the item count")

    def draw() -> np.ndarray:
        raw = rng.dirichlet(np.ones(num_items), size=num_contexts)
        return min_prob + (1.0 - min_prob * num_items) * raw

    return ProbTable(draw()), ProbTable(draw())


def finite_difference_check(value_fn: Callable[[np.ndarray], float],
                            grad: np.ndarray, x: np.ndarray,
                            coords: Sequence[int], eps: float = 1e-5,
                            zero_tol: float = 1e-8) -> float:
    """Max relative error between `grad` and central differences of value_fn
    at x over the given flat coordinates.

    Coordinates where both the analytic and numeric derivatives are below
    zero_tol in magnitude count as zero error (degenerate denominator).
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("eps outside the sane central-difference range")
    x = np.asarray(x, dtype=np.float64)
    worst = 0.0
    for c in coords:
        xp = x.copy()
        xp[c] += eps
        xm = x.copy()
        xm[c] -= eps
        numeric = (value_fn(xp) - value_fn(xm)) / (2.0 * eps)
        analytic = float(grad[c])
        denom = max(abs(numeric), abs(analytic))
        if denom < zero_tol:
            continue
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
