"""Estimable expected-MSE criterion for sharp and fuzzy RD trees.

For a partition with per-leaf test counts ``n_j``, effects ``tau_j`` and
variance summands ``v_j``::

    EMSE = -(1/N_te) sum_j n_j tau_j^2 + (1/N_te + 1/N_est) sum_j v_j

The first term rewards discovered heterogeneity, the second penalises leaf
estimation variance. Lower is better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .errors import ArgumentError, EmptyLeafError
from .leaf_fit import HOMOSCEDASTIC, SideFit, leaf_estimate


@dataclass(frozen=True)
class LeafCriterionStats:
    n_test_rows: int
    tau: float
    v: float
    tau_y: Optional[float] = None
    tau_t: Optional[float] = None


@dataclass(frozen=True)
class CriterionValue:
    emse: float
    term_sq: float
    term_var: float
    n_test: int
    n_est: int


def leaf_stats(
    fit_plus: SideFit,
    fit_minus: SideFit,
    n_est_plus: int,
    n_est_minus: int,
    takeup=None,
    variance: str = HOMOSCEDASTIC,
) -> LeafCriterionStats:
    """Criterion inputs for one leaf: fits from the test sample, shares from the estimation sample."""
    n_est = n_est_plus + n_est_minus
    if n_est_plus <= 0 or n_est_minus <= 0:
        raise EmptyLeafError("leaf has no estimation-sample rows on one side of the cutoff")
    est = leaf_estimate(
        fit_plus,
        fit_minus,
        (n_est_plus / n_est, n_est_minus / n_est),
        variance,
        takeup=takeup,
    )
    return LeafCriterionStats(fit_plus.n + fit_minus.n, est.tau, est.var_tau, est.tau_y, est.tau_t)


def _emse(stats: Iterable[LeafCriterionStats], n_test: int, n_est: int) -> CriterionValue:
    stats = list(stats)
    if not stats:
        raise ArgumentError("criterion needs at least one leaf")
    if n_test <= 0 or n_est <= 0:
        raise ArgumentError("sample sizes must be positive")
    counts = np.array([s.n_test_rows for s in stats], dtype=float)
    if np.any(counts <= 0):
        raise EmptyLeafError("a leaf holds no test rows; criterion undefined")
    if counts.sum() != n_test:
        raise ArgumentError(f"leaf test counts sum to {counts.sum():.0f}, expected {n_test}")
    taus = np.array([s.tau for s in stats], dtype=float)
    vs = np.array([s.v for s in stats], dtype=float)
    if not (np.all(np.isfinite(vs)) and np.all(np.isfinite(taus))):
        raise ArgumentError("non-finite leaf statistics")
    term_sq = -math.fsum(counts * taus**2) / n_test
    term_var = (1.0 / n_test + 1.0 / n_est) * math.fsum(vs)
    emse = term_sq + term_var
    # re-round the penalty so that emse - term_sq - term_var is exactly zero as well
    for _ in range(4):
        term_var = emse - term_sq
        if term_sq + term_var == emse:
            break
        emse = term_sq + term_var
    return CriterionValue(emse, term_sq, term_var, int(n_test), int(n_est))


def emse_sharp(stats, n_test: int, n_est: int) -> CriterionValue:
    return _emse(stats, n_test, n_est)


def emse_fuzzy(stats, n_test: int, n_est: int) -> CriterionValue:
    """Fuzzy-design criterion; each leaf's ``tau`` is the ratio of jumps and ``v`` its delta-method summand."""
    stats = list(stats)
    for s in stats:
        if s.tau_t is not None and s.tau_y is not None:
            if not math.isclose(s.tau, s.tau_y / s.tau_t, rel_tol=1e-12, abs_tol=1e-15):
                raise ArgumentError("fuzzy leaf tau must equal tau_y / tau_t")
    return _emse(stats, n_test, n_est)


def leaf_risk(n_rows: int, tau: float, v: float, n_test: int, n_est: int) -> float:
    """One leaf's additive share of the criterion."""
    return -(n_rows / n_test) * tau * tau + (1.0 / n_test + 1.0 / n_est) * v
