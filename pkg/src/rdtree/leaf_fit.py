"""Per-leaf, per-side polynomial least squares and leaf-level treatment effects.

Each side of the cutoff within a leaf is fitted separately on the centred
polynomial basis ``[1, (x - c), ..., (x - c)^q]``; the treatment effect is the
jump in intercepts. Variances are returned in the "unit" scaling
``M^{-1} Sigma M^{-1}`` (``M = S / n``), so the variance of a side's
coefficients in a sample with ``m`` rows on that side is ``V / m``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    ArgumentError,
    ClusterCountError,
    DegenerateFirstStageError,
    InsufficientDataError,
    SingularDesignError,
    SingularUpdateError,
)

ABOVE = "above"
BELOW = "below"

HOMOSCEDASTIC = "homoscedastic"
HCE0 = "hce0"
HCE1 = "hce1"
CLUSTERED = "clustered_hc1"
VARIANCE_KINDS = (HOMOSCEDASTIC, HCE0, HCE1, CLUSTERED)

RCOND_MIN = 1e-12
SM_TOL = 1e-12
FIRST_STAGE_TOL = 1e-10


@dataclass(frozen=True)
class PolySpec:
    order: int
    cutoff: float = 0.0

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 0:
            raise ArgumentError(f"polynomial order must be a non-negative integer, got {self.order}")

    @property
    def size(self) -> int:
        return self.order + 1


def design_row(x: float, spec: PolySpec) -> np.ndarray:
    return (float(x) - spec.cutoff) ** np.arange(spec.size)


def design_matrix(x, spec: PolySpec) -> np.ndarray:
    d = np.asarray(x, dtype=float)[:, None] - spec.cutoff
    return d ** np.arange(spec.size)[None, :]


def batched_inverse(S: np.ndarray):
    """Invert a stack of symmetric matrices after diagonal equilibration.

    Returns ``(S_inv, ok)``; ``ok`` is False where the equilibrated matrix has a
    reciprocal 2-norm condition number below ``RCOND_MIN`` (those inverses are
    left as NaN).
    """
    S = np.asarray(S, dtype=float)
    diag = np.diagonal(S, axis1=-2, axis2=-1)
    ok = np.all(diag > 0, axis=-1)
    d = np.sqrt(np.where(diag > 0, diag, 1.0))
    scale = d[..., :, None] * d[..., None, :]
    Sn = S / scale
    eig = np.linalg.eigvalsh(Sn)
    lo, hi = eig[..., 0], eig[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok &= (hi > 0) & (lo / hi >= RCOND_MIN)
    safe = np.where(ok[..., None, None], Sn, np.eye(S.shape[-1]))
    inv = np.linalg.inv(safe) / scale
    inv = np.where(ok[..., None, None], inv, np.nan)
    return inv, ok


def checked_inverse(S: np.ndarray) -> np.ndarray:
    inv, ok = batched_inverse(S)
    if not ok:
        raise SingularDesignError("moment matrix is numerically singular")
    return 0.5 * (inv + inv.T)


@dataclass(frozen=True, eq=False)
class SideFit:
    """Least-squares fit on one side of the cutoff.

    ``S`` is the unnormalised cross-product ``sum X X'``; ``sigma2`` uses the
    divisor ``n - q - 1``.
    """

    side: str
    delta: np.ndarray
    S: np.ndarray
    S_inv: np.ndarray
    xty: np.ndarray
    n: int
    sigma2: float
    rss: float
    X: np.ndarray
    residuals: np.ndarray

    @property
    def q(self) -> int:
        return self.delta.shape[0] - 1

    @property
    def intercept(self) -> float:
        return float(self.delta[0])

    @property
    def M_inv(self) -> np.ndarray:
        return self.n * self.S_inv

    @property
    def dof(self) -> int:
        return self.n - self.q - 1


def fit_side(x, values, spec: PolySpec, side: str) -> SideFit:
    """Regress ``values`` on the centred polynomial in ``x`` for one side of the cutoff."""
    if side not in (ABOVE, BELOW):
        raise ArgumentError(f"side must be {ABOVE!r} or {BELOW!r}")
    x = np.asarray(x, dtype=float)
    v = np.asarray(values, dtype=float)
    if x.shape != v.shape:
        raise ArgumentError("x and values must have the same length")
    if side == ABOVE and np.any(x < spec.cutoff):
        raise ArgumentError("rows below the cutoff passed to an above-cutoff fit")
    if side == BELOW and np.any(x >= spec.cutoff):
        raise ArgumentError("rows at or above the cutoff passed to a below-cutoff fit")
    n = x.shape[0]
    if n < spec.order + 2:
        raise InsufficientDataError(f"{n} rows on the {side} side; need at least {spec.order + 2}")
    X = design_matrix(x, spec)
    S = X.T @ X
    S_inv = checked_inverse(S)
    xty = X.T @ v
    delta = S_inv @ xty
    resid = v - X @ delta
    rss = float(resid @ resid)
    return SideFit(
        side=side,
        delta=delta,
        S=S,
        S_inv=S_inv,
        xty=xty,
        n=n,
        sigma2=rss / (n - spec.order - 1),
        rss=rss,
        X=X,
        residuals=resid,
    )


def sm_update(S_inv: np.ndarray, row, direction: str = "add") -> np.ndarray:
    """Rank-one update of ``S_inv`` for ``S + row row'`` (add) or ``S - row row'`` (remove)."""
    r = np.asarray(row, dtype=float)
    u = S_inv @ r
    h = float(r @ u)
    if direction == "add":
        denom = 1.0 + h
        sign = -1.0
    elif direction == "remove":
        denom = 1.0 - h
        sign = 1.0
    else:
        raise ArgumentError(f"direction must be 'add' or 'remove', got {direction!r}")
    if abs(denom) < SM_TOL:
        raise SingularUpdateError(f"rank-one update denominator {denom:.3e} is numerically zero")
    return S_inv + sign * np.outer(u, u) / denom


class IncrementalFit:
    """Mutable per-side least-squares accumulator.

    Rows are added and removed one at a time. The inverse is kept current with
    :func:`sm_update` once the cross-product becomes invertible, falling back to
    a direct inversion whenever an update is numerically singular or the
    tracked error amplification ``drift`` exceeds ``DRIFT_LIMIT``. ``drift``
    starts at the Frobenius condition number after a direct inversion and is
    multiplied by ``1/|1 - r'S^-1 r|`` on removals and by the shrinkage of
    ``||S^-1||`` on any update, since absolute errors carried from an
    ill-conditioned state become relatively larger once the inverse shrinks.
    """

    DRIFT_LIMIT = 1e5

    def __init__(self, size: int):
        self.size = size
        self.S = np.zeros((size, size))
        self.xty = np.zeros(size)
        self.yy = 0.0
        self.n = 0
        self.S_inv: Optional[np.ndarray] = None
        self.refactorizations = 0
        self.drift = 1.0

    def _refresh(self):
        self.drift = 1.0
        if self.n < self.size:
            self.S_inv = None
            return
        inv, ok = batched_inverse(self.S)
        self.S_inv = 0.5 * (inv + inv.T) if ok else None
        if ok:
            self.drift = float(np.linalg.norm(self.S) * np.linalg.norm(self.S_inv))
        self.refactorizations += 1

    def _update(self, row, y, direction):
        sign = 1.0 if direction == "add" else -1.0
        self.S += sign * np.outer(row, row)
        self.xty += sign * row * y
        self.yy += sign * y * y
        self.n += int(sign)
        if self.S_inv is None or self.n < self.size:
            self._refresh()
            return
        drift = self.drift
        if direction == "remove":
            drift /= max(abs(1.0 - float(row @ self.S_inv @ row)), 1e-300)
        try:
            new = sm_update(self.S_inv, row, direction)
        except SingularUpdateError:
            self._refresh()
            return
        norm_old, norm_new = np.linalg.norm(self.S_inv), np.linalg.norm(new)
        drift *= max(1.0, norm_old / norm_new)
        drift = max(drift, float(np.linalg.norm(self.S) * norm_new))
        if drift > self.DRIFT_LIMIT:
            self._refresh()
            return
        self.S_inv = new
        self.drift = drift

    def add(self, row, y: float = 0.0):
        self._update(np.asarray(row, dtype=float), float(y), "add")

    def remove(self, row, y: float = 0.0):
        self._update(np.asarray(row, dtype=float), float(y), "remove")

    @property
    def delta(self) -> Optional[np.ndarray]:
        return None if self.S_inv is None else self.S_inv @ self.xty

    @property
    def rss(self) -> Optional[float]:
        d = self.delta
        return None if d is None else max(self.yy - float(d @ self.xty), 0.0)


def variance_matrix(fit: SideFit, residuals, kind: str = HOMOSCEDASTIC, clusters=None) -> np.ndarray:
    """Sandwich ``M^{-1} Sigma M^{-1}`` for one side's coefficients.

    ``homoscedastic`` gives ``sigma^2 M^{-1}`` with ``sigma^2`` from ``residuals``;
    ``hce0``/``hce1`` use meat divisors ``n`` and ``n - q - 1``; ``clustered_hc1``
    sums scores within clusters and applies ``(n-1)/(n-q-1)^2 * G/(G-1)``.
    """
    r = np.asarray(residuals, dtype=float)
    n, dof = fit.n, fit.dof
    X, S_inv = fit.X, fit.S_inv
    if kind == HOMOSCEDASTIC:
        return float(r @ r) / dof * n * S_inv
    if kind in (HCE0, HCE1):
        Xr = X * r[:, None]
        meat = Xr.T @ Xr
        sigma = meat / (n if kind == HCE0 else dof)
    elif kind == CLUSTERED:
        if clusters is None:
            raise ArgumentError("clustered variance requires cluster ids")
        clusters = np.asarray(clusters)
        ids, inv = np.unique(clusters, return_inverse=True)
        G = ids.shape[0]
        if G < 2:
            raise ClusterCountError(f"clustered variance needs at least 2 clusters, got {G}")
        scores = np.zeros((G, X.shape[1]))
        np.add.at(scores, inv, X * r[:, None])
        sigma = (n - 1) / dof**2 * G / (G - 1) * (scores.T @ scores)
    else:
        raise ArgumentError(f"unknown variance kind {kind!r}")
    M_inv = n * S_inv
    return M_inv @ sigma @ M_inv


@dataclass(frozen=True)
class LeafEstimate:
    tau: float
    var_tau: float
    n_plus: int
    n_minus: int
    p_plus: float
    p_minus: float
    tau_y: Optional[float] = None
    tau_t: Optional[float] = None
    sigma2_t_plus: Optional[float] = None
    sigma2_t_minus: Optional[float] = None
    cov_yt_plus: Optional[float] = None
    cov_yt_minus: Optional[float] = None

    @property
    def se(self) -> float:
        return float(np.sqrt(self.var_tau))


def leaf_estimate(
    fit_plus: SideFit,
    fit_minus: SideFit,
    est_shares,
    variance: str = HOMOSCEDASTIC,
    *,
    scale: float = 1.0,
    takeup=None,
    clusters=None,
) -> LeafEstimate:
    """Leaf treatment effect and its variance.

    ``var_tau = e1'[V+/p+ + V-/p-]e1 / scale``. With ``scale=1`` this is the
    per-leaf summand of the EMSE penalty; with ``scale`` equal to the leaf's
    estimation-sample size it is the sampling variance of ``tau``.

    ``takeup`` is a ``(fit_plus, fit_minus)`` pair of first-stage fits sharing
    rows with the outcome fits; the effect becomes the ratio of jumps and its
    variance follows the delta method.
    """
    p_plus, p_minus = (float(v) for v in est_shares)
    if not (0 < p_plus < 1 and 0 < p_minus < 1) or abs(p_plus + p_minus - 1) > 1e-12:
        raise ArgumentError(f"shares must lie in (0, 1) and sum to 1, got {(p_plus, p_minus)}")
    if fit_plus.q != fit_minus.q:
        raise ArgumentError("both sides must use the same polynomial order")
    cl_plus, cl_minus = clusters if clusters is not None else (None, None)
    tau_y = fit_plus.intercept - fit_minus.intercept
    if takeup is None:
        V_plus = variance_matrix(fit_plus, fit_plus.residuals, variance, cl_plus)
        V_minus = variance_matrix(fit_minus, fit_minus.residuals, variance, cl_minus)
        var = (V_plus[0, 0] / p_plus + V_minus[0, 0] / p_minus) / scale
        return LeafEstimate(tau_y, float(var), fit_plus.n, fit_minus.n, p_plus, p_minus)

    t_plus, t_minus = takeup
    if t_plus.n != fit_plus.n or t_minus.n != fit_minus.n:
        raise ArgumentError("take-up fits must use the same rows as the outcome fits")
    tau_t = t_plus.intercept - t_minus.intercept
    if abs(tau_t) < FIRST_STAGE_TOL:
        raise DegenerateFirstStageError(f"first-stage jump {tau_t:.3e} is numerically zero")
    tau = tau_y / tau_t
    # delta method: Var(ty/tt) per row reduces to a residual (ey - tau*et)/tt
    psi_plus = (fit_plus.residuals - tau * t_plus.residuals) / tau_t
    psi_minus = (fit_minus.residuals - tau * t_minus.residuals) / tau_t
    V_plus = variance_matrix(fit_plus, psi_plus, variance, cl_plus)
    V_minus = variance_matrix(fit_minus, psi_minus, variance, cl_minus)
    var = (V_plus[0, 0] / p_plus + V_minus[0, 0] / p_minus) / scale
    return LeafEstimate(
        tau=float(tau),
        var_tau=float(var),
        n_plus=fit_plus.n,
        n_minus=fit_minus.n,
        p_plus=p_plus,
        p_minus=p_minus,
        tau_y=float(tau_y),
        tau_t=float(tau_t),
        sigma2_t_plus=t_plus.sigma2,
        sigma2_t_minus=t_minus.sigma2,
        cov_yt_plus=float(fit_plus.residuals @ t_plus.residuals) / fit_plus.dof,
        cov_yt_minus=float(fit_minus.residuals @ t_minus.residuals) / fit_minus.dof,
    )
