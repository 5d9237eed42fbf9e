"""Split search for RD trees.

For every feature the training rows of a node are sorted and swept once. The
four child-side fits (left/right x above/below) at every candidate threshold
come from prefix and suffix sums of per-row moment contributions, solved in a
single batched call. A row-by-row Sherman-Morrison sweep computing the same
quantities is kept as ``sweep="sherman_morrison"``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .leaf_fit import FIRST_STAGE_TOL, IncrementalFit, batched_inverse, design_matrix, PolySpec

PLUS, MINUS = 0, 1


class GrowContext:
    """Dataset-level arrays shared by every node of one growth run."""

    def __init__(self, dataset, q: int, n_test: int, n_est: int, min_side_obs: int, bucket_size: int,
                 sweep: str = "prefix"):
        self.dataset = dataset
        self.q = q
        self.P = q + 1
        self.spec = PolySpec(q, dataset.cutoff)
        self.X = design_matrix(dataset.x, self.spec)
        self.W = (self.X[:, :, None] * self.X[:, None, :]).reshape(dataset.n, -1)
        self.side = np.where(dataset.above, PLUS, MINUS)
        self.fuzzy = dataset.design == "fuzzy"
        self.n_test = n_test
        self.n_est = n_est
        self.min_side_obs = max(min_side_obs, q + 2)
        self.bucket_size = bucket_size
        self.sweep = sweep

    # ------------------------------------------------------------------ stats
    def row_stats(self, idx: np.ndarray) -> np.ndarray:
        """Per-row contributions ``[1, XX', X y, y^2 (, X t, t^2, y t)]`` with y, t centred on the node."""
        y = self.dataset.y[idx]
        y = y - y.mean()
        X = self.X[idx]
        cols = [np.ones((idx.shape[0], 1)), self.W[idx], X * y[:, None], (y * y)[:, None]]
        if self.fuzzy:
            t = self.dataset.t[idx]
            t = t - t.mean()
            cols += [X * t[:, None], (t * t)[:, None], (y * t)[:, None]]
        return np.concatenate(cols, axis=1)

    def unpack(self, agg: np.ndarray) -> dict:
        P = self.P
        out = {
            "n": agg[..., 0],
            "S": agg[..., 1:1 + P * P].reshape(agg.shape[:-1] + (P, P)),
            "b": agg[..., 1 + P * P:1 + P * P + P],
            "yy": agg[..., 1 + P * P + P],
        }
        if self.fuzzy:
            o = 2 + P * P + P
            out["bt"] = agg[..., o:o + P]
            out["tt"] = agg[..., o + P]
            out["yt"] = agg[..., o + P + 1]
        return out

    def solve(self, agg: np.ndarray) -> dict:
        """Batched least-squares solutions for aggregated moments with trailing stat axis."""
        u = self.unpack(agg)
        n = u["n"]
        enough = n >= self.P + 1
        S_inv, ok = batched_inverse(np.where(enough[..., None, None], u["S"], np.eye(self.P)))
        ok &= enough
        S_inv = np.where(ok[..., None, None], S_inv, 0.0)
        dy = np.einsum("...ij,...j->...i", S_inv, u["b"])
        sol = {
            "n": n,
            "ok": ok,
            "sinv00": S_inv[..., 0, 0],
            "a_y": dy[..., 0],
            "rss_y": np.maximum(u["yy"] - np.einsum("...i,...i->...", dy, u["b"]), 0.0),
        }
        if self.fuzzy:
            dt = np.einsum("...ij,...j->...i", S_inv, u["bt"])
            sol["a_t"] = dt[..., 0]
            sol["rss_t"] = np.maximum(u["tt"] - np.einsum("...i,...i->...", dt, u["bt"]), 0.0)
            sol["c_yt"] = u["yt"] - np.einsum("...i,...i->...", dy, u["bt"])
        return sol

    def risk(self, sol: dict, e_plus, e_minus):
        """Leaf risk from solved fits with side axis last-but-none: arrays indexed ``[..., side]``."""
        P = self.P
        n = sol["n"]
        ok = np.all(sol["ok"], axis=-1)
        dof = np.where(n > P, n - P, 1.0)
        e_tot = e_plus + e_minus
        with np.errstate(divide="ignore", invalid="ignore"):
            shares = np.stack([e_plus / e_tot, e_minus / e_tot], axis=-1)
            tau_y = sol["a_y"][..., PLUS] - sol["a_y"][..., MINUS]
            s2 = sol["rss_y"] / dof
            if self.fuzzy:
                tau_t = sol["a_t"][..., PLUS] - sol["a_t"][..., MINUS]
                ok &= tau_t > FIRST_STAGE_TOL
                tau_t = np.where(ok, tau_t, 1.0)
                tau = tau_y / tau_t
                s2t = sol["rss_t"] / dof
                cyt = sol["c_yt"] / dof
                s2 = (s2 + (tau**2)[..., None] * s2t - 2 * tau[..., None] * cyt) / (tau_t**2)[..., None]
            else:
                tau = tau_y
            V00 = s2 * n * sol["sinv00"]
            v = np.sum(V00 / shares, axis=-1)
            n_rows = n[..., PLUS] + n[..., MINUS]
            risk = -(n_rows / self.n_test) * tau**2 + (1.0 / self.n_test + 1.0 / self.n_est) * v
        ok &= np.isfinite(risk)
        return np.where(ok, risk, np.inf), ok, tau, v

    # ------------------------------------------------------------------ nodes
    def side_counts(self, idx):
        above = self.side[idx] == PLUS
        return int(above.sum()), int((~above).sum())

    def node_risk(self, idx_tr: np.ndarray, idx_est: np.ndarray):
        """Risk of a node treated as a leaf; ``inf`` if it cannot be fitted."""
        A = self.row_stats(idx_tr)
        agg = np.zeros((2, A.shape[1]))
        np.add.at(agg, self.side[idx_tr], A)
        e_plus, e_minus = self.side_counts(idx_est)
        sol = self.solve(agg)
        risk, ok, tau, v = self.risk(sol, np.float64(e_plus), np.float64(e_minus))
        return float(risk), bool(ok), float(tau), float(v)

    def node_valid(self, idx_tr, idx_est) -> bool:
        m = self.min_side_obs
        return min(self.side_counts(idx_tr)) >= m and min(self.side_counts(idx_est)) >= m


@dataclass(frozen=True)
class SplitCandidate:
    feature: int
    threshold: float
    risk: float
    gain: float


def _buckets(group_plus: np.ndarray, group_minus: np.ndarray, size: int) -> np.ndarray:
    """Bucket id per sorted value group; a bucket closes once it holds ``size`` treated and untreated rows."""
    out = np.empty(group_plus.shape[0], dtype=np.int64)
    b = acc_p = acc_m = 0
    for g in range(group_plus.shape[0]):
        out[g] = b
        acc_p += group_plus[g]
        acc_m += group_minus[g]
        if acc_p >= size and acc_m >= size:
            b += 1
            acc_p = acc_m = 0
    return out


def _prefix_children(ctx: GrowContext, A, side, order, starts):
    F = A.shape[1]
    A2 = np.zeros((A.shape[0], 2, F))
    A2[np.arange(A.shape[0]), side] = A
    G = np.add.reduceat(A2[order], starts, axis=0)
    left = np.cumsum(G, axis=0)[:-1]
    right = np.cumsum(G[::-1], axis=0)[::-1][1:]
    return G, ctx.solve(left), ctx.solve(right)


def _sm_children(ctx: GrowContext, idx_tr, side, order, starts):
    """Same solutions as :func:`_prefix_children`, via row-by-row rank-one updates."""
    P = ctx.P
    y = ctx.dataset.y[idx_tr]
    y = y - y.mean()
    X = ctx.X[idx_tr]
    m = starts.shape[0]
    keys = ["n", "ok", "sinv00", "a_y", "rss_y"]
    if ctx.fuzzy:
        t = ctx.dataset.t[idx_tr]
        t = t - t.mean()
        keys += ["a_t", "rss_t", "c_yt"]
    left = {k: np.zeros((m - 1, 2)) for k in keys}
    right = {k: np.zeros((m - 1, 2)) for k in keys}
    left["ok"] = left["ok"].astype(bool)
    right["ok"] = right["ok"].astype(bool)

    def fresh():
        return [IncrementalFit(P), IncrementalFit(P)]

    def record(fits_y, fits_t, fits_yt, out, c):
        for s in (PLUS, MINUS):
            fy = fits_y[s]
            out["n"][c, s] = fy.n
            good = fy.S_inv is not None and fy.n >= P + 1
            out["ok"][c, s] = good
            if not good:
                continue
            out["sinv00"][c, s] = fy.S_inv[0, 0]
            out["a_y"][c, s] = fy.delta[0]
            out["rss_y"][c, s] = fy.rss
            if ctx.fuzzy:
                ft = fits_t[s]
                dt = fy.S_inv @ ft.xty
                out["a_t"][c, s] = dt[0]
                out["rss_t"][c, s] = max(ft.yy - float(dt @ ft.xty), 0.0)
                out["c_yt"][c, s] = fits_yt[s] - float(fy.delta @ ft.xty)

    ly, lt, ry, rt = fresh(), fresh(), fresh(), fresh()
    lyt = [0.0, 0.0]
    ryt = [0.0, 0.0]
    for i in order:
        s = side[i]
        ry[s].add(X[i], y[i])
        if ctx.fuzzy:
            rt[s].add(X[i], t[i])
            ryt[s] += y[i] * t[i]
    bounds = list(starts[1:]) + [order.shape[0]]
    pos = 0
    for c in range(m - 1):
        while pos < bounds[c]:
            i = order[pos]
            s = side[i]
            ly[s].add(X[i], y[i])
            ry[s].remove(X[i], y[i])
            if ctx.fuzzy:
                lt[s].add(X[i], t[i])
                rt[s].remove(X[i], t[i])
                lyt[s] += y[i] * t[i]
                ryt[s] -= y[i] * t[i]
            pos += 1
        record(ly, lt, lyt, left, c)
        record(ry, rt, ryt, right, c)
    return left, right


def feature_candidates(ctx: GrowContext, idx_tr, idx_est, k: int, A=None):
    """Evaluate every threshold on feature ``k``; returns ``(thresholds, risks, valid, buckets)`` or None."""
    z_tr = ctx.dataset.z[idx_tr, k]
    order = np.argsort(z_tr, kind="stable")
    zs = z_tr[order]
    starts = np.flatnonzero(np.r_[True, zs[1:] != zs[:-1]])
    if starts.shape[0] < 2:
        return None
    values = zs[starts]
    thresholds = 0.5 * (values[:-1] + values[1:])
    side = ctx.side[idx_tr]
    if ctx.sweep == "sherman_morrison":
        left, right = _sm_children(ctx, idx_tr, side, order, starts)
        counts_p = np.add.reduceat((side[order] == PLUS).astype(float), starts)
        counts_m = np.add.reduceat((side[order] == MINUS).astype(float), starts)
    else:
        if A is None:
            A = ctx.row_stats(idx_tr)
        G, left, right = _prefix_children(ctx, A, side, order, starts)
        counts_p, counts_m = G[:, PLUS, 0], G[:, MINUS, 0]

    z_est = ctx.dataset.z[idx_est, k]
    est_side = ctx.side[idx_est]
    zp = np.sort(z_est[est_side == PLUS])
    zm = np.sort(z_est[est_side == MINUS])
    eL_p = np.searchsorted(zp, thresholds, side="right").astype(float)
    eL_m = np.searchsorted(zm, thresholds, side="right").astype(float)
    eR_p = zp.shape[0] - eL_p
    eR_m = zm.shape[0] - eL_m

    risk_L, ok_L, _, _ = ctx.risk(left, eL_p, eL_m)
    risk_R, ok_R, _, _ = ctx.risk(right, eR_p, eR_m)
    m = ctx.min_side_obs
    valid = (
        ok_L & ok_R
        & (left["n"][:, PLUS] >= m) & (left["n"][:, MINUS] >= m)
        & (right["n"][:, PLUS] >= m) & (right["n"][:, MINUS] >= m)
        & (eL_p >= m) & (eL_m >= m) & (eR_p >= m) & (eR_m >= m)
    )
    risks = np.where(valid, risk_L + risk_R, np.inf)
    buckets = _buckets(counts_p, counts_m, ctx.bucket_size)[:-1]
    return thresholds, risks, valid, buckets


def best_feature_split(ctx: GrowContext, idx_tr, idx_est, k: int, A=None) -> Optional[tuple]:
    """Bucketed best split on one feature as ``(threshold, risk)``."""
    res = feature_candidates(ctx, idx_tr, idx_est, k, A)
    if res is None:
        return None
    thresholds, risks, valid, buckets = res
    if not valid.any():
        return None
    best = int(np.argmin(risks))
    in_bucket = np.flatnonzero(valid & (buckets == buckets[best]))
    pick = int(in_bucket[-1])
    return float(thresholds[pick]), float(risks[pick])


def find_best_split(ctx: GrowContext, idx_tr, idx_est, parent_risk: float, min_gain: float = 0.0):
    """Best admissible split of a node, or None.

    Ties on the criterion go to the lower feature index, then the lower threshold.
    """
    if not ctx.node_valid(idx_tr, idx_est):
        return None
    A = ctx.row_stats(idx_tr) if ctx.sweep != "sherman_morrison" else None
    best = None
    for k in range(ctx.dataset.k):
        res = best_feature_split(ctx, idx_tr, idx_est, k, A)
        if res is None:
            continue
        thr, risk = res
        if best is None or risk < best.risk:
            best = SplitCandidate(k, thr, risk, parent_risk - risk)
    if best is None or not np.isfinite(best.risk) or not best.gain > min_gain:
        return None
    return best
