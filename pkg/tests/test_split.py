import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdtree import Dataset
from rdtree._split import GrowContext, feature_candidates, find_best_split
from rdtree.criterion import leaf_risk, leaf_stats
from rdtree.leaf_fit import ABOVE, BELOW, PolySpec, fit_side


def _data(n=400, k=3, seed=0, fuzzy=False, effect=True):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    z = np.column_stack([rng.integers(0, 2, n), rng.normal(size=(n, k - 1))]).astype(float)
    t = None
    d = x >= 0
    if fuzzy:
        t = (d & (rng.uniform(size=n) < 0.8)).astype(float)
        d = t
    tau = (2 * z[:, 0] - 1) if effect else 0.0
    y = x + d * tau + rng.normal(size=n)
    return Dataset(y=y, x=x, z=z, cutoff=0.0, design="fuzzy" if fuzzy else "sharp", t=t)


def _ctx(d, tr, est, q=1, m=20, sweep="prefix", bucket=5):
    return GrowContext(d, q, tr.shape[0], est.shape[0], m, bucket, sweep)


def _halves(n):
    idx = np.arange(n)
    return idx[::2], idx[1::2]


def _direct_risk(d, rows_tr, rows_est, q, n_test, n_est):
    spec = PolySpec(q)
    up, dn = rows_tr[d.above[rows_tr]], rows_tr[~d.above[rows_tr]]
    fp = fit_side(d.x[up], d.y[up], spec, ABOVE)
    fm = fit_side(d.x[dn], d.y[dn], spec, BELOW)
    take = None
    if d.design == "fuzzy":
        take = (fit_side(d.x[up], d.t[up], spec, ABOVE), fit_side(d.x[dn], d.t[dn], spec, BELOW))
    e_up = int(d.above[rows_est].sum())
    s = leaf_stats(fp, fm, e_up, rows_est.shape[0] - e_up, take)
    return leaf_risk(s.n_test_rows, s.tau, s.v, n_test, n_est)


@pytest.mark.parametrize("fuzzy", [False, True])
@pytest.mark.parametrize("q", [0, 1, 2])
def test_candidate_risk_matches_direct_fits(q, fuzzy):
    d = _data(seed=q, fuzzy=fuzzy)
    tr, est = _halves(d.n)
    ctx = _ctx(d, tr, est, q=q)
    thresholds, risks, valid, _ = feature_candidates(ctx, tr, est, 1)
    checked = 0
    for j in np.flatnonzero(valid)[::15]:
        thr = thresholds[j]
        left_tr, left_est = tr[d.z[tr, 1] <= thr], est[d.z[est, 1] <= thr]
        right_tr, right_est = tr[d.z[tr, 1] > thr], est[d.z[est, 1] > thr]
        direct = _direct_risk(d, left_tr, left_est, q, tr.size, est.size) + _direct_risk(
            d, right_tr, right_est, q, tr.size, est.size
        )
        assert risks[j] == pytest.approx(direct, rel=1e-8, abs=1e-10)
        checked += 1
    assert checked > 3


@given(seed=st.integers(0, 500), q=st.integers(0, 2), fuzzy=st.booleans())
@settings(max_examples=15, deadline=None)
def test_prefix_and_sherman_morrison_sweeps_agree(seed, q, fuzzy):
    d = _data(n=300, seed=seed, fuzzy=fuzzy)
    tr, est = _halves(d.n)
    a = feature_candidates(_ctx(d, tr, est, q, sweep="prefix"), tr, est, 1)
    b = feature_candidates(_ctx(d, tr, est, q, sweep="sherman_morrison"), tr, est, 1)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[2], b[2])
    ok = a[2]
    if ok.any():
        # compare on the risk scale; single risks can sit near zero
        scale = np.max(np.abs(a[1][ok]))
        assert np.max(np.abs(a[1][ok] - b[1][ok])) <= 1e-9 * scale


def test_finds_relevant_binary():
    d = _data(n=1000, seed=3)
    tr, est = _halves(d.n)
    ctx = _ctx(d, tr, est, m=50)
    risk, _, _, _ = ctx.node_risk(tr, est)
    best = find_best_split(ctx, tr, est, risk)
    assert best.feature == 0 and best.threshold == 0.5 and best.gain > 0


def test_constant_feature_has_no_candidates():
    d = _data(seed=1)
    z = d.z.copy()
    z[:, 1] = 2.5
    d = Dataset(y=d.y, x=d.x, z=z, cutoff=0.0)
    tr, est = _halves(d.n)
    res = feature_candidates(_ctx(d, tr, est), tr, est, 1)
    assert res is None or not res[2].any()


def _min_side_data(treated_left):
    # binary z splits the treated training rows into treated_left / 100 - treated_left
    rng = np.random.default_rng(0)
    n_half = 100
    x_tr = np.r_[rng.uniform(0, 1, n_half), rng.uniform(-1, -0.01, n_half)]
    z_tr = np.r_[np.arange(n_half) < treated_left, np.arange(n_half) < 50].astype(float)
    x = np.r_[x_tr, x_tr]
    z = np.r_[z_tr, np.r_[np.arange(n_half) < 50, np.arange(n_half) < 50].astype(float)]
    y = x + (x >= 0) * (2 * z - 1) + rng.normal(size=x.size)
    d = Dataset(y=y, x=x, z=z[:, None], cutoff=0.0)
    return d, np.arange(2 * n_half), np.arange(2 * n_half, 4 * n_half)


def test_forty_nine_treated_rows_invalid():
    d, tr, est = _min_side_data(49)
    res = feature_candidates(_ctx(d, tr, est, m=50), tr, est, 0)
    assert res is None or not res[2].any()
    d, tr, est = _min_side_data(50)
    res = feature_candidates(_ctx(d, tr, est, m=50), tr, est, 0)
    assert res[2].any()


def test_tie_goes_to_lower_feature_index():
    d = _data(n=600, k=2, seed=4)
    z = np.column_stack([d.z[:, 0], d.z[:, 0]])
    d = Dataset(y=d.y, x=d.x, z=z, cutoff=0.0)
    tr, est = _halves(d.n)
    ctx = _ctx(d, tr, est, m=30)
    risk, _, _, _ = ctx.node_risk(tr, est)
    assert find_best_split(ctx, tr, est, risk).feature == 0


def test_min_gain_blocks_split():
    d = _data(n=1000, seed=3)
    tr, est = _halves(d.n)
    ctx = _ctx(d, tr, est, m=50)
    risk, _, _, _ = ctx.node_risk(tr, est)
    assert find_best_split(ctx, tr, est, risk, min_gain=np.inf) is None
